"""Dense numeric kernel: matmul, softmax, top-k and a symmetric eigensolver."""

import logging
from typing import List

import numpy as np
import torch

from core.errors import ArgumentError, ShapeError

logger = logging.getLogger(__name__)

JACOBI_TOLERANCE = 1e-9
JACOBI_MAX_SWEEPS = 100
SYMMETRY_TOLERANCE = 1e-6


def matmul(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Matrix product of an m×k and a k×n tensor."""
    if a.dim() != 2 or b.dim() != 2:
        raise ShapeError(f"matmul expects 2-D operands, got {tuple(a.shape)} and {tuple(b.shape)}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"inner dimensions differ: {tuple(a.shape)} x {tuple(b.shape)}")
    return a @ b


def softmax(x: torch.Tensor, dim: int = -1) -> torch.Tensor:
    """Numerically stable softmax along ``dim`` (max-subtracted before exponentiation)."""
    if x.dim() == 0 or x.shape[dim] == 0:
        raise ShapeError("softmax of an empty tensor")
    shifted = x - x.max(dim=dim, keepdim=True).values.detach()
    exp = torch.exp(shifted)
    return exp / exp.sum(dim=dim, keepdim=True)


def topk_indices(x: torch.Tensor, k: int) -> List[int]:
    """Indices of the ``k`` largest entries of a vector, largest first.

    Ties resolve to the lowest index.
    """
    if x.dim() != 1:
        raise ShapeError(f"topk_indices expects a vector, got shape {tuple(x.shape)}")
    n = x.shape[0]
    if not 1 <= k <= n:
        raise ArgumentError(f"k={k} outside [1, {n}]")
    return topk_rows(x.unsqueeze(0), k)[0].tolist()


def topk_rows(x: torch.Tensor, k: int) -> torch.Tensor:
    """Row-wise top-k indices of a 2-D tensor with lowest-index tie-breaking.

    A stable descending sort keeps equal values in index order.
    """
    if not 1 <= k <= x.shape[-1]:
        raise ArgumentError(f"k={k} outside [1, {x.shape[-1]}]")
    order = torch.sort(x.detach(), dim=-1, descending=True, stable=True).indices
    return order[..., :k]


def symmetric_eigenvalues(m: torch.Tensor) -> torch.Tensor:
    """Eigenvalues of a symmetric matrix in ascending order (float64).

    Cyclic Jacobi rotations run until the off-diagonal Frobenius norm falls
    below ``JACOBI_TOLERANCE`` (scaled by the matrix norm when it exceeds 1)
    or ``JACOBI_MAX_SWEEPS`` sweeps have been made.
    """
    if m.dim() != 2 or m.shape[0] != m.shape[1]:
        raise ShapeError(f"expected a square matrix, got {tuple(m.shape)}")
    a = m.detach().cpu().numpy().astype(np.float64)
    n = a.shape[0]
    if n == 0:
        return torch.zeros(0, dtype=torch.float64)
    asymmetry = float(np.max(np.abs(a - a.T)))
    if asymmetry > SYMMETRY_TOLERANCE:
        raise ArgumentError(f"matrix is not symmetric (max |m - m^T| = {asymmetry:.3g})")
    a = 0.5 * (a + a.T)

    tolerance = JACOBI_TOLERANCE * max(1.0, float(np.linalg.norm(a)))
    for sweep in range(JACOBI_MAX_SWEEPS):
        off = np.sqrt(max(float(np.sum(a * a) - np.sum(np.diag(a) ** 2)), 0.0))
        if off < tolerance:
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = a[p, q]
                if apq == 0.0:
                    continue
                tau = (a[q, q] - a[p, p]) / (2.0 * apq)
                t = (1.0 if tau >= 0 else -1.0) / (abs(tau) + np.sqrt(1.0 + tau * tau))
                c = 1.0 / np.sqrt(1.0 + t * t)
                s = t * c
                col_p = a[:, p].copy()
                col_q = a[:, q].copy()
                a[:, p] = c * col_p - s * col_q
                a[:, q] = s * col_p + c * col_q
                row_p = a[p, :].copy()
                row_q = a[q, :].copy()
                a[p, :] = c * row_p - s * row_q
                a[q, :] = s * row_p + c * row_q
    else:
        logger.warning("Jacobi eigensolver stopped after %d sweeps", JACOBI_MAX_SWEEPS)
    logger.debug("Jacobi eigensolver finished n=%d after %d sweep(s)", n, sweep + 1)
    return torch.from_numpy(np.sort(np.diag(a)).copy())
