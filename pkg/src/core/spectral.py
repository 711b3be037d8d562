"""Heavy-tail (Hill) estimate of an expert's weight-correlation spectrum."""

import logging
from dataclasses import dataclass
from typing import Optional, Sequence, Union

import numpy as np
import torch

from core.errors import DegenerateSpectrumError
from core.moe_model import ExpertMLP
from core.tensor_ops import symmetric_eigenvalues

logger = logging.getLogger(__name__)

HISTOGRAM_BINS = 100
POSITIVE_EIGENVALUE_FLOOR = 1e-12


@dataclass
class AlphaHillScore:
    alpha: float
    k_used: int


def expert_correlation_matrix(expert: ExpertMLP) -> torch.Tensor:
    """W^T W / d for W = [w_gate | w_up] (d x 2f), in float64."""
    w = torch.cat([expert.w_gate.detach(), expert.w_up.detach()], dim=1).to(torch.float64)
    return (w.t() @ w) / w.shape[0]


def fix_finger_k(eigenvalues: np.ndarray, bins: int = HISTOGRAM_BINS) -> int:
    """Tail size from the peak of a log-spaced histogram of the spectrum.

    ``xmin`` is the (geometric) centre of the fullest bin; k counts the
    eigenvalues strictly above it, clamped to [2, n - 1].
    """
    n = eigenvalues.shape[0]
    log_values = np.log10(eigenvalues)
    counts, edges = np.histogram(log_values, bins=bins)
    peak = int(np.argmax(counts))
    xmin = 10.0 ** (0.5 * (edges[peak] + edges[peak + 1]))
    k = int(np.sum(eigenvalues > xmin))
    return int(min(max(k, 2), n - 1))


def hill_estimate(
    eigenvalues: Union[Sequence[float], np.ndarray, torch.Tensor], k: Optional[int] = None
) -> AlphaHillScore:
    """``1 + k / sum_{i<=k} ln(lambda_{n-i+1} / lambda_{n-k})`` over ascending eigenvalues.

    Non-positive eigenvalues are discarded first. ``k`` defaults to the
    fix-finger choice.
    """
    values = np.sort(np.asarray(eigenvalues, dtype=np.float64))
    values = values[values > POSITIVE_EIGENVALUE_FLOOR]
    n = values.shape[0]
    if n < 2:
        raise DegenerateSpectrumError(f"need at least 2 positive eigenvalues, got {n}")
    if values[-1] == values[0]:
        raise DegenerateSpectrumError("all eigenvalues are equal")
    if k is None:
        k = fix_finger_k(values)
    if not 1 <= k <= n - 1:
        raise DegenerateSpectrumError(f"tail size k={k} outside [1, {n - 1}]")
    reference = values[n - k - 1]
    denominator = float(np.sum(np.log(values[n - k:] / reference)))
    if denominator <= 0.0:
        raise DegenerateSpectrumError("tail eigenvalues do not exceed the reference eigenvalue")
    return AlphaHillScore(alpha=1.0 + k / denominator, k_used=int(k))


def alpha_hill(expert: ExpertMLP, k: Optional[int] = None) -> AlphaHillScore:
    """Hill tail exponent of an expert's weight correlation spectrum."""
    eigenvalues = symmetric_eigenvalues(expert_correlation_matrix(expert)).numpy()
    score = hill_estimate(eigenvalues, k)
    logger.debug("alpha_hill=%.4f k=%d", score.alpha, score.k_used)
    return score
