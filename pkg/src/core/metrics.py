"""Divergence and perplexity metrics (natural log throughout)."""

import logging
import math
from typing import Any, List, Sequence

import torch
import torch.nn.functional as F

from core.errors import ArgumentError, ShapeError
from core.moe_model import MoEModel, as_sequences

logger = logging.getLogger(__name__)

KL_EPSILON = 1e-12
DIVERGENCE_KINDS = ("js", "kl")


def _as_prob(values: Any) -> torch.Tensor:
    return torch.as_tensor(values, dtype=torch.float64)


def _row_kl(u: torch.Tensor, v: torch.Tensor) -> torch.Tensor:
    """Row-wise KL(u || v); zero-mass terms of u vanish, zero v is clamped."""
    positive = u > 0
    safe_u = torch.where(positive, u, torch.ones_like(u))
    safe_v = torch.where(positive, v.clamp_min(KL_EPSILON), torch.ones_like(v))
    terms = torch.where(positive, u * (torch.log(safe_u) - torch.log(safe_v)), torch.zeros_like(u))
    return terms.sum(dim=-1)


def _row_js(u: torch.Tensor, v: torch.Tensor) -> torch.Tensor:
    mixture = 0.5 * (u + v)
    return 0.5 * (_row_kl(u, mixture) + _row_kl(v, mixture))


def _check_pair(u: torch.Tensor, v: torch.Tensor):
    if u.shape != v.shape:
        raise ShapeError(f"distribution shapes differ: {tuple(u.shape)} vs {tuple(v.shape)}")


def kl_divergence(u: Any, v: Any) -> float:
    """KL(u || v) = sum_j u_j ln(u_j / v_j)."""
    u, v = _as_prob(u), _as_prob(v)
    _check_pair(u, v)
    return float(_row_kl(u, v))


def js_divergence(u: Any, v: Any) -> float:
    """Jensen-Shannon divergence: mean KL of u and v to their midpoint."""
    u, v = _as_prob(u), _as_prob(v)
    _check_pair(u, v)
    return float(_row_js(u, v))


def output_divergence(
    ref_states: torch.Tensor, cand_states: torch.Tensor, kind: str = "js"
) -> float:
    """Mean per-row divergence after a softmax over the last dimension.

    Works for layer outputs (softmax over hidden features) and for logits
    (softmax over the vocabulary) alike.
    """
    if kind not in DIVERGENCE_KINDS:
        raise ArgumentError(f"unknown divergence kind {kind!r}; expected one of {DIVERGENCE_KINDS}")
    if ref_states.shape != cand_states.shape:
        raise ShapeError(
            f"state shapes differ: {tuple(ref_states.shape)} vs {tuple(cand_states.shape)}"
        )
    ref = ref_states.detach().to(torch.float64).reshape(-1, ref_states.shape[-1])
    cand = cand_states.detach().to(torch.float64).reshape(-1, cand_states.shape[-1])
    if ref.shape[0] == 0:
        raise ShapeError("output_divergence needs at least one row")
    u = torch.softmax(ref, dim=-1)
    v = torch.softmax(cand, dim=-1)
    rows = _row_js(u, v) if kind == "js" else _row_kl(u, v)
    return float(rows.mean())


def mean_nll_from_logits(logits: torch.Tensor, tokens: Sequence[int]) -> float:
    """Mean next-token cross-entropy (nats) over positions 1..T-1, in float64."""
    targets = torch.as_tensor(list(tokens), dtype=torch.long)
    if targets.shape[0] < 2:
        raise ArgumentError("perplexity needs a sequence of at least 2 tokens")
    predictions = logits.detach().to(torch.float64)[:-1]
    return float(F.cross_entropy(predictions, targets[1:], reduction="mean"))


def perplexity_from_logits(logits: torch.Tensor, tokens: Sequence[int]) -> float:
    """Perplexity of ``tokens`` under already computed logits."""
    return math.exp(mean_nll_from_logits(logits, tokens))


def perplexity(tokens: Sequence[int], model: MoEModel) -> float:
    """Exp of the mean next-token negative log-likelihood of one sequence."""
    tokens = list(tokens)
    if len(tokens) < 2:
        raise ArgumentError("perplexity needs a sequence of at least 2 tokens")
    with torch.no_grad():
        logits = model(tokens)
    return perplexity_from_logits(logits, tokens)


def corpus_perplexity(sequences: Any, model: MoEModel) -> float:
    """exp of the token-weighted mean NLL over all usable sequences."""
    total_nll = 0.0
    total_tokens = 0
    with torch.no_grad():
        for seq in as_sequences(sequences):
            if len(seq) < 2:
                continue
            nll = mean_nll_from_logits(model(seq), seq)
            total_nll += nll * (len(seq) - 1)
            total_tokens += len(seq) - 1
    if total_tokens == 0:
        raise ArgumentError("no sequence of length >= 2 to evaluate")
    return math.exp(total_nll / total_tokens)


def ppl_delta_from_values(ref_ppls: Sequence[float], cand_ppls: Sequence[float]) -> float:
    """Mean absolute perplexity change over paired sequences."""
    if len(ref_ppls) != len(cand_ppls):
        raise ShapeError("perplexity lists differ in length")
    if not ref_ppls:
        raise ArgumentError("ppl_delta_loss needs a nonempty calibration set")
    return sum(abs(c - r) for r, c in zip(ref_ppls, cand_ppls)) / len(ref_ppls)


def sequence_perplexities(model: MoEModel, calibration: Any, layer_overrides=None) -> List[float]:
    """Perplexity of every sequence under ``model``."""
    values = []
    with torch.no_grad():
        for seq in as_sequences(calibration):
            values.append(perplexity_from_logits(model(seq, layer_overrides), seq))
    return values


def ppl_delta_loss(ref_model: MoEModel, cand_model: MoEModel, calibration: Any) -> float:
    """Mean absolute perplexity change per calibration sample."""
    sequences = as_sequences(calibration)
    if not sequences:
        raise ArgumentError("ppl_delta_loss needs a nonempty calibration set")
    ref = [perplexity(seq, ref_model) for seq in sequences]
    cand = [perplexity(seq, cand_model) for seq in sequences]
    return ppl_delta_from_values(ref, cand)
