"""Expert and layer selection: greedy searches and the baseline selectors."""

import csv
import functools
import itertools
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Callable, Dict, List, Mapping, Optional, Sequence, Union

import numpy as np
import torch
from torch import nn

from core.calibration import sequences_fingerprint
from core.condense import build_condensed_layer, weighted_expert_sum
from core.errors import ArgumentError, NeverActivatedError, StateError
from core.metrics import (
    output_divergence,
    perplexity_from_logits,
    ppl_delta_from_values,
)
from core.moe_model import (
    GateStats,
    MoEModel,
    RoutedMoELayer,
    as_sequences,
    capture_layer_inputs,
    collect_all_gate_stats,
    shared_expert_sum,
)
from core.spectral import alpha_hill

logger = logging.getLogger(__name__)

ProgressCallback = Optional[Callable[[str], None]]

EXPERT_METHODS = ("greedy", "random", "l1", "alpha_hill", "layer_trim", "block_trim")
LAYER_METHODS = ("greedy", "layer_rank", "global_layer_rank", "block_influence", "random")
INFLUENCE_SCOPES = ("block", "layer")
COSINE_FLOOR = 1e-300
EXPERT_METRICS = ("js", "kl")
LAYER_METRICS = ("js", "kl", "ppl")
ALPHA_TIE_TOLERANCE = 1e-12
EXHAUSTIVE_MAX_EXPERTS = 10


@dataclass
class SelectionTrace:
    """Ordered picks of a greedy search with the loss table of every step."""

    kind: str
    method: str
    metric: str
    chosen: List[int] = field(default_factory=list)
    step_losses: List[float] = field(default_factory=list)
    candidate_losses: List[Dict[int, float]] = field(default_factory=list)
    layer_index: int = -1
    fingerprint: Dict[str, Any] = field(default_factory=dict)

    def record(self, losses: Dict[int, float]) -> int:
        """Commit the argmin of ``losses`` (lowest index on ties) and return it."""
        best = None
        for index in sorted(losses):
            if best is None or losses[index] < losses[best]:
                best = index
        self.chosen.append(best)
        self.step_losses.append(losses[best])
        self.candidate_losses.append(dict(losses))
        return best

    def to_dict(self) -> Dict[str, Any]:
        data = asdict(self)
        data["candidate_losses"] = [
            {str(k): v for k, v in sorted(step.items())} for step in self.candidate_losses
        ]
        return data

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "SelectionTrace":
        return cls(
            kind=data["kind"],
            method=data["method"],
            metric=data["metric"],
            chosen=[int(i) for i in data["chosen"]],
            step_losses=[float(x) for x in data["step_losses"]],
            candidate_losses=[
                {int(k): float(v) for k, v in step.items()} for step in data["candidate_losses"]
            ],
            layer_index=int(data.get("layer_index", -1)),
            fingerprint=dict(data.get("fingerprint", {})),
        )

    def save(self, path: Union[str, Path]):
        """Write the trace as JSON."""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", encoding="utf-8") as f:
            json.dump(self.to_dict(), f, indent=2, sort_keys=True)

    @classmethod
    def load(cls, path: Union[str, Path]) -> "SelectionTrace":
        """Read a trace written by ``save``."""
        with open(path, "r", encoding="utf-8") as f:
            return cls.from_dict(json.load(f))


@dataclass
class ExpertPlan:
    """Experts kept by each layer if that layer gets condensed.

    ``trim`` removes the MoE sublayer of a chosen layer and ``drop_blocks``
    removes its whole block; both plans keep no experts.
    """

    method: str
    keep: Dict[int, List[int]] = field(default_factory=dict)
    trim: bool = False
    drop_blocks: bool = False
    traces: Dict[int, SelectionTrace] = field(default_factory=dict)

    @property
    def keep_count(self) -> int:
        """Experts kept per layer (the plan keeps the same number everywhere)."""
        return len(next(iter(self.keep.values()))) if self.keep else 0

    def to_dict(self) -> Dict[str, Any]:
        return {
            "method": self.method,
            "trim": self.trim,
            "drop_blocks": self.drop_blocks,
            "keep": {str(k): v for k, v in sorted(self.keep.items())},
            "traces": {str(k): t.to_dict() for k, t in sorted(self.traces.items())},
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "ExpertPlan":
        return cls(
            method=data["method"],
            trim=bool(data.get("trim", False)),
            drop_blocks=bool(data.get("drop_blocks", False)),
            keep={int(k): [int(i) for i in v] for k, v in data["keep"].items()},
            traces={
                int(k): SelectionTrace.from_dict(t) for k, t in data.get("traces", {}).items()
            },
        )

    def save(self, path: Union[str, Path]):
        """Write the plan as JSON."""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", encoding="utf-8") as f:
            json.dump(self.to_dict(), f, indent=2, sort_keys=True)

    @classmethod
    def load(cls, path: Union[str, Path]) -> "ExpertPlan":
        """Read a plan written by ``save``."""
        with open(path, "r", encoding="utf-8") as f:
            return cls.from_dict(json.load(f))


PlanLike = Union[ExpertPlan, Mapping[int, Sequence[int]]]


def _plan_parts(plan: PlanLike):
    if isinstance(plan, ExpertPlan):
        return plan.keep, plan.trim, plan.drop_blocks
    return {int(k): list(v) for k, v in plan.items()}, False, False


def _check_k(k: int, n: int, what: str):
    if not 0 <= k <= n:
        raise ArgumentError(f"cannot select {k} {what} out of {n}")


def _fingerprint(sequences: List[List[int]], seed: Optional[int] = None) -> Dict[str, Any]:
    data: Dict[str, Any] = {"calibration_sha256": sequences_fingerprint(sequences)}
    if seed is not None:
        data["seed"] = seed
    return data


# Expert selection


class _ExpertSearchContext:
    """Cached per-expert outputs of one routed layer on the calibration tokens.

    Every candidate subset is scored by recombining the cached outputs with
    the fixed gates, so a search needs a single pass through the experts.
    """

    def __init__(self, model: MoEModel, layer_index: int, sequences: List[List[int]]):
        layer: RoutedMoELayer = model.require_routed(layer_index)
        self.layer_index = layer_index
        with torch.no_grad():
            self.inputs = capture_layer_inputs(model, sequences, layer_index)
            mix, routing = layer.expert_mix(self.inputs)
            self.reference = self.inputs + mix
            self.stats = GateStats.empty(layer.num_experts, layer.k_active)
            self.stats.update(routing)
            self.outputs = torch.stack([expert(self.inputs) for expert in layer.experts], dim=1)
            self.shared = shared_expert_sum(layer.shared, self.inputs)
        counts = self.stats.activation_count
        means = np.where(counts > 0, self.stats.gate_sum / np.maximum(counts, 1), 0.0)
        self.gates = torch.tensor(means.tolist(), dtype=self.inputs.dtype)
        self.num_experts = layer.num_experts

    def active(self, index: int) -> bool:
        return bool(self.stats.activation_count[index] > 0)

    def output(self, subset: Sequence[int]) -> torch.Tensor:
        subset = list(subset)
        if subset:
            mix = weighted_expert_sum(self.outputs[:, subset], self.gates[subset])
        else:
            mix = torch.zeros_like(self.inputs)
        return self.inputs + (mix + self.shared)

    def loss(self, subset: Sequence[int], metric: str) -> float:
        return output_divergence(self.reference, self.output(subset), metric)


def _check_expert_inputs(sequences, metric: str):
    if not sequences:
        raise ArgumentError("calibration set is empty")
    if metric not in EXPERT_METRICS:
        raise ArgumentError(f"expert selection metric must be one of {EXPERT_METRICS}")


def greedy_expert_selection(
    model: MoEModel,
    layer_index: int,
    calibration: Any,
    k: int,
    metric: str = "js",
    progress_callback: ProgressCallback = None,
) -> SelectionTrace:
    """Grow the kept set one expert at a time, always adding the one whose
    condensed layer output diverges least from the fully routed output."""
    sequences = as_sequences(calibration)
    _check_expert_inputs(sequences, metric)
    n = model.require_routed(layer_index).num_experts
    _check_k(k, n, "experts")
    context = _ExpertSearchContext(model, layer_index, sequences)
    trace = SelectionTrace(
        kind="expert",
        method="greedy",
        metric=metric,
        layer_index=layer_index,
        fingerprint=_fingerprint(sequences),
    )
    for step in range(k):
        remaining = [i for i in range(n) if i not in trace.chosen]
        eligible = [i for i in remaining if context.active(i)]
        if not eligible:
            raise NeverActivatedError(remaining, layer_index)
        losses = {i: context.loss(trace.chosen + [i], metric) for i in eligible}
        best = trace.record(losses)
        message = f"layer {layer_index} step {step + 1}/{k}: expert {best} loss {losses[best]:.6g}"
        logger.debug(message)
        if progress_callback:
            progress_callback(message)
    return trace


@dataclass
class SubsetResult:
    subset: List[int]
    loss: float
    evaluated: int


def exhaustive_expert_selection(
    model: MoEModel, layer_index: int, calibration: Any, k: int, metric: str = "js"
) -> SubsetResult:
    """Best k-subset of activated experts by brute force (small layers only)."""
    sequences = as_sequences(calibration)
    _check_expert_inputs(sequences, metric)
    n = model.require_routed(layer_index).num_experts
    _check_k(k, n, "experts")
    if n > EXHAUSTIVE_MAX_EXPERTS:
        raise ArgumentError(f"exhaustive search is limited to {EXHAUSTIVE_MAX_EXPERTS} experts")
    context = _ExpertSearchContext(model, layer_index, sequences)
    eligible = [i for i in range(n) if context.active(i)]
    if len(eligible) < k:
        raise NeverActivatedError([i for i in range(n) if not context.active(i)], layer_index)
    best: Optional[SubsetResult] = None
    evaluated = 0
    for subset in itertools.combinations(eligible, k):
        loss = context.loss(subset, metric)
        evaluated += 1
        if best is None or loss < best.loss:
            best = SubsetResult(subset=list(subset), loss=loss, evaluated=0)
    best.evaluated = evaluated
    return best


def random_expert_selection(n: int, k: int, seed: int) -> List[int]:
    """Uniform sample of k experts without replacement."""
    _check_k(k, n, "experts")
    rng = np.random.default_rng(seed)
    return [int(i) for i in rng.choice(n, size=k, replace=False)]


def expert_l1_norms(layer: RoutedMoELayer) -> List[float]:
    """Sum of absolute weights of every routing expert."""
    return [
        float(sum(p.detach().to(torch.float64).abs().sum() for p in expert.parameters()))
        for expert in layer.experts
    ]


def l1_expert_selection(layer: RoutedMoELayer, k: int) -> List[int]:
    """The k experts with the lowest L1 weight norm."""
    _check_k(k, layer.num_experts, "experts")
    norms = expert_l1_norms(layer)
    return sorted(range(layer.num_experts), key=lambda i: (norms[i], i))[:k]


def _rank_ascending(values: Sequence[float], tolerance: float) -> List[int]:
    def compare(a: int, b: int) -> int:
        if abs(values[a] - values[b]) <= tolerance:
            return a - b
        return -1 if values[a] < values[b] else 1

    return sorted(range(len(values)), key=functools.cmp_to_key(compare))


def alpha_hill_expert_selection(layer: RoutedMoELayer, k: int) -> List[int]:
    """Keep the k most heavy-tailed experts (lowest alpha)."""
    _check_k(k, layer.num_experts, "experts")
    alphas = [alpha_hill(expert).alpha for expert in layer.experts]
    return _rank_ascending(alphas, ALPHA_TIE_TOLERANCE)[:k]


def build_expert_plan(
    model: MoEModel,
    calibration: Any,
    keep_count: int,
    method: str = "greedy",
    seed: int = 0,
    metric: str = "js",
    layers: Optional[Sequence[int]] = None,
    progress_callback: ProgressCallback = None,
) -> ExpertPlan:
    """Keep-set for every routed layer (or ``layers``) using one expert selector."""
    if method not in EXPERT_METHODS:
        raise ArgumentError(f"unknown expert selection method {method!r}")
    layers = model.routed_layer_indices() if layers is None else list(layers)
    plan = ExpertPlan(
        method=method, trim=method == "layer_trim", drop_blocks=method == "block_trim"
    )
    for index in layers:
        layer = model.require_routed(index)
        if method == "greedy":
            trace = greedy_expert_selection(
                model, index, calibration, keep_count, metric, progress_callback
            )
            plan.traces[index] = trace
            plan.keep[index] = list(trace.chosen)
        elif method == "random":
            plan.keep[index] = random_expert_selection(layer.num_experts, keep_count, seed + index)
        elif method == "l1":
            plan.keep[index] = l1_expert_selection(layer, keep_count)
        elif method == "alpha_hill":
            plan.keep[index] = alpha_hill_expert_selection(layer, keep_count)
        else:
            plan.keep[index] = []
        logger.info("expert plan (%s) layer %d keeps %s", method, index, plan.keep[index])
    return plan


# Layer selection


def build_condensed_layers(
    model: MoEModel,
    plan: PlanLike,
    stats: Mapping[int, GateStats],
    layers: Sequence[int],
    allow_inactive: bool = False,
) -> Dict[int, nn.Module]:
    """Replacement module of every layer in ``layers`` according to ``plan``."""
    keep, trim, drop_blocks = _plan_parts(plan)
    missing = [index for index in layers if index not in keep]
    if missing:
        raise StateError(f"expert plan has no entry for layer(s) {missing}")
    return {
        index: build_condensed_layer(
            model.require_routed(index),
            keep[index],
            stats.get(index),
            index,
            allow_inactive,
            trim,
            drop_blocks,
        )
        for index in layers
    }


class _LayerSearchContext:
    """Reference logits of the routed model and candidate scoring by overlay."""

    def __init__(self, model: MoEModel, sequences: List[List[int]], metric: str):
        if metric not in LAYER_METRICS:
            raise ArgumentError(f"layer selection metric must be one of {LAYER_METRICS}")
        if not sequences:
            raise ArgumentError("calibration set is empty")
        self.model = model
        self.sequences = sequences
        self.metric = metric
        with torch.no_grad():
            self.reference_logits = [model(seq) for seq in sequences]
        self.reference_rows = torch.cat(self.reference_logits, dim=0)
        self._reference_ppl: Optional[List[float]] = None

    @property
    def reference_ppl(self) -> List[float]:
        """Per-sequence perplexity of the unmodified model, computed once."""
        if self._reference_ppl is None:
            self._reference_ppl = [
                perplexity_from_logits(logits, seq)
                for logits, seq in zip(self.reference_logits, self.sequences)
            ]
        return self._reference_ppl

    def _logits(self, overrides: Mapping[int, nn.Module]) -> List[torch.Tensor]:
        with torch.no_grad():
            return [self.model(seq, overrides) for seq in self.sequences]

    def _score(self, logits: List[torch.Tensor], metric: str) -> float:
        if metric == "ppl":
            cand = [perplexity_from_logits(l, seq) for l, seq in zip(logits, self.sequences)]
            return ppl_delta_from_values(self.reference_ppl, cand)
        return output_divergence(self.reference_rows, torch.cat(logits, dim=0), metric)

    def loss(self, overrides: Mapping[int, nn.Module]) -> float:
        return self._score(self._logits(overrides), self.metric)

    def all_metrics(self, overrides: Mapping[int, nn.Module]) -> Dict[str, float]:
        """JS, KL and perplexity change of one override set."""
        logits = self._logits(overrides)
        return {
            "js": self._score(logits, "js"),
            "kl": self._score(logits, "kl"),
            "ppl_delta": self._score(logits, "ppl"),
        }


def _layer_setup(model, calibration, k_layers, plan, stats, allow_inactive):
    sequences = as_sequences(calibration)
    candidates = model.routed_layer_indices()
    _check_k(k_layers, len(candidates), "layers")
    if stats is None:
        stats = collect_all_gate_stats(sequences, model)
    condensed = build_condensed_layers(model, plan, stats, candidates, allow_inactive)
    return sequences, candidates, condensed


def greedy_layer_selection(
    model: MoEModel,
    calibration: Any,
    k_layers: int,
    expert_plan: PlanLike,
    stats: Optional[Mapping[int, GateStats]] = None,
    metric: str = "js",
    allow_inactive: bool = False,
    progress_callback: ProgressCallback = None,
) -> SelectionTrace:
    """Condense layers one at a time, each step committing the layer whose
    condensation (on top of those already committed) moves the final
    output distribution least."""
    sequences, candidates, condensed = _layer_setup(
        model, calibration, k_layers, expert_plan, stats, allow_inactive
    )
    context = _LayerSearchContext(model, sequences, metric)
    trace = SelectionTrace(
        kind="layer", method="greedy", metric=metric, fingerprint=_fingerprint(sequences)
    )
    committed: Dict[int, nn.Module] = {}
    for step in range(k_layers):
        losses = {}
        for index in candidates:
            if index in committed:
                continue
            overrides = dict(committed)
            overrides[index] = condensed[index]
            losses[index] = context.loss(overrides)
        best = trace.record(losses)
        committed[best] = condensed[best]
        message = f"layer search step {step + 1}/{k_layers}: layer {best} loss {losses[best]:.6g}"
        logger.info(message)
        if progress_callback:
            progress_callback(message)
    return trace


def layer_rank_scores(
    model: MoEModel,
    calibration: Any,
    expert_plan: PlanLike,
    stats: Optional[Mapping[int, GateStats]] = None,
    metric: str = "js",
    allow_inactive: bool = False,
) -> Dict[int, float]:
    """Divergence of each layer's own output before and after its condensation."""
    if metric not in EXPERT_METRICS:
        raise ArgumentError(f"layer rank metric must be one of {EXPERT_METRICS}")
    sequences, candidates, condensed = _layer_setup(
        model, calibration, 0, expert_plan, stats, allow_inactive
    )
    if not sequences:
        raise ArgumentError("calibration set is empty")
    scores = {}
    with torch.no_grad():
        for index in candidates:
            inputs = capture_layer_inputs(model, sequences, index)
            reference = model.moe_layer(index)(inputs)
            scores[index] = output_divergence(reference, condensed[index](inputs), metric)
    return scores


def _take_ranked(scores: Mapping[int, float], k_layers: int) -> List[int]:
    _check_k(k_layers, len(scores), "layers")
    return sorted(scores, key=lambda i: (scores[i], i))[:k_layers]


def layer_rank_selection(
    model: MoEModel,
    calibration: Any,
    k_layers: int,
    expert_plan: PlanLike,
    stats: Optional[Mapping[int, GateStats]] = None,
    metric: str = "js",
    allow_inactive: bool = False,
) -> List[int]:
    """The k layers whose own output changes least when condensed."""
    _check_k(k_layers, len(model.routed_layer_indices()), "layers")
    scores = layer_rank_scores(model, calibration, expert_plan, stats, metric, allow_inactive)
    return _take_ranked(scores, k_layers)


@dataclass
class SweepRow:
    layer_index: int
    js: float
    kl: float
    ppl_delta: float


def layer_sweep(
    model: MoEModel,
    calibration: Any,
    expert_plan: PlanLike,
    stats: Optional[Mapping[int, GateStats]] = None,
    allow_inactive: bool = False,
    progress_callback: ProgressCallback = None,
) -> List[SweepRow]:
    """Final-output JS, KL and perplexity change when condensing each layer alone."""
    sequences, candidates, condensed = _layer_setup(
        model, calibration, 0, expert_plan, stats, allow_inactive
    )
    context = _LayerSearchContext(model, sequences, "js")
    rows = []
    for index in candidates:
        values = context.all_metrics({index: condensed[index]})
        rows.append(SweepRow(layer_index=index, **values))
        if progress_callback:
            progress_callback(f"sweep layer {index}: js {values['js']:.6g}")
    return rows


def global_layer_rank_scores(
    model: MoEModel,
    calibration: Any,
    expert_plan: PlanLike,
    stats: Optional[Mapping[int, GateStats]] = None,
    metric: str = "js",
    allow_inactive: bool = False,
) -> Dict[int, float]:
    """Final-output loss of condensing each layer on its own."""
    sequences, candidates, condensed = _layer_setup(
        model, calibration, 0, expert_plan, stats, allow_inactive
    )
    context = _LayerSearchContext(model, sequences, metric)
    return {index: context.loss({index: condensed[index]}) for index in candidates}


def global_layer_rank_selection(
    model: MoEModel,
    calibration: Any,
    k_layers: int,
    expert_plan: PlanLike,
    stats: Optional[Mapping[int, GateStats]] = None,
    metric: str = "js",
    allow_inactive: bool = False,
) -> List[int]:
    """The k layers with the lowest single-layer final-output loss."""
    _check_k(k_layers, len(model.routed_layer_indices()), "layers")
    scores = global_layer_rank_scores(
        model, calibration, expert_plan, stats, metric, allow_inactive
    )
    return _take_ranked(scores, k_layers)


def block_influence_scores(
    model: MoEModel, calibration: Any, scope: str = "block"
) -> Dict[int, float]:
    """One minus the mean cosine similarity between what enters and what leaves.

    With ``scope="block"`` the input is the hidden state entering the block;
    with ``scope="layer"`` it is the residual entering the MoE sublayer, so
    only that sublayer's change is measured. Both compare against the block
    output. Low scores mark blocks that barely change the hidden state.
    """
    if scope not in INFLUENCE_SCOPES:
        raise ArgumentError(f"influence scope must be one of {INFLUENCE_SCOPES}")
    sequences = [seq for seq in as_sequences(calibration) if seq]
    if not sequences:
        raise ArgumentError("calibration set is empty")
    candidates = model.routed_layer_indices()
    sums = {index: 0.0 for index in candidates}
    tokens = 0
    with torch.no_grad():
        for seq in sequences:
            trace = model.trace(seq)
            for index in candidates:
                entering = trace.block_inputs if scope == "block" else trace.sublayer_inputs
                before = entering[index].to(torch.float64)
                after = trace.hidden_states[index].to(torch.float64)
                norms = (before.norm(dim=-1) * after.norm(dim=-1)).clamp_min(COSINE_FLOOR)
                cosine = (before * after).sum(dim=-1) / norms
                sums[index] += float(cosine.sum())
            tokens += len(seq)
    return {index: 1.0 - sums[index] / tokens for index in candidates}


def block_influence_selection(
    model: MoEModel, calibration: Any, k_layers: int, scope: str = "block"
) -> List[int]:
    """The k layers with the lowest influence score."""
    _check_k(k_layers, len(model.routed_layer_indices()), "layers")
    return _take_ranked(block_influence_scores(model, calibration, scope), k_layers)


def random_layer_selection(model: MoEModel, k_layers: int, seed: int) -> List[int]:
    """Uniform sample of routed layers without replacement."""
    candidates = model.routed_layer_indices()
    _check_k(k_layers, len(candidates), "layers")
    rng = np.random.default_rng(seed)
    return [candidates[int(i)] for i in rng.choice(len(candidates), size=k_layers, replace=False)]


def final_output_divergence(
    model: MoEModel,
    calibration: Any,
    layers: Sequence[int],
    expert_plan: PlanLike,
    stats: Optional[Mapping[int, GateStats]] = None,
    metric: str = "js",
    allow_inactive: bool = False,
) -> float:
    """Final-output divergence after condensing ``layers`` together."""
    sequences, _, condensed = _layer_setup(
        model, calibration, 0, expert_plan, stats, allow_inactive
    )
    context = _LayerSearchContext(model, sequences, metric)
    return context.loss({index: condensed[index] for index in layers})


def write_sweep_csv(rows: Sequence[SweepRow], path: Union[str, Path]):
    """Write sweep rows with full float precision."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(["layer_index", "js", "kl", "ppl_delta"])
        for row in rows:
            writer.writerow([row.layer_index, repr(row.js), repr(row.kl), repr(row.ppl_delta)])


def read_sweep_csv(path: Union[str, Path]) -> List[SweepRow]:
    """Read rows written by ``write_sweep_csv``."""
    with open(path, "r", encoding="utf-8", newline="") as f:
        return [
            SweepRow(
                layer_index=int(row["layer_index"]),
                js=float(row["js"]),
                kl=float(row["kl"]),
                ppl_delta=float(row["ppl_delta"]),
            )
            for row in csv.DictReader(f)
        ]
