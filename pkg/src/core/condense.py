"""Condensing routed MoE layers into dense layers with fixed gates.

A condensed layer keeps the shared experts plus a chosen subset of routing
experts. Each kept expert is weighted by the mean gate it received on the
calibration tokens that routed to it, the router is removed, and every
token runs through every kept expert.
"""

import copy
import logging
import time
from dataclasses import asdict, dataclass
from typing import Any, Dict, List, Mapping, Optional, Sequence, Tuple

import torch
from torch import nn

from core.errors import ArgumentError, NeverActivatedError, ShapeError, StateError
from core.moe_model import (
    ExpertMLP,
    GateStats,
    ModelConfig,
    MoEModel,
    RoutedMoELayer,
    shared_expert_sum,
)

logger = logging.getLogger(__name__)

THROUGHPUT_TOKENS = 2048
NORM_FLOPS_PER_ELEMENT = 4


class CondensedLayer(nn.Module):
    """Router-free MoE layer: fixed-gate kept experts plus shared experts."""

    layer_kind = "condensed"

    def __init__(
        self,
        hidden_size: int,
        inner_size: int,
        kept_indices: Sequence[int],
        num_shared: int,
        origin: int = -1,
        fixed_gates: Optional[Sequence[float]] = None,
    ):
        super().__init__()
        self.hidden_size = hidden_size
        self.kept_indices = [int(i) for i in kept_indices]
        self.origin = origin
        self.experts = nn.ModuleList(
            ExpertMLP(hidden_size, inner_size) for _ in self.kept_indices
        )
        self.shared = nn.ModuleList(ExpertMLP(hidden_size, inner_size) for _ in range(num_shared))
        gates = [1.0] * len(self.kept_indices) if fixed_gates is None else list(fixed_gates)
        if len(gates) != len(self.kept_indices):
            raise ShapeError("one fixed gate is needed per kept expert")
        self.fixed_gates = nn.Parameter(torch.tensor(gates, dtype=torch.float32))

    @classmethod
    def from_routed(
        cls,
        layer: RoutedMoELayer,
        keep: Sequence[int],
        gates: Sequence[float],
        origin: int = -1,
        keep_shared: bool = True,
    ) -> "CondensedLayer":
        """Copy the kept and shared experts out of ``layer``; the source is not touched."""
        inner = layer.experts[0].w_gate.shape[1]
        condensed = cls(
            layer.hidden_size,
            inner,
            keep,
            len(layer.shared) if keep_shared else 0,
            origin=origin,
            fixed_gates=gates,
        )
        condensed.experts = nn.ModuleList(copy.deepcopy(layer.experts[i]) for i in keep)
        if keep_shared:
            condensed.shared = copy.deepcopy(layer.shared)
        dtype = layer.centroids.dtype
        condensed.fixed_gates = nn.Parameter(torch.tensor(list(gates), dtype=dtype))
        return condensed

    @property
    def kept_experts(self) -> List[Tuple[ExpertMLP, float]]:
        """Kept experts paired with their fixed gates."""
        return [(expert, float(g)) for expert, g in zip(self.experts, self.fixed_gates)]

    def expert_mix(self, x: torch.Tensor) -> Tuple[torch.Tensor, None]:
        """Fixed-gate expert contribution without the residual term."""
        if x.shape[-1] != self.hidden_size:
            raise ShapeError(f"expected hidden size {self.hidden_size}, got {x.shape[-1]}")
        flat = x.reshape(-1, self.hidden_size)
        if len(self.experts):
            outputs = torch.stack([expert(flat) for expert in self.experts], dim=1)
            mix = weighted_expert_sum(outputs, self.fixed_gates)
        else:
            mix = torch.zeros_like(flat)
        mix = mix + shared_expert_sum(self.shared, flat)
        return mix.reshape(x.shape), None

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        mix, _ = self.expert_mix(x)
        return x + mix


class DroppedBlock(nn.Module):
    """Stand-in for a removed block; the whole block becomes the identity map."""

    layer_kind = "dropped"
    skips_block = True

    def __init__(self, hidden_size: int, origin: int = -1):
        super().__init__()
        self.hidden_size = hidden_size
        self.origin = origin
        self.kept_indices: List[int] = []
        self.experts = nn.ModuleList()
        self.shared = nn.ModuleList()

    def expert_mix(self, x: torch.Tensor) -> Tuple[torch.Tensor, None]:
        return torch.zeros_like(x), None

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return x


def drop_block(model: MoEModel, index: int, origin: int = -1):
    """Remove block ``index`` of ``model`` in place, attention and norms included."""
    model.set_moe_layer(index, DroppedBlock(model.config.hidden_size, origin))
    block = model.blocks[index]
    block.attention = None
    block.attn_norm = None
    block.moe_norm = None


def weighted_expert_sum(outputs: torch.Tensor, gates: torch.Tensor) -> torch.Tensor:
    """Sum of ``outputs[:, j] * gates[j]`` over experts ([tokens, experts, d] -> [tokens, d])."""
    return (outputs * gates.to(outputs.dtype).view(1, -1, 1)).sum(dim=1)


def fixed_gate(stats: GateStats, expert_index: int) -> float:
    """Mean gate of an expert over the calibration tokens routed to it."""
    if not 0 <= expert_index < stats.num_experts:
        raise ArgumentError(f"expert index {expert_index} outside [0, {stats.num_experts})")
    count = int(stats.activation_count[expert_index])
    if count == 0:
        raise NeverActivatedError([expert_index])
    return float(stats.gate_sum[expert_index] / count)


def _check_keep(keep: Sequence[int], num_experts: int):
    if len(set(keep)) != len(keep):
        raise ArgumentError(f"duplicate expert indices in {list(keep)}")
    invalid = [i for i in keep if not 0 <= int(i) < num_experts]
    if invalid:
        raise ArgumentError(f"expert indices {invalid} outside [0, {num_experts})")


def fixed_gates_for(
    stats: GateStats, keep: Sequence[int], origin: int = -1, allow_inactive: bool = False
) -> List[float]:
    """Fixed gates for ``keep``; never-activated experts fall back to 1/N when allowed."""
    inactive = [i for i in keep if stats.activation_count[i] == 0]
    if inactive and not allow_inactive:
        raise NeverActivatedError(inactive, origin)
    gates = []
    for i in keep:
        if stats.activation_count[i] == 0:
            logger.warning(
                "expert %d of layer %d never activated; using fixed gate 1/%d",
                i,
                origin,
                stats.num_experts,
            )
            gates.append(1.0 / stats.num_experts)
        else:
            gates.append(fixed_gate(stats, i))
    return gates


def condense_layer(
    layer: RoutedMoELayer,
    keep: Sequence[int],
    stats: GateStats,
    origin: int = -1,
    allow_inactive: bool = False,
) -> CondensedLayer:
    """Build the condensed replacement of ``layer`` keeping experts ``keep``."""
    keep = [int(i) for i in keep]
    _check_keep(keep, layer.num_experts)
    if stats.num_experts != layer.num_experts:
        raise ShapeError("gate statistics do not match the layer's expert count")
    gates = fixed_gates_for(stats, keep, origin, allow_inactive)
    return CondensedLayer.from_routed(layer, keep, gates, origin=origin)


def trim_layer(layer: RoutedMoELayer, origin: int = -1) -> CondensedLayer:
    """Drop the whole MoE sublayer: no routed and no shared experts remain."""
    return CondensedLayer.from_routed(layer, [], [], origin=origin, keep_shared=False)


def build_condensed_layer(
    layer: RoutedMoELayer,
    keep: Sequence[int],
    stats: Optional[GateStats],
    origin: int = -1,
    allow_inactive: bool = False,
    trim: bool = False,
    drop_blocks: bool = False,
) -> nn.Module:
    """Replacement module for one routed layer under a condensation mode.

    ``drop_blocks`` gives a DroppedBlock (block removed), ``trim`` an empty
    CondensedLayer (MoE sublayer removed), otherwise a fixed-gate layer
    keeping ``keep``.
    """
    if drop_blocks:
        return DroppedBlock(layer.hidden_size, origin)
    if trim:
        return trim_layer(layer, origin)
    if stats is None:
        raise StateError(f"no gate statistics for layer {origin}")
    return condense_layer(layer, keep, stats, origin, allow_inactive)


def condensed_forward(x_t: torch.Tensor, layer: CondensedLayer) -> torch.Tensor:
    """Residual plus shared experts plus the fixed-gate sum of the kept experts."""
    return layer(x_t)


def condense_model(
    model: MoEModel,
    plan: Mapping[int, Sequence[int]],
    stats: Mapping[int, GateStats],
    allow_inactive: bool = False,
    trim: bool = False,
    drop_blocks: bool = False,
) -> MoEModel:
    """Copy of ``model`` with each layer in ``plan`` condensed, trimmed or dropped."""
    condensed = copy.deepcopy(model)
    for index, keep in sorted(plan.items()):
        layer = condensed.require_routed(index)
        if drop_blocks:
            drop_block(condensed, index, index)
            logger.info("dropped block %d", index)
            continue
        replacement = build_condensed_layer(
            layer, keep, stats.get(index) if stats else None, index, allow_inactive, trim
        )
        condensed.set_moe_layer(index, replacement)
        logger.info("condensed layer %d keeping experts %s", index, list(keep) if not trim else [])
    return condensed


# Accounting


def expert_parameter_count(config: ModelConfig) -> int:
    """w_gate, w_up and w_down of one expert."""
    return 3 * config.hidden_size * config.expert_inner


def non_moe_parameter_count(config: ModelConfig) -> int:
    """Embeddings, head, norms and attention of the full-depth model."""
    d = config.hidden_size
    total = config.vocab_size * d * 2 + config.max_seq_len * d + d
    return total + config.num_blocks * block_overhead_parameter_count(config)


def block_overhead_parameter_count(config: ModelConfig) -> int:
    """Per-block parameters outside the MoE layer (norms and attention)."""
    d = config.hidden_size
    per_block = d
    if config.attention_enabled:
        per_block += 4 * d * d + d
    return per_block


def routed_layer_parameter_count(config: ModelConfig) -> int:
    """Routing, shared and router parameters of one uncondensed MoE layer."""
    experts = config.num_routing_experts + config.num_shared_experts
    router = config.num_routing_experts * config.hidden_size
    return experts * expert_parameter_count(config) + router


def closed_form_parameter_count(
    config: ModelConfig,
    kept_counts: Optional[Mapping[int, int]] = None,
    trimmed: Sequence[int] = (),
    dropped: Sequence[int] = (),
) -> int:
    """Total parameters (fixed gates excluded) from the config and a condensation plan.

    ``kept_counts`` maps condensed layer index to its number of kept routing
    experts; ``trimmed`` lists layers whose MoE sublayer is removed and
    ``dropped`` lists blocks removed together with their attention.
    """
    kept_counts = kept_counts or {}
    total = non_moe_parameter_count(config)
    total -= len(set(dropped)) * block_overhead_parameter_count(config)
    for index in range(config.num_blocks):
        if index in trimmed or index in dropped:
            continue
        if index in kept_counts:
            experts = kept_counts[index] + config.num_shared_experts
            total += experts * expert_parameter_count(config)
        else:
            total += routed_layer_parameter_count(config)
    return total


def memory_ratio_from_totals(
    original_params: int,
    hidden_size: int,
    expert_inner: int,
    num_routing_experts: int,
    kept_per_layer: int,
    condensed_layers: int,
) -> float:
    """Memory ratio when only the total parameter count of the original is known."""
    dropped_experts = (num_routing_experts - kept_per_layer) * 3 * hidden_size * expert_inner
    router = num_routing_experts * hidden_size
    removed = condensed_layers * (dropped_experts + router)
    return (original_params - removed) / original_params


@dataclass
class CostReport:
    """Parameter, memory and FLOP accounting of a (possibly condensed) model."""

    total_params: int
    active_params_per_token: int
    memory_ratio: float
    flops_per_token: int
    speedup_estimate: float
    original_total_params: int
    original_flops_per_token: int
    fixed_gate_scalars: int = 0
    measured_tokens_per_second: Optional[float] = None

    def to_dict(self) -> Dict[str, Any]:
        """Report as a JSON-ready dictionary."""
        return asdict(self)


def _layer_counts(layer: nn.Module) -> Tuple[int, int, int]:
    """(routing experts active per token, shared experts, router rows) of a layer."""
    if layer.layer_kind == "routed":
        return layer.k_active, len(layer.shared), layer.num_experts
    return len(layer.experts), len(layer.shared), 0


def _flops_per_token(
    config: ModelConfig, layer_counts: Sequence[Tuple[int, int, int]], dropped: int = 0
) -> int:
    d = config.hidden_size
    blocks = config.num_blocks - dropped
    matmul_params = d * config.vocab_size
    norms = 1 + blocks
    for active, shared, router in layer_counts:
        matmul_params += (active + shared) * expert_parameter_count(config) + router * d
    extra = 0
    if config.attention_enabled:
        matmul_params += blocks * 4 * d * d
        # QK^T and AV at full context length
        extra += blocks * 4 * d * config.max_seq_len
        norms += blocks
    return 2 * matmul_params + extra + NORM_FLOPS_PER_ELEMENT * d * norms


def cost_report(model: MoEModel, measured_throughput: Optional[float] = None) -> CostReport:
    """Count parameters and per-token FLOPs from tensor shapes.

    FLOPs count two per multiply-accumulate of every matrix a token touches,
    plus attention-score and normalization terms that are the same for every
    variant. Fixed gates are reported separately from ``total_params``.
    """
    config = model.config
    total = 0
    gate_scalars = 0
    for name, param in model.named_parameters():
        if name.endswith("fixed_gates"):
            gate_scalars += param.numel()
        else:
            total += param.numel()
    counts = [_layer_counts(block.layer) for block in model.blocks]
    dropped = sum(1 for block in model.blocks if block.layer.layer_kind == "dropped")
    active = non_moe_parameter_count(config) - dropped * block_overhead_parameter_count(config)
    for active_experts, shared, router in counts:
        active += (active_experts + shared) * expert_parameter_count(config)
        active += router * config.hidden_size
    original_total = closed_form_parameter_count(config)
    original_counts = [
        (config.k_active, config.num_shared_experts, config.num_routing_experts)
    ] * config.num_blocks
    flops = _flops_per_token(config, counts, dropped)
    original_flops = _flops_per_token(config, original_counts)
    return CostReport(
        total_params=total,
        active_params_per_token=active,
        memory_ratio=total / original_total,
        flops_per_token=flops,
        speedup_estimate=original_flops / flops,
        original_total_params=original_total,
        original_flops_per_token=original_flops,
        fixed_gate_scalars=gate_scalars,
        measured_tokens_per_second=measured_throughput,
    )


def measure_throughput(
    model: MoEModel, num_tokens: int = THROUGHPUT_TOKENS, seed: int = 0
) -> float:
    """Single-threaded tokens per second over a fixed random workload."""
    generator = torch.Generator().manual_seed(seed)
    tokens = torch.randint(0, model.config.vocab_size, (num_tokens,), generator=generator)
    chunks = torch.split(tokens, model.config.max_seq_len)
    threads = torch.get_num_threads()
    torch.set_num_threads(1)
    try:
        with torch.no_grad():
            start = time.perf_counter()
            for chunk in chunks:
                model(chunk)
            elapsed = time.perf_counter() - start
    finally:
        torch.set_num_threads(threads)
    return num_tokens / elapsed if elapsed > 0 else float("inf")


def variant_label(model: MoEModel) -> str:
    """Name of the compression variant a model represents."""
    kinds = model.layer_kinds()
    if "dropped" in kinds:
        return "BlockTrim"
    condensed = [block.layer for block in model.blocks if block.layer.layer_kind == "condensed"]
    if not condensed:
        return "original"
    if any(len(layer.shared) == 0 and len(layer.experts) == 0 for layer in condensed):
        return "LayerTrim"
    if all(len(layer.experts) == 0 for layer in condensed):
        return "CD-MoE-S"
    return "CD-MoE-SR"
