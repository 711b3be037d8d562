"""Toy fine-grained MoE transformer with shared experts and top-K routing."""

import logging
from dataclasses import asdict, dataclass, field
from typing import Any, Dict, Iterable, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from core.errors import ConfigError, InputError, ShapeError, StateError
from core.tensor_ops import softmax, topk_rows

logger = logging.getLogger(__name__)

TokenInput = Union[Sequence[int], torch.Tensor]

RMS_EPS = 1e-6


@dataclass
class ModelConfig:
    """Architecture of the toy MoE model."""

    vocab_size: int = 256
    hidden_size: int = 32
    expert_inner: int = 16
    num_blocks: int = 4
    num_routing_experts: int = 16
    num_shared_experts: int = 1
    k_active: int = 2
    max_seq_len: int = 128
    attention_enabled: bool = True
    renormalize_gates: bool = False

    def problems(self) -> List[str]:
        """Return every violated constraint (empty when valid)."""
        found = []
        for name in (
            "vocab_size",
            "hidden_size",
            "expert_inner",
            "num_blocks",
            "num_routing_experts",
            "num_shared_experts",
            "k_active",
            "max_seq_len",
        ):
            value = getattr(self, name)
            if not isinstance(value, int) or isinstance(value, bool) or value <= 0:
                found.append(f"model.{name} must be a positive integer (got {value!r})")
        if (
            isinstance(self.k_active, int)
            and isinstance(self.num_routing_experts, int)
            and self.k_active > self.num_routing_experts
        ):
            found.append(
                f"model.k_active ({self.k_active}) exceeds "
                f"model.num_routing_experts ({self.num_routing_experts})"
            )
        return found

    def validate(self):
        """Raise ConfigError listing every problem."""
        problems = self.problems()
        if problems:
            raise ConfigError(problems)

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "ModelConfig":
        """Build a config from a dictionary, ignoring unknown keys."""
        known = {key: data[key] for key in cls.__dataclass_fields__ if key in data}
        return cls(**known)


class RMSNorm(nn.Module):
    def __init__(self, hidden_size: int):
        super().__init__()
        self.weight = nn.Parameter(torch.ones(hidden_size))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return x * torch.rsqrt(x.pow(2).mean(dim=-1, keepdim=True) + RMS_EPS) * self.weight


class CausalSelfAttention(nn.Module):
    """Single-head causal self-attention (output projection only, no residual)."""

    def __init__(self, hidden_size: int):
        super().__init__()
        self.w_q = nn.Parameter(torch.zeros(hidden_size, hidden_size))
        self.w_k = nn.Parameter(torch.zeros(hidden_size, hidden_size))
        self.w_v = nn.Parameter(torch.zeros(hidden_size, hidden_size))
        self.w_o = nn.Parameter(torch.zeros(hidden_size, hidden_size))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        seq_len = x.shape[-2]
        q = x @ self.w_q
        k = x @ self.w_k
        v = x @ self.w_v
        scores = (q @ k.transpose(-1, -2)) / float(np.sqrt(x.shape[-1]))
        future = torch.triu(torch.ones(seq_len, seq_len, dtype=torch.bool), diagonal=1)
        scores = scores.masked_fill(future, float("-inf"))
        return (softmax(scores, dim=-1) @ v) @ self.w_o


class ExpertMLP(nn.Module):
    """Gated SiLU expert: ``w_down(silu(x w_gate) * (x w_up))``."""

    def __init__(self, hidden_size: int, inner_size: int):
        super().__init__()
        self.w_gate = nn.Parameter(torch.zeros(hidden_size, inner_size))
        self.w_up = nn.Parameter(torch.zeros(hidden_size, inner_size))
        self.w_down = nn.Parameter(torch.zeros(inner_size, hidden_size))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return (F.silu(x @ self.w_gate) * (x @ self.w_up)) @ self.w_down

    def parameter_count(self) -> int:
        """Number of scalars in the expert's three matrices."""
        return sum(p.numel() for p in self.parameters())


def shared_expert_sum(shared: Iterable[ExpertMLP], x: torch.Tensor) -> torch.Tensor:
    """Sum of shared-expert outputs in list order (zeros when there are none)."""
    total = None
    for expert in shared:
        out = expert(x)
        total = out if total is None else total + out
    return torch.zeros_like(x) if total is None else total


@dataclass
class Routing:
    """Routing decision for a batch of tokens flattened to rows.

    ``selected`` lists each token's experts by descending score, and
    ``mask`` is the same selection as a boolean [tokens, N] table.
    """

    scores: torch.Tensor
    gates: torch.Tensor
    selected: torch.Tensor
    mask: torch.Tensor


class RoutedMoELayer(nn.Module):
    """MoE feed-forward layer: top-K routed experts plus always-on shared experts."""

    layer_kind = "routed"

    def __init__(
        self,
        hidden_size: int,
        inner_size: int,
        num_experts: int,
        num_shared: int,
        k_active: int,
        renormalize_gates: bool = False,
    ):
        super().__init__()
        if not 1 <= k_active <= num_experts:
            raise ConfigError([f"k_active={k_active} outside [1, {num_experts}]"])
        if num_shared < 1:
            raise ConfigError([f"num_shared={num_shared} must be at least 1"])
        self.hidden_size = hidden_size
        self.k_active = k_active
        self.renormalize_gates = renormalize_gates
        self.experts = nn.ModuleList(ExpertMLP(hidden_size, inner_size) for _ in range(num_experts))
        self.shared = nn.ModuleList(ExpertMLP(hidden_size, inner_size) for _ in range(num_shared))
        self.centroids = nn.Parameter(torch.zeros(num_experts, hidden_size))

    @property
    def num_experts(self) -> int:
        """Number of routing experts."""
        return len(self.experts)

    def gate_scores(self, x: torch.Tensor) -> torch.Tensor:
        """Router probabilities of every row of ``x``."""
        return softmax(x @ self.centroids.t(), dim=-1)

    def route(self, x: torch.Tensor) -> Routing:
        """Route rows of ``x`` ([tokens, d]) to their top-K experts."""
        scores = self.gate_scores(x)
        selected = topk_rows(scores, self.k_active)
        mask = torch.zeros_like(scores, dtype=torch.bool).scatter_(-1, selected, True)
        gates = scores * mask.to(scores.dtype)
        if self.renormalize_gates:
            gates = gates / gates.sum(dim=-1, keepdim=True)
        return Routing(scores=scores, gates=gates, selected=selected, mask=mask)

    def expert_mix(self, x: torch.Tensor) -> Tuple[torch.Tensor, Routing]:
        """Expert contribution without the residual term, plus the routing used."""
        if x.shape[-1] != self.hidden_size:
            raise ShapeError(f"expected hidden size {self.hidden_size}, got {x.shape[-1]}")
        flat = x.reshape(-1, self.hidden_size)
        routing = self.route(flat)
        outputs = torch.stack([expert(flat) for expert in self.experts], dim=1)
        index = routing.selected.unsqueeze(-1).expand(-1, -1, self.hidden_size)
        picked = torch.gather(outputs, 1, index)
        weights = torch.gather(routing.gates, 1, routing.selected)
        # Summing in rank order keeps the result independent of expert numbering.
        mix = (picked * weights.unsqueeze(-1)).sum(dim=1)
        mix = mix + shared_expert_sum(self.shared, flat)
        return mix.reshape(x.shape), routing

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        mix, _ = self.expert_mix(x)
        return x + mix


class Block(nn.Module):
    """Pre-norm block: causal attention sublayer then an MoE sublayer."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        d = config.hidden_size
        if config.attention_enabled:
            self.attn_norm: Optional[RMSNorm] = RMSNorm(d)
            self.attention: Optional[CausalSelfAttention] = CausalSelfAttention(d)
        else:
            self.attn_norm = None
            self.attention = None
        self.moe_norm = RMSNorm(d)
        self.layer: nn.Module = RoutedMoELayer(
            d,
            config.expert_inner,
            config.num_routing_experts,
            config.num_shared_experts,
            config.k_active,
            config.renormalize_gates,
        )

    def forward(
        self, h: torch.Tensor, layer: Optional[nn.Module] = None
    ) -> Tuple[torch.Tensor, torch.Tensor, Optional[Routing], torch.Tensor]:
        """Output, normalised MoE input, routing, and the residual entering the MoE sublayer."""
        active = self.layer if layer is None else layer
        if getattr(active, "skips_block", False):
            return h, h, None, h
        if self.attention is not None:
            h = h + self.attention(self.attn_norm(h))
        u = self.moe_norm(h)
        mix, routing = active.expert_mix(u)
        return h + mix, u, routing, h


@dataclass
class ForwardTrace:
    """Model output together with the per-block intermediates."""

    logits: torch.Tensor
    block_inputs: List[torch.Tensor] = field(default_factory=list)
    sublayer_inputs: List[torch.Tensor] = field(default_factory=list)
    hidden_states: List[torch.Tensor] = field(default_factory=list)
    moe_inputs: List[torch.Tensor] = field(default_factory=list)
    routings: List[Optional[Routing]] = field(default_factory=list)


class MoEModel(nn.Module):
    """Embedding, MoE blocks, output norm and language-model head."""

    def __init__(self, config: ModelConfig, seed: int = 0):
        super().__init__()
        config.validate()
        self.config = config
        d = config.hidden_size
        self.token_embedding = nn.Parameter(torch.zeros(config.vocab_size, d))
        self.position_embedding = nn.Parameter(torch.zeros(config.max_seq_len, d))
        self.blocks = nn.ModuleList(Block(config) for _ in range(config.num_blocks))
        self.output_norm = RMSNorm(d)
        self.lm_head = nn.Parameter(torch.zeros(d, config.vocab_size))
        self.reset_parameters(seed)

    def reset_parameters(self, seed: int):
        """Initialise every weight from a seeded generator in parameter-name order."""
        generator = torch.Generator().manual_seed(seed)
        d = self.config.hidden_size
        f = self.config.expert_inner
        with torch.no_grad():
            for name, param in self.named_parameters():
                leaf = name.rsplit(".", 1)[-1]
                if leaf == "weight":
                    param.fill_(1.0)
                    continue
                if leaf in ("token_embedding", "position_embedding"):
                    std = 1.0 if leaf == "token_embedding" else 0.1
                elif leaf == "w_down":
                    std = 0.5 / np.sqrt(f)
                elif leaf == "w_o":
                    std = 0.5 / np.sqrt(d)
                else:
                    std = 1.0 / np.sqrt(d)
                param.copy_(torch.randn(param.shape, generator=generator) * std)

    # Layer access
    def moe_layer(self, index: int) -> nn.Module:
        """MoE layer of block ``index``."""
        if not 0 <= index < len(self.blocks):
            raise InputError(f"layer index {index} outside [0, {len(self.blocks)})")
        return self.blocks[index].layer

    def set_moe_layer(self, index: int, layer: nn.Module):
        """Replace the MoE layer of block ``index``."""
        self.moe_layer(index)
        self.blocks[index].layer = layer

    def layer_kinds(self) -> List[str]:
        """Kind of every block's MoE layer, in block order."""
        return [block.layer.layer_kind for block in self.blocks]

    def routed_layer_indices(self) -> List[int]:
        """Blocks whose MoE layer still routes."""
        return [i for i, kind in enumerate(self.layer_kinds()) if kind == "routed"]

    def require_routed(self, index: int) -> RoutedMoELayer:
        """Routed layer of block ``index``; StateError if it was condensed."""
        layer = self.moe_layer(index)
        if layer.layer_kind != "routed":
            raise StateError(f"layer {index} is already {layer.layer_kind}")
        return layer

    # Forward
    def _token_tensor(self, tokens: TokenInput) -> torch.Tensor:
        ids = torch.as_tensor(tokens, dtype=torch.long)
        if ids.dim() not in (1, 2):
            raise InputError(f"tokens must be 1-D or 2-D, got shape {tuple(ids.shape)}")
        if ids.shape[-1] > self.config.max_seq_len:
            raise InputError(
                f"sequence length {ids.shape[-1]} exceeds max_seq_len {self.config.max_seq_len}"
            )
        if ids.numel() and (int(ids.min()) < 0 or int(ids.max()) >= self.config.vocab_size):
            raise InputError(f"token id outside [0, {self.config.vocab_size})")
        return ids

    def trace(
        self, tokens: TokenInput, layer_overrides: Optional[Mapping[int, nn.Module]] = None
    ) -> ForwardTrace:
        """Run the model and keep hidden states, MoE inputs and routings per block.

        ``layer_overrides`` substitutes MoE layers by block index for this call
        only; the model itself is not modified.
        """
        ids = self._token_tensor(tokens)
        batched = ids.dim() == 2
        if not batched:
            ids = ids.unsqueeze(0)
        overrides = layer_overrides or {}
        seq_len = ids.shape[-1]
        h = self.token_embedding[ids] + self.position_embedding[:seq_len]
        result = ForwardTrace(logits=h)
        if seq_len > 0:
            for index, block in enumerate(self.blocks):
                result.block_inputs.append(h if batched else h[0])
                h, u, routing, mid = block(h, overrides.get(index))
                result.sublayer_inputs.append(mid if batched else mid[0])
                result.hidden_states.append(h if batched else h[0])
                result.moe_inputs.append(u if batched else u[0])
                result.routings.append(routing)
        logits = self.output_norm(h) @ self.lm_head
        result.logits = logits if batched else logits[0]
        return result

    def forward(
        self, tokens: TokenInput, layer_overrides: Optional[Mapping[int, nn.Module]] = None
    ) -> torch.Tensor:
        """Logits of one sequence; see ``model_forward``."""
        return self.trace(tokens, layer_overrides).logits


def gate_scores(x_t: torch.Tensor, layer: RoutedMoELayer) -> torch.Tensor:
    """Softmax of the token's dot products with every expert centroid."""
    return layer.gate_scores(x_t)


def routed_forward(x_t: torch.Tensor, layer: RoutedMoELayer) -> Tuple[torch.Tensor, torch.Tensor]:
    """Layer output and gate vector for one token (or rows of tokens)."""
    single = x_t.dim() == 1
    rows = x_t.unsqueeze(0) if single else x_t
    mix, routing = layer.expert_mix(rows)
    h = rows + mix
    return (h[0], routing.gates[0]) if single else (h, routing.gates)


def model_forward(tokens: TokenInput, model: MoEModel) -> torch.Tensor:
    """Next-token logits for every position of ``tokens``."""
    return model(tokens)


def as_sequences(calibration: Any) -> List[List[int]]:
    """Accept a CalibrationSet-like object or a plain list of token sequences."""
    sequences = getattr(calibration, "sequences", calibration)
    return [list(map(int, seq)) for seq in sequences]


def capture_layer_inputs(
    model: MoEModel,
    calibration: Any,
    layer_index: int,
    layer_overrides: Optional[Mapping[int, nn.Module]] = None,
) -> torch.Tensor:
    """Normalised MoE-layer inputs of every calibration token, stacked as rows."""
    model.moe_layer(layer_index)
    rows = []
    with torch.no_grad():
        for seq in as_sequences(calibration):
            if not seq:
                continue
            rows.append(model.trace(seq, layer_overrides).moe_inputs[layer_index])
    if not rows:
        return torch.zeros(0, model.config.hidden_size)
    return torch.cat(rows, dim=0)


@dataclass
class GateStats:
    """Per-expert activation counts and gate sums gathered on calibration data."""

    activation_count: np.ndarray
    gate_sum: np.ndarray
    total_tokens: int = 0
    k_active: int = 1

    @classmethod
    def empty(cls, num_experts: int, k_active: int) -> "GateStats":
        """Zeroed statistics for a layer of ``num_experts`` experts."""
        return cls(
            activation_count=np.zeros(num_experts, dtype=np.int64),
            gate_sum=np.zeros(num_experts, dtype=np.float64),
            k_active=k_active,
        )

    @property
    def num_experts(self) -> int:
        return int(self.activation_count.shape[0])

    def update(self, routing: Routing):
        """Add the activations and gates of one routing decision."""
        mask = routing.mask.detach()
        gates = routing.gates.detach().to(torch.float64) * mask.to(torch.float64)
        self.activation_count += mask.sum(dim=0).cpu().numpy().astype(np.int64)
        self.gate_sum += gates.sum(dim=0).cpu().numpy()
        self.total_tokens += int(mask.shape[0])

    def merge(self, other: "GateStats") -> "GateStats":
        """Statistics of both calibration passes combined."""
        if other.num_experts != self.num_experts:
            raise ShapeError("cannot merge gate statistics of different expert counts")
        return GateStats(
            activation_count=self.activation_count + other.activation_count,
            gate_sum=self.gate_sum + other.gate_sum,
            total_tokens=self.total_tokens + other.total_tokens,
            k_active=self.k_active,
        )

    def never_activated(self) -> List[int]:
        """Experts no calibration token was routed to."""
        return [int(i) for i in np.flatnonzero(self.activation_count == 0)]

    def to_dict(self) -> Dict[str, Any]:
        return {
            "activation_count": self.activation_count.tolist(),
            "gate_sum": self.gate_sum.tolist(),
            "total_tokens": self.total_tokens,
            "k_active": self.k_active,
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "GateStats":
        return cls(
            activation_count=np.asarray(data["activation_count"], dtype=np.int64),
            gate_sum=np.asarray(data["gate_sum"], dtype=np.float64),
            total_tokens=int(data["total_tokens"]),
            k_active=int(data["k_active"]),
        )


def collect_all_gate_stats(calibration: Any, model: MoEModel) -> Dict[int, GateStats]:
    """Gate statistics for every routed layer, from one pass over the calibration set."""
    stats = {
        index: GateStats.empty(model.moe_layer(index).num_experts, model.moe_layer(index).k_active)
        for index in model.routed_layer_indices()
    }
    with torch.no_grad():
        for seq in as_sequences(calibration):
            if not seq:
                continue
            result = model.trace(seq)
            for index, layer_stats in stats.items():
                layer_stats.update(result.routings[index])
    return stats


def collect_gate_stats(calibration: Any, model: MoEModel, layer_index: int) -> GateStats:
    """Gate statistics of one routed layer over the calibration set."""
    layer = model.require_routed(layer_index)
    stats = GateStats.empty(layer.num_experts, layer.k_active)
    with torch.no_grad():
        for seq in as_sequences(calibration):
            if not seq:
                continue
            stats.update(model.trace(seq).routings[layer_index])
    logger.debug(
        "gate stats layer=%d tokens=%d inactive=%s",
        layer_index,
        stats.total_tokens,
        stats.never_activated(),
    )
    return stats
