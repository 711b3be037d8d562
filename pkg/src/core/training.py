"""Pretraining and lightweight fine-tuning of the toy MoE model."""

import copy
import csv
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Callable, Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
import torch
import torch.nn.functional as F

from core.calibration import corpus_sequences
from core.condense import closed_form_parameter_count, expert_parameter_count
from core.errors import ArgumentError, ConfigError, NumericError, TrainingDivergedError
from core.metrics import corpus_perplexity
from core.moe_model import ModelConfig, MoEModel

logger = logging.getLogger(__name__)

DIVERGENCE_FACTOR = 1e3
ADAM_BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8


@dataclass
class ParamMask:
    """Trainable flag per named parameter of a model."""

    flags: Dict[str, bool] = field(default_factory=dict)

    @classmethod
    def all_trainable(cls, model: MoEModel) -> "ParamMask":
        """Every parameter trainable (pretraining)."""
        return cls({name: True for name, _ in model.named_parameters()})

    @classmethod
    def frozen(cls, model: MoEModel) -> "ParamMask":
        """Nothing trainable."""
        return cls({name: False for name, _ in model.named_parameters()})

    @classmethod
    def sft(cls, model: MoEModel, train_fixed_gates: bool = True) -> "ParamMask":
        """Only the parameters inside condensed layers are trainable."""
        prefixes = tuple(
            f"blocks.{index}.layer."
            for index, kind in enumerate(model.layer_kinds())
            if kind == "condensed"
        )
        if not prefixes:
            logger.warning("model has no condensed layers; the SFT mask freezes everything")
        flags = {}
        for name, _ in model.named_parameters():
            trainable = bool(prefixes) and name.startswith(prefixes)
            if name.endswith("fixed_gates") and not train_fixed_gates:
                trainable = False
            flags[name] = trainable
        return cls(flags)

    def is_trainable(self, name: str) -> bool:
        """Whether the parameter called ``name`` may be updated."""
        return self.flags.get(name, False)

    def trainable_names(self) -> List[str]:
        return [name for name, flag in self.flags.items() if flag]

    def trainable_count(self, model: MoEModel) -> int:
        return sum(p.numel() for name, p in model.named_parameters() if self.is_trainable(name))

    def trainable_fraction(self, model: MoEModel) -> float:
        """Share of scalars the optimizer may change."""
        total = sum(p.numel() for p in model.parameters())
        return self.trainable_count(model) / total


def closed_form_trainable_fraction(
    config: ModelConfig,
    kept_counts: Mapping[int, int],
    trimmed: Sequence[int] = (),
    train_fixed_gates: bool = True,
    dropped: Sequence[int] = (),
) -> float:
    """SFT trainable share computed from the architecture and the condensation plan."""
    per_expert = expert_parameter_count(config)
    trainable = 0
    gate_scalars = 0
    for index, kept in kept_counts.items():
        if index in trimmed:
            continue
        gate_scalars += kept
        trainable += (kept + config.num_shared_experts) * per_expert
    if train_fixed_gates:
        trainable += gate_scalars
    total = closed_form_parameter_count(config, kept_counts, trimmed, dropped) + gate_scalars
    return trainable / total


@dataclass
class TrainConfig:
    learning_rate: float = 1e-4
    warmup_ratio: float = 0.1
    batch_size: int = 8
    steps: int = 200
    seed: int = 0
    seq_len: int = 64
    aux_loss_coef: float = 0.0
    eval_interval: int = 50

    def problems(self, prefix: str = "train") -> List[str]:
        """Every invalid field, prefixed with the settings section."""
        found = []
        if not self.learning_rate > 0:
            found.append(f"{prefix}.learning_rate must be > 0 (got {self.learning_rate!r})")
        if not 0 <= self.warmup_ratio < 1:
            found.append(f"{prefix}.warmup_ratio must be in [0, 1) (got {self.warmup_ratio!r})")
        if self.batch_size < 1:
            found.append(f"{prefix}.batch_size must be >= 1 (got {self.batch_size!r})")
        if self.steps < 0:
            found.append(f"{prefix}.steps must be >= 0 (got {self.steps!r})")
        if self.seq_len < 2:
            found.append(f"{prefix}.seq_len must be >= 2 (got {self.seq_len!r})")
        if self.aux_loss_coef < 0:
            found.append(f"{prefix}.aux_loss_coef must be >= 0 (got {self.aux_loss_coef!r})")
        if self.eval_interval < 0:
            found.append(f"{prefix}.eval_interval must be >= 0 (got {self.eval_interval!r})")
        return found

    def validate(self):
        """Raise ConfigError listing every problem."""
        problems = self.problems()
        if problems:
            raise ConfigError(problems)

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


@dataclass
class CurvePoint:
    step: int
    lr: float
    train_loss: float
    eval_loss: Optional[float] = None


@dataclass
class TrainResult:
    model: MoEModel
    curve: List[CurvePoint] = field(default_factory=list)
    initial_eval_loss: Optional[float] = None
    final_eval_loss: Optional[float] = None


def load_balance_loss(routings: Sequence[Any]) -> Optional[torch.Tensor]:
    """Mean squared deviation of each layer's mean router probability from 1/N.

    Summed over routed layers; ``None`` when no layer routes.
    """
    total = None
    for routing in routings:
        if routing is None:
            continue
        probs = routing.scores.reshape(-1, routing.scores.shape[-1]).mean(dim=0)
        term = (probs - 1.0 / probs.shape[0]).pow(2).mean()
        total = term if total is None else total + term
    return total


def _batch_tensor(batch: Sequence[Sequence[int]]) -> List[torch.Tensor]:
    sequences = [torch.as_tensor(list(seq), dtype=torch.long) for seq in batch]
    if not sequences:
        raise ArgumentError("training batch is empty")
    if any(seq.shape[0] < 2 for seq in sequences):
        raise ArgumentError("every training sequence needs at least 2 tokens")
    if len({seq.shape[0] for seq in sequences}) == 1:
        return [torch.stack(sequences)]
    return [seq.unsqueeze(0) for seq in sequences]


def batch_loss(
    model: MoEModel, batch: Sequence[Sequence[int]], aux_loss_coef: float = 0.0
) -> torch.Tensor:
    """Mean next-token cross-entropy (nats) over every predicted token of the batch.

    The load-balance term of each part is weighted by the tokens it routes, so
    the result does not depend on how the batch is split into parts.
    """
    nll = None
    predicted = 0
    aux = None
    routed_tokens = 0
    for ids in _batch_tensor(batch):
        trace = model.trace(ids)
        logits = trace.logits[:, :-1].reshape(-1, trace.logits.shape[-1])
        targets = ids[:, 1:].reshape(-1)
        part = F.cross_entropy(logits, targets, reduction="sum")
        nll = part if nll is None else nll + part
        predicted += targets.shape[0]
        if aux_loss_coef:
            balance = load_balance_loss(trace.routings)
            if balance is not None:
                weighted = balance * ids.numel()
                aux = weighted if aux is None else aux + weighted
                routed_tokens += ids.numel()
    loss = nll / predicted
    if aux is not None:
        loss = loss + aux_loss_coef * (aux / routed_tokens)
    return loss


def _nonfinite_tensor_name(model: MoEModel) -> str:
    """First parameter (or gradient) holding a NaN or infinity."""
    for name, param in model.named_parameters():
        if not torch.isfinite(param).all():
            return name
        if param.grad is not None and not torch.isfinite(param.grad).all():
            return f"{name}.grad"
    return "logits"


def loss_and_grads(
    model: MoEModel,
    batch: Sequence[Sequence[int]],
    mask: ParamMask,
    aux_loss_coef: float = 0.0,
) -> Tuple[float, Dict[str, torch.Tensor]]:
    """Loss value and gradients of the trainable tensors (frozen tensors get none)."""
    loss = batch_loss(model, batch, aux_loss_coef)
    if not torch.isfinite(loss):
        name = _nonfinite_tensor_name(model)
        raise NumericError(f"non-finite loss {float(loss)}", tensor_name=name)
    names = []
    params = []
    for name, param in model.named_parameters():
        if mask.is_trainable(name):
            names.append(name)
            params.append(param)
    if not params:
        return float(loss), {}
    grads = torch.autograd.grad(loss, params, allow_unused=True)
    for name, grad in zip(names, grads):
        if grad is not None and not torch.isfinite(grad).all():
            raise NumericError("non-finite gradient", tensor_name=f"{name}.grad")
    return float(loss), {
        name: torch.zeros_like(param) if grad is None else grad
        for name, param, grad in zip(names, params, grads)
    }


def lr_factor(step: int, total_steps: int, warmup_ratio: float) -> float:
    """Linear warmup then cosine decay to zero, as a multiple of the base rate."""
    warmup = int(round(warmup_ratio * total_steps))
    if step < warmup:
        return (step + 1) / warmup
    decay_steps = max(1, total_steps - warmup)
    progress = min(1.0, (step - warmup) / decay_steps)
    return 0.5 * (1.0 + math.cos(math.pi * progress))


def sample_batch(
    sequences: Sequence[Sequence[int]], batch_size: int, seq_len: int, rng: np.random.Generator
) -> List[List[int]]:
    """Random windows of up to ``seq_len`` tokens from random sequences."""
    batch = []
    for _ in range(batch_size):
        seq = sequences[int(rng.integers(len(sequences)))]
        start = int(rng.integers(0, max(1, len(seq) - seq_len + 1)))
        batch.append(list(seq[start:start + seq_len]))
    return batch


def evaluation_loss(model: MoEModel, sequences: Sequence[Sequence[int]]) -> float:
    """Token-weighted mean NLL of ``sequences`` in nats."""
    return math.log(corpus_perplexity(sequences, model))


def train(
    model: MoEModel,
    corpus: Any,
    config: TrainConfig,
    mask: ParamMask,
    eval_sequences: Optional[Sequence[Sequence[int]]] = None,
    progress_callback: Optional[Callable[[str], None]] = None,
) -> TrainResult:
    """Train a copy of ``model``; the argument is never modified.

    Only tensors flagged trainable in ``mask`` are handed to the optimizer,
    so every frozen tensor comes back bitwise unchanged.
    """
    config.validate()
    trained = copy.deepcopy(model)
    seq_len = min(config.seq_len, trained.config.max_seq_len)
    sequences = [seq for seq in corpus_sequences(corpus) if len(seq) >= 2]
    if not sequences:
        raise ArgumentError("training corpus has no sequence of at least 2 tokens")
    result = TrainResult(model=trained)
    if eval_sequences:
        result.initial_eval_loss = evaluation_loss(trained, eval_sequences)
    if config.steps == 0:
        result.final_eval_loss = result.initial_eval_loss
        return result

    params = []
    names = []
    for name, param in trained.named_parameters():
        trainable = mask.is_trainable(name)
        param.requires_grad_(trainable)
        if trainable:
            params.append(param)
            names.append(name)
    optimizer = None
    scheduler = None
    if params:
        optimizer = torch.optim.Adam(
            params, lr=config.learning_rate, betas=ADAM_BETAS, eps=ADAM_EPS, weight_decay=0.0
        )
        scheduler = torch.optim.lr_scheduler.LambdaLR(
            optimizer, lambda step: lr_factor(step, config.steps, config.warmup_ratio)
        )
    logger.info(
        "training %d steps, %d of %d tensors trainable",
        config.steps,
        len(params),
        len(mask.flags),
    )

    rng = np.random.default_rng(config.seed)
    initial_loss = None
    try:
        for step in range(config.steps):
            batch = sample_batch(sequences, config.batch_size, seq_len, rng)
            lr = config.learning_rate * lr_factor(step, config.steps, config.warmup_ratio)
            if optimizer is not None:
                optimizer.zero_grad(set_to_none=True)
                loss = batch_loss(trained, batch, config.aux_loss_coef)
                if not torch.isfinite(loss):
                    name = _nonfinite_tensor_name(trained)
                    raise NumericError(f"non-finite loss at step {step}", tensor_name=name)
                loss.backward()
                for name, param in zip(names, params):
                    if param.grad is not None and not torch.isfinite(param.grad).all():
                        raise NumericError(
                            f"non-finite gradient at step {step}", tensor_name=f"{name}.grad"
                        )
                optimizer.step()
                scheduler.step()
            else:
                with torch.no_grad():
                    loss = batch_loss(trained, batch, config.aux_loss_coef)
            value = float(loss)
            if initial_loss is None:
                initial_loss = value
            elif value > DIVERGENCE_FACTOR * initial_loss:
                raise TrainingDivergedError(
                    f"loss {value:.6g} at step {step} exceeds {DIVERGENCE_FACTOR:g}x "
                    f"the initial loss {initial_loss:.6g}"
                )
            point = CurvePoint(step=step, lr=lr, train_loss=value)
            due = config.eval_interval and (step + 1) % config.eval_interval == 0
            if eval_sequences and (due or step == config.steps - 1):
                point.eval_loss = evaluation_loss(trained, eval_sequences)
            result.curve.append(point)
            if point.eval_loss is not None:
                message = (
                    f"step {step + 1}/{config.steps} loss {value:.4f} eval {point.eval_loss:.4f}"
                )
                logger.info(message)
                if progress_callback:
                    progress_callback(message)
    finally:
        for param in trained.parameters():
            param.requires_grad_(True)
            param.grad = None

    if eval_sequences:
        result.final_eval_loss = result.curve[-1].eval_loss
    return result


def write_loss_curve(curve: Sequence[CurvePoint], path: Union[str, Path]):
    """Write the curve as CSV (step, lr, train_loss, eval_loss)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(["step", "lr", "train_loss", "eval_loss"])
        for point in curve:
            eval_loss = "" if point.eval_loss is None else repr(point.eval_loss)
            writer.writerow([point.step, repr(point.lr), repr(point.train_loss), eval_loss])
