"""Settings management module."""

import copy
import hashlib
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Union

from core.errors import ArgumentError, ConfigError, MissingArtifactError
from core.moe_model import ModelConfig
from core.selection import EXPERT_METHODS, EXPERT_METRICS, LAYER_METHODS, LAYER_METRICS
from core.training import TrainConfig

logger = logging.getLogger(__name__)

STAGES = ("data", "init", "calibration", "selection", "pretrain", "sft")
CALIBRATION_SOURCES = ("general", "task")


def stage_seed(root_seed: int, stage: str) -> int:
    """Independent seed for one pipeline stage, derived from the root seed."""
    if stage not in STAGES:
        raise ArgumentError(f"unknown stage {stage!r}; expected one of {STAGES}")
    digest = hashlib.sha256(f"{root_seed}:{stage}".encode("ascii")).digest()
    return int.from_bytes(digest[:8], "little") & 0x7FFF_FFFF_FFFF_FFFF


def parse_value(text: str) -> Any:
    """JSON literal when it parses, otherwise the bare string."""
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


class SettingsManager:
    """Nested run settings: defaults merged with a config file and CLI overrides."""

    def __init__(self, config_file: Optional[Union[str, Path]] = None):
        self.config_file = Path(config_file) if config_file else None
        self.settings = self._load_default_settings()
        self.problems: List[str] = []
        if self.config_file is not None:
            self.load_settings()

    def _load_default_settings(self) -> Dict[str, Any]:
        """Load default settings."""
        return {
            "version": "1.0",
            "model": ModelConfig().to_dict(),
            "data": {
                "corpus_size": 2000,
                "task_corpus_size": 500,
                "held_out_fraction": 0.1,
            },
            "calibration": {
                "count": 100,
                "max_seq_len": 128,
                "source": "general",  # general (markov) or task (template)
            },
            "selection": {
                "expert_method": "greedy",
                "expert_metric": "js",
                "layer_method": "greedy",
                "metric": "js",
                "k_layers": 2,
                "experts_per_condensed_layer": 2,  # 0 keeps shared experts only
                "allow_inactive_experts": False,
            },
            "pretrain": {
                "learning_rate": 3e-3,
                "warmup_ratio": 0.1,
                "batch_size": 8,
                "steps": 400,
                "seq_len": 64,
                "aux_loss_coef": 0.01,
                "eval_interval": 100,
            },
            "sft": {
                "learning_rate": 1e-4,
                "warmup_ratio": 0.1,
                "batch_size": 8,
                "steps": 200,
                "seq_len": 64,
                "aux_loss_coef": 0.0,
                "eval_interval": 50,
                "train_fixed_gates": True,
            },
            "run": {
                "seed": 0,
                "out": "runs/default",
                "measure_throughput": False,
            },
        }

    def load_settings(self) -> bool:
        """Load settings from the config file (flat ``key = value`` lines or JSON)."""
        if self.config_file is None:
            return False
        if not self.config_file.exists():
            raise MissingArtifactError(f"config file not found: {self.config_file}")
        text = self.config_file.read_text(encoding="utf-8")
        if self.config_file.suffix == ".json":
            try:
                loaded = json.loads(text)
            except json.JSONDecodeError as e:
                raise ConfigError([f"{self.config_file}: invalid JSON ({e})"]) from e
            self._merge_settings(self.settings, loaded)
        else:
            for number, raw in enumerate(text.splitlines(), start=1):
                line = raw.split("#", 1)[0].strip()
                if not line:
                    continue
                if "=" not in line:
                    self.problems.append(f"{self.config_file}:{number}: expected 'key = value'")
                    continue
                key, value = (part.strip() for part in line.split("=", 1))
                self.set(key, parse_value(value))
        logger.debug("loaded settings from %s", self.config_file)
        return True

    def save_settings(self, path: Union[str, Path]) -> bool:
        """Save settings to a JSON file."""
        try:
            path = Path(path)
            path.parent.mkdir(parents=True, exist_ok=True)
            with open(path, "w", encoding="utf-8") as f:
                json.dump(self.settings, f, indent=2, sort_keys=True)
            return True
        except (PermissionError, OSError):
            logger.warning("could not write settings to %s", path)
            return False

    def _merge_settings(self, target: Dict[str, Any], source: Dict[str, Any], prefix: str = ""):
        """Merge source settings into target, preserving structure."""
        for key, value in source.items():
            if key in target:
                if isinstance(target[key], dict) and isinstance(value, dict):
                    self._merge_settings(target[key], value, f"{prefix}{key}.")
                else:
                    target[key] = value
            else:
                self.problems.append(f"unknown setting {prefix}{key}")

    def get(self, key: str) -> Any:
        """Value at a dotted key such as ``model.hidden_size``."""
        node: Any = self.settings
        for part in key.split("."):
            node = node[part]
        return node

    def set(self, key: str, value: Any):
        """Set a dotted ``section.key``; unknown keys are recorded as problems."""
        parts = key.split(".")
        node = self.settings
        for part in parts[:-1]:
            if not isinstance(node.get(part), dict):
                self.problems.append(f"unknown setting {key}")
                return
            node = node[part]
        if parts[-1] not in node or isinstance(node[parts[-1]], dict):
            self.problems.append(f"unknown setting {key}")
            return
        node[parts[-1]] = value

    def apply_overrides(self, overrides: Dict[str, Any]):
        """Set every non-None dotted key of ``overrides``."""
        for key, value in overrides.items():
            if value is not None:
                self.set(key, value)

    def snapshot(self) -> Dict[str, Any]:
        """Deep copy of the current settings."""
        return copy.deepcopy(self.settings)


def _typed(settings: SettingsManager, key: str, kind: type, problems: List[str]) -> Any:
    value = settings.get(key)
    if kind is bool:
        if isinstance(value, bool):
            return value
    elif kind is int:
        if isinstance(value, int) and not isinstance(value, bool):
            return value
    elif kind is float:
        if isinstance(value, (int, float)) and not isinstance(value, bool):
            return float(value)
    elif isinstance(value, kind):
        return value
    problems.append(f"{key} must be of type {kind.__name__} (got {value!r})")
    return settings._load_default_settings()[key.split(".")[0]][key.split(".")[1]]


def _train_config(settings: SettingsManager, section: str, seed: int, problems: List[str]):
    return TrainConfig(
        learning_rate=_typed(settings, f"{section}.learning_rate", float, problems),
        warmup_ratio=_typed(settings, f"{section}.warmup_ratio", float, problems),
        batch_size=_typed(settings, f"{section}.batch_size", int, problems),
        steps=_typed(settings, f"{section}.steps", int, problems),
        seed=seed,
        seq_len=_typed(settings, f"{section}.seq_len", int, problems),
        aux_loss_coef=_typed(settings, f"{section}.aux_loss_coef", float, problems),
        eval_interval=_typed(settings, f"{section}.eval_interval", int, problems),
    )


@dataclass
class RunConfig:
    """Everything one pipeline run needs, validated as a whole."""

    model: ModelConfig
    pretrain: TrainConfig
    sft: TrainConfig
    seed: int = 0
    out: str = "runs/default"
    corpus_size: int = 2000
    task_corpus_size: int = 500
    held_out_fraction: float = 0.1
    calibration_count: int = 100
    calibration_max_seq_len: int = 128
    calibration_source: str = "general"
    expert_method: str = "greedy"
    expert_metric: str = "js"
    layer_method: str = "greedy"
    metric: str = "js"
    k_layers: int = 2
    experts_per_condensed_layer: int = 2
    allow_inactive_experts: bool = False
    train_fixed_gates: bool = True
    measure_throughput: bool = False
    settings: Dict[str, Any] = field(default_factory=dict)
    problems: List[str] = field(default_factory=list)

    @classmethod
    def from_settings(cls, settings: SettingsManager) -> "RunConfig":
        """Typed run configuration; problems are collected, not raised."""
        problems = list(settings.problems)
        seed = _typed(settings, "run.seed", int, problems)
        model_values = {
            key: _typed(settings, f"model.{key}", type(default), problems)
            for key, default in ModelConfig().to_dict().items()
        }
        return cls(
            model=ModelConfig(**model_values),
            pretrain=_train_config(settings, "pretrain", stage_seed(seed, "pretrain"), problems),
            sft=_train_config(settings, "sft", stage_seed(seed, "sft"), problems),
            seed=seed,
            out=str(settings.get("run.out")),
            corpus_size=_typed(settings, "data.corpus_size", int, problems),
            task_corpus_size=_typed(settings, "data.task_corpus_size", int, problems),
            held_out_fraction=_typed(settings, "data.held_out_fraction", float, problems),
            calibration_count=_typed(settings, "calibration.count", int, problems),
            calibration_max_seq_len=_typed(settings, "calibration.max_seq_len", int, problems),
            calibration_source=_typed(settings, "calibration.source", str, problems),
            expert_method=_typed(settings, "selection.expert_method", str, problems),
            expert_metric=_typed(settings, "selection.expert_metric", str, problems),
            layer_method=_typed(settings, "selection.layer_method", str, problems),
            metric=_typed(settings, "selection.metric", str, problems),
            k_layers=_typed(settings, "selection.k_layers", int, problems),
            experts_per_condensed_layer=_typed(
                settings, "selection.experts_per_condensed_layer", int, problems
            ),
            allow_inactive_experts=_typed(
                settings, "selection.allow_inactive_experts", bool, problems
            ),
            train_fixed_gates=_typed(settings, "sft.train_fixed_gates", bool, problems),
            measure_throughput=_typed(settings, "run.measure_throughput", bool, problems),
            settings=settings.snapshot(),
            problems=problems,
        )

    def validate(self):
        """Raise one ConfigError listing every problem found."""
        problems = list(self.problems)
        problems.extend(self.model.problems())
        problems.extend(self.pretrain.problems("pretrain"))
        problems.extend(self.sft.problems("sft"))
        if self.corpus_size < 2:
            problems.append(f"data.corpus_size must be >= 2 (got {self.corpus_size})")
        if self.task_corpus_size < 1:
            problems.append(f"data.task_corpus_size must be >= 1 (got {self.task_corpus_size})")
        if not 0 < self.held_out_fraction < 1:
            problems.append(
                f"data.held_out_fraction must be in (0, 1) (got {self.held_out_fraction})"
            )
        if self.calibration_count <= 0:
            problems.append(f"calibration.count must be positive (got {self.calibration_count})")
        if not 2 <= self.calibration_max_seq_len <= self.model.max_seq_len:
            problems.append(
                f"calibration.max_seq_len must be in [2, model.max_seq_len] "
                f"(got {self.calibration_max_seq_len})"
            )
        choices = (
            ("calibration.source", self.calibration_source, CALIBRATION_SOURCES),
            ("selection.expert_method", self.expert_method, EXPERT_METHODS),
            ("selection.expert_metric", self.expert_metric, EXPERT_METRICS),
            ("selection.layer_method", self.layer_method, LAYER_METHODS),
            ("selection.metric", self.metric, LAYER_METRICS),
        )
        for key, value, allowed in choices:
            if value not in allowed:
                problems.append(f"{key} must be one of {allowed} (got {value!r})")
        if self.layer_method == "layer_rank" and self.metric == "ppl":
            problems.append("selection.metric 'ppl' is not available for layer_rank")
        if not 0 <= self.k_layers <= self.model.num_blocks:
            problems.append(
                f"selection.k_layers must be in [0, model.num_blocks] (got {self.k_layers})"
            )
        if not 0 <= self.experts_per_condensed_layer <= self.model.num_routing_experts:
            problems.append(
                "selection.experts_per_condensed_layer must be in [0, "
                f"model.num_routing_experts] (got {self.experts_per_condensed_layer})"
            )
        if problems:
            raise ConfigError(problems)

    def stage_seed(self, stage: str) -> int:
        """Seed of ``stage`` derived from this run's root seed."""
        return stage_seed(self.seed, stage)

    @property
    def fingerprint(self) -> str:
        """Hash of the settings; the output directory does not take part."""
        settings = copy.deepcopy(self.settings)
        settings.get("run", {}).pop("out", None)
        text = json.dumps(settings, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(text.encode("utf-8")).hexdigest()


def load_run_config(
    config_file: Optional[Union[str, Path]] = None, overrides: Optional[Dict[str, Any]] = None
) -> RunConfig:
    """Defaults, then the config file, then overrides; validated."""
    settings = SettingsManager(config_file)
    settings.apply_overrides(overrides or {})
    config = RunConfig.from_settings(settings)
    config.validate()
    return config
