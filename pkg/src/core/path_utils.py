"""Path utility functions for locating the artifacts of a run directory."""

from dataclasses import dataclass
from pathlib import Path
from typing import Union

from core.errors import MissingArtifactError


@dataclass(frozen=True)
class RunPaths:
    """Every artifact location inside one run's output directory."""

    root: Path

    @property
    def run_config(self) -> Path:
        """Settings snapshot written by the first stage."""
        return self.root / "run_config.json"

    # Data
    @property
    def data_dir(self) -> Path:
        """Directory holding corpora and the calibration set."""
        return self.root / "data"

    @property
    def train_corpus(self) -> Path:
        return self.data_dir / "corpus_general.txt"

    @property
    def held_out_corpus(self) -> Path:
        return self.data_dir / "held_out.txt"

    @property
    def task_corpus(self) -> Path:
        return self.data_dir / "corpus_task.txt"

    @property
    def calibration(self) -> Path:
        """Calibration set JSON."""
        return self.data_dir / "calibration.json"

    # Checkpoints
    def checkpoint(self, name: str) -> Path:
        """Checkpoint directory: ``pretrained``, ``condensed`` or ``sft``."""
        return self.root / "checkpoints" / name

    @property
    def pretrained(self) -> Path:
        """Pretrained checkpoint directory."""
        return self.checkpoint("pretrained")

    @property
    def condensed(self) -> Path:
        """Condensed checkpoint directory."""
        return self.checkpoint("condensed")

    @property
    def finetuned(self) -> Path:
        """Fine-tuned checkpoint directory."""
        return self.checkpoint("sft")

    # Selection
    @property
    def selection_dir(self) -> Path:
        return self.root / "selection"

    @property
    def gate_stats(self) -> Path:
        return self.selection_dir / "gate_stats.json"

    @property
    def expert_plan(self) -> Path:
        """Kept experts per layer."""
        return self.selection_dir / "expert_plan.json"

    @property
    def layer_selection(self) -> Path:
        """Layer search trace."""
        return self.selection_dir / "layer_selection.json"

    @property
    def sweep_csv(self) -> Path:
        return self.root / "sweep.csv"

    # Training and evaluation
    def loss_curve(self, stage: str) -> Path:
        """Loss curve CSV of a training stage."""
        return self.root / "curves" / f"{stage}.csv"

    def evaluation(self, name: str) -> Path:
        """Evaluation JSON of one checkpoint."""
        return self.root / "eval" / f"{name}.json"

    @property
    def report_json(self) -> Path:
        return self.root / "report.json"

    @property
    def report_text(self) -> Path:
        return self.root / "report.txt"


def get_run_paths(out_dir: Union[str, Path]) -> RunPaths:
    """Artifact paths of the run directory ``out_dir``."""
    return RunPaths(Path(out_dir))


def require_artifact(path: Path, produced_by: str) -> Path:
    """Return ``path`` if it exists, naming the subcommand that creates it otherwise."""
    if not path.exists():
        raise MissingArtifactError(f"{path} not found; run '{produced_by}' first")
    return path
