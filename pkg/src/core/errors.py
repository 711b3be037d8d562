"""Error hierarchy shared by the core modules and the CLI."""

from typing import Iterable, List


class CondenseMoEError(Exception):
    """Base class for every error raised by this package."""

    exit_code = 1


class ShapeError(CondenseMoEError, ValueError):
    """Tensor dimensions do not fit the operation."""

    exit_code = 7


class ArgumentError(CondenseMoEError, ValueError):
    """An argument is outside its documented range."""

    exit_code = 7


class InputError(CondenseMoEError, ValueError):
    """Model input (token ids, sequence length) is invalid."""

    exit_code = 7


class StateError(CondenseMoEError):
    """The object is in the wrong state for the request (e.g. layer already condensed)."""

    exit_code = 7


class NeverActivatedError(CondenseMoEError):
    """A routing expert received no tokens on the calibration data."""

    exit_code = 4

    def __init__(self, expert_indices: Iterable[int], layer_index: int = -1):
        self.expert_indices = sorted(expert_indices)
        self.layer_index = layer_index
        where = f" in layer {layer_index}" if layer_index >= 0 else ""
        super().__init__(
            f"expert(s) {self.expert_indices}{where} never activated on calibration data"
        )


class DegenerateSpectrumError(CondenseMoEError):
    """The eigenvalue spectrum cannot support a Hill estimate."""

    exit_code = 7


class NumericError(CondenseMoEError):
    """A non-finite value appeared during computation."""

    exit_code = 6

    def __init__(self, message: str, tensor_name: str = ""):
        self.tensor_name = tensor_name
        super().__init__(f"{message} (tensor: {tensor_name})" if tensor_name else message)


class TrainingDivergedError(NumericError):
    """Training loss exceeded the divergence threshold."""


class CheckpointError(CondenseMoEError):
    """Checkpoint files cannot be used."""

    exit_code = 5


class CorruptCheckpointError(CheckpointError):
    """Checkpoint content does not match its manifest."""


class CheckpointVersionError(CheckpointError):
    """Checkpoint manifest has an unknown version."""


class MissingArtifactError(CondenseMoEError):
    """A file a stage depends on does not exist."""

    exit_code = 3


class ConfigError(CondenseMoEError):
    """One or more configuration values are invalid."""

    exit_code = 2

    def __init__(self, problems: List[str]):
        self.problems = list(problems)
        super().__init__("invalid configuration: " + "; ".join(self.problems))
