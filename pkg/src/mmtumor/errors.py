"""Exception types shared across the pipeline, with their CLI exit codes."""

from __future__ import annotations


class PipelineError(Exception):
    """Base class for errors raised by this package."""


class ConfigError(PipelineError):
    """Invalid or inconsistent run configuration / CLI usage."""


class DataError(PipelineError):
    """Dataset loading, schema, balancing, scaling, or partitioning failure."""


class TrainingError(PipelineError):
    """Training could not run (empty fold, incompatible batch settings)."""


class DivergenceError(PipelineError):
    """Training produced a non-finite loss."""

    def __init__(self, epoch: int, value: float):
        self.epoch = epoch
        self.value = value
        super().__init__(f"non-finite loss ({value!r}) at epoch {epoch}")


class EvaluationError(PipelineError):
    """Checkpoint/dataset mismatch or empty evaluation set."""


class ShapeError(ValueError):
    """A tensor dimension does not match the model spec."""


# Exit codes: 0 success, 1 usage/config, 2 data, 3 training divergence.
def exit_code_for(exc: BaseException) -> int:
    if isinstance(exc, DivergenceError):
        return 3
    if isinstance(exc, DataError):
        return 2
    return 1
