"""Exception hierarchy shared by every module of the lab.

Each error also derives from the closest builtin so callers that only know the
builtin (``ValueError``, ``LookupError``...) keep working.
"""
from typing import Optional


class LabError(Exception):
    """Base class for all contract violations raised by the lab."""


class ConfigurationError(LabError, ValueError):
    """Invalid configuration, layout or scheme combination."""


class ShapeError(LabError, ValueError):
    """Tensor dimensions do not agree."""


class DegenerateRowError(LabError, ValueError):
    """An attention row has every key masked."""


class NonFiniteError(LabError, ArithmeticError):
    """NaN or Inf appeared where only finite values are allowed."""


class ContractError(LabError, ValueError):
    """A documented precondition was violated by the caller."""


class OracleInvalidError(LabError, RuntimeError):
    """The finite-difference oracle was given a non-deterministic function."""


class PositionIndexError(LabError, IndexError):
    """A token position lies outside the video segment."""


class TrainingError(LabError, RuntimeError):
    """Training diverged."""

    def __init__(self, message: str, seed: Optional[int] = None, step: Optional[int] = None):
        super().__init__(f"{message} (seed={seed}, step={step})")
        self.seed = seed
        self.step = step


class FrozenWeightError(LabError, RuntimeError):
    """A base parameter changed during fine-tuning."""


class UnknownConditionError(LabError, LookupError):
    """A condition identifier is not present in the condition table."""


class SceneSpecError(LabError, ValueError):
    """A scene specification cannot be rendered."""


class FlowParameterError(LabError, ValueError):
    """Optical-flow parameters are invalid for the given frames."""


class InsufficientFramesError(LabError, ValueError):
    """A video has too few frames for a frame-pair metric."""


class UndefinedScoreError(LabError, ValueError):
    """A score has no defined value for the given input."""


class IngestionError(LabError, IOError):
    """A frame file, manifest or checkpoint could not be read."""


class NoInputError(LabError, ValueError):
    """A command was given nothing to work on."""


class AblationError(LabError, RuntimeError):
    """At least one ablation leg failed; the partial report was written."""
