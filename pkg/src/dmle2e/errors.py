"""Exception taxonomy shared across the toolkit.

The CLI maps these onto process exit codes: config/argument problems -> 2,
numeric failures -> 3, acceptance-bound violations -> 4.
"""


class DmlError(Exception):
    """Base class for all toolkit errors."""


class InvalidArgumentError(DmlError, ValueError):
    """An argument violates a documented precondition."""


class DegenerateInputError(DmlError, ValueError):
    """Input is structurally valid but carries no usable information
    (all-zero signal, constant waveform, collapsed constellation)."""


class NumericError(DmlError, ArithmeticError):
    """A numeric procedure failed: divergence, NaN, non-convergence."""


class TrainingError(NumericError):
    """Training diverged. Carries the last finite checkpoint when available."""

    def __init__(self, message, checkpoint=None):
        super().__init__(message)
        self.checkpoint = checkpoint


class FormatError(DmlError, ValueError):
    """A serialized artifact is malformed, truncated or has an
    unsupported version."""


class MissingArtifactError(DmlError, FileNotFoundError):
    """A pipeline stage needs an artifact that does not exist yet.
    ``producer`` names the command that creates it."""

    def __init__(self, path, producer):
        super().__init__(f"missing artifact {path}; run `dmle2e {producer}` first")
        self.path = path
        self.producer = producer


class OutOfRangeError(DmlError, ValueError):
    """A requested level or coordinate is never reached by the data."""
