"""Exception hierarchy.

Everything that signals bad input derives from :class:`ValidationError` so the
CLI can map it to exit code 1; I/O problems stay as :class:`OSError`.
"""


class ValidationError(ValueError):
    """Input violates a documented precondition."""


class FormatError(ValidationError):
    """Malformed HSC container or sidecar file."""


class ConsistencyError(ValidationError):
    """Header fields disagree with each other."""


class TruncationError(ValidationError):
    """Payload shorter or longer than the header promises."""


class GenerationError(ValidationError):
    """Synthetic scene cannot satisfy its configuration."""


class RangeError(ValidationError):
    """Wavelength outside the dictionary's supported range."""


class ShapeError(ValidationError):
    """Array shapes are incompatible."""


class NoMaskError(ValidationError):
    """No valid mask contains the prompt point."""


class TaskError(ValidationError):
    """A downstream task cannot be completed."""


class RegistrationError(ValidationError):
    """Bi-temporal inputs are not spatially registered."""


class EvaluationError(ValidationError):
    """Metric is undefined for the given inputs."""


class EngineError(ValidationError):
    """Mask generation engine failure."""


class DerivationError(ValidationError):
    """Key wavelength derivation received an empty pool."""


class TrainingError(RuntimeError):
    """Training diverged (non-finite loss)."""
