"""Exception types shared across the package."""


class CopeError(Exception):
    """Base class for all package errors."""


class ConfigError(CopeError):
    """A configuration value is invalid; the message names the field."""


class ContractError(CopeError):
    """A documented precondition was violated by the caller."""


class ShapeError(CopeError):
    """Tensor dimensions do not satisfy the required divisibility/shape."""


class CapacityError(CopeError):
    """More frames/tokens than the configured maximum."""


class VocabularyError(CopeError):
    """A token id falls outside the configured vocabulary."""


class UnsupportedModalityError(CopeError):
    """The requested (domain, modality) pair has no projection head."""


class ManifestError(CopeError):
    """A corpus manifest or tensor file failed to parse or validate."""


class CompatibilityError(CopeError):
    """Checkpoint and corpus/config disagree on dimensions or vocabulary."""


class TrainingDivergedError(CopeError):
    """A loss term became non-finite during training."""
