"""Exception types shared across the package."""


class SplatError(Exception):
    """Base class for all splatfield errors."""


class ParseError(SplatError):
    """A file could not be parsed (bad magic, missing property, truncated payload, ...)."""


class ValidationError(SplatError):
    """Inputs violate a documented precondition (dimension mismatch, bad index, ...)."""


class EmptySceneError(SplatError):
    """A scene with zero Gaussians was loaded or would be written."""


class CapacityError(SplatError):
    """More orthogonal identity codes requested than the embedding dimension allows."""


class DivergenceError(SplatError):
    """Identity training produced a non-finite loss."""
