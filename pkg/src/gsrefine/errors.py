"""Exception types shared across the pipeline."""


class GsRefineError(Exception):
    """Base class for all errors raised by this package."""


class ParseError(GsRefineError):
    """Malformed input file; message carries path and line number."""


class MeshError(GsRefineError):
    """Mesh violates a structural invariant (indices, manifoldness, ...)."""


class CameraError(GsRefineError):
    """Invalid camera calibration (rank-deficient P, bad focal length, ...)."""


class ImageError(GsRefineError):
    """Unreadable, truncated, or unsupported image file."""


class BehindCameraError(GsRefineError):
    """Projection requested for a point at nonpositive camera depth."""


class StaleCacheError(GsRefineError):
    """Gradient called with a cache from a different displacement state."""


class NumericalError(GsRefineError):
    """Non-finite energy or gradient encountered during optimization."""


class ConfigError(GsRefineError):
    """Unknown key or malformed value in a run configuration."""
