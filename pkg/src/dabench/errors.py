"""Exception types shared across the toolkit."""


class DabenchError(Exception):
    """Base class for all errors raised by this package."""


class ShapeError(DabenchError, ValueError):
    """Mismatched tensor shapes (e.g. feature dimension of the two domains)."""


class DegenerateInputError(DabenchError, ValueError):
    """Input too small for the estimator (e.g. covariance of a single row)."""


class NumericError(DabenchError, RuntimeError):
    """Non-finite values or failed linear algebra."""


class ConfigError(DabenchError, ValueError):
    """Invalid experiment configuration; the message names the field."""


class UnsupportedLayerError(DabenchError, ValueError):
    """Layer cannot serve as a heatmap source (no spatial activations)."""


class InsufficientSamplesError(DabenchError, ValueError):
    """Too few samples for a statistical estimate (e.g. the domain probe)."""


class RunCollisionError(DabenchError, RuntimeError):
    """Output directory already holds a run with the same fingerprint/seed."""
