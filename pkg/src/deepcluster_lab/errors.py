"""Exception types shared across the package."""


class DeepClusterError(Exception):
    """Base class for all errors raised by deepcluster_lab."""


class ConfigError(DeepClusterError, ValueError):
    """Invalid or inconsistent configuration."""


class DataFormatError(DeepClusterError, ValueError):
    """A dataset or binary file does not match its declared format."""


class DatasetNotFoundError(DeepClusterError, FileNotFoundError):
    """Dataset files are missing from the data root."""


class NonFiniteError(DeepClusterError, FloatingPointError):
    """NaN or Inf appeared in activations, gradients, or features."""
