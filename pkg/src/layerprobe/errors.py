"""Exception hierarchy.

Every error raised on purpose by the package derives from ``LayerProbeError``
and carries the process exit code the command line maps it to.
"""


class LayerProbeError(Exception):
    exit_code = 1


class ValidationError(LayerProbeError):
    """Bad configuration, missing inputs, or mismatched run artifacts."""

    exit_code = 1


class ConfigurationError(ValidationError):
    """Invalid hyperparameters or an inconsistent model/attack description."""


class PreconditionError(ValidationError):
    """An operation was called on inputs it does not accept."""


class DataError(LayerProbeError):
    exit_code = 2


class FormatError(DataError):
    """A file did not match its binary or text layout."""


class DimensionError(DataError, ValueError):
    """Tensor shapes do not conform."""


class TargetIndexError(DataError, IndexError):
    """A class index or neuron id lies outside its valid range."""


class NumericError(LayerProbeError, ArithmeticError):
    """A computation produced NaN or Inf."""

    exit_code = 3
