"""Exception hierarchy shared by every package of the lab."""


class LabError(Exception):
    """Base class for all errors raised by the lab."""


class DimensionError(LabError, ValueError):
    """Raised when tensor shapes do not conform."""


class NonFiniteError(LabError, ValueError):
    """Raised when a NaN or Inf reaches a math operation."""


class LabelRangeError(LabError, IndexError):
    """Raised when a class label lies outside [0, classes)."""


class StateError(LabError, RuntimeError):
    """Raised when an operation is called in the wrong state."""


class ContractError(LabError, ValueError):
    """Raised when key sets or neuron sets of two inputs disagree."""


class ConfigError(LabError, ValueError):
    """Raised for invalid configuration values or unknown keys."""


class FormatError(LabError, ValueError):
    """Raised when a dataset file is malformed."""


class UnknownHeadError(LabError, KeyError):
    """Raised when a task head is looked up but was never added."""


class MetricIndexError(LabError, IndexError):
    """Raised when a learning step lies outside the accuracy matrix."""


class UndefinedMetricError(LabError, ValueError):
    """Raised when a metric is not defined for the requested task."""


class DegenerateDistributionError(LabError, ValueError):
    """Raised when a distribution cannot be normalized."""
