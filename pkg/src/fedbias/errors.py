"""Exception types shared across the package."""


class FedbiasError(Exception):
    """Base class for all package-specific errors."""


class ShapeError(FedbiasError):
    """Input dimensions do not match the model or each other."""


class EmptyInputError(FedbiasError):
    """An operation received an empty batch/dataset where it needs data."""


class ParseError(FedbiasError):
    """Malformed input file (CSV row, config file, ...)."""


class ConfigError(FedbiasError):
    """Invalid or inconsistent configuration values."""


class SplitError(FedbiasError):
    """A train/test split would leave a group empty."""


class MetricUndefinedError(FedbiasError):
    """A fairness metric is undefined on the given predictions (e.g. a
    group has no positive-label samples)."""


class PropagationError(FedbiasError):
    """Relevance propagation hit a zero denominator without a stabilizer."""


class AggregationError(FedbiasError):
    """An aggregation rule cannot run on the given inputs."""
