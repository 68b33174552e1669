"""Exception hierarchy shared by the library and the command line."""


class RevDistillError(Exception):
    """Base class for all toolkit errors."""

    exit_code = 1


class ConfigError(RevDistillError):
    """Invalid configuration, unknown backbone, unusable weight file."""

    exit_code = 1


class DataError(RevDistillError):
    """Missing or malformed dataset, unreadable image."""

    exit_code = 2


class NumericError(RevDistillError):
    """Non-finite loss or anomaly map during training or inference."""

    exit_code = 3


class ShapeError(RevDistillError, ValueError):
    """Tensor shapes do not match what a component expects."""

    exit_code = 1


class MetricError(RevDistillError, ValueError):
    """A metric is undefined for the given inputs (e.g. a single class)."""

    exit_code = 2
