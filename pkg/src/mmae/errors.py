"""Exception types shared across the package."""


class MmaeError(Exception):
    """Base class for all package-specific errors."""


class ShapeError(MmaeError, ValueError):
    """Tensor or signal dimensions do not line up."""


class ConfigError(MmaeError, ValueError):
    """A configuration value is invalid or inconsistent."""


class ContractError(MmaeError, ValueError):
    """An operation was called in a way that violates its contract."""


class FormatError(MmaeError, ValueError):
    """A file does not parse as the expected on-disk format."""


class CorruptionError(MmaeError, ValueError):
    """A file parses but its contents contradict its own header."""


class MetricError(MmaeError, ValueError):
    """A requested metric is undefined for the given inputs."""


class ValidationError(MmaeError, ValueError):
    """Input data violates a pipeline precondition."""
