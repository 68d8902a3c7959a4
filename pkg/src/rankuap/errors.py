"""Exception hierarchy shared across the package."""


class RankUapError(Exception):
    """Base class for all package-specific errors."""


class ShapeError(RankUapError):
    """Tensor shapes or dimensions are incompatible with the operation."""


class DomainError(RankUapError):
    """Input values lie outside the operation's domain (e.g. negative GeM input)."""


class ConfigurationError(RankUapError):
    """Invalid configuration, arguments, or a degenerate setup."""


class FormatError(RankUapError):
    """A serialized container (checkpoint, perturbation file) is corrupt or mismatched."""


class IngestionError(RankUapError):
    """A dataset folder could not be ingested; the message itemizes the problems."""


class MetricError(RankUapError):
    """A retrieval metric is undefined for the given inputs."""


class OracleError(RankUapError):
    """A ranking oracle failed to answer or returned a malformed list."""
