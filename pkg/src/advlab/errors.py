"""Exception hierarchy shared across the library."""


class AdvlabError(Exception):
    """Base class for all library errors."""


class DimensionError(AdvlabError):
    """Tensor shapes or axes incompatible with the requested operation."""


class UsageError(AdvlabError):
    """Operation invoked in a way its contract forbids."""


class NonFiniteError(AdvlabError):
    """NaN or Inf produced where finite values are required."""


class SpecError(AdvlabError):
    """Invalid classifier specification."""


class DatasetError(AdvlabError):
    """Malformed or empty dataset."""


class IngestionError(DatasetError):
    """A dataset file could not be decoded."""


class ParameterError(AdvlabError):
    """Out-of-range parameter value."""


class AttackError(AdvlabError):
    """Adversarial attack failed (e.g. non-finite gradients)."""


class TrainingError(AdvlabError):
    """Training diverged or received invalid inputs."""


class RosterError(AdvlabError):
    """Incompatible model roster for a transfer study."""


class ReportError(AdvlabError):
    """Report emission or ingestion failed."""


class ConfigError(AdvlabError):
    """Invalid run configuration; message carries the offending field path."""
