"""Exception types shared across the package.

Argument errors (wrong shapes, mismatched lengths, bad flags) raise plain
ValueError. DomainError marks well-formed arguments with invalid values
(non-positive labels, non-finite features). The remaining types map onto the
CLI exit codes: ConfigError -> 2, DependencyError -> 3, DataError -> 4.
"""


class AvCountError(Exception):
    """Base class for pipeline-level failures."""


class ConfigError(AvCountError):
    """Invalid or inconsistent run configuration."""


class DependencyError(AvCountError):
    """A required trained artifact (weights, sidecar, table) is missing."""


class DataError(AvCountError):
    """Dataset-level failure: unreadable media or malformed manifest."""


class ManifestError(DataError):
    """Manifest parse or validation failure; message carries the line number."""


class MediaError(DataError):
    """Media referenced by a record cannot be decoded."""


class DomainError(ValueError):
    """Value outside the mathematical domain of an operation."""
