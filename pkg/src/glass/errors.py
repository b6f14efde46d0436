"""Exception hierarchy shared across the package.

The CLI maps these onto exit codes: validation-type failures exit 2,
provenance/integrity failures exit 3, I/O failures exit 1.
"""


class GlassError(Exception):
    """Base class for all package errors."""


class ValidationError(GlassError):
    """Invalid argument, configuration, or artifact contents."""


class NumericError(GlassError):
    """Non-finite value produced during a numeric computation."""


class ProvenanceError(GlassError):
    """Artifacts whose hash chain does not line up (stale or foreign inputs)."""


class StorageError(GlassError):
    """Base class for artifact file problems."""


class IntegrityError(StorageError):
    """Stored content hash does not match the file body."""


class UnsupportedVersionError(StorageError):
    """Artifact format_version not supported by this reader."""


class KindMismatchError(StorageError):
    """Artifact kind differs from what the caller expected."""


class SchemaError(StorageError):
    """Artifact body has missing, extra, or ill-typed fields."""
