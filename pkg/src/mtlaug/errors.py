"""Exception hierarchy shared across the package."""


class MtlAugError(Exception):
    """Base class for all package errors."""


class ValidationError(MtlAugError):
    """An input value violates a documented precondition or invariant."""


class ParseError(MtlAugError):
    """A file could not be parsed; message names the offending location."""


class FormatError(MtlAugError):
    """A binary payload is not in a supported format."""


class ProtocolError(MtlAugError):
    """An evaluation protocol cannot run on the given data."""


class ShapeError(MtlAugError):
    """Operands of a tensor op have incompatible shapes."""


class UsageError(MtlAugError):
    """An API was called in an unsupported way."""


class ConfigError(MtlAugError):
    """An experiment configuration is inconsistent; message carries the field path."""


class IntegrityError(MtlAugError):
    """A stored artifact failed its checksum."""


class ConfigMismatchError(MtlAugError):
    """A checkpoint was produced under a different configuration."""
