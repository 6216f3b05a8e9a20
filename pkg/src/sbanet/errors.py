"""Exception taxonomy shared by all sbanet modules."""


class Error(Exception):
    """Base class for all sbanet errors."""


class ShapeError(Error):
    """Tensor dimensions incompatible with an operation."""


class ConfigError(Error):
    """Invalid or inconsistent configuration value."""


class ContractError(Error):
    """A documented precondition was violated by the caller."""


class UsageError(Error):
    """API or CLI misuse (e.g. consuming a gradient tape twice)."""


class DataError(Error):
    """Invalid data content (bad token id, non-binary mask, ...)."""


class FormatError(Error):
    """Malformed serialized container; message carries the byte offset."""


class GenerationError(Error):
    """Synthetic scene generation could not satisfy its constraints."""


class NumericError(Error):
    """Non-finite value encountered during training or checking."""
