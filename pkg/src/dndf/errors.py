"""Exception hierarchy shared across the package."""


class DNDFError(Exception):
    """Base class for all package errors."""


class InvalidInputError(DNDFError, ValueError):
    pass


class ShapeError(DNDFError, ValueError):
    pass


class ConfigError(DNDFError, ValueError):
    """Bad configuration value or config file contents."""

    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class DataError(DNDFError, ValueError):
    pass


class IngestionError(DataError):
    """Audio file could not be decoded."""


class UsageError(DNDFError, RuntimeError):
    pass


class VocabularyError(DNDFError, ValueError):
    pass


class LoadError(DNDFError, ValueError):
    """Model archive could not be loaded."""


class BadMagicError(LoadError):
    pass


class VersionError(LoadError):
    pass


class TruncationError(LoadError):
    pass


class ChecksumError(LoadError):
    pass


class InvariantError(LoadError):
    pass
