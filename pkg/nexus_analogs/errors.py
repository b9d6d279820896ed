"""Exception hierarchy shared by every stage of the projection pipeline.

Each exception class knows the exit code the command-line interface maps it
to, so that `cli` never has to inspect error messages.
"""

from os import PathLike
from typing import Any

__all__ = ('ConfigError', 'DataError', 'InputError', 'NexusError',
           'NumericError', 'ParseError', 'PrerequisiteError',
           'UnknownRegionWarning')


class NexusError(RuntimeError):
    """Base class for all errors raised by `nexus_analogs`."""

    exit_code: int = 5

    def to_dict(self) -> dict[str, Any]:
        return {'error': type(self).__name__, 'message': str(self),
                'exit_code': self.exit_code}


class InputError(NexusError):
    """An input file or a named entity is missing or cannot be read."""

    exit_code = 2


class ParseError(InputError):
    """A row of an input table violates its schema or record invariants."""

    def __init__(self, reason: str, *, source: str = '<stream>',
                 line: int | None = None):
        if line is None:
            message = f'{source}: {reason}'
        else:
            message = f'{source}:{line}: {reason}'
        super().__init__(message)
        self.reason = reason
        self.source = source
        self.line = line

    def to_dict(self) -> dict[str, Any]:
        return {**super().to_dict(), 'source': self.source,
                'line': self.line, 'reason': self.reason}


class ConfigError(InputError):
    """Configuration value is out of its admissible range."""


class DataError(NexusError):
    """Input data do not satisfy a precondition of an operation."""

    exit_code = 5


class NumericError(DataError):
    """A computation is numerically undefined (zero variance, zero mean)."""


class PrerequisiteError(NexusError):
    """An upstream artifact required by a command does not exist."""

    exit_code = 4

    def __init__(self, path: PathLike | str, hint: str = ''):
        message = f'Missing prerequisite artifact: {path}.'
        if hint:
            message = f'{message} {hint}'
        super().__init__(message)
        self.path = str(path)

    def to_dict(self) -> dict[str, Any]:
        return {**super().to_dict(), 'path': self.path}


class UnknownRegionWarning(UserWarning):
    """A region code is outside NOAA climate regions or a region has no
    usable city.
    """
