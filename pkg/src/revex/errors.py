"""
Exception hierarchy. Library code raises these, the CLI turns them
into a coloured message and the matching exit code.
"""

from pathlib import Path

from revex import constants


class RevexError(Exception):
    """Base class for every error raised by revex."""

    exit_code = constants.DATA_ERROR


class InvalidInputError(RevexError, ValueError):
    """A signal, shape or geometry does not satisfy an operation's precondition."""


class CorpusError(RevexError):
    """The speaker store cannot satisfy a scene request."""


class ManifestError(RevexError):
    """A manifest is malformed or references missing files."""


class MeasurementError(RevexError):
    """A measurement (T60, STOI) cannot be computed from the given signal."""


class SceneTooShortError(RevexError):
    """Scene is shorter than the minimum crop; callers skip it."""


class ConfigError(RevexError):
    """Unknown key or wrong value type in a configuration file."""

    exit_code = constants.USAGE_ERROR


class ContractError(RevexError):
    """Loss inputs are missing outputs or role pairs."""

    exit_code = constants.DATA_ERROR


class NumericalError(RevexError):
    """Training produced a non-finite loss."""

    exit_code = constants.NUMERICAL_ERROR

    def __init__(self, msg: str, dump_path: Path | None = None) -> None:
        super().__init__(msg)
        self.dump_path = dump_path
