"""Exception hierarchy shared by every module.

``ContractError`` and ``ValidationError`` map to CLI exit code 2; anything
else that escapes a command maps to exit code 1.
"""


class DermensError(Exception):
    """Base class for all package errors."""


class ContractError(DermensError, ValueError):
    """An operation was called with inputs that violate its preconditions."""


class ValidationError(DermensError, ValueError):
    """External data (manifest, config, feature file) failed validation."""


class DecodeError(ValidationError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


class EmptyMaskError(ContractError):
    """A mask has no foreground pixel at the requested threshold."""


class ManifestError(ValidationError):
    def __init__(self, message: str, line: int | None = None):
        prefix = f"line {line}: " if line is not None else ""
        super().__init__(prefix + message)
        self.line = line
