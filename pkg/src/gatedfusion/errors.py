"""Exception hierarchy shared by every module.

The CLI maps these onto exit codes, so each class carries one.
"""


class GatedFusionError(Exception):
    exit_code = 3


class ConfigError(GatedFusionError, ValueError):
    exit_code = 1


class ContractError(GatedFusionError, ValueError):
    """A caller broke a documented precondition."""

    exit_code = 3


class DimensionError(ContractError):
    pass


class LengthError(ContractError):
    """Sequence longer than the model's ``max_len``."""

    exit_code = 2


class DataError(GatedFusionError):
    exit_code = 2


class ParseError(DataError):
    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class FormatError(DataError):
    def __init__(self, message, offset=None):
        self.offset = offset
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
