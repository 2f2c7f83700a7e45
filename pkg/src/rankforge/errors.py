"""Exception hierarchy. Each class carries the CLI exit code for its category."""


class RankforgeError(Exception):
    category = "internal"
    exit_code = 5


class UsageError(RankforgeError):
    category = "usage"
    exit_code = 2


class InputError(RankforgeError):
    """Bad or malformed input data (files, texts, ids)."""

    category = "input"
    exit_code = 3


class ParseError(InputError):
    def __init__(self, message, line_no=None):
        if line_no is not None:
            message = f"line {line_no}: {message}"
        super().__init__(message)
        self.line_no = line_no


class ValidationError(InputError):
    pass


class ConfigError(InputError):
    category = "config"


class StalenessError(InputError):
    category = "stale"


class NumericError(RankforgeError):
    category = "numeric"
    exit_code = 4


class ContractError(RankforgeError):
    category = "contract"
    exit_code = 5


class DimensionError(ContractError, ValueError):
    category = "dimension"
