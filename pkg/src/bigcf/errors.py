"""Exception hierarchy; each class maps to a CLI exit code."""


class BigcfError(Exception):
    exit_code = 1


class ConfigError(BigcfError, ValueError):
    """Bad configuration, shape or argument."""

    exit_code = 1


class ContractError(BigcfError, RuntimeError):
    """A caller broke an API precondition."""

    exit_code = 1


class DataError(BigcfError, ValueError):
    exit_code = 2


class ParseError(DataError):
    def __init__(self, path, line_no: int, msg: str):
        super().__init__(f"{path}, line {line_no}: {msg}")
        self.path = path
        self.line_no = line_no


class PersistenceError(BigcfError, IOError):
    exit_code = 2


class NumericError(BigcfError, ArithmeticError):
    """Non-finite loss or gradient during training."""

    exit_code = 3

    def __init__(self, msg: str, last_good=None):
        super().__init__(msg)
        self.last_good = last_good
