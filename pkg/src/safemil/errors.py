"""Exception hierarchy shared by every module."""


class SafeMilError(Exception):
    """Base class for all package errors."""


class ConfigError(SafeMilError, ValueError):
    """Invalid sizes, ranges or configuration values."""


class ContractError(SafeMilError, ValueError):
    """A caller violated a function precondition (shape mismatch etc.)."""


class InfeasibleError(SafeMilError):
    """No policy satisfies the cost threshold."""


class GenerationError(SafeMilError):
    """Dataset generation could not satisfy the requested configuration."""


class TrainingError(SafeMilError, RuntimeError):
    """Non-finite loss or gradient during optimisation."""


class ParseError(SafeMilError, ValueError):
    """Malformed dataset or checkpoint file."""

    def __init__(self, message: str, path=None, line: int | None = None):
        self.path = path
        self.line = line
        where = ""
        if path is not None:
            where = f"{path}"
            if line is not None:
                where += f":{line}"
            where += ": "
        super().__init__(where + message)
