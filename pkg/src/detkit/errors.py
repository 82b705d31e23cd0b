"""Exception types shared across the toolkit."""


class DetkitError(Exception):
    """Base class for all detkit errors."""


class InvalidArgumentError(DetkitError, ValueError):
    """An argument violates a documented precondition."""


class ParseError(DetkitError, ValueError):
    """A text file could not be parsed; carries the path and 1-based line."""

    def __init__(self, path, line: int | None, message: str):
        self.path = str(path)
        self.line = line
        where = f"{self.path}:{line}" if line is not None else self.path
        super().__init__(f"{where}: {message}")


class PpmFormatError(DetkitError, ValueError):
    """A PPM file is malformed or uses an unsupported variant."""


class DivergedError(DetkitError, RuntimeError):
    """An optimisation run produced non-finite values."""

    def __init__(self, step: int, message: str = ""):
        self.step = step
        super().__init__(message or f"diverged at step {step}")
