"""Exception taxonomy shared across the package."""


class InvalidInputError(ValueError):
    """An argument violates a documented precondition."""


class OracleFailureError(RuntimeError):
    """A finite-difference probe produced a non-finite evaluation."""


class InsufficientHistoryError(ValueError):
    """A windowed statistic was requested with too few recorded entries."""


class FormatError(ValueError):
    """A data file is malformed. Carries the offending file and byte offset."""

    def __init__(self, path, offset, message):
        self.path = str(path)
        self.offset = offset
        super().__init__(f"{self.path} @ byte {offset}: {message}")


class ConfigError(ValueError):
    """A run configuration is malformed. Carries the source line when known."""

    def __init__(self, message, line=None):
        self.line = line
        where = f"line {line}: " if line is not None else ""
        super().__init__(f"{where}{message}")
