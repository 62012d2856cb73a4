"""Exception hierarchy shared by every stage of the pipeline."""


class XlrrError(Exception):
    """Base class; the CLI turns any of these into a nonzero exit."""


class FormatError(XlrrError):
    """A record in an input file could not be parsed."""

    def __init__(self, path, lineno: int, message: str):
        self.path = str(path)
        self.lineno = lineno
        super().__init__(f"{self.path}:{lineno}: {message}")


class DuplicateIdError(XlrrError):
    pass


class UnknownIdError(XlrrError):
    pass


class BudgetError(XlrrError):
    """A prompt does not fit the model context after truncation."""


class TransportError(XlrrError):
    """A provider call failed after all retries."""

    def __init__(self, message: str, status: int | None = None):
        self.status = status
        super().__init__(message if status is None else f"{message} (last status {status})")
