import contextvars
from contextlib import contextmanager
from typing import Iterator, Optional


_CURRENT_DATA_SOURCE: contextvars.ContextVar[Optional[str]] = contextvars.ContextVar(
    "switchfit_current_data_source", default=None
)


def _format_with_context(
    message: str,
    *,
    source: Optional[str] = None,
    line: Optional[int] = None,
) -> str:
    source = source if source is not None else _CURRENT_DATA_SOURCE.get()
    if source is None and line is None:
        return message

    details = []
    if source is not None and line is not None:
        details.append(f"Location: {source}, line {line}")
    elif source is not None:
        details.append(f"Location: {source}")
    else:
        details.append(f"Location: line {line}")
    return f"{message}\n" + "\n".join(details)


@contextmanager
def data_source_context(source: str) -> Iterator[None]:
    token = _CURRENT_DATA_SOURCE.set(source)
    try:
        yield
    finally:
        _CURRENT_DATA_SOURCE.reset(token)


class SwitchFitError(Exception):
    """Base error."""


class ConfigError(SwitchFitError):
    """Raised when options or a config document are invalid."""

    def __init__(self, message: str, *, field: Optional[str] = None):
        self.field = field
        self.detail = message
        if field is not None:
            message = f"Invalid field '{field}': {message}"
        super().__init__(message)


class DataError(SwitchFitError):
    """Raised when a trajectory or a data file is malformed."""

    def __init__(self, message: str, *, line: Optional[int] = None):
        self.line = line
        super().__init__(_format_with_context(message, line=line))


class DomainError(SwitchFitError, ValueError):
    """Raised when an input leaves the domain of a family or parameters are invalid."""


class NumericalError(SwitchFitError):
    """Raised when a computation produces a non-finite value."""

    def __init__(self, message: str, *, t: Optional[int] = None):
        self.t = t
        if t is not None:
            message = f"{message} (time index {t})"
        super().__init__(message)


class MonotonicityError(NumericalError):
    """Raised when an outer iteration increases the regularized NLL."""


class EnumerationLimitError(SwitchFitError):
    """Raised when a brute-force oracle would enumerate too many mode sequences."""


class SolverWarning(UserWarning):
    """Emitted when an inner solve stops before reaching its tolerance."""
