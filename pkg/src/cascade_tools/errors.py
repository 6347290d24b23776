"""Exception hierarchy shared by the toolkit.

Validation-type errors (bad parameters, malformed config or tag files) map to
CLI exit status 2; analysis errors (too little data, failed fits, undefined
estimates) map to exit status 3.
"""

from typing import Any


class CascadeError(Exception):
    """Base class for all toolkit errors."""


class ValidationError(CascadeError, ValueError):
    """A value violates a domain constraint."""

    def __init__(self, field: str, message: str) -> None:
        self.field = field
        super().__init__(f"{field}: {message}")


class ConfigError(ValidationError):
    """A run configuration could not be parsed."""

    def __init__(self, key: str, line: int | None, message: str) -> None:
        self.key = key
        self.line = line
        where = f"line {line}, " if line is not None else ""
        CascadeError.__init__(self, f"{where}key '{key}': {message}")
        self.field = key


class FormatError(CascadeError, ValueError):
    """A tag file is malformed."""

    def __init__(self, message: str, offset: int) -> None:
        self.offset = offset
        super().__init__(f"{message} (byte offset {offset})")


class AnalysisError(CascadeError, RuntimeError):
    """An estimator or fit could not produce a result."""


class InsufficientDataError(AnalysisError):
    """Not enough data to form an estimate."""


class UndefinedEstimateError(AnalysisError):
    """The estimate is mathematically undefined for the given inputs."""


class FitError(AnalysisError):
    """A fit failed to converge or was ill-posed."""

    def __init__(self, message: str, diagnostics: dict[str, Any] | None = None) -> None:
        self.diagnostics = diagnostics or {}
        detail = ", ".join(f"{k}={v}" for k, v in self.diagnostics.items())
        super().__init__(f"{message} ({detail})" if detail else message)


class IncompleteReportError(AnalysisError):
    """Mandatory figures of merit are missing from a report."""

    def __init__(self, missing: list[str]) -> None:
        self.missing = missing
        if missing:
            super().__init__(f"Missing mandatory fields: {', '.join(missing)}")
        else:
            super().__init__("No estimates supplied")
