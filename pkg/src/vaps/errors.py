"""Exception types shared across the package."""


class VapsError(Exception):
    """Base class for all package errors."""


class ShapeError(VapsError):
    """Operands have incompatible or unsupported shapes."""


class NonFiniteError(VapsError):
    """A forward operation produced NaN or Inf."""


class DegenerateInputError(VapsError):
    """Input is degenerate for the requested operation (e.g. zero-norm vector)."""


class ConfigError(VapsError):
    """Invalid configuration; message names the offending field."""


class FormatError(VapsError):
    """On-disk artifact violates its binary or JSON contract."""


class DivergenceError(VapsError):
    """Training produced a non-finite loss; carries a diagnostic state dump."""

    def __init__(self, message: str, diagnostics: dict | None = None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}
