"""Exception types shared across the toolkit."""


class SpgFuseError(Exception):
    """Base class for all toolkit errors."""


class ParseError(SpgFuseError):
    """Malformed input data (CSV, PGM, JSON payloads)."""


class FormatError(SpgFuseError):
    """Binary container violates its file-format contract."""


class ValidationError(SpgFuseError):
    """A value or object violates a documented invariant."""


class ShapeError(ValidationError):
    """Tensor shape mismatch, tagged with the layer that rejected it."""

    def __init__(self, layer: str, message: str):
        super().__init__(f"{layer}: {message}")
        self.layer = layer


class ConfigError(SpgFuseError):
    """Mutually inconsistent or out-of-range configuration."""


class GenerationError(SpgFuseError):
    """Synthetic scene construction failed (e.g. placement infeasible)."""
