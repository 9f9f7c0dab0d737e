"""Exception hierarchy shared by every module."""


class PredcodeError(Exception):
    """Base class for all library errors."""


class ShapeError(PredcodeError, ValueError):
    """Operands have incompatible shapes."""


class DivergenceError(PredcodeError, FloatingPointError):
    """A public operation produced NaN or Inf."""

    def __init__(self, message, layer=None):
        if layer is not None:
            message = f"{message} (layer {layer})"
        super().__init__(message)
        self.layer = layer


class ConfigError(PredcodeError, ValueError):
    """Invalid schedule or experiment configuration."""


class UsageError(PredcodeError, ValueError):
    """A call that is well-formed but not allowed in the current context."""


class ParseError(PredcodeError, ValueError):
    """Malformed binary input. ``offset`` is the byte where parsing stopped."""

    def __init__(self, message, offset):
        super().__init__(f"{message} at byte offset {offset}")
        self.offset = offset


class EngineError(PredcodeError, RuntimeError):
    """A layer worker failed inside the execution engine."""

    def __init__(self, message, layer):
        super().__init__(f"{message} (layer {layer})")
        self.layer = layer


class AuditError(PredcodeError, AssertionError):
    """Measured matmul counts disagree with the closed-form prediction."""
