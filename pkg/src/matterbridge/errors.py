"""Exception types shared across the package."""


class MatterBridgeError(Exception):
    """Base class for all errors raised by matterbridge."""


class ShapeError(MatterBridgeError, ValueError):
    """Operand extents are incompatible with the requested operation."""


class ContractError(MatterBridgeError, ValueError):
    """A caller violated an operation's precondition."""


class ValidationError(MatterBridgeError, ValueError):
    """Input data failed a domain invariant."""


class ParseError(MatterBridgeError, ValueError):
    """Malformed textual input.

    ``line`` is 1-based when known, else None.
    """

    def __init__(self, message, line=None, column=None):
        super().__init__(message)
        self.line = line
        self.column = column

    def __str__(self):
        base = super().__str__()
        if self.line is not None:
            pos = f"line {self.line}"
            if self.column is not None:
                pos += f", column {self.column}"
            return f"{base} ({pos})"
        return base


class TokenizationError(MatterBridgeError, ValueError):
    """Text contains a symbol outside the closed vocabulary."""


class ConvergenceError(MatterBridgeError, RuntimeError):
    """An iterative solver failed to reach its threshold.

    Carries the last residual observed.
    """

    def __init__(self, message, residual=None):
        super().__init__(message)
        self.residual = residual


class CheckpointError(MatterBridgeError, RuntimeError):
    """A checkpoint file is missing, truncated, or inconsistent."""
