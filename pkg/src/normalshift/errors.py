"""Exception hierarchy for the normalshift package."""


class NormalShiftError(Exception):
    """Base class for all package errors."""


class ExprSyntaxError(NormalShiftError):
    """Source text does not match the expression grammar."""

    def __init__(self, message, offset, expected=()):
        super().__init__(f"{message} at offset {offset}"
                         + (f" (expected {', '.join(expected)})" if expected else ""))
        self.offset = offset
        self.expected = tuple(expected)


class UnknownFunctionError(ExprSyntaxError):
    """Call to a function name outside the fixed function set."""


class ArityError(ExprSyntaxError):
    """Function called with the wrong number of arguments."""


class UnboundVariableError(NormalShiftError):
    """Evaluation environment is missing a referenced variable."""


class DomainEvalError(NormalShiftError):
    """Evaluation left the mathematical domain of some subexpression."""

    def __init__(self, message, subexpr):
        super().__init__(f"{message} in subexpression '{subexpr}'")
        self.subexpr = subexpr


class MetricError(NormalShiftError):
    """Metric is not symmetric positive-definite where required."""


class FrameError(NormalShiftError):
    """Degenerate tangent frame on a hypersurface."""


class ZeroSpeedError(NormalShiftError):
    """Velocity modulus below the structural threshold."""


class VanishingDerivativeError(NormalShiftError):
    """Speed derivative of a defining scalar function vanished."""


class IntegrationAborted(NormalShiftError):
    """Trajectory integration stopped early; carries the partial result."""

    def __init__(self, message, partial=None, step=None, time=None):
        super().__init__(message)
        self.partial = partial
        self.step = step
        self.time = time


class PathError(NormalShiftError):
    """Invalid path specification or endpoint mismatch."""


class ContinuationError(NormalShiftError):
    """Parameter continuation failed (left the positive axis, or the
    field could not be evaluated along the path)."""

    def __init__(self, message, t=None, point=None):
        ctx = ""
        if t is not None:
            ctx = f" at path parameter t={t:.6g}"
            if point is not None:
                ctx += f", x={tuple(float(c) for c in point)}"
        super().__init__(message + ctx)
        self.t = t
        self.point = point


class BracketingError(NormalShiftError):
    """Root bracketing failed; the target value is out of reach."""


class TableError(NormalShiftError):
    """Monotone sample table is invalid or queried outside its range."""


class DeckInvarianceError(NormalShiftError):
    """Field is not invariant under the deck transformation group."""


class CompatibilityError(NormalShiftError):
    """Mixed-path consistency defect above threshold: the covector data
    is not closed, or the surface loop carries a nontrivial twist."""


class PositivityError(NormalShiftError):
    """A quantity required to be positive was not."""


class ConfigError(NormalShiftError):
    """Scenario file could not be parsed."""

    def __init__(self, message, line, col):
        super().__init__(f"{message} (line {line}, column {col})")
        self.line = line
        self.col = col


class ScenarioError(NormalShiftError):
    """Scenario is syntactically valid but semantically inconsistent."""

    def __init__(self, message, path):
        super().__init__(f"{path}: {message}")
        self.path = path
