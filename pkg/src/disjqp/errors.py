"""Exception types shared across the package."""


class DisjointQPError(Exception):
    """Base class for solver and model errors."""


class DimensionError(DisjointQPError, ValueError):
    """Array shapes do not agree; ``block`` names the offending piece."""

    def __init__(self, block: str, expected, got):
        self.block = block
        self.expected = expected
        self.got = got
        super().__init__(f"{block}: expected shape {expected}, got {got}")


class RankDeficientError(DisjointQPError, ValueError):
    pass


class NotPositiveDefiniteError(DisjointQPError, ValueError):
    pass


class SingularKKTError(DisjointQPError):
    def __init__(self, rcond: float):
        self.rcond = rcond
        super().__init__(
            f"KKT matrix is numerically singular (rcond={rcond:.3e}); "
            "check that A has full row rank and P is positive definite")


class InfeasibleStartError(DisjointQPError, ValueError):
    pass


class ConvergenceError(DisjointQPError):
    """Iteration budget exhausted; the partial trace is attached."""

    def __init__(self, message: str, trace=None, point=None):
        super().__init__(message)
        self.trace = trace
        self.point = point


class InvariantViolation(DisjointQPError, AssertionError):
    pass


class ModelBlowUpError(DisjointQPError, FloatingPointError):
    def __init__(self, time: float):
        self.time = time
        super().__init__(f"non-finite model fields at t={time:g} s")
