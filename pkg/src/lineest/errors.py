"""Exceptions and warnings raised by lineest."""


class LineEstError(Exception):
    """Base class for all lineest errors."""


class TopologyError(LineEstError, ValueError):
    pass


class CyclicGraph(TopologyError):
    pass


class Disconnected(TopologyError):
    pass


class BadSlack(TopologyError):
    pass


class DimensionMismatch(LineEstError, ValueError):
    pass


class ZeroImpedance(LineEstError, ValueError):
    pass


class DegeneratePolar(LineEstError, ArithmeticError):
    """Magnitude derivative requested for a zero admittance entry."""


class MissingAngles(LineEstError, ValueError):
    pass


class MissingAngleGuess(LineEstError, ValueError):
    pass


class SingularJacobian(LineEstError, ArithmeticError):
    def __init__(self, message, rcond=float("nan")):
        super().__init__(message)
        self.rcond = rcond


class RankDeficient(SingularJacobian):
    def __init__(self, message, rank, n_cols, rcond=float("nan")):
        super().__init__(message, rcond=rcond)
        self.rank = rank
        self.n_cols = n_cols


class NoConvergence(LineEstError, RuntimeError):
    """Iteration limit reached.

    ``iterations`` and ``mismatch`` describe the final state; estimators
    also attach the partial ``report`` so callers can still inspect and
    serialize it.
    """

    def __init__(self, message, iterations=0, mismatch=float("nan"), report=None):
        super().__init__(message)
        self.iterations = iterations
        self.mismatch = mismatch
        self.report = report


class NegativeParamsWarning(RuntimeWarning):
    pass


class BoundActiveWarning(RuntimeWarning):
    pass


class AngleGuessWarning(RuntimeWarning):
    pass
