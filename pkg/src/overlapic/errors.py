"""Exception types raised by the simulation library."""


class OverlapICError(Exception):
    """Base class for all library errors."""


class QuadratureNonConvergence(OverlapICError):
    pass


class SymbolStreamExhausted(OverlapICError):
    pass


class DimensionMismatch(OverlapICError, ValueError):
    pass


class IllConditioned(OverlapICError):
    """D_n (or A_n) is too close to singular to solve reliably."""


class StationarityViolation(OverlapICError):
    pass


class RecursionBreakdown(OverlapICError):
    pass


class BudgetExceeded(OverlapICError):
    pass


class DegenerateAlpha(OverlapICError, ValueError):
    pass


class ZeroCorrelator(OverlapICError):
    pass


class SingularInterpolation(OverlapICError):
    pass


class InsufficientSamples(OverlapICError):
    pass


class ConfigError(OverlapICError, ValueError):
    pass


class IoFailure(OverlapICError, OSError):
    pass
