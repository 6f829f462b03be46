"""Exception hierarchy shared by all submodules."""


class BihscatError(Exception):
    """Base class for all package errors."""


class GridMismatch(BihscatError, ValueError):
    pass


class NyquistViolation(BihscatError, ValueError):
    pass


class NegativeStrength(BihscatError, ValueError):
    pass


class EmptyEnsemble(BihscatError, ValueError):
    pass


class SeedMismatch(BihscatError, ValueError):
    pass


class BranchViolation(BihscatError, ValueError):
    """Argument lies on the cut (-inf, 0]*i of the Hankel continuation."""


class DomainError(BihscatError, ValueError):
    pass


class QuadratureFailure(BihscatError, RuntimeError):
    pass


class SupportViolation(BihscatError, ValueError):
    """Density is not confined to the inner half-box."""


class KernelDomainError(BihscatError, ValueError):
    pass


class IndexOutOfRange(BihscatError, IndexError):
    pass


class PowerIterationStall(BihscatError, RuntimeError):
    pass


class BandViolation(BihscatError, ValueError):
    pass


class DimensionError(BihscatError, ValueError):
    pass


class HermitianViolation(BihscatError, ValueError):
    pass


class EmptyGrid(BihscatError, ValueError):
    pass


class InvalidRange(BihscatError, ValueError):
    pass


class ConfigError(BihscatError, ValueError):
    pass


class NumericDivergence(BihscatError, RuntimeError):
    pass
