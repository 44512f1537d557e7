"""Exception hierarchy shared by the solver modules and the CLI."""


class HfineError(Exception):
    """Base class for all errors raised by hfine."""


class SolverError(HfineError):
    """A numerical step could not produce a trustworthy answer."""


class DegenerateSteadyState(SolverError):
    pass


class NoDissipation(SolverError):
    pass


class IntegrationError(SolverError):
    pass


class SingularResolvent(SolverError):
    pass


class ProjectionError(SolverError):
    pass


class NegativeRate(SolverError):
    pass


class SingularDenominator(SolverError):
    pass


class DegenerateTensor(HfineError):
    pass


class GridResolutionError(HfineError):
    pass


class UseKMC(HfineError):
    """Configuration space too large for explicit enumeration."""


class ConfigError(HfineError):
    pass
