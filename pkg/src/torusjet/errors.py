"""Exception hierarchy shared across the package."""


class TorusjetError(Exception):
    """Base class for all torusjet errors."""


class TamingError(TorusjetError):
    """A reference almost-complex structure fails to tame the given 2-form."""


class DegenerateFormError(TorusjetError):
    """A 2-form (or an interpolant in a Moser family) is degenerate."""


class ChartDomainError(TorusjetError):
    """A Moser flow left the chart domain before time 1."""


class GridSpacingError(TorusjetError):
    """A measurement grid is too coarse for the Gaussian scale."""


class StratumDomainError(TorusjetError):
    """A stratum operation was invoked outside its domain of validity."""


class FrameError(TorusjetError):
    """A jet frame determinant fell below its uniform floor."""


class BudgetError(TorusjetError):
    """A perturbation budget schedule collapsed or was violated."""


class TransversalityFailure(TorusjetError):
    """A sweep finished with a non-positive certified margin (exit code 2)."""


class OracleDisagreement(TorusjetError):
    """Two independent counting oracles disagree (exit code 3)."""


class ConfigError(TorusjetError):
    """Invalid run configuration (exit code 4)."""
