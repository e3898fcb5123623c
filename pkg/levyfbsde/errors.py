"""
Exception hierarchy for levyfbsde.
The CLI maps these onto exit codes; batch simulation flags bad paths instead of raising.
"""


class LevyFbsdeError(Exception):
    """Base class for all engine errors"""


class DomainError(LevyFbsdeError, ValueError):
    """Argument outside the domain of an operation (u=0, |u|>1, alpha outside (t,T], ...)"""


class DivergenceError(DomainError):
    """Requested integral diverges (e.g. moment order p <= beta)"""


class EmptyMeasureError(DomainError):
    """Truncation leaves no mass to sample (delta0 >= 1)"""


class CapabilityError(LevyFbsdeError):
    """Operation not available for this input (asymmetric measure, missing (BD) derivatives, d != 1)"""


class NoSmallJumps(LevyFbsdeError):
    """G_eps = 0: no event carries Malliavin mass, the weight is undefined"""


class SingularCoefficientError(LevyFbsdeError):
    """sigma not invertible at a visited point"""


class InterpolationError(LevyFbsdeError):
    """ValueFunction queried outside its time span"""


class InstabilityError(LevyFbsdeError):
    """Explicit time step violates the stability bound"""

    def __init__(self, message, suggested_dt):
        super().__init__(message)
        self.suggested_dt = suggested_dt


class HorizonSplitError(LevyFbsdeError):
    """Picard iteration is not contracting; use a shorter horizon or more splits"""


class PicardStepError(LevyFbsdeError):
    """Too many invalid paths in one Picard sweep"""


class ManufacturedResidualError(LevyFbsdeError):
    """Manufactured solution self-test failed"""


class ConfigError(LevyFbsdeError):
    """Experiment config failed schema validation"""

    def __init__(self, messages):
        super().__init__(str(messages))
        self.messages = messages
