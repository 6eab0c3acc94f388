"""
Exception hierarchy shared by the lattice, solver and harness modules.
"""

import numpy as np


class LiftingError(Exception):
    """Base class for every error raised by this package"""


class StructuralError(LiftingError, ValueError):
    """Shapes, grids or trajectories that do not fit together"""


class UnsupportedOperationError(LiftingError, NotImplementedError):
    """Operation that is not defined for the requested model or size"""


class ZeroDensityError(LiftingError, ZeroDivisionError):
    """Non-positive density where a velocity u = rho*u / rho is needed"""


class SingularSystemError(LiftingError, np.linalg.LinAlgError):
    """Coefficient extraction system too badly conditioned to trust"""

    def __init__(self, message, cond=None):
        super().__init__(message)
        self.cond = cond


class ConvergenceError(LiftingError, RuntimeError):
    """Iteration stopped without meeting its tolerance"""

    def __init__(self, message, report=None, residual=None):
        super().__init__(message)
        self.report = report
        if residual is None and report is not None:
            residual = report.residual
        self.residual = residual


class ContractError(LiftingError, ValueError):
    """Coefficients reused on a lattice they were not trained for"""


class ConfigError(LiftingError, ValueError):
    """Bad experiment configuration"""
