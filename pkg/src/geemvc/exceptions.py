"""Exception types raised by the fitting and variance code."""

import numpy as np


class GEEError(Exception):
    """Base class for numerical failures of the estimating-equation machinery."""


class DivergenceError(GEEError, FloatingPointError):
    pass


class IdentifiabilityError(GEEError, np.linalg.LinAlgError):
    pass


class CovarianceRepairError(GEEError, np.linalg.LinAlgError):
    pass


class CandidateLimitError(GEEError, ValueError):
    pass
