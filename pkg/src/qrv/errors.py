"""Exception types shared across the package.

Three failure families are kept apart on purpose: bad parameters
(ConfigError), bad input data (DataError), and numerical breakdowns such as
non-PSD matrices or ill-conditioned solves (NumericalError). Callers that
want to catch everything can catch QRVError.
"""


class QRVError(Exception):
    """Base class for all package-specific errors."""


class ConfigError(QRVError, ValueError):
    """Invalid parameter or configuration combination."""


class DataError(QRVError, ValueError):
    """Input data violates an estimator's requirements (too short, nonpositive prices, ...)."""


class CacheError(QRVError):
    """Constants-cache problems: version mismatch, or an attempt to overwrite an entry."""


class NumericalError(QRVError, ArithmeticError):
    """Numerical failure: near-singular solve, non-PSD covariance, etc."""


class NegativeWeightWarning(RuntimeWarning):
    """Unconstrained optimal quantile weights came out with a negative entry."""
