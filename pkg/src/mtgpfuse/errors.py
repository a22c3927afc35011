"""Exception types raised across the package."""

import numpy as np


class ParameterError(ValueError):
    """Invalid hyperparameter value (non-positive length scale, negative noise, ...)."""


class UnsupportedPairError(ValueError):
    """No closed-form cross-covariance exists for the requested kernel pairing."""


class IllConditionedError(np.linalg.LinAlgError):
    """Cholesky factorization failed even at the maximum jitter level."""

    def __init__(self, message, jitter):
        super().__init__(f"{message} (final jitter {jitter:.3e})")
        self.jitter = jitter


class OracleError(RuntimeError):
    """Numerical quadrature did not reach the requested tolerance."""

    def __init__(self, message, achieved):
        super().__init__(f"{message} (achieved error estimate {achieved:.3e})")
        self.achieved = achieved


class MetricError(ValueError):
    """A metric was requested for an invalid prediction (e.g. NLP at zero variance)."""


class ArchiveError(ValueError):
    """A model archive failed validation."""


class EvaluationError(RuntimeError):
    """An objective could not be evaluated at the requested parameter vector."""


class DataError(ValueError):
    """A dataset file could not be parsed."""
