"""Single-task Gaussian process regression."""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from enum import Enum
from functools import cached_property

import numpy as np

from . import kernels as K
from .errors import ParameterError
from .linalg import LOG_2PI, Factor, jitter_cholesky

DEFAULT_CHUNK = 1024


class CovarianceMode(str, Enum):
    SINGLE = "single"
    MTGP_AUTO = "mtgp_auto"


@dataclass(frozen=True, eq=False)
class Posterior:
    """Predictive mean and variance at a batch of test points.

    ``n_clamped`` counts variances that came out negative through round-off
    and were set to zero.
    """

    mean: np.ndarray
    variance: np.ndarray
    n_clamped: int = 0


def _frozen(a, ndim):
    a = np.array(a, dtype=float, ndmin=ndim)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class GpModel:
    """A zero-mean GP over centred targets.

    With ``kf=None`` the covariance is the single-task kernel (including its
    signal variance). Given a task-similarity diagonal entry ``kf`` the model
    uses the multi-task auto-covariance instead, which is how a single GP is
    derived from a fitted multi-task model.

    Parameters
    ----------
    params : KernelParams
    noise_variance : float
    X : ndarray, shape (n, d)
    z : ndarray, shape (n,)
        Targets with ``offset`` already subtracted.
    offset : float
        Added back to predicted means.
    kf : float, optional
    unit_sqexp : bool
        SQEXP basis normalisation, see :mod:`mtgpfuse.kernels`.
    """

    params: K.KernelParams
    noise_variance: float
    X: np.ndarray
    z: np.ndarray
    offset: float = 0.0
    kf: float | None = None
    unit_sqexp: bool = False

    def __post_init__(self):
        X = np.array(self.X, dtype=float)
        if X.ndim == 1:
            X = X.reshape(-1, self.params.dim)
        X.setflags(write=False)
        z = _frozen(self.z, 1).ravel()
        if X.shape[1] != self.params.dim:
            raise ValueError(f"X has {X.shape[1]} columns, kernel expects {self.params.dim}")
        if X.shape[0] != z.shape[0]:
            raise ValueError(f"{X.shape[0]} inputs but {z.shape[0]} targets")
        nv = float(self.noise_variance)
        if not (math.isfinite(nv) and nv >= 0):
            raise ParameterError(f"noise variance must be non-negative, got {nv}")
        if self.kf is not None:
            kf = float(self.kf)
            if not (math.isfinite(kf) and kf >= 0):
                raise ParameterError(f"auto-covariance scale must be non-negative, got {kf}")
            object.__setattr__(self, "kf", kf)
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "z", z)
        object.__setattr__(self, "noise_variance", nv)
        object.__setattr__(self, "offset", float(self.offset))

    @classmethod
    def from_targets(cls, params, noise_variance, X, y, **kw) -> "GpModel":
        """Build a model from raw targets, centring them on their mean."""
        y = np.asarray(y, dtype=float).ravel()
        offset = float(y.mean()) if y.size else 0.0
        return cls(params, noise_variance, X, y - offset, offset=offset, **kw)

    @property
    def mode(self) -> CovarianceMode:
        return CovarianceMode.SINGLE if self.kf is None else CovarianceMode.MTGP_AUTO

    @property
    def n(self) -> int:
        return self.X.shape[0]

    def with_data(self, X, z, offset=None) -> "GpModel":
        return replace(self, X=X, z=z, offset=self.offset if offset is None else offset)

    def kernel(self, A, B) -> np.ndarray:
        if self.kf is None:
            return K.single_matrix(self.params, A, B)
        return K.auto_matrix(self.kf, self.params, A, B, self.unit_sqexp)

    def kernel_diag(self, A) -> np.ndarray:
        if self.kf is None:
            return K.single_diag(self.params, A)
        return K.auto_diag(self.kf, self.params, A, self.unit_sqexp)

    def gram(self, with_noise: bool = True) -> np.ndarray:
        G = self.kernel(self.X, self.X)
        G = 0.5 * (G + G.T)
        if with_noise:
            G[np.diag_indices_from(G)] += self.noise_variance
        return G

    @cached_property
    def factor(self) -> Factor:
        return jitter_cholesky(self.gram(with_noise=True))

    @cached_property
    def alpha(self) -> np.ndarray:
        return self.factor.solve(self.z)

    def posterior(self, Xs, chunk: int = DEFAULT_CHUNK, include_noise: bool = True) -> Posterior:
        """Predictive distribution at ``Xs``.

        The variance includes the observation noise unless
        ``include_noise=False``.
        """
        Xs = np.asarray(Xs, dtype=float)
        if Xs.ndim == 1:
            Xs = Xs.reshape(-1, self.params.dim)
        means, variances, clamped = [], [], 0
        for start in range(0, Xs.shape[0], chunk):
            Xc = Xs[start : start + chunk]
            prior = self.kernel_diag(Xc)
            if include_noise:
                prior = prior + self.noise_variance
            if self.n == 0:
                means.append(np.full(Xc.shape[0], self.offset))
                variances.append(prior)
                continue
            Ks = self.kernel(Xc, self.X)
            means.append(Ks @ self.alpha + self.offset)
            v = self.factor.half_solve(Ks.T)
            var = prior - np.einsum("ij,ij->j", v, v)
            neg = var < 0
            clamped += int(neg.sum())
            variances.append(np.where(neg, 0.0, var))
        if not means:
            return Posterior(np.zeros(0), np.zeros(0), 0)
        return Posterior(np.concatenate(means), np.concatenate(variances), clamped)

    def lml_terms(self) -> tuple[float, float, float]:
        """(data fit, complexity penalty, normalising constant) of the log evidence."""
        fit = -0.5 * float(self.z @ self.alpha)
        complexity = -0.5 * self.factor.logdet()
        const = -0.5 * self.n * LOG_2PI
        return fit, complexity, const

    def log_marginal_likelihood(self) -> float:
        fit, complexity, const = self.lml_terms()
        return fit + complexity + const
