"""
Covariance functions for single-task and multi-task Gaussian processes.

Three kernel families are supported: squared exponential (``SQEXP``), the
non-stationary neural-network kernel (``NN``) and Matérn 3/2 (``MATERN3``).
For multi-task models every task is the convolution of a smoothing kernel
with a shared white-noise process, so auto- and cross-covariances follow in
closed form. The supported pairings are::

    SQEXP x SQEXP, NN x NN, MATERN3 x MATERN3, SQEXP x MATERN3 (either order)

All matrix functions take point arrays of shape ``(n, d)`` and ``(m, d)`` and
return an ``(n, m)`` array. Scalar wrappers (``eval_single``, ``eval_auto``,
``eval_cross``) are provided for readability in tests and small scripts.

SQEXP normalisation
-------------------
Pure SQEXP models use the unnormalised Gaussian smoothing kernel
``exp(-(s - a)^2 / (2 l^2))``, giving the auto-covariance
``kf * pi^(d/2) * prod(l) * exp(-r^2 / (4 l^2))``. The SQEXP x MATERN3
closed form is instead built from the unit-normalised Gaussian basis whose
auto-covariance is ``kf * exp(-r^2 / (2 l^2))``. A model that mixes the two
families must use one basis for its SQEXP tasks throughout, otherwise the
joint Gram matrix is not guaranteed positive semi-definite; pass
``unit_sqexp=True`` (see :func:`needs_unit_sqexp`) in that case.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from enum import Enum
from typing import Sequence

import numpy as np
from scipy import integrate, special
from scipy.spatial.distance import cdist

from .errors import OracleError, ParameterError, UnsupportedPairError

SQRT3 = math.sqrt(3.0)

# relative gap below which the Matérn cross form is replaced by its limit
MATERN_LIMIT_RTOL = 1e-5


class KernelFamily(str, Enum):
    SQEXP = "sqexp"
    NN = "nn"
    MATERN3 = "matern3"

    @classmethod
    def parse(cls, name) -> "KernelFamily":
        if isinstance(name, cls):
            return name
        try:
            return cls(str(name).strip().lower())
        except ValueError:
            raise ValueError(
                f"unknown kernel family {name!r}; expected one of "
                + ", ".join(f.value for f in cls)
            ) from None


_SUPPORTED_PAIRS = {
    frozenset([KernelFamily.SQEXP]),
    frozenset([KernelFamily.NN]),
    frozenset([KernelFamily.MATERN3]),
    frozenset([KernelFamily.SQEXP, KernelFamily.MATERN3]),
}


def supports_pair(fam_a, fam_b) -> bool:
    """Whether a closed-form cross-covariance exists for the two families."""
    pair = frozenset([KernelFamily.parse(fam_a), KernelFamily.parse(fam_b)])
    return pair in _SUPPORTED_PAIRS


def needs_unit_sqexp(families: Sequence) -> bool:
    """True when SQEXP tasks share a model with MATERN3 tasks."""
    fams = {KernelFamily.parse(f) for f in families}
    return KernelFamily.SQEXP in fams and KernelFamily.MATERN3 in fams


@dataclass(frozen=True)
class KernelParams:
    """Hyperparameters of one task's kernel.

    Parameters
    ----------
    family : KernelFamily or str
    length_scales : sequence of float
        One positive length scale per input dimension, in coordinate units.
    bias : float, optional
        Bias length scale of the NN kernel; required for NN and forbidden
        otherwise.
    signal_variance : float
        Multiplier of the single-task kernel. Ignored by the multi-task
        auto/cross forms, where the task-similarity matrix plays that role.
    """

    family: KernelFamily
    length_scales: tuple
    bias: float | None = None
    signal_variance: float = 1.0

    def __post_init__(self):
        fam = KernelFamily.parse(self.family)
        object.__setattr__(self, "family", fam)
        ls = tuple(float(v) for v in np.atleast_1d(self.length_scales))
        object.__setattr__(self, "length_scales", ls)
        if not ls:
            raise ParameterError("at least one length scale is required")
        if not all(math.isfinite(v) and v > 0 for v in ls):
            raise ParameterError(f"length scales must be positive and finite, got {ls}")
        if fam is KernelFamily.NN:
            if self.bias is None:
                raise ParameterError("NN kernel requires a bias length scale")
            b = float(self.bias)
            if not (math.isfinite(b) and b > 0):
                raise ParameterError(f"NN bias must be positive and finite, got {b}")
            object.__setattr__(self, "bias", b)
        elif self.bias is not None:
            raise ParameterError(f"bias is only defined for the NN kernel, not {fam.value}")
        sv = float(self.signal_variance)
        if not (math.isfinite(sv) and sv > 0):
            raise ParameterError(f"signal variance must be positive and finite, got {sv}")
        object.__setattr__(self, "signal_variance", sv)

    @property
    def dim(self) -> int:
        return len(self.length_scales)

    @property
    def ls(self) -> np.ndarray:
        return np.asarray(self.length_scales, dtype=float)

    def nn_precisions(self) -> np.ndarray:
        """Diagonal of the augmented (d+1) x (d+1) NN matrix, bias entry first."""
        return np.concatenate([[self.bias], self.ls]) ** -2.0


@dataclass(frozen=True, eq=False)
class TaskSimilarity:
    """Task-similarity matrix stored through a lower-triangular factor.

    ``matrix == factor @ factor.T`` is symmetric positive semi-definite for
    any real factor. The factor is canonicalised so its diagonal is
    non-negative (column signs do not change the product).
    """

    factor: np.ndarray

    def __post_init__(self):
        L = np.array(self.factor, dtype=float, ndmin=2)
        if L.ndim != 2 or L.shape[0] != L.shape[1]:
            raise ParameterError(f"task-similarity factor must be square, got shape {L.shape}")
        if not np.all(np.isfinite(L)):
            raise ParameterError("task-similarity factor must be finite")
        L = np.tril(L)
        signs = np.where(np.diag(L) < 0, -1.0, 1.0)
        L = L * signs[None, :]
        L.setflags(write=False)
        object.__setattr__(self, "factor", L)

    @property
    def dimension(self) -> int:
        return self.factor.shape[0]

    @property
    def matrix(self) -> np.ndarray:
        return self.factor @ self.factor.T

    def __getitem__(self, ij) -> float:
        i, j = ij
        return float(self.factor[i] @ self.factor[j])

    def correlation(self, i: int, j: int) -> float:
        denom = math.sqrt(self[i, i] * self[j, j])
        return self[i, j] / denom if denom > 0 else 0.0

    @classmethod
    def from_matrix(cls, K) -> "TaskSimilarity":
        """Factor a symmetric PSD matrix (semi-definite input is accepted)."""
        K = np.asarray(K, dtype=float)
        K = 0.5 * (K + K.T)
        try:
            return cls(np.linalg.cholesky(K))
        except np.linalg.LinAlgError:
            pass
        w, V = np.linalg.eigh(K)
        if w.min() < -1e-10 * max(1.0, abs(w).max()):
            raise ParameterError("task-similarity matrix is not positive semi-definite")
        B = V * np.sqrt(np.clip(w, 0.0, None))
        # B = R^T Q^T  =>  K = R^T R with R^T lower triangular
        R = np.linalg.qr(B.T, mode="r")
        return cls(R.T)

    @classmethod
    def diagonal(cls, values) -> "TaskSimilarity":
        return cls(np.diag(np.sqrt(np.asarray(values, dtype=float))))


# ---------------------------------------------------------------------------
# shape helpers
# ---------------------------------------------------------------------------


def _points(X, d: int, name: str) -> np.ndarray:
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X.reshape(-1, 1) if d == 1 else X[None, :]
    if X.ndim != 2 or X.shape[1] != d:
        raise ValueError(f"{name} must have {d} columns, got shape {X.shape}")
    return X


def _check_pair(X, Y, d):
    return _points(X, d, "X"), _points(Y, d, "Y")


def _scaled_sqdist(X, Y, inv_ls) -> np.ndarray:
    return cdist(X * inv_ls, Y * inv_ls, "sqeuclidean")


def _axis_dist(X, Y, k) -> np.ndarray:
    return np.abs(X[:, k, None] - Y[None, :, k])


def _matern_profile(X, Y, ls) -> np.ndarray:
    out = np.ones((X.shape[0], Y.shape[0]))
    for k, l in enumerate(ls):
        u = SQRT3 * _axis_dist(X, Y, k) / l
        out *= (1.0 + u) * np.exp(-u)
    return out


def _nn_profile(X, Y, prec) -> np.ndarray:
    """(2/pi) arcsin(...) for augmented inputs with diagonal matrix ``prec``."""
    Xa = np.hstack([np.ones((X.shape[0], 1)), X])
    Ya = np.hstack([np.ones((Y.shape[0], 1)), Y])
    qxy = (Xa * prec) @ Ya.T
    qxx = np.einsum("ij,j,ij->i", Xa, prec, Xa)
    qyy = np.einsum("ij,j,ij->i", Ya, prec, Ya)
    denom = np.sqrt(np.outer(1.0 + 2.0 * qxx, 1.0 + 2.0 * qyy))
    arg = np.clip(2.0 * qxy / denom, -1.0, 1.0)
    return (2.0 / math.pi) * np.arcsin(arg)


# ---------------------------------------------------------------------------
# single-task kernels
# ---------------------------------------------------------------------------


def single_matrix(params: KernelParams, X, Y) -> np.ndarray:
    """Single-task kernel matrix including the signal variance."""
    X, Y = _check_pair(X, Y, params.dim)
    fam = params.family
    if fam is KernelFamily.SQEXP:
        base = np.exp(-0.5 * _scaled_sqdist(X, Y, 1.0 / params.ls))
    elif fam is KernelFamily.MATERN3:
        base = _matern_profile(X, Y, params.ls)
    else:
        base = _nn_profile(X, Y, params.nn_precisions())
    return params.signal_variance * base


def single_diag(params: KernelParams, X) -> np.ndarray:
    X = _points(X, params.dim, "X")
    if params.family is KernelFamily.NN:
        return np.array([single_matrix(params, x[None], x[None])[0, 0] for x in X])
    return np.full(X.shape[0], params.signal_variance)


# ---------------------------------------------------------------------------
# multi-task auto/cross covariance
# ---------------------------------------------------------------------------


def sqexp_auto_prefactor(params: KernelParams, unit_sqexp: bool = False) -> float:
    """Zero-distance value of the SQEXP auto-covariance per unit ``kf``."""
    if unit_sqexp:
        return 1.0
    return math.pi ** (params.dim / 2.0) * float(np.prod(params.ls))


def auto_prefactor(params: KernelParams, unit_sqexp: bool = False) -> float:
    if params.family is KernelFamily.SQEXP:
        return sqexp_auto_prefactor(params, unit_sqexp)
    return 1.0


def auto_matrix(kf: float, params: KernelParams, X, Y, unit_sqexp: bool = False) -> np.ndarray:
    """Auto-covariance of one task scaled by its task-similarity entry ``kf``."""
    if kf < 0:
        raise ParameterError(f"auto-covariance scale must be non-negative, got {kf}")
    X, Y = _check_pair(X, Y, params.dim)
    fam = params.family
    if fam is KernelFamily.SQEXP:
        d2 = _scaled_sqdist(X, Y, 1.0 / params.ls)
        if unit_sqexp:
            base = np.exp(-0.5 * d2)
        else:
            base = sqexp_auto_prefactor(params) * np.exp(-0.25 * d2)
    elif fam is KernelFamily.MATERN3:
        base = _matern_profile(X, Y, params.ls)
    else:
        base = _nn_profile(X, Y, params.nn_precisions())
    return kf * base


def auto_diag(kf: float, params: KernelParams, X, unit_sqexp: bool = False) -> np.ndarray:
    X = _points(X, params.dim, "X")
    if params.family is KernelFamily.NN:
        prec = params.nn_precisions()
        q = prec[0] + np.einsum("ij,j,ij->i", X, prec[1:], X)
        return kf * (2.0 / math.pi) * np.arcsin(2.0 * q / (1.0 + 2.0 * q))
    return np.full(X.shape[0], kf * auto_prefactor(params, unit_sqexp))


def _sqexp_cross(pi, pj, X, Y, unit_sqexp):
    li, lj = pi.ls, pj.ls
    if unit_sqexp:
        s = li * li + lj * lj
        pref = float(np.prod(np.sqrt(2.0 * li * lj / s)))
        return pref * np.exp(-_scaled_sqdist(X, Y, 1.0 / np.sqrt(s)))
    a, b = li**-2.0, lj**-2.0
    d = pi.dim
    pref = (2.0 * math.pi) ** (d / 2.0) / float(np.prod(np.sqrt(a + b)))
    c = a * b / (a + b)
    return pref * np.exp(-0.5 * _scaled_sqdist(X, Y, np.sqrt(c)))


def _nn_cross(pi, pj, X, Y):
    si, sj = pi.nn_precisions(), pj.nn_precisions()
    D = si.size
    log_pref = (
        0.5 * D * math.log(2.0)
        + 0.25 * (np.log(si).sum() + np.log(sj).sum())
        - 0.5 * np.log(si + sj).sum()
    )
    sij = 2.0 * si * sj / (si + sj)
    return math.exp(log_pref) * _nn_profile(X, Y, sij)


def _matern_cross_axis(r, li, lj):
    if abs(li - lj) < MATERN_LIMIT_RTOL * min(li, lj):
        # removable singularity: evaluate the equal-length limit at the midpoint
        u = SQRT3 * r / (0.5 * (li + lj))
        return (1.0 + u) * np.exp(-u)
    pref = 2.0 * math.sqrt(li * lj) / (li * li - lj * lj)
    return pref * (li * np.exp(-SQRT3 * r / li) - lj * np.exp(-SQRT3 * r / lj))


def _matern_cross(pi, pj, X, Y):
    out = np.ones((X.shape[0], Y.shape[0]))
    for k, (li, lj) in enumerate(zip(pi.length_scales, pj.length_scales)):
        out *= _matern_cross_axis(_axis_dist(X, Y, k), li, lj)
    return out


def _sqexp_matern_axis(r, l_se, l_m):
    lam = 0.5 * SQRT3 * l_se / l_m
    u = r / l_se
    pref = math.sqrt(lam) * (0.5 * math.pi) ** 0.25
    # e^{lam^2}[2cosh(a) - e^a erf(lam+u) - e^-a erf(lam-u)] with a = 2 lam u,
    # rewritten with erfcx so nothing overflows for large lam
    t1 = special.erfcx(lam + u) * np.exp(-u * u)
    z = lam - u
    t2 = np.empty_like(z)
    pos = z >= 0.0
    t2[pos] = special.erfcx(z[pos]) * np.exp(-u[pos] ** 2)
    neg = ~pos
    t2[neg] = np.exp(lam * lam - 2.0 * lam * u[neg]) * special.erfc(z[neg])
    return pref * (t1 + t2)


def _sqexp_matern_cross(p_se, p_m, X, Y):
    out = np.ones((X.shape[0], Y.shape[0]))
    for k, (ls, lm) in enumerate(zip(p_se.length_scales, p_m.length_scales)):
        out *= _sqexp_matern_axis(_axis_dist(X, Y, k), ls, lm)
    return out


def cross_matrix(
    kf: float, pi: KernelParams, pj: KernelParams, X, Y, unit_sqexp: bool = False
) -> np.ndarray:
    """Cross-covariance between task ``i`` at ``X`` and task ``j`` at ``Y``.

    Parameters
    ----------
    kf : float
        Task-similarity entry ``K_f[i, j]``; may be negative.
    pi, pj : KernelParams
        Kernel parameters of the two tasks. Their families must form a
        supported pair.
    X, Y : array_like, shape (n, d) and (m, d)
    unit_sqexp : bool
        Use the unit-normalised SQEXP basis for SQEXP x SQEXP pairs. Has no
        effect on other pairings.

    Returns
    -------
    ndarray of shape (n, m)

    Raises
    ------
    UnsupportedPairError
        For NN paired with any other family.
    """
    fi, fj = pi.family, pj.family
    if not supports_pair(fi, fj):
        raise UnsupportedPairError(f"no closed-form cross-covariance for {fi.value} x {fj.value}")
    if pi.dim != pj.dim:
        raise ValueError(f"tasks disagree on input dimension ({pi.dim} vs {pj.dim})")
    X, Y = _check_pair(X, Y, pi.dim)
    if fi is fj is KernelFamily.SQEXP:
        base = _sqexp_cross(pi, pj, X, Y, unit_sqexp)
    elif fi is fj is KernelFamily.NN:
        base = _nn_cross(pi, pj, X, Y)
    elif fi is fj is KernelFamily.MATERN3:
        base = _matern_cross(pi, pj, X, Y)
    elif fi is KernelFamily.SQEXP:
        base = _sqexp_matern_cross(pi, pj, X, Y)
    else:
        base = _sqexp_matern_cross(pj, pi, X, Y)
    return kf * base


# ---------------------------------------------------------------------------
# scalar wrappers
# ---------------------------------------------------------------------------


def _vec(x, d, name):
    x = np.asarray(x, dtype=float).ravel()
    if x.size != d:
        raise ValueError(f"{name} has {x.size} coordinates, expected {d}")
    return x[None, :]


def eval_single(params: KernelParams, x, xp) -> float:
    d = params.dim
    return float(single_matrix(params, _vec(x, d, "x"), _vec(xp, d, "x'"))[0, 0])


def eval_auto(kf: float, params: KernelParams, x, xp, unit_sqexp: bool = False) -> float:
    d = params.dim
    return float(auto_matrix(kf, params, _vec(x, d, "x"), _vec(xp, d, "x'"), unit_sqexp)[0, 0])


def eval_cross(
    kf: float, pi: KernelParams, pj: KernelParams, x, xp, unit_sqexp: bool = False
) -> float:
    d = pi.dim
    return float(
        cross_matrix(kf, pi, pj, _vec(x, d, "x"), _vec(xp, d, "x'"), unit_sqexp)[0, 0]
    )


# ---------------------------------------------------------------------------
# quadrature oracle
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class QuadConfig:
    """Settings for :func:`numeric_cross_oracle`.

    ``tol`` is the absolute error bound each 1D integral must certify;
    ``width`` is the half-width of the integration window in multiples of
    the larger length scale.
    """

    tol: float = 1e-11
    width: float = 40.0
    limit: int = 400


def _basis(family: KernelFamily, l: float, unit_sqexp: bool):
    if family is KernelFamily.SQEXP:
        if unit_sqexp:
            amp = (2.0 / math.pi) ** 0.25 / math.sqrt(l)
            return lambda t: amp * math.exp(-t * t / (l * l))
        return lambda t: math.exp(-t * t / (2.0 * l * l))
    if family is KernelFamily.MATERN3:
        c = SQRT3 / l
        amp = math.sqrt(c)
        return lambda t: amp * math.exp(-c * abs(t))
    raise ValueError(f"no smoothing kernel available for {family.value}")


def numeric_cross_oracle(
    pi: KernelParams,
    pj: KernelParams,
    x,
    xp,
    config: QuadConfig = QuadConfig(),
    kf: float = 1.0,
    unit_sqexp: bool = False,
) -> float:
    """Cross-covariance by adaptive quadrature of the smoothing-kernel product.

    Each axis contributes ``int h_i(x_k - a) h_j(x'_k - a) da``; the result
    is ``kf`` times the product over axes. Meant as an independent check of
    :func:`cross_matrix`, not for production use.
    """
    if pi.dim != pj.dim:
        raise ValueError("tasks disagree on input dimension")
    x = _vec(x, pi.dim, "x")[0]
    xp = _vec(xp, pi.dim, "x'")[0]
    unit = unit_sqexp or needs_unit_sqexp([pi.family, pj.family])
    total = kf
    for k in range(pi.dim):
        li, lj = pi.length_scales[k], pj.length_scales[k]
        hi = _basis(pi.family, li, unit)
        hj = _basis(pj.family, lj, unit)
        span = config.width * max(li, lj)
        lo, up = min(x[k], xp[k]) - span, max(x[k], xp[k]) + span
        brk = sorted({float(x[k]), float(xp[k])})
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", integrate.IntegrationWarning)
            val, err = integrate.quad(
                lambda a: hi(x[k] - a) * hj(xp[k] - a),
                lo,
                up,
                points=brk,
                epsabs=config.tol / 10.0,
                epsrel=0.0,
                limit=config.limit,
            )
        if not (err <= config.tol):
            raise OracleError(f"quadrature on axis {k} did not converge", err)
        total *= val
    return float(total)
