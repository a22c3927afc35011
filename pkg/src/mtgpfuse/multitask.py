"""Multi-task GP: joint covariance over stacked tasks and per-task posteriors."""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from functools import cached_property
from typing import Sequence

import numpy as np

from . import kernels as K
from .errors import ParameterError, UnsupportedPairError
from .gp import DEFAULT_CHUNK, GpModel, Posterior
from .linalg import LOG_2PI, Factor, jitter_cholesky


@dataclass(frozen=True, eq=False)
class MtgpModel:
    """Multi-task GP over ``nt`` tasks, each with its own inputs and targets.

    Block ``(i, j)`` of the joint covariance is the auto-covariance of task
    ``i`` (plus ``noise_variances[i]`` on the diagonal) when ``i == j`` and
    the closed-form cross-covariance scaled by ``K_f[i, j]`` otherwise.

    Parameters
    ----------
    params : sequence of KernelParams
        One per task; all must share the input dimension and every pair of
        families must be supported.
    similarity : TaskSimilarity
    noise_variances : sequence of float
    X : sequence of ndarray
        Inputs of each task, shape ``(n_i, d)``; ``n_i`` may be zero.
    z : sequence of ndarray
        Centred targets of each task.
    offsets : sequence of float
        Per-task centring offsets added back to predicted means.
    names : sequence of str, optional
    """

    params: tuple
    similarity: K.TaskSimilarity
    noise_variances: tuple
    X: tuple
    z: tuple
    offsets: tuple | None = None
    names: tuple | None = None

    def __post_init__(self):
        params = tuple(self.params)
        nt = len(params)
        if nt == 0:
            raise ValueError("at least one task is required")
        if self.similarity.dimension != nt:
            raise ValueError(
                f"task-similarity has dimension {self.similarity.dimension}, expected {nt}"
            )
        d = params[0].dim
        if any(p.dim != d for p in params):
            raise ValueError("all tasks must share the input dimension")
        for a in range(nt):
            for b in range(a + 1, nt):
                if not K.supports_pair(params[a].family, params[b].family):
                    raise UnsupportedPairError(
                        f"tasks {a} and {b}: no cross-covariance for "
                        f"{params[a].family.value} x {params[b].family.value}"
                    )
        noises = tuple(float(v) for v in self.noise_variances)
        if len(noises) != nt or not all(math.isfinite(v) and v >= 0 for v in noises):
            raise ParameterError(f"need {nt} non-negative noise variances, got {noises}")
        if len(self.X) != nt or len(self.z) != nt:
            raise ValueError(f"need inputs and targets for {nt} tasks")
        Xs, zs = [], []
        for Xi, zi in zip(self.X, self.z):
            Xi = np.array(Xi, dtype=float).reshape(-1, d)
            zi = np.array(zi, dtype=float).ravel()
            if Xi.shape[0] != zi.shape[0]:
                raise ValueError(f"{Xi.shape[0]} inputs but {zi.shape[0]} targets")
            Xi.setflags(write=False)
            zi.setflags(write=False)
            Xs.append(Xi)
            zs.append(zi)
        offsets = (0.0,) * nt if self.offsets is None else tuple(float(o) for o in self.offsets)
        if len(offsets) != nt:
            raise ValueError(f"need {nt} offsets")
        object.__setattr__(self, "params", params)
        object.__setattr__(self, "noise_variances", noises)
        object.__setattr__(self, "X", tuple(Xs))
        object.__setattr__(self, "z", tuple(zs))
        object.__setattr__(self, "offsets", offsets)
        if self.names is not None:
            object.__setattr__(self, "names", tuple(self.names))

    @classmethod
    def from_targets(cls, params, similarity, noise_variances, X, y, names=None) -> "MtgpModel":
        """Build a model from raw per-task targets, centring each task."""
        ys = [np.asarray(v, dtype=float).ravel() for v in y]
        offsets = [float(v.mean()) if v.size else 0.0 for v in ys]
        z = [v - o for v, o in zip(ys, offsets)]
        return cls(params, similarity, noise_variances, X, z, offsets, names)

    @property
    def nt(self) -> int:
        return len(self.params)

    @property
    def dim(self) -> int:
        return self.params[0].dim

    @property
    def sizes(self) -> tuple:
        return tuple(x.shape[0] for x in self.X)

    @property
    def N(self) -> int:
        return sum(self.sizes)

    @property
    def unit_sqexp(self) -> bool:
        return K.needs_unit_sqexp([p.family for p in self.params])

    def with_data(self, X, z, offsets=None) -> "MtgpModel":
        return replace(self, X=tuple(X), z=tuple(z), offsets=self.offsets if offsets is None else tuple(offsets))

    def permuted(self, order: Sequence[int]) -> "MtgpModel":
        """Same model with tasks reordered; ``K_f`` rows/columns follow."""
        order = list(order)
        Kf = self.similarity.matrix[np.ix_(order, order)]
        return MtgpModel(
            [self.params[i] for i in order],
            K.TaskSimilarity.from_matrix(Kf),
            [self.noise_variances[i] for i in order],
            [self.X[i] for i in order],
            [self.z[i] for i in order],
            [self.offsets[i] for i in order],
            None if self.names is None else [self.names[i] for i in order],
        )

    def block(self, i: int, j: int, A, B) -> np.ndarray:
        """Noise-free covariance between task ``i`` at ``A`` and task ``j`` at ``B``."""
        kf = self.similarity[i, j]
        if i == j:
            return K.auto_matrix(max(kf, 0.0), self.params[i], A, B, self.unit_sqexp)
        return K.cross_matrix(kf, self.params[i], self.params[j], A, B, self.unit_sqexp)

    def joint_gram(self, with_noise: bool = True) -> np.ndarray:
        sizes = self.sizes
        edges = np.concatenate([[0], np.cumsum(sizes)])
        G = np.empty((self.N, self.N))
        for i in range(self.nt):
            si = slice(edges[i], edges[i + 1])
            for j in range(i, self.nt):
                sj = slice(edges[j], edges[j + 1])
                B = self.block(i, j, self.X[i], self.X[j])
                if i == j:
                    B = 0.5 * (B + B.T)
                    if with_noise:
                        B[np.diag_indices_from(B)] += self.noise_variances[i]
                G[si, sj] = B
                if i != j:
                    G[sj, si] = B.T
        return G

    @property
    def stacked_z(self) -> np.ndarray:
        return np.concatenate(self.z) if self.N else np.zeros(0)

    @cached_property
    def factor(self) -> Factor:
        return jitter_cholesky(self.joint_gram(with_noise=True))

    @cached_property
    def alpha(self) -> np.ndarray:
        return self.factor.solve(self.stacked_z)

    def test_cross(self, i: int, Xs) -> np.ndarray:
        """Covariance between task ``i`` at ``Xs`` and every stacked training point."""
        return np.hstack([self.block(i, j, Xs, self.X[j]) for j in range(self.nt)])

    def posterior(
        self, i: int, Xs, chunk: int = DEFAULT_CHUNK, include_noise: bool = True
    ) -> Posterior:
        """Predictive distribution of task ``i`` at ``Xs`` using all tasks' data."""
        if not 0 <= i < self.nt:
            raise IndexError(f"task index {i} out of range for {self.nt} tasks")
        Xs = np.asarray(Xs, dtype=float).reshape(-1, self.dim)
        kf = max(self.similarity[i, i], 0.0)
        means, variances, clamped = [], [], 0
        for start in range(0, Xs.shape[0], chunk):
            Xc = Xs[start : start + chunk]
            prior = K.auto_diag(kf, self.params[i], Xc, self.unit_sqexp)
            if include_noise:
                prior = prior + self.noise_variances[i]
            if self.N == 0:
                means.append(np.full(Xc.shape[0], self.offsets[i]))
                variances.append(prior)
                continue
            Ks = self.test_cross(i, Xc)
            means.append(Ks @ self.alpha + self.offsets[i])
            v = self.factor.half_solve(Ks.T)
            var = prior - np.einsum("ij,ij->j", v, v)
            neg = var < 0
            clamped += int(neg.sum())
            variances.append(np.where(neg, 0.0, var))
        if not means:
            return Posterior(np.zeros(0), np.zeros(0), 0)
        return Posterior(np.concatenate(means), np.concatenate(variances), clamped)

    def lml_terms(self) -> tuple[float, float, float]:
        fit = -0.5 * float(self.stacked_z @ self.alpha)
        complexity = -0.5 * self.factor.logdet()
        const = -0.5 * self.N * LOG_2PI
        return fit, complexity, const

    def log_marginal_likelihood(self) -> float:
        fit, complexity, const = self.lml_terms()
        return fit + complexity + const

    def derive_single_gp(self, i: int) -> GpModel:
        """Single-task GP using task ``i``'s auto-covariance and data only."""
        return GpModel(
            self.params[i],
            self.noise_variances[i],
            self.X[i],
            self.z[i],
            offset=self.offsets[i],
            kf=max(self.similarity[i, i], 0.0),
            unit_sqexp=self.unit_sqexp,
        )

    def decoupled(self) -> "MtgpModel":
        """Copy with every off-diagonal task-similarity entry set to zero."""
        return replace(self, similarity=K.TaskSimilarity.diagonal(np.diag(self.similarity.matrix)))
