"""Cholesky factorisation with escalating diagonal jitter."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np
import scipy.linalg as la

from .errors import IllConditionedError

log = logging.getLogger(__name__)

JITTER_START = 1e-10
JITTER_MAX = 1e-4


@dataclass(frozen=True, eq=False)
class Factor:
    """Lower Cholesky factor of ``A + jitter * I``."""

    lower: np.ndarray
    jitter: float

    @property
    def n(self) -> int:
        return self.lower.shape[0]

    def solve(self, b) -> np.ndarray:
        return la.cho_solve((self.lower, True), b, check_finite=False)

    def half_solve(self, b) -> np.ndarray:
        """``L^{-1} b``."""
        return la.solve_triangular(self.lower, b, lower=True, check_finite=False)

    def logdet(self) -> float:
        return 2.0 * float(np.log(np.diag(self.lower)).sum())


def jitter_cholesky(A: np.ndarray) -> Factor:
    """Factor a symmetric matrix, adding jitter to the diagonal if needed.

    Jitter starts at ``1e-10 * mean(diag)`` and grows tenfold up to
    ``1e-4 * mean(diag)``; beyond that :class:`IllConditionedError` is raised.
    """
    A = np.asarray(A, dtype=float)
    n = A.shape[0]
    if n == 0:
        return Factor(np.zeros((0, 0)), 0.0)
    if not np.all(np.isfinite(A)):
        raise IllConditionedError("matrix has non-finite entries", 0.0)
    try:
        return Factor(la.cholesky(A, lower=True, check_finite=False), 0.0)
    except la.LinAlgError:
        pass
    scale = float(np.mean(np.diag(A)))
    if not scale > 0:
        scale = 1.0
    rel = JITTER_START
    di = np.diag_indices(n)
    while rel <= JITTER_MAX * (1 + 1e-9):
        Aj = A.copy()
        Aj[di] += rel * scale
        try:
            L = la.cholesky(Aj, lower=True, check_finite=False)
        except la.LinAlgError:
            rel *= 10.0
            continue
        log.debug("cholesky needed jitter %.1e * mean(diag)", rel)
        return Factor(L, rel * scale)
    raise IllConditionedError(
        f"{n}x{n} matrix not positive definite", JITTER_MAX * scale
    )


LOG_2PI = math.log(2.0 * math.pi)
