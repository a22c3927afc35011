"""Independent reference implementations used only by the tests.

Everything here is written from the scalar formulas with plain loops,
``math``/``mpmath`` and explicit matrix inverses, sharing no code with the
package's vectorised routines.
"""

import math

import mpmath as mp
import numpy as np
from scipy.integrate import quad as _quad

SQ3 = math.sqrt(3.0)


def sqexp(l, sf2, x, xp):
    s = sum(((a - b) / li) ** 2 for a, b, li in zip(x, xp, l))
    return sf2 * math.exp(-0.5 * s)


def matern3(l, sf2, x, xp):
    out = sf2
    for a, b, li in zip(x, xp, l):
        u = SQ3 * abs(a - b) / li
        out *= (1.0 + u) * math.exp(-u)
    return out


def nn(l, beta, sf2, x, xp):
    w = [beta ** -2] + [li ** -2 for li in l]
    xa, xb = [1.0] + list(x), [1.0] + list(xp)
    num = 2.0 * sum(wi * a * b for wi, a, b in zip(w, xa, xb))
    da = 1.0 + 2.0 * sum(wi * a * a for wi, a in zip(w, xa))
    db = 1.0 + 2.0 * sum(wi * b * b for wi, b in zip(w, xb))
    return sf2 * (2.0 / math.pi) * math.asin(num / math.sqrt(da * db))


def sqexp_auto(kf, l, x, xp):
    d = len(l)
    pref = math.pi ** (d / 2) * math.prod(l)
    s = sum(((a - b) / li) ** 2 for a, b, li in zip(x, xp, l))
    return kf * pref * math.exp(-0.25 * s)


def sqexp_cross(kf, li, lj, x, xp):
    """Matrix form with diagonal precisions."""
    Si = np.diag([v ** -2 for v in li])
    Sj = np.diag([v ** -2 for v in lj])
    d = len(li)
    r = np.array(x, float) - np.array(xp, float)
    S = Si + Sj
    pref = (2 * math.pi) ** (d / 2) / math.sqrt(np.linalg.det(S))
    M = Si @ np.linalg.inv(S) @ Sj
    return kf * pref * math.exp(-0.5 * float(r @ M @ r))


def nn_cross(kf, li, bi, lj, bj, x, xp):
    Si = np.diag([bi ** -2] + [v ** -2 for v in li])
    Sj = np.diag([bj ** -2] + [v ** -2 for v in lj])
    d = len(li)
    Sij = 2.0 * Si @ np.linalg.inv(Si + Sj) @ Sj
    pref = 2 ** ((d + 1) / 2) * np.linalg.det(Si) ** 0.25 * np.linalg.det(Sj) ** 0.25
    pref /= math.sqrt(np.linalg.det(Si + Sj))
    xa, xb = np.r_[1.0, x], np.r_[1.0, xp]
    arg = 2 * xa @ Sij @ xb / math.sqrt((1 + 2 * xa @ Sij @ xa) * (1 + 2 * xb @ Sij @ xb))
    return kf * pref * (2 / math.pi) * math.asin(arg)


def matern_cross(kf, li, lj, x, xp):
    out = kf
    for a, b, p, q in zip(x, xp, li, lj):
        r = abs(a - b)
        out *= 2 * math.sqrt(p * q) / (p * p - q * q) * (p * math.exp(-SQ3 * r / p) - q * math.exp(-SQ3 * r / q))
    return out


def quad(f, a, b):
    return _quad(f, a, b, epsabs=1e-14, epsrel=1e-12, limit=200)


def _mp_axis(g_i, g_j, a, b):
    f = lambda t: g_i(a - t) * g_j(b - t)
    pts = sorted({mp.mpf(a), mp.mpf(b)})
    return mp.quad(f, [-mp.inf] + pts + [mp.inf])


def se_matern_cross(kf, l_se, l_m, x, xp, precise=False):
    """Unit-normalised Gaussian basis against the Matern basis, by quadrature.

    ``precise`` switches from scipy to 30-digit mpmath quadrature.
    """
    if not precise:
        out = kf
        for a, b, ls, lm in zip(x, xp, l_se, l_m):
            c = SQ3 / lm
            amp = (2 / math.pi) ** 0.25 / math.sqrt(ls) * math.sqrt(c)
            f = lambda t: amp * math.exp(-((a - t) / ls) ** 2 - c * abs(b - t))
            # split at both kinks and integrate each piece to infinity
            lo, hi = sorted((a, b))
            parts = [quad(f, -math.inf, lo), quad(f, lo, hi), quad(f, hi, math.inf)]
            out *= sum(p[0] for p in parts)
        return out
    mp.mp.dps = 30
    out = mp.mpf(kf)
    for a, b, ls, lm in zip(x, xp, l_se, l_m):
        ls, lm = mp.mpf(ls), mp.mpf(lm)
        c = mp.sqrt(3) / lm
        g_se = lambda t, ls=ls: (2 / mp.pi) ** 0.25 / mp.sqrt(ls) * mp.exp(-t * t / (ls * ls))
        g_m = lambda t, c=c: mp.sqrt(c) * mp.exp(-c * abs(t))
        out *= _mp_axis(g_se, g_m, mp.mpf(a), mp.mpf(b))
    return float(out)


def dense_gp(K, Ks, kss_diag, z):
    """Posterior mean/variance and log evidence by explicit inversion."""
    Kinv = np.linalg.inv(K)
    mean = Ks @ Kinv @ z
    var = kss_diag - np.einsum("ij,jk,ik->i", Ks, Kinv, Ks)
    sign, logdet = np.linalg.slogdet(K)
    assert sign > 0
    lml = -0.5 * z @ Kinv @ z - 0.5 * logdet - 0.5 * len(z) * math.log(2 * math.pi)
    return mean, var, lml


def loop_matrix(f, A, B):
    return np.array([[f(a, b) for b in B] for a in A])


def unit_sqexp_cross(kf, li, lj, x, xp):
    out = kf
    for a, b, p, q in zip(x, xp, li, lj):
        s = p * p + q * q
        out *= math.sqrt(2 * p * q / s) * math.exp(-((a - b) ** 2) / s)
    return out


def mt_entry(kf, pi, pj, a, b, unit, same):
    """One joint-covariance entry from the scalar formulas (no noise)."""
    fi, fj = pi.family.value, pj.family.value
    li, lj = pi.length_scales, pj.length_scales
    if same:
        if fi == "sqexp":
            return sqexp(li, kf, a, b) if unit else sqexp_auto(kf, li, a, b)
        if fi == "matern3":
            return matern3(li, kf, a, b)
        return nn(li, pi.bias, kf, a, b)
    if fi == fj == "sqexp":
        return unit_sqexp_cross(kf, li, lj, a, b) if unit else sqexp_cross(kf, li, lj, a, b)
    if fi == fj == "matern3":
        return matern_cross(kf, li, lj, a, b)
    if fi == fj == "nn":
        return nn_cross(kf, li, pi.bias, lj, pj.bias, a, b)
    if fi == "sqexp":
        return se_matern_cross(kf, li, lj, a, b)
    return se_matern_cross(kf, lj, li, b, a)


def joint_gram(model):
    """Loop assembly of the stacked multi-task covariance including noise."""
    unit = model.unit_sqexp
    Kf = model.similarity.matrix
    rows = []
    for i in range(model.nt):
        row = []
        for j in range(model.nt):
            B = loop_matrix(
                lambda a, b: mt_entry(Kf[i, j], model.params[i], model.params[j], a, b, unit, i == j),
                model.X[i], model.X[j],
            )
            if i == j:
                B = B + model.noise_variances[i] * np.eye(B.shape[0])
            row.append(B)
        rows.append(row)
    return np.block(rows)
