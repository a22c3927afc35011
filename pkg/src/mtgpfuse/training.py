"""
Hyperparameter fitting by maximising the (block-approximated) log evidence.

The optimiser works on an unconstrained flat vector: positive quantities are
log-transformed and the task-similarity matrix enters through its
lower-triangular factor (log on the diagonal). Each restart runs simulated
annealing followed by BFGS; gradients are central finite differences.
"""

from __future__ import annotations

import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np
from scipy import optimize

from . import kernels as K
from .errors import EvaluationError, IllConditionedError, ParameterError
from .gp import GpModel
from .multitask import MtgpModel

log = logging.getLogger(__name__)

# floor applied before log-transforming quantities that may be exactly zero
_LOG_FLOOR = 1e-150


# ---------------------------------------------------------------------------
# parameter vector
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ParamSchema:
    """Layout of the flat optimisation vector for one model structure.

    Multi-task layout: per task ``log l_1..log l_d`` (+ ``log bias`` for NN),
    then the lower triangle of the similarity factor row by row (diagonal
    entries log-transformed), then ``log sigma_i`` (noise std) per task.
    Single-task layout: ``log l_1..log l_d`` (+ ``log bias``),
    ``log sigma_f``, ``log sigma``.
    """

    families: tuple
    dim: int
    multitask: bool

    @classmethod
    def for_model(cls, model) -> "ParamSchema":
        if isinstance(model, MtgpModel):
            return cls(tuple(p.family for p in model.params), model.dim, True)
        return cls((model.params.family,), model.params.dim, False)

    @property
    def nt(self) -> int:
        return len(self.families)

    @property
    def entries(self) -> tuple:
        """``(task, name)`` for each slot; task is ``None`` for shared entries."""
        out = []
        for t, fam in enumerate(self.families):
            out += [(t, f"log_length_scale[{k}]") for k in range(self.dim)]
            if fam is K.KernelFamily.NN:
                out.append((t, "log_bias"))
            if not self.multitask:
                out.append((t, "log_signal_std"))
        if self.multitask:
            for r in range(self.nt):
                for c in range(r + 1):
                    out.append((None, f"log_factor[{r},{c}]" if r == c else f"factor[{r},{c}]"))
        out += [(t, "log_noise_std") for t in range(self.nt)]
        return tuple(out)

    @property
    def size(self) -> int:
        return len(self.entries)

    def pack(self, model) -> np.ndarray:
        params = model.params if self.multitask else (model.params,)
        noises = model.noise_variances if self.multitask else (model.noise_variance,)
        v = []
        for p in params:
            v += list(np.log(p.ls))
            if p.family is K.KernelFamily.NN:
                v.append(math.log(p.bias))
            if not self.multitask:
                v.append(0.5 * math.log(p.signal_variance))
        if self.multitask:
            L = model.similarity.factor
            for r in range(self.nt):
                for c in range(r + 1):
                    v.append(math.log(max(L[r, c], _LOG_FLOOR)) if r == c else float(L[r, c]))
        v += [0.5 * math.log(max(nv, _LOG_FLOOR**2)) for nv in noises]
        return np.asarray(v, dtype=float)

    def unpack(self, vec, template):
        """Model with ``template``'s data and the hyperparameters in ``vec``."""
        vec = np.asarray(vec, dtype=float)
        if vec.shape != (self.size,):
            raise ValueError(f"expected vector of length {self.size}, got {vec.shape}")
        pos = 0

        def take(n):
            nonlocal pos
            out = vec[pos : pos + n]
            pos += n
            return out

        params = []
        for fam in self.families:
            ls = np.exp(take(self.dim))
            bias = float(np.exp(take(1)[0])) if fam is K.KernelFamily.NN else None
            sv = float(np.exp(2.0 * take(1)[0])) if not self.multitask else 1.0
            params.append(K.KernelParams(fam, ls, bias=bias, signal_variance=sv))
        if self.multitask:
            L = np.zeros((self.nt, self.nt))
            for r in range(self.nt):
                for c in range(r + 1):
                    x = take(1)[0]
                    L[r, c] = math.exp(x) if r == c else x
            noises = np.exp(2.0 * take(self.nt))
            return replace(
                template,
                params=tuple(params),
                similarity=K.TaskSimilarity(L),
                noise_variances=tuple(float(n) for n in noises),
            )
        noise = float(np.exp(2.0 * take(1)[0]))
        return replace(template, params=params[0], noise_variance=noise)


# ---------------------------------------------------------------------------
# block-approximated evidence
# ---------------------------------------------------------------------------


def _as_tasks(model):
    if isinstance(model, MtgpModel):
        return list(model.X), list(model.z)
    return [model.X], [model.z]


def _with_tasks(model, X, z):
    if isinstance(model, MtgpModel):
        return model.with_data(X, z)
    return model.with_data(X[0], z[0])


def block_indices(sizes: Sequence[int], block_size: int, seed) -> list:
    """Partition stacked multi-task data into blocks.

    Each task's points are shuffled, then the tasks are interleaved
    round-robin and cut into consecutive blocks of ``block_size``. Returns a
    list of blocks, each a list of sorted index arrays (one per task).
    """
    nt = len(sizes)
    total = int(sum(sizes))
    if total == 0:
        raise ValueError("cannot form blocks from empty data")
    if block_size < 2 * nt:
        raise ValueError(f"block_size must be at least {2 * nt} for {nt} tasks, got {block_size}")
    rng = np.random.default_rng(seed)
    perms = [rng.permutation(n) for n in sizes]
    order = [(t, perms[t][k]) for k in range(max(sizes)) for t in range(nt) if k < sizes[t]]
    blocks = []
    for start in range(0, total, block_size):
        chunk = order[start : start + block_size]
        per_task = [[] for _ in range(nt)]
        for t, idx in chunk:
            per_task[t].append(idx)
        blocks.append([np.sort(np.asarray(ix, dtype=int)) for ix in per_task])
    return blocks


def block_lml(model, block_size: int, seed=0) -> float:
    """Sum of exact log evidences over blocks of the model's training data.

    With ``block_size >= N`` this is the exact log marginal likelihood.
    """
    X, z = _as_tasks(model)
    sizes = [x.shape[0] for x in X]
    blocks = block_indices(sizes, block_size, seed)
    if len(blocks) == 1:
        return model.log_marginal_likelihood()
    total = 0.0
    for blk in blocks:
        sub = _with_tasks(model, [x[ix] for x, ix in zip(X, blk)], [v[ix] for v, ix in zip(z, blk)])
        total += sub.log_marginal_likelihood()
    return total


# ---------------------------------------------------------------------------
# optimisers
# ---------------------------------------------------------------------------


def fd_gradient(objective: Callable, p, step: float = 1e-4, f0: float | None = None) -> np.ndarray:
    """Central-difference gradient, falling back to one-sided differences.

    Raises
    ------
    EvaluationError
        If the objective is not finite at ``p`` or on both sides of a coordinate.
    """
    p = np.asarray(p, dtype=float)
    f0 = objective(p) if f0 is None else f0
    if not np.isfinite(f0):
        raise EvaluationError(f"objective is not finite at {p.tolist()}")
    g = np.empty_like(p)
    for k in range(p.size):
        e = np.zeros_like(p)
        e[k] = step
        fp, fm = objective(p + e), objective(p - e)
        if np.isfinite(fp) and np.isfinite(fm):
            g[k] = (fp - fm) / (2.0 * step)
        elif np.isfinite(fp):
            g[k] = (fp - f0) / step
        elif np.isfinite(fm):
            g[k] = (f0 - fm) / step
        else:
            raise EvaluationError(f"objective not finite on either side of coordinate {k}")
    return g


@dataclass(frozen=True)
class AnnealSchedule:
    """Geometric cooling; proposals are Gaussian with std ``step_scale * T / T0``."""

    initial_temperature: float = 10.0
    cooling: float = 0.97
    steps: int = 100
    step_scale: float = 0.3

    def __post_init__(self):
        if self.steps < 0:
            raise ValueError("anneal steps must be non-negative")
        if not (self.initial_temperature > 0 and 0 < self.cooling <= 1 and self.step_scale > 0):
            raise ValueError("invalid annealing schedule")


@dataclass(frozen=True)
class AnnealResult:
    x: np.ndarray
    fun: float
    accepted: int
    trace: list


def anneal(objective: Callable, p0, schedule: AnnealSchedule = AnnealSchedule(), seed=0) -> AnnealResult:
    """Simulated annealing with Metropolis acceptance; returns the best point seen."""
    rng = np.random.default_rng(seed)
    x = np.asarray(p0, dtype=float).copy()
    fx = objective(x)
    if not np.isfinite(fx):
        raise EvaluationError(f"objective is not finite at the annealing start {x.tolist()}")
    best_x, best_f = x.copy(), fx
    accepted = 0
    trace = []
    T0 = schedule.initial_temperature
    T = T0
    for step in range(schedule.steps):
        prop = x + rng.normal(0.0, schedule.step_scale * T / T0, size=x.size)
        fp = objective(prop)
        u = rng.random()
        if np.isfinite(fp) and (fp <= fx or u < math.exp(-(fp - fx) / T)):
            x, fx = prop, fp
            accepted += 1
            if fx < best_f:
                best_x, best_f = x.copy(), fx
        trace.append({"step": step, "temperature": T, "objective": float(fx), "best": float(best_f)})
        T *= schedule.cooling
    return AnnealResult(best_x, float(best_f), accepted, trace)


@dataclass(frozen=True)
class QnSettings:
    max_iter: int = 100
    gtol: float = 1e-4
    fd_step: float = 1e-4

    def __post_init__(self):
        if self.max_iter < 0 or not self.gtol > 0:
            raise ValueError("invalid quasi-Newton settings")
        if not 0 < self.fd_step <= 1e-2:
            raise ValueError(f"fd_step must lie in (0, 1e-2], got {self.fd_step}")


@dataclass(frozen=True)
class QnResult:
    x: np.ndarray
    fun: float
    nit: int
    reason: str
    trace: list


def quasi_newton(objective: Callable, p0, settings: QnSettings = QnSettings()) -> QnResult:
    """BFGS with finite-difference gradients.

    The returned point is the best one evaluated, so its value never exceeds
    the value at ``p0``.
    """
    p0 = np.asarray(p0, dtype=float)
    best = {"x": p0.copy(), "f": objective(p0)}
    if not np.isfinite(best["f"]):
        raise EvaluationError(f"objective is not finite at {p0.tolist()}")

    def f(p):
        v = objective(p)
        if np.isfinite(v) and v < best["f"]:
            best["x"], best["f"] = np.array(p, copy=True), v
        return v if np.isfinite(v) else np.inf

    def jac(p):
        try:
            return fd_gradient(f, p, settings.fd_step)
        except EvaluationError:
            return np.full(p.size, np.nan)

    trace = []

    def callback(intermediate_result):
        trace.append({"iteration": len(trace) + 1, "objective": float(intermediate_result.fun)})

    with np.errstate(invalid="ignore", over="ignore"):
        res = optimize.minimize(
            f,
            p0,
            jac=jac,
            method="BFGS",
            callback=callback,
            options={"maxiter": settings.max_iter, "gtol": settings.gtol},
        )
    return QnResult(best["x"], float(best["f"]), int(res.nit), str(res.message), trace)


# ---------------------------------------------------------------------------
# fitting
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TrainConfig:
    """Settings for :func:`fit`.

    ``training_subset`` caps the number of stacked points used for the
    objective; ``block_size`` is the block length of the evidence
    approximation. ``restarts`` independent runs are made, the first from
    the template's parameters and the rest from random perturbations of
    them (std ``restart_scale`` in log space).
    """

    anneal: AnnealSchedule = field(default_factory=AnnealSchedule)
    qn: QnSettings = field(default_factory=QnSettings)
    block_size: int = 500
    training_subset: int = 2000
    restarts: int = 1
    restart_scale: float = 1.0
    seed: int = 0
    threads: int = 1

    def __post_init__(self):
        if self.block_size <= 0 or self.training_subset <= 0 or self.restarts <= 0:
            raise ValueError("block_size, training_subset and restarts must be positive")
        if self.threads <= 0:
            raise ValueError("threads must be positive")


@dataclass
class TrainReport:
    """Objective history of a :func:`fit` call (objective = negative block evidence)."""

    initial_objective: float
    best_objective: float
    best_restart: int
    records: list = field(default_factory=list)
    reasons: list = field(default_factory=list)
    subset_size: int = 0

    def to_jsonl(self) -> str:
        lines = [json.dumps(r, sort_keys=True) for r in self.records]
        summary = {
            "record": "summary",
            "initial_objective": self.initial_objective,
            "best_objective": self.best_objective,
            "best_restart": self.best_restart,
            "reasons": self.reasons,
            "subset_size": self.subset_size,
        }
        lines.append(json.dumps(summary, sort_keys=True))
        return "\n".join(lines) + "\n"

    def write(self, path) -> None:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(self.to_jsonl())


def _subsample(model, limit: int, seed):
    X, z = _as_tasks(model)
    sizes = [x.shape[0] for x in X]
    total = sum(sizes)
    if total <= limit:
        return model, total
    rng = np.random.default_rng(seed)
    pick = np.sort(rng.choice(total, size=limit, replace=False))
    edges = np.concatenate([[0], np.cumsum(sizes)])
    Xs, zs = [], []
    for t in range(len(sizes)):
        ix = pick[(pick >= edges[t]) & (pick < edges[t + 1])] - edges[t]
        Xs.append(X[t][ix])
        zs.append(z[t][ix])
    return _with_tasks(model, Xs, zs), limit


def make_objective(schema: ParamSchema, template, block_size: int, seed) -> Callable:
    """Negative block evidence as a function of the flat parameter vector.

    Parameter vectors that produce invalid or unfactorisable models map to
    ``+inf``.
    """

    def objective(p):
        try:
            with np.errstate(over="ignore", under="ignore", invalid="ignore"):
                model = schema.unpack(p, template)
                val = -block_lml(model, block_size, seed)
        except (ParameterError, IllConditionedError, FloatingPointError, OverflowError) as exc:
            log.debug("objective rejected parameters %s: %s", np.round(p, 4).tolist(), exc)
            return math.inf
        return val if math.isfinite(val) else math.inf

    return objective


def _run_restart(r, p_start, objective, config):
    records, reasons = [], []
    f_start = objective(p_start)
    best_x, best_f = p_start, f_start
    records.append({"record": "start", "restart": r, "objective": f_start, "best": f_start})
    if not math.isfinite(f_start):
        reasons.append({"restart": r, "stage": "start", "reason": "non-finite start"})
        return best_x, best_f, records, reasons
    ss = np.random.SeedSequence([config.seed, 1, r])
    if config.anneal.steps > 0:
        res = anneal(objective, best_x, config.anneal, seed=ss)
        for rec in res.trace:
            records.append({"record": "anneal", "restart": r, **rec})
        if res.fun <= best_f:
            best_x, best_f = res.x, res.fun
        reasons.append({"restart": r, "stage": "anneal", "reason": f"{config.anneal.steps} steps, {res.accepted} accepted"})
        records.append({"record": "stage_end", "stage": "anneal", "restart": r, "best": best_f})
    if config.qn.max_iter > 0:
        res = quasi_newton(objective, best_x, config.qn)
        for rec in res.trace:
            records.append({"record": "bfgs", "restart": r, **rec})
        if res.fun <= best_f:
            best_x, best_f = res.x, res.fun
        reasons.append({"restart": r, "stage": "bfgs", "reason": res.reason, "iterations": res.nit})
        records.append({"record": "stage_end", "stage": "bfgs", "restart": r, "best": best_f})
    return best_x, best_f, records, reasons


def fit(template, config: TrainConfig = TrainConfig()):
    """Fit the hyperparameters of ``template`` to its own training data.

    Parameters
    ----------
    template : GpModel or MtgpModel
        Supplies the model structure, the starting hyperparameters and the
        data. See :func:`initial_gp` and :func:`initial_mtgp`.
    config : TrainConfig

    Returns
    -------
    model : same type as ``template``
        Fitted hyperparameters with the template's full data.
    report : TrainReport
    """
    schema = ParamSchema.for_model(template)
    root = np.random.SeedSequence(config.seed)
    subset_seed, block_seed = (int(s.generate_state(1)[0]) for s in root.spawn(2))
    sub, n_sub = _subsample(template, config.training_subset, subset_seed)
    objective = make_objective(schema, sub, config.block_size, block_seed)
    p_init = schema.pack(template)
    f_init = objective(p_init)
    if not math.isfinite(f_init):
        raise EvaluationError(f"objective is not finite at the initial parameters {p_init.tolist()}")

    starts = [p_init]
    for r in range(1, config.restarts):
        rng = np.random.default_rng([config.seed, 2, r])
        starts.append(p_init + rng.normal(0.0, config.restart_scale, size=p_init.size))

    if config.threads > 1 and len(starts) > 1:
        with ThreadPoolExecutor(max_workers=config.threads) as pool:
            results = list(pool.map(lambda a: _run_restart(a[0], a[1], objective, config), enumerate(starts)))
    else:
        results = [_run_restart(r, p, objective, config) for r, p in enumerate(starts)]

    report = TrainReport(f_init, f_init, 0, subset_size=n_sub)
    best_x = p_init
    for r, (x, fx, records, reasons) in enumerate(results):
        report.records += records
        report.reasons += reasons
        if fx < report.best_objective:
            best_x, report.best_objective, report.best_restart = x, fx, r
    log.info(
        "fit: objective %.6g -> %.6g (restart %d of %d)",
        f_init, report.best_objective, report.best_restart, config.restarts,
    )
    return schema.unpack(best_x, template), report


# ---------------------------------------------------------------------------
# initial parameters
# ---------------------------------------------------------------------------


def _default_length_scales(X_all: np.ndarray) -> np.ndarray:
    extent = X_all.max(axis=0) - X_all.min(axis=0)
    return np.where(extent > 0, extent / 10.0, 1.0)


def initial_gp(family, X, y) -> GpModel:
    """Heuristic starting model for a single-task GP.

    Length scales are a tenth of the data extent per axis, the signal
    variance is 90% and the noise variance 10% of the target variance.
    """
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float).ravel()
    if y.size == 0:
        raise ValueError("cannot initialise a GP without data")
    var = float(y.var()) if y.size > 1 and y.var() > 0 else 1.0
    fam = K.KernelFamily.parse(family)
    params = K.KernelParams(
        fam,
        _default_length_scales(X),
        bias=1.0 if fam is K.KernelFamily.NN else None,
        signal_variance=0.9 * var,
    )
    return GpModel.from_targets(params, 0.1 * var, X, y)


def initial_mtgp(families, X: Sequence, y: Sequence, names=None) -> MtgpModel:
    """Heuristic starting model for a multi-task GP.

    Same per-task heuristics as :func:`initial_gp`; the task-similarity
    factor is diagonal, scaled so each task's prior variance matches 90% of
    its target variance.
    """
    fams = [K.KernelFamily.parse(f) for f in families]
    X = [np.asarray(x, dtype=float) for x in X]
    y = [np.asarray(v, dtype=float).ravel() for v in y]
    if len(fams) != len(X) or len(X) != len(y):
        raise ValueError("need one family, input set and target set per task")
    if any(v.size == 0 for v in y):
        raise ValueError("every task needs at least one observation")
    ls = _default_length_scales(np.vstack(X))
    unit = K.needs_unit_sqexp(fams)
    params, kf, noises = [], [], []
    for fam, v in zip(fams, y):
        p = K.KernelParams(fam, ls, bias=1.0 if fam is K.KernelFamily.NN else None)
        var = float(v.var()) if v.size > 1 and v.var() > 0 else 1.0
        params.append(p)
        kf.append(0.9 * var / K.auto_prefactor(p, unit))
        noises.append(0.1 * var)
    return MtgpModel.from_targets(params, K.TaskSimilarity.diagonal(kf), noises, X, y, names=names)
