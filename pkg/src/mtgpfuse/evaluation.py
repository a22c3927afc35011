"""
Block-sampled k-fold cross-validation of multi-task versus single-task GPs.

Points are gridded into 3D blocks; whole blocks are dealt to folds so test
points lose their nearby support. For every fold three predictors are run
on identical support and test sets:

``MTGP``  the fitted multi-task model, fusing all tasks;
``GP``    single-task GPs derived from the MTGP (auto-covariance, task-own data);
``GPI``   independently fitted single-task GPs.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .data import TaskDataset
from .errors import MetricError
from .gp import GpModel
from .multitask import MtgpModel

log = logging.getLogger(__name__)

METHODS = ("MTGP", "GP", "GPI")
METRICS = ("SE", "VAR", "NLP")
VARIANCE_FLOOR = 1e-12

SUPPORT_NOTE = "support set drawn once per fold (uniform, seeded) and shared by all methods"


@dataclass(frozen=True)
class BlockSpec:
    size: tuple
    folds: int = 10
    seed: int = 0

    def __post_init__(self):
        size = tuple(float(s) for s in self.size)
        if not size or not all(s > 0 for s in size):
            raise ValueError(f"block dimensions must be positive, got {size}")
        if self.folds < 2:
            raise ValueError(f"need at least 2 folds, got {self.folds}")
        object.__setattr__(self, "size", size)

    @property
    def label(self) -> str:
        return "x".join(f"{s:g}" for s in self.size)


@dataclass(frozen=True, eq=False)
class FoldPlan:
    """Fold index (1..k) of every point, plus per-fold counts (``counts[f-1]``)."""

    fold: np.ndarray
    counts: np.ndarray
    n_blocks: int

    @property
    def k(self) -> int:
        return self.counts.size

    def test_mask(self, f: int) -> np.ndarray:
        return self.fold == f


def block_partition(points, spec: BlockSpec) -> FoldPlan:
    """Assign points to folds by block.

    Each point's block is ``floor((coord - min) / block_dim)`` per axis; the
    non-empty blocks are shuffled with ``spec.seed`` and dealt round-robin to
    the folds.
    """
    P = np.asarray(points, dtype=float)
    if P.ndim == 1:
        P = P[:, None]
    if P.shape[0] == 0:
        raise ValueError("cannot partition an empty point set")
    if P.shape[1] != len(spec.size):
        raise ValueError(f"points have {P.shape[1]} coordinates, block spec has {len(spec.size)}")
    cell = np.floor((P - P.min(axis=0)) / np.asarray(spec.size)).astype(np.int64)
    blocks, block_of = np.unique(cell, axis=0, return_inverse=True)
    block_of = block_of.ravel()
    rng = np.random.default_rng(spec.seed)
    order = rng.permutation(len(blocks))
    fold_of_block = np.empty(len(blocks), dtype=np.int64)
    fold_of_block[order] = np.arange(len(blocks)) % spec.folds
    fold = fold_of_block[block_of] + 1
    counts = np.bincount(fold, minlength=spec.folds + 1)[1:]
    return FoldPlan(fold, counts, len(blocks))


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------


def se(mean, truth):
    return (np.asarray(mean, dtype=float) - np.asarray(truth, dtype=float)) ** 2


def var_metric(variance):
    return np.asarray(variance, dtype=float)


def nlp(mean, variance, truth):
    """Negative log predictive density of ``truth`` under N(mean, variance)."""
    variance = np.asarray(variance, dtype=float)
    if np.any(~(variance > 0)):
        raise MetricError("NLP requires strictly positive predictive variance")
    err2 = se(mean, truth)
    return 0.5 * np.log(2.0 * math.pi * variance) + err2 / (2.0 * variance)


# ---------------------------------------------------------------------------
# cross-validation
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CvConfig:
    support_size: int = 2000
    seed: int = 0
    threads: int = 1
    keep_points: bool = False
    chunk: int = 1024


@dataclass
class CvReport:
    """Aggregated metrics of one block-sampled cross-validation run.

    ``stats[method][task][metric]`` holds ``mean``, ``std`` and ``count``
    over all test points of all folds.
    """

    block: BlockSpec
    tasks: list
    fold_counts: list
    n_blocks: int
    stats: dict
    skipped_folds: list
    clamped: dict
    nlp_excluded: dict
    support_hashes: list
    support_size: int
    note: str = SUPPORT_NOTE
    points: list | None = None
    runtime: float = field(default=0.0, compare=False)

    @property
    def min_fold(self) -> int:
        return int(min(self.fold_counts))

    @property
    def max_fold(self) -> int:
        return int(max(self.fold_counts))

    def mean(self, method: str, task: str, metric: str) -> float:
        return self.stats[method][task][metric]["mean"]

    def to_dict(self) -> dict:
        return {
            "block_size": list(self.block.size),
            "folds": self.block.folds,
            "seed": self.block.seed,
            "tasks": list(self.tasks),
            "n_blocks": self.n_blocks,
            "fold_counts": [int(c) for c in self.fold_counts],
            "min_fold_test_points": self.min_fold,
            "max_fold_test_points": self.max_fold,
            "support_size": self.support_size,
            "support_selection": self.note,
            "skipped_folds": list(self.skipped_folds),
            "clamped_variances": self.clamped,
            "nlp_excluded": self.nlp_excluded,
            "support_hashes": self.support_hashes,
            "stats": self.stats,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2) + "\n"

    def to_table(self) -> str:
        """Human-readable table: method rows per task, mean over (std)."""
        lines = [
            f"Block size {self.block.label} m, {self.block.folds}-fold CV",
            f"blocks: {self.n_blocks}; fold test points min {self.min_fold} / max {self.max_fold}",
            f"support: {self.support_size} points per fold; {self.note}",
        ]
        if self.skipped_folds:
            lines.append(f"skipped empty folds: {self.skipped_folds}")
        head = f"{'task':<8}{'method':<8}" + "".join(f"{m:>14}" for m in METRICS)
        lines += ["", head, "-" * len(head)]
        for task in self.tasks:
            for method in METHODS:
                row = self.stats[method][task]
                lines.append(
                    f"{task:<8}{method:<8}" + "".join(f"{row[m]['mean']:>14.4f}" for m in METRICS)
                )
                lines.append(
                    f"{'':<16}" + "".join(f"{'(' + format(row[m]['std'], '.4f') + ')':>14}" for m in METRICS)
                )
        return "\n".join(lines) + "\n"

    def points_csv(self) -> str:
        head = "fold,task,method,row,truth,mean,variance,se,nlp"
        out = [head]
        for rec in self.points or []:
            out.append(",".join(repr(v) if isinstance(v, float) else str(v) for v in rec))
        return "\n".join(out) + "\n"


def _hash_indices(*arrays) -> str:
    h = hashlib.sha256()
    for a in arrays:
        h.update(np.ascontiguousarray(a, dtype=np.int64).tobytes())
        h.update(b"|")
    return h.hexdigest()[:16]


def point_table(datasets: Sequence[TaskDataset]):
    """Row ids and coordinates of the union of all tasks' observations."""
    rows = np.unique(np.concatenate([np.asarray(d.rows) for d in datasets]))
    dim = datasets[0].points.shape[1]
    coords = np.full((rows.size, dim), np.nan)
    for d in datasets:
        pos = np.searchsorted(rows, d.rows)
        coords[pos] = d.points
    return rows, coords


def _fold_predictions(f, plan, rows, datasets, mtgp, gpi, config):
    test_rows = rows[plan.fold == f]
    eval_rows = rows[plan.fold != f]
    rng = np.random.default_rng([config.seed, f])
    n_sup = min(config.support_size, eval_rows.size)
    support = np.sort(rng.choice(eval_rows, size=n_sup, replace=False)) if n_sup else eval_rows[:0]

    sup_idx, test_idx = [], []
    for d in datasets:
        sup_idx.append(np.flatnonzero(np.isin(d.rows, support)))
        test_idx.append(np.flatnonzero(np.isin(d.rows, test_rows)))

    X = [d.points[ix] for d, ix in zip(datasets, sup_idx)]
    y = [d.values[ix] for d, ix in zip(datasets, sup_idx)]
    offsets = [float(v.mean()) if v.size else 0.0 for v in y]
    z = [v - o for v, o in zip(y, offsets)]

    fused = mtgp.with_data(X, z, offsets)
    out = {}
    hashes = {}
    for t, d in enumerate(datasets):
        Xt = d.points[test_idx[t]]
        if Xt.shape[0] == 0:
            continue
        derived = fused.derive_single_gp(t)
        indep = gpi[t].with_data(X[t], z[t], offsets[t])
        out[t] = {
            "MTGP": fused.posterior(t, Xt, chunk=config.chunk),
            "GP": derived.posterior(Xt, chunk=config.chunk),
            "GPI": indep.posterior(Xt, chunk=config.chunk),
        }
        # index sets actually handed to each predictor
        hashes[d.name] = {
            "MTGP": _hash_indices(*sup_idx, test_idx[t]),
            "GP": _hash_indices(*sup_idx, test_idx[t]),
            "GPI": _hash_indices(*sup_idx, test_idx[t]),
        }
    return test_idx, out, hashes


def run_cross_validation(
    datasets: Sequence[TaskDataset],
    mtgp: MtgpModel,
    gpi: Sequence[GpModel],
    spec: BlockSpec,
    config: CvConfig = CvConfig(),
) -> CvReport:
    """Block-sampled CV comparing MTGP, derived GP and independent GP.

    Parameters
    ----------
    datasets : sequence of TaskDataset
        All observations; tasks may be observed at different rows.
    mtgp : MtgpModel
        Fitted multi-task hyperparameters (its data is replaced per fold).
    gpi : sequence of GpModel
        Independently fitted single-task models, one per task.
    spec : BlockSpec
    config : CvConfig
    """
    t_start = time.perf_counter()
    if len(gpi) != len(datasets) or mtgp.nt != len(datasets):
        raise ValueError("need one independent GP and one MTGP task per dataset")
    rows, coords = point_table(datasets)
    plan = block_partition(coords, spec)

    folds = [f for f in range(1, spec.folds + 1) if plan.counts[f - 1] > 0]
    skipped = [f for f in range(1, spec.folds + 1) if plan.counts[f - 1] == 0]
    for f in skipped:
        log.warning("fold %d has no test points; skipped", f)

    def work(f):
        return _fold_predictions(f, plan, rows, datasets, mtgp, gpi, config)

    if config.threads > 1:
        with ThreadPoolExecutor(max_workers=config.threads) as pool:
            results = list(pool.map(work, folds))
    else:
        results = [work(f) for f in folds]

    names = [d.name for d in datasets]
    acc = {m: {n: {k: [] for k in METRICS} for n in names} for m in METHODS}
    clamped = {m: {n: 0 for n in names} for m in METHODS}
    excluded = {m: {n: 0 for n in names} for m in METHODS}
    points = [] if config.keep_points else None
    hashes = []
    for f, (test_idx, preds, fold_hashes) in zip(folds, results):
        hashes.append({"fold": f, "hashes": fold_hashes})
        for t, by_method in preds.items():
            d = datasets[t]
            truth = d.values[test_idx[t]]
            for method, post in by_method.items():
                e2 = se(post.mean, truth)
                var = var_metric(post.variance)
                ok = var > 0
                nl = np.full(var.shape, np.nan)
                if ok.any():
                    nl[ok] = nlp(post.mean[ok], var[ok], truth[ok])
                clamped[method][d.name] += post.n_clamped
                excluded[method][d.name] += int((~ok).sum())
                acc[method][d.name]["SE"].append(e2)
                acc[method][d.name]["VAR"].append(var)
                acc[method][d.name]["NLP"].append(nl[ok])
                if points is not None:
                    for k, ix in enumerate(test_idx[t]):
                        points.append(
                            (f, d.name, method, int(d.rows[ix]), float(truth[k]), float(post.mean[k]),
                             float(var[k]), float(e2[k]), float(nl[k]))
                        )

    stats = {}
    for m in METHODS:
        stats[m] = {}
        for n in names:
            stats[m][n] = {}
            for k in METRICS:
                vals = np.concatenate(acc[m][n][k]) if acc[m][n][k] else np.zeros(0)
                stats[m][n][k] = aggregate(vals)

    report = CvReport(
        block=spec,
        tasks=names,
        fold_counts=[int(c) for c in plan.counts],
        n_blocks=plan.n_blocks,
        stats=stats,
        skipped_folds=skipped,
        clamped=clamped,
        nlp_excluded=excluded,
        support_hashes=hashes,
        support_size=config.support_size,
        points=points,
    )
    report.runtime = time.perf_counter() - t_start
    log.info("cross-validation %s finished in %.1f s", spec.label, report.runtime)
    return report


def aggregate(values) -> dict:
    values = np.asarray(values, dtype=float)
    if values.size == 0:
        return {"mean": math.nan, "std": math.nan, "count": 0}
    return {"mean": float(np.mean(values)), "std": float(np.std(values)), "count": int(values.size)}
