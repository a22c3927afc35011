"""Dataset ingestion, model archives, grid export and synthetic generators."""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import kernels as K
from .errors import ArchiveError, DataError, ParameterError
from .gp import GpModel
from .multitask import MtgpModel

log = logging.getLogger(__name__)

COORDS = ("east", "north", "depth")
ARCHIVE_VERSION = 1
GRID_HEADER = ("east", "north", "depth", "mean", "variance")
MAX_GRID_CELLS = 2_000_000
_MISSING = {"", "nan", "NaN", "NAN"}


@dataclass(frozen=True, eq=False)
class TaskDataset:
    """Observations of one task.

    ``rows`` are the 0-based data-row numbers in the source table, so tasks
    observed at the same location can be matched up again.
    """

    name: str
    points: np.ndarray
    values: np.ndarray
    center_offset: float = field(default=math.nan)
    rows: np.ndarray | None = None

    def __post_init__(self):
        P = np.array(self.points, dtype=float)
        if P.ndim == 1:
            P = P[:, None]
        v = np.array(self.values, dtype=float).ravel()
        if P.shape[0] != v.shape[0]:
            raise ValueError(f"task {self.name}: {P.shape[0]} points but {v.shape[0]} values")
        if not np.all(np.isfinite(P)):
            raise ValueError(f"task {self.name}: non-finite coordinates")
        rows = np.arange(v.size) if self.rows is None else np.array(self.rows, dtype=np.int64)
        if rows.shape != v.shape:
            raise ValueError(f"task {self.name}: row ids do not match values")
        off = self.center_offset
        if off is None or math.isnan(off):
            off = float(v.mean()) if v.size else 0.0
        for a in (P, v, rows):
            a.setflags(write=False)
        object.__setattr__(self, "points", P)
        object.__setattr__(self, "values", v)
        object.__setattr__(self, "rows", rows)
        object.__setattr__(self, "center_offset", float(off))

    @property
    def n(self) -> int:
        return self.values.size

    @property
    def centered(self) -> np.ndarray:
        return self.values - self.center_offset

    def subset(self, idx) -> "TaskDataset":
        return TaskDataset(self.name, self.points[idx], self.values[idx], rows=self.rows[idx])


# ---------------------------------------------------------------------------
# CSV
# ---------------------------------------------------------------------------


def _parse(cell: str, row: int, col: str) -> float:
    text = cell.strip()
    if text in _MISSING:
        return math.nan
    try:
        return float(text)
    except ValueError:
        raise DataError(f"row {row}, column {col!r}: cannot parse {cell!r} as a number") from None


def load_csv(path, tasks: Sequence[str] | None = None, coords: Sequence[str] = COORDS) -> list[TaskDataset]:
    """Read a table with coordinate columns and one column per task.

    Rows missing a task value are dropped from that task only. Missing
    coordinates are an error. ``tasks=None`` takes every non-coordinate
    column in file order.
    """
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise DataError(f"{path}: empty file") from None
        body = [r for r in reader if r and any(c.strip() for c in r)]
    missing = [c for c in coords if c not in header]
    if tasks is None:
        tasks = [h for h in header if h not in coords]
    missing += [t for t in tasks if t not in header]
    if missing:
        raise DataError(f"{path}: missing columns {missing}")
    if not tasks:
        raise DataError(f"{path}: no task columns")
    ci = [header.index(c) for c in coords]
    ti = [header.index(t) for t in tasks]
    P = np.empty((len(body), len(coords)))
    V = np.empty((len(body), len(tasks)))
    for r, rec in enumerate(body):
        line = r + 2
        if len(rec) < len(header):
            rec = rec + [""] * (len(header) - len(rec))
        for k, j in enumerate(ci):
            P[r, k] = _parse(rec[j], line, header[j])
            if not math.isfinite(P[r, k]):
                raise DataError(f"row {line}, column {header[j]!r}: coordinate missing or not finite")
        for k, j in enumerate(ti):
            V[r, k] = _parse(rec[j], line, header[j])
    out = []
    for k, name in enumerate(tasks):
        keep = np.flatnonzero(np.isfinite(V[:, k]))
        out.append(TaskDataset(name, P[keep], V[keep, k], rows=keep))
    log.info("loaded %d rows from %s: %s", len(body), path, ", ".join(f"{d.name}={d.n}" for d in out))
    return out


def _fmt(v: float) -> str:
    return "" if math.isnan(v) else repr(float(v))


def write_csv(path, datasets: Sequence[TaskDataset], coords: Sequence[str] = COORDS) -> None:
    """Write tasks as one table keyed by row id; absent values are left blank."""
    rows = np.unique(np.concatenate([d.rows for d in datasets]))
    dim = datasets[0].points.shape[1]
    if len(coords) != dim:
        coords = [f"x{k + 1}" for k in range(dim)]
    P = np.full((rows.size, dim), np.nan)
    V = np.full((rows.size, len(datasets)), np.nan)
    for k, d in enumerate(datasets):
        pos = np.searchsorted(rows, d.rows)
        P[pos] = d.points
        V[pos, k] = d.values
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(list(coords) + [d.name for d in datasets])
        for p, v in zip(P, V):
            w.writerow([_fmt(x) for x in p] + [_fmt(x) for x in v])


# ---------------------------------------------------------------------------
# model archives
# ---------------------------------------------------------------------------


def fingerprint(datasets: Sequence[TaskDataset]) -> dict:
    """Count, coordinate bounding box and content hash of training data."""
    h = hashlib.sha256()
    for d in datasets:
        h.update(d.name.encode())
        h.update(np.ascontiguousarray(d.points).tobytes())
        h.update(np.ascontiguousarray(d.values).tobytes())
    pts = np.vstack([d.points for d in datasets if d.n]) if any(d.n for d in datasets) else np.zeros((0, 0))
    bbox = [[float(a), float(b)] for a, b in zip(pts.min(axis=0), pts.max(axis=0))] if pts.size else []
    return {"count": [d.n for d in datasets], "bbox": bbox, "sha256": h.hexdigest()}


def _kernel_record(p: K.KernelParams) -> dict:
    rec = {"family": p.family.value, "length_scales": list(p.length_scales), "signal_variance": p.signal_variance}
    if p.bias is not None:
        rec["bias"] = p.bias
    return rec


@dataclass(frozen=True, eq=False)
class ModelArchive:
    """Serialisable hyperparameters of an MTGP or a set of independent GPs.

    For ``kind == "mtgp"`` ``factor`` holds the lower-triangular ``K_f``
    factor. For ``kind == "gpi"`` it is ``None`` and each task carries its own
    signal variance.
    """

    kind: str
    names: tuple
    params: tuple
    noise_variances: tuple
    offsets: tuple
    factor: np.ndarray | None
    fingerprint: dict
    version: int = ARCHIVE_VERSION

    def __post_init__(self):
        if self.kind not in ("mtgp", "gpi"):
            raise ArchiveError(f"unknown archive kind {self.kind!r}")
        nt = len(self.names)
        if not (len(self.params) == len(self.noise_variances) == len(self.offsets) == nt):
            raise ArchiveError("per-task fields have inconsistent lengths")
        for v in self.noise_variances:
            if not (math.isfinite(v) and v >= 0):
                raise ArchiveError(f"noise variance must be non-negative, got {v}")
        if self.kind == "mtgp":
            F = np.asarray(self.factor, dtype=float)
            if F.shape != (nt, nt) or not np.all(np.isfinite(F)):
                raise ArchiveError(f"K_f factor must be a finite {nt}x{nt} matrix")
            if np.any(np.triu(F, 1) != 0):
                raise ArchiveError("K_f factor must be lower triangular")

    @property
    def nt(self) -> int:
        return len(self.names)

    @classmethod
    def from_mtgp(cls, model: MtgpModel, datasets: Sequence[TaskDataset]) -> "ModelArchive":
        names = model.names or tuple(d.name for d in datasets)
        return cls(
            "mtgp", tuple(names), model.params, model.noise_variances, model.offsets,
            np.array(model.similarity.factor), fingerprint(datasets),
        )

    @classmethod
    def from_gpi(cls, models: Sequence[GpModel], datasets: Sequence[TaskDataset]) -> "ModelArchive":
        return cls(
            "gpi", tuple(d.name for d in datasets), tuple(m.params for m in models),
            tuple(m.noise_variance for m in models), tuple(m.offset for m in models), None,
            fingerprint(datasets),
        )

    def check_data(self, datasets: Sequence[TaskDataset]) -> bool:
        """Compare against supplied data; a mismatch warns but is not fatal."""
        fp = fingerprint(datasets)
        if fp["sha256"] != self.fingerprint.get("sha256"):
            msg = "training data differ from the data this model was fitted on"
            warnings.warn(msg, stacklevel=2)
            log.warning(msg)
            return False
        return True

    def mtgp(self, datasets: Sequence[TaskDataset]) -> MtgpModel:
        if self.kind != "mtgp":
            raise ArchiveError("archive does not hold a multi-task model")
        self._match_tasks(datasets)
        return MtgpModel(
            self.params, K.TaskSimilarity(self.factor), self.noise_variances,
            [d.points for d in datasets], [d.values - o for d, o in zip(datasets, self.offsets)],
            self.offsets, self.names,
        )

    def gpi(self, datasets: Sequence[TaskDataset]) -> list[GpModel]:
        if self.kind != "gpi":
            raise ArchiveError("archive does not hold independent GPs")
        self._match_tasks(datasets)
        return [
            GpModel(p, nv, d.points, d.values - o, offset=o)
            for p, nv, o, d in zip(self.params, self.noise_variances, self.offsets, datasets)
        ]

    def _match_tasks(self, datasets):
        got = tuple(d.name for d in datasets)
        if got != self.names:
            raise ArchiveError(f"archive tasks {self.names} do not match data tasks {got}")

    def to_dict(self) -> dict:
        tasks = []
        for name, p, nv, off in zip(self.names, self.params, self.noise_variances, self.offsets):
            tasks.append({"name": name, "kernel": _kernel_record(p), "noise_variance": nv, "offset": off})
        doc = {"format": "mtgpfuse-model", "version": self.version, "kind": self.kind, "nt": self.nt,
               "tasks": tasks, "fingerprint": self.fingerprint}
        if self.factor is not None:
            doc["kf_factor"] = [[float(v) for v in row] for row in np.asarray(self.factor)]
        return doc

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=1, allow_nan=False) + "\n"

    @classmethod
    def from_dict(cls, doc: dict) -> "ModelArchive":
        if doc.get("format") != "mtgpfuse-model":
            raise ArchiveError("not a model archive")
        if doc.get("version") != ARCHIVE_VERSION:
            raise ArchiveError(f"unsupported archive version {doc.get('version')!r}")
        try:
            tasks = doc["tasks"]
            if doc["nt"] != len(tasks):
                raise ArchiveError("nt does not match the number of task records")
            params = []
            for t in tasks:
                k = t["kernel"]
                params.append(K.KernelParams(
                    K.KernelFamily.parse(k["family"]), tuple(k["length_scales"]),
                    k.get("bias"), k["signal_variance"],
                ))
            factor = doc.get("kf_factor")
            return cls(
                doc["kind"], tuple(t["name"] for t in tasks), tuple(params),
                tuple(float(t["noise_variance"]) for t in tasks), tuple(float(t["offset"]) for t in tasks),
                None if factor is None else np.array(factor, dtype=float), doc["fingerprint"],
            )
        except (KeyError, TypeError, ParameterError) as exc:
            raise ArchiveError(f"invalid archive: {exc}") from exc


def save_model(path, archive: ModelArchive) -> None:
    Path(path).write_text(archive.dumps(), encoding="utf-8")


def load_model(path) -> ModelArchive:
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ArchiveError(f"{path}: not valid JSON ({exc})") from exc
    return ModelArchive.from_dict(doc)


# ---------------------------------------------------------------------------
# prediction grid
# ---------------------------------------------------------------------------


def grid_centres(bbox, resolution, max_cells: int = MAX_GRID_CELLS) -> np.ndarray:
    """Cell centres of a regular grid over ``bbox = [(lo, hi), ...]``."""
    res = [int(r) for r in resolution]
    if len(res) != len(bbox) or any(r < 1 for r in res):
        raise ValueError(f"resolution {res} does not fit a {len(bbox)}-D box")
    cells = math.prod(res)
    if cells > max_cells:
        raise ValueError(f"grid has {cells} cells, more than the limit {max_cells}; use a coarser resolution")
    axes = [lo + (np.arange(n) + 0.5) * (hi - lo) / n for (lo, hi), n in zip(bbox, res)]
    mesh = np.meshgrid(*axes, indexing="ij")
    return np.column_stack([m.ravel() for m in mesh])


def export_grid_predictions(model, bbox, resolution, path, task: int = 0,
                            max_cells: int = MAX_GRID_CELLS, chunk: int = 4096) -> int:
    """Write posterior mean and variance over a grid; returns the row count."""
    G = grid_centres(bbox, resolution, max_cells)
    header = list(GRID_HEADER) if G.shape[1] == 3 else [f"x{k + 1}" for k in range(G.shape[1])] + ["mean", "variance"]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for start in range(0, G.shape[0], chunk):
            Gc = G[start : start + chunk]
            post = model.posterior(task, Gc) if isinstance(model, MtgpModel) else model.posterior(Gc)
            for p, m, v in zip(Gc, post.mean, post.variance):
                w.writerow([repr(float(x)) for x in p] + [repr(float(m)), repr(float(v))])
    return G.shape[0]


# ---------------------------------------------------------------------------
# synthetic data
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SineDemoConfig:
    n_dense: int = 50
    n_sparse: int = 15
    gap: tuple | None = (2.0, 5.0)
    noise: float = 0.1
    domain: tuple = (0.0, 2.0 * math.pi)
    seed: int = 0


def gen_sine_demo(config: SineDemoConfig = SineDemoConfig()) -> tuple[TaskDataset, TaskDataset]:
    """Task A = sin(x) sampled densely; task B = -sin(x) sampled only off the gap.

    Task B's inputs are a subset of task A's, so with zero noise the two
    tasks are exact negatives of each other where both are observed.
    """
    rng = np.random.default_rng(config.seed)
    lo, hi = config.domain
    x = np.sort(rng.uniform(lo, hi, config.n_dense))
    eps_a = rng.standard_normal(config.n_dense)
    eps_b = rng.standard_normal(config.n_dense)
    allowed = np.ones(x.size, dtype=bool)
    if config.gap is not None:
        g0, g1 = config.gap
        allowed = (x < g0) | (x > g1)
    pool = np.flatnonzero(allowed)
    n_b = min(config.n_sparse, pool.size)
    rows_b = np.sort(rng.choice(pool, size=n_b, replace=False))
    a = TaskDataset("A", x[:, None], np.sin(x) + config.noise * eps_a)
    b = TaskDataset("B", x[rows_b, None], -np.sin(x[rows_b]) + config.noise * eps_b[rows_b], rows=rows_b)
    return a, b


@dataclass(frozen=True)
class FieldConfig:
    """Synthetic correlated 3D field.

    ``mixing`` has shape ``(nt, n_latent)``; row ``t`` gives the weights of
    the latent fields in task ``t``. ``latent_length_scales`` has one 3-vector
    per latent.
    """

    shape: tuple = (25, 20, 10)
    spacing: tuple = (1.0, 1.0, 1.0)
    latent_length_scales: tuple = ((4.0, 4.0, 2.0), (3.0, 3.0, 1.5))
    mixing: tuple = ((1.0, 0.2), (0.9, -0.3), (0.8, 0.3))
    noise: tuple | float = 0.1
    observed_fraction: tuple | float = 0.5
    names: tuple | None = None
    seed: int = 0

    @property
    def nt(self) -> int:
        return len(self.mixing)


def _axis_chol(n: int, spacing: float, length: float) -> np.ndarray:
    t = np.arange(n) * spacing
    C = np.exp(-0.5 * ((t[:, None] - t[None, :]) / length) ** 2)
    C[np.diag_indices(n)] += 1e-8
    return np.linalg.cholesky(C)


def grid_points(shape, spacing) -> np.ndarray:
    axes = [np.arange(n) * s for n, s in zip(shape, spacing)]
    mesh = np.meshgrid(*axes, indexing="ij")
    return np.column_stack([m.ravel() for m in mesh])


def sample_latents(config: FieldConfig, rng) -> np.ndarray:
    """Unit-variance SQEXP latent fields on the grid, shape ``(n_latent, N)``.

    The grid covariance is a Kronecker product of per-axis covariances, so a
    sample is the per-axis Cholesky factors applied along each axis.
    """
    nx, ny, nz = config.shape
    out = []
    for ls in config.latent_length_scales:
        Lx, Ly, Lz = (_axis_chol(n, s, l) for n, s, l in zip(config.shape, config.spacing, ls))
        w = rng.standard_normal((nx, ny, nz))
        out.append(np.einsum("ia,jb,kc,abc->ijk", Lx, Ly, Lz, w, optimize=True).ravel())
    return np.array(out)


def _per_task(value, nt):
    arr = np.broadcast_to(np.asarray(value, dtype=float), (nt,))
    return [float(v) for v in arr]


def gen_correlated_field(config: FieldConfig = FieldConfig()) -> list[TaskDataset]:
    """Linearly mixed latent GP fields sampled on a 3D grid, plus noise."""
    M = np.asarray(config.mixing, dtype=float)
    if M.ndim != 2 or M.shape[1] != len(config.latent_length_scales):
        raise ValueError("mixing must be (nt, n_latent) with one latent length-scale triple per column")
    rng = np.random.default_rng(config.seed)
    P = grid_points(config.shape, config.spacing)
    F = M @ sample_latents(config, rng)
    noise = _per_task(config.noise, config.nt)
    frac = _per_task(config.observed_fraction, config.nt)
    names = config.names or tuple(f"E{t + 1}" for t in range(config.nt))
    out = []
    for t in range(config.nt):
        y = F[t] + noise[t] * rng.standard_normal(P.shape[0])
        keep = np.flatnonzero(rng.random(P.shape[0]) < frac[t]) if frac[t] < 1 else np.arange(P.shape[0])
        out.append(TaskDataset(names[t], P[keep], y[keep], rows=keep))
    return out

