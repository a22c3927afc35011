"""Command-line interface: ``mtgp train | predict | crossval | demo``."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import data as D
from . import evaluation as E
from . import training as T
from .kernels import KernelFamily

log = logging.getLogger("mtgpfuse")

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


def _csv_list(text: str) -> list[str]:
    return [t.strip() for t in text.split(",") if t.strip()]


def _floats(text: str, n: int | None = None, what: str = "value") -> list[float]:
    try:
        vals = [float(t) for t in _csv_list(text)]
    except ValueError:
        raise argparse.ArgumentTypeError(f"{what} must be comma-separated numbers: {text!r}") from None
    if n is not None and len(vals) != n:
        raise argparse.ArgumentTypeError(f"{what} needs {n} numbers, got {len(vals)}")
    return vals


def _block(text):
    return tuple(_floats(text, 3, "block size"))


def _families(text: str, n_tasks: int) -> list[KernelFamily]:
    names = _csv_list(text)
    try:
        fams = [KernelFamily.parse(k) for k in names]
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    if len(fams) != n_tasks:
        raise UsageError(f"--kernel lists {len(fams)} kernels for {n_tasks} tasks")
    return fams


def _train_config(args, seed=None) -> T.TrainConfig:
    return T.TrainConfig(
        anneal=T.AnnealSchedule(steps=args.anneal_steps),
        qn=T.QnSettings(max_iter=args.max_iter),
        block_size=args.block_size,
        training_subset=args.subset,
        restarts=args.restarts,
        seed=args.seed if seed is None else seed,
        threads=args.threads,
    )


def _load(args):
    tasks = _csv_list(args.tasks) if args.tasks else None
    return D.load_csv(args.data, tasks, _csv_list(args.coords))


def _fit_mtgp(datasets, families, config):
    template = T.initial_mtgp(families, [d.points for d in datasets], [d.values for d in datasets],
                              [d.name for d in datasets])
    return T.fit(template, config)


def _fit_gpi(datasets, families, config):
    models, reports = [], []
    seeds = np.random.SeedSequence(config.seed).spawn(len(datasets))
    for d, fam, ss in zip(datasets, families, seeds):
        cfg = T.TrainConfig(**{**config.__dict__, "seed": int(ss.generate_state(1)[0])})
        m, rep = T.fit(T.initial_gp(fam, d.points, d.values), cfg)
        models.append(m)
        reports.append(rep)
    return models, reports


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_train(args) -> int:
    datasets = _load(args)
    families = _families(args.kernel, len(datasets))
    config = _train_config(args)
    out = Path(args.out)
    report_path = Path(args.report) if args.report else out.with_suffix(".report.jsonl")
    if args.mode == "mtgp":
        model, rep = _fit_mtgp(datasets, families, config)
        D.save_model(out, D.ModelArchive.from_mtgp(model, datasets))
        rep.write(report_path)
    else:
        models, reps = _fit_gpi(datasets, families, config)
        D.save_model(out, D.ModelArchive.from_gpi(models, datasets))
        with open(report_path, "w", encoding="utf-8", newline="\n") as fh:
            for d, rep in zip(datasets, reps):
                fh.write(json.dumps({"name": d.name, "record": "task"}) + "\n")
                fh.write(rep.to_jsonl())
    print(f"wrote {out} and {report_path}")
    return EXIT_OK


def cmd_predict(args) -> int:
    if not Path(args.model).is_file():
        raise UsageError(f"model archive not found: {args.model}")
    archive = D.load_model(args.model)
    datasets = D.load_csv(args.data, list(archive.names), _csv_list(args.coords))
    archive.check_data(datasets)
    try:
        task = archive.names.index(args.task) if args.task else 0
    except ValueError:
        raise UsageError(f"task {args.task!r} not in archive tasks {archive.names}") from None
    if archive.kind == "mtgp":
        model = archive.mtgp(datasets)
    else:
        model, task = archive.gpi(datasets)[task], 0
    if args.bbox:
        b = _floats(args.bbox, 2 * datasets[0].points.shape[1], "bbox")
        bbox = list(zip(b[0::2], b[1::2]))
    else:
        pts = np.vstack([d.points for d in datasets])
        bbox = list(zip(pts.min(axis=0), pts.max(axis=0)))
    res = [int(r) for r in _floats(args.resolution, len(bbox), "resolution")]
    try:
        n = D.export_grid_predictions(model, bbox, res, args.out, task=task, max_cells=args.max_cells)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    print(f"wrote {n} grid rows to {args.out}")
    return EXIT_OK


def cmd_crossval(args) -> int:
    if not args.block:
        raise UsageError("crossval needs at least one --block")
    datasets = _load(args)
    if args.fit_first:
        if not args.kernel:
            raise UsageError("--fit-first needs --kernel")
        families = _families(args.kernel, len(datasets))
        config = _train_config(args)
        mtgp, _ = _fit_mtgp(datasets, families, config)
        gpi, _ = _fit_gpi(datasets, families, config)
    else:
        for path, flag in ((args.mtgp, "--mtgp"), (args.gpi, "--gpi")):
            if not path:
                raise UsageError(f"{flag} archive required (or use --fit-first)")
            if not Path(path).is_file():
                raise UsageError(f"model archive not found: {path}")
        ma, ga = D.load_model(args.mtgp), D.load_model(args.gpi)
        ma.check_data(datasets)
        ga.check_data(datasets)
        mtgp, gpi = ma.mtgp(datasets), ga.gpi(datasets)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    cfg = E.CvConfig(support_size=args.support, seed=args.seed, threads=args.threads,
                     keep_points=args.dump_points)
    for size in args.block:
        spec = E.BlockSpec(size, folds=args.folds, seed=args.seed)
        rep = E.run_cross_validation(datasets, mtgp, gpi, spec, cfg)
        stem = out_dir / f"cv_{spec.label}"
        stem.with_suffix(".txt").write_text(rep.to_table(), encoding="utf-8")
        stem.with_suffix(".json").write_text(rep.to_json(), encoding="utf-8")
        if args.dump_points:
            (out_dir / f"points_{spec.label}.csv").write_text(rep.points_csv(), encoding="utf-8")
        print(rep.to_table())
    return EXIT_OK


def run_demo(config: D.SineDemoConfig, train: T.TrainConfig, n_test: int = 200):
    """Fit a fused 2-task model and an independent GP on task B of the sine demo.

    Returns per-point rows and a dict of criterion outcomes.
    """
    a, b = D.gen_sine_demo(config)
    fams = [KernelFamily.SQEXP, KernelFamily.SQEXP]
    mtgp, _ = _fit_mtgp([a, b], fams, train)
    gpi, _ = T.fit(T.initial_gp(KernelFamily.SQEXP, b.points, b.values), train)
    lo, hi = config.domain
    xs = np.linspace(lo, hi, n_test)
    truth = -np.sin(xs)
    fused = mtgp.posterior(1, xs[:, None])
    indep = gpi.posterior(xs[:, None])
    rows = np.column_stack([xs, truth, fused.mean, fused.variance, indep.mean, indep.variance])
    summary = {}
    if config.gap is not None:
        g = (xs >= config.gap[0]) & (xs <= config.gap[1])
        summary["variance_reduction"] = bool(np.all(fused.variance[g] < indep.variance[g]))
        mse_f = float(np.mean((fused.mean[g] - truth[g]) ** 2))
        mse_i = float(np.mean((indep.mean[g] - truth[g]) ** 2))
        summary["gap_mse_mtgp"], summary["gap_mse_gpi"] = mse_f, mse_i
        summary["mse_reduction"] = mse_f < mse_i
    else:
        summary["max_abs_err_mtgp"] = float(np.max(np.abs(fused.mean - truth)))
        summary["max_abs_err_gpi"] = float(np.max(np.abs(indep.mean - truth)))
    summary["kf"] = mtgp.similarity.matrix.tolist()
    return rows, summary


def cmd_demo(args) -> int:
    gap = None if args.gap_none else tuple(args.gap)
    cfg = D.SineDemoConfig(n_dense=args.n_dense, n_sparse=args.n_sparse, gap=gap, noise=args.noise, seed=args.seed)
    rows, summary = run_demo(cfg, _train_config(args))
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "demo_points.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["x", "truth", "mtgp_mean", "mtgp_var", "gpi_mean", "gpi_var"])
        for r in rows:
            w.writerow([repr(float(v)) for v in r])
    lines = []
    for key, val in summary.items():
        if isinstance(val, bool):
            lines.append(f"{key}: {'PASS' if val else 'FAIL'}")
        else:
            lines.append(f"{key}: {val!r}")
    text = "\n".join(lines) + "\n"
    (out_dir / "demo_summary.txt").write_text(text, encoding="utf-8")
    print(text, end="")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def _add_common(p):
    p.add_argument("--seed", type=int, default=0, help="root seed for all randomness (default 0)")
    p.add_argument("--threads", type=int, default=os.cpu_count() or 1, help="worker threads")


def _add_data(p, tasks_required=True):
    p.add_argument("--data", required=True, help="CSV with coordinate and task columns")
    p.add_argument("--tasks", required=tasks_required, help="comma-separated task columns")
    p.add_argument("--coords", default=",".join(D.COORDS), help="coordinate columns (default east,north,depth)")


def _add_training(p):
    p.add_argument("--restarts", type=int, default=1, help="optimisation restarts, best kept")
    p.add_argument("--anneal-steps", type=int, default=100)
    p.add_argument("--max-iter", type=int, default=100, help="quasi-Newton iterations")
    p.add_argument("--block-size", type=int, default=500, help="points per block-likelihood block")
    p.add_argument("--subset", type=int, default=2000, help="training subset size")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mtgp", description="Multi-task Gaussian process fusion")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="fit an MTGP or independent GPs")
    _add_data(p)
    p.add_argument("--kernel", required=True, help="nn|sqexp|matern3 per task, comma-separated")
    p.add_argument("--mode", choices=("mtgp", "gpi"), default="mtgp")
    p.add_argument("--out", required=True, help="model archive path")
    p.add_argument("--report", help="training report path (default <out>.report.jsonl)")
    _add_training(p)
    _add_common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("predict", help="posterior on a regular grid")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True, help="training data the model was fitted on")
    p.add_argument("--coords", default=",".join(D.COORDS))
    p.add_argument("--task", help="task to predict (default: first)")
    p.add_argument("--bbox", help="lo,hi per axis (default: data bounding box)")
    p.add_argument("--resolution", default="20,20,5", help="cells per axis")
    p.add_argument("--max-cells", type=int, default=D.MAX_GRID_CELLS)
    p.add_argument("--out", required=True)
    _add_common(p)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("crossval", help="block-sampled cross-validation")
    _add_data(p)
    p.add_argument("--mtgp", help="fitted MTGP archive")
    p.add_argument("--gpi", help="fitted independent-GP archive")
    p.add_argument("--fit-first", action="store_true", help="fit both models before cross-validation")
    p.add_argument("--kernel", help="kernels for --fit-first")
    p.add_argument("--block", type=_block, action="append", help="bx,by,bz block size (repeatable)")
    p.add_argument("--folds", type=int, default=10)
    p.add_argument("--support", type=int, default=2000, help="support points per fold")
    p.add_argument("--dump-points", action="store_true", help="write per-point metrics")
    p.add_argument("--out-dir", required=True)
    _add_training(p)
    _add_common(p)
    p.set_defaults(func=cmd_crossval)

    p = sub.add_parser("demo", help="two-sine fusion demonstration")
    p.add_argument("--n-dense", type=int, default=D.SineDemoConfig.n_dense)
    p.add_argument("--n-sparse", type=int, default=D.SineDemoConfig.n_sparse)
    p.add_argument("--gap", type=lambda s: _floats(s, 2, "gap"), default=list(D.SineDemoConfig.gap))
    p.add_argument("--gap-none", action="store_true", help="sample task B everywhere")
    p.add_argument("--noise", type=float, default=D.SineDemoConfig.noise)
    p.add_argument("--out-dir", required=True)
    _add_training(p)
    _add_common(p)
    p.set_defaults(func=cmd_demo)
    return parser


def _setup_logging():
    level = os.environ.get("MTGP_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING), format="%(levelname)s %(name)s: %(message)s")


def main(argv=None) -> int:
    _setup_logging()
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"mtgp {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:  # noqa: BLE001 - any module error is a runtime failure
        print(f"mtgp {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
