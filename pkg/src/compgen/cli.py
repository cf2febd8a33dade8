"""Command-line interface for data generation, checks, reconstruction, training.

Subcommands:

* ``gen``              sample a training set and write latents/observations
* ``check-support``    marginal-support equality of train vs test supports
* ``check-sufficient`` summed-Jacobian rank check of the training support
* ``reconstruct``      recover component canvases from the ground-truth
  teacher by path integration and verify generalization
* ``train``            one training run with metrics and support checks
* ``table``            run several configs over seeds, aggregate a CSV table
* ``heatmap``          reconstruction-error heatmap over a latent projection

Every run ends with a machine-readable line ``RESULT key=value ...``.
Exit codes: 0 success, 1 usage/validation error, 2 runtime failure. A
failing support check is a finding, not an error: the exit code stays 0.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

__all__ = ["main", "cli_main"]


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise _UsageError(message)


def _build_parser() -> _Parser:
    parser = _Parser(
        prog="compgen",
        description="Compositional data-generating processes: checks, "
        "reconstruction, and training experiments.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, needs_config=True):
        p.add_argument("--config", required=needs_config, action="append",
                       default=None, help="experiment config file (INI)")
        p.add_argument("--seed", type=int, default=None, help="override the seed")
        p.add_argument("--out", type=str, default=None, help="output directory")
        p.add_argument("--quiet", action="store_true", help="print only RESULT")

    p = sub.add_parser("gen", help="generate a dataset from the training support")
    common(p)
    p.add_argument("--previews", type=int, default=4,
                   help="number of observation images to write")

    p = sub.add_parser("check-support", help="marginal-support equality check")
    common(p)

    p = sub.add_parser("check-sufficient", help="summed-Jacobian rank check")
    common(p)

    p = sub.add_parser("reconstruct", help="recover component canvases from the teacher")
    common(p)
    p.add_argument("--nodes", type=int, default=9, help="grid nodes per latent axis")
    p.add_argument("--delta", type=float, default=1.0 / 64.0, help="integration step")
    p.add_argument("--tol", type=float, default=5e-2, help="pass threshold on test MSE")

    p = sub.add_parser("train", help="train one model per the config")
    common(p)

    p = sub.add_parser("table", help="run configs x seeds and aggregate a table")
    common(p)
    p.add_argument("--seeds", type=int, default=3, help="seeds per config")
    p.add_argument("--jobs", type=int, default=1, help="parallel runs")

    p = sub.add_parser("heatmap", help="error heatmap over a 2-D latent projection")
    common(p)
    p.add_argument("--resolution", type=int, default=None)
    return parser


def _say(quiet, *parts):
    if not quiet:
        print(*parts)


def _result(**kv):
    body = " ".join(f"{k.rstrip('_')}={_fmt(v)}" for k, v in kv.items())
    print(f"RESULT {body}")


def _fmt(v):
    if isinstance(v, bool):
        return str(v).lower()
    if isinstance(v, float):
        return f"{v:.6g}"
    return str(v)


def _load(args):
    from .config import load_config

    cfg = load_config(args.config[0])
    if args.seed is not None:
        from dataclasses import replace

        cfg = replace(cfg, seed=args.seed)
    if args.out is not None:
        from dataclasses import replace

        cfg = replace(cfg, out=args.out)
    return cfg


def _out_dir(cfg, args):
    from .harness import resolve_out_dir

    out = Path(args.out) if args.out else resolve_out_dir(cfg)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _cmd_gen(args):
    from .compose import make_dataset
    from .config import build_ground_truth, build_support
    from .fileio import canvas_to_image_file, canvases_to_csv
    from .supports import sample_support
    import csv

    cfg = _load(args)
    out = _out_dir(cfg, args)
    model = build_ground_truth(cfg)
    spec = build_support(cfg, cfg.train_support)
    samples = sample_support(spec, cfg.train_samples, cfg.seed)
    data = make_dataset(model, samples)
    with open(out / "latents.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        dim = cfg.dim
        writer.writerow(
            ["index"] + [f"z{k}_{d}" for k in range(cfg.num_slots) for d in range(dim)]
        )
        for i, z in enumerate(data.latents):
            writer.writerow([i] + [repr(v) for v in z.reshape(-1)])
    canvases_to_csv(out / "observations.csv", data.observations)
    layout = model.observation_layout
    n_prev = min(args.previews, len(data))
    for i in range(n_prev):
        ext = "pgm" if layout.channels == 1 else "ppm"
        canvas_to_image_file(out / f"observation_{i}.{ext}", data.observations[i],
                             layout, scale=max(cfg.amplitude, 1.0))
    _say(args.quiet, f"wrote {len(data)} samples to {out}")
    _result(n=len(data), out=out)
    return 0


def _cmd_check_support(args):
    from .config import build_support
    from .supports import check_compositional_support

    cfg = _load(args)
    p = build_support(cfg, cfg.train_support)
    q = build_support(cfg, cfg.test_support)
    result = check_compositional_support(
        p, q,
        resolution=cfg.checks["def2_resolution"],
        n_probe=cfg.checks["def2_probes"],
        seed=cfg.seed,
    )
    for slot in result.slots:
        _say(args.quiet,
             f"slot {slot.slot}: {'pass' if slot.passed else 'FAIL'} "
             f"({len(slot.offending)} offending cells)")
    _result(pass_=result.passed,
            offending=sum(len(s.offending) for s in result.slots))
    return 0


def _cmd_check_sufficient(args):
    from .config import build_ground_truth, build_support
    from .fileio import sufficiency_to_csv
    from .jacobians import check_sufficient_support
    from .supports import sample_support

    cfg = _load(args)
    out = _out_dir(cfg, args)
    model = build_ground_truth(cfg)
    spec = build_support(cfg, cfg.train_support)
    samples = sample_support(
        spec, min(cfg.train_samples, cfg.checks["def3_sample_cap"]), cfg.seed
    )
    report = check_sufficient_support(
        model,
        samples,
        probe_grid_resolution=cfg.checks["def3_probe_resolution"],
        slice_tol=cfg.checks["def3_slice_tol"],
        max_pprime=cfg.checks["def3_max_pprime"],
        tau=cfg.checks["def3_tau"],
    )
    sufficiency_to_csv(out / "sufficiency.csv", report)
    failed = report.failed_probes
    _say(args.quiet,
         f"{len(report.probes) - len(failed)}/{len(report.probes)} probes reached "
         f"full rank {report.target}")
    _result(pass_=report.passed, probes=len(report.probes),
            probes_failed=len(failed), out=out / "sufficiency.csv")
    return 0


def _cmd_reconstruct(args):
    from .config import build_ground_truth, build_support
    from .fileio import gridfield_to_csv
    from .reconstruct import (
        TeacherOracle,
        initial_canvases,
        integrate_component,
        plan_paths,
        verify_generalization,
    )
    from .supports import sample_support

    cfg = _load(args)
    out = _out_dir(cfg, args)
    model = build_ground_truth(cfg)
    spec = build_support(cfg, cfg.train_support)
    q_spec = build_support(cfg, cfg.test_support)
    grids = [
        tuple(np.linspace(0.0, 1.0, args.nodes) for _ in range(cfg.dim))
    ] * cfg.num_slots
    plan = plan_paths(spec, grids, delta=args.delta)
    samples = sample_support(spec, cfg.train_samples, cfg.seed)
    teacher = TeacherOracle.from_model(model)
    field = integrate_component(
        teacher, cfg.composition, samples, plan,
        initial_canvases(model, plan.start), model.canvas_layout,
        slice_tol=cfg.checks["def3_slice_tol"],
        max_pprime=cfg.checks["def3_max_pprime"],
    )
    q_samples = sample_support(q_spec, cfg.test_samples, cfg.seed + 17)
    report = verify_generalization(
        field, cfg.composition, teacher, q_samples, tol=args.tol,
        canvas_layout=model.canvas_layout, ground_truth_families=model.families,
    )
    paths = gridfield_to_csv(out / "reconstructed", field)
    _say(args.quiet, report.summary())
    _say(args.quiet, f"grids written to {[str(p) for p in paths]}")
    max_err = max(e for e in report.slot_max_error if e is not None)
    _result(pass_=report.passed, q_mse=report.q_mse, max_node_err=max_err, out=out)
    return 0


def _cmd_train(args):
    from .harness import run_experiment

    cfg = _load(args)
    out = _out_dir(cfg, args)
    record = run_experiment(cfg, seed=args.seed, out_dir=out)
    _say(args.quiet,
         f"{record.name}: R2 id {record.r2_id:.3f}, R2 all {record.r2_all:.3f} "
         f"(mse {record.mse_id:.2e} / {record.mse_all:.2e}) in {record.wall_time:.1f}s")
    _result(
        r2_id=record.r2_id, r2_all=record.r2_all,
        mse_id=record.mse_id, mse_all=record.mse_all,
        def2_pass=record.def2_pass, def3_pass=record.def3_pass, out=out,
    )
    return 0


def _cmd_table(args):
    from .config import load_config
    from .harness import run_table

    configs = [load_config(path) for path in args.config]
    out = Path(args.out) if args.out else Path("runs/table")
    rows = run_table(configs, seeds=args.seeds, out_dir=out, jobs=args.jobs)
    for row in rows:
        _say(args.quiet, ",".join(str(v) for v in row))
    _result(rows=len(rows), out=out / "table.csv")
    return 0


def _cmd_heatmap(args):
    from .harness import heatmap as run_heatmap

    cfg = _load(args)
    out = _out_dir(cfg, args)
    grid = run_heatmap(cfg, resolution=args.resolution, seed=args.seed, out_dir=out)
    inside = grid.mean_error[grid.in_support]
    outside = grid.mean_error[~grid.in_support]
    _say(args.quiet,
         f"mean error inside support {inside.mean():.3e}, "
         f"outside {outside.mean():.3e}" if outside.size else "support covers grid")
    _result(
        cells=grid.mean_error.size,
        mean_err_in=float(inside.mean()) if inside.size else float("nan"),
        mean_err_out=float(outside.mean()) if outside.size else float("nan"),
        out=out / "heatmap.pgm",
    )
    return 0


_COMMANDS = {
    "gen": _cmd_gen,
    "check-support": _cmd_check_support,
    "check-sufficient": _cmd_check_sufficient,
    "reconstruct": _cmd_reconstruct,
    "train": _cmd_train,
    "table": _cmd_table,
    "heatmap": _cmd_heatmap,
}


def cli_main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except _UsageError as err:
        print(f"error: {err}", file=sys.stderr)
        parser.print_usage(sys.stderr)
        return 1
    try:
        return _COMMANDS[args.command](args)
    except (ValueError, FileNotFoundError, KeyError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 1
    except Exception as err:  # runtime failure
        print(f"runtime failure: {type(err).__name__}: {err}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(cli_main())


if __name__ == "__main__":
    main()
