"""Config-driven experiment runs: data generation, checks, training, reports.

``run_experiment`` executes one config end to end: sample the training
support, run both support checks against it, train the configured model,
and score it on an in-domain test set (fresh draws from the training
support) and on the full-space test support. ``run_table`` repeats that
over configs and seeds and aggregates a CSV table; ``heatmap`` renders the
reconstruction error over a 2-D latent projection with the training
support overlaid.

Derived seeds: the experiment seed feeds the training sample draw; the
in-domain test set, full-space test set, net initialization, and shuffle
stream use fixed large offsets from it, so every run is reproducible from
the config alone.
"""

from __future__ import annotations

import csv
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .compose import Dataset, evaluate_batch, make_dataset
from .config import (
    ExperimentConfig,
    build_ground_truth,
    build_net,
    build_support,
    config_hash,
)
from .fileio import history_to_csv, write_pgm
from .jacobians import check_sufficient_support
from .nets import evaluate_metrics, save_net, train
from .supports import SampleSet, check_compositional_support, sample_support

__all__ = [
    "ExperimentRecord",
    "run_experiment",
    "run_table",
    "HeatmapGrid",
    "heatmap",
    "resolve_out_dir",
    "TABLE_HEADER",
]

_ID_TEST_OFFSET = 1_000_003
_FULL_TEST_OFFSET = 2_000_003
_NET_OFFSET = 3_000_003
_SHUFFLE_OFFSET = 4_000_003
_HEATMAP_OFFSET = 5_000_003

TABLE_HEADER = [
    "name", "seed_count",
    "mse_id_mean", "mse_id_sd", "mse_all_mean", "mse_all_sd",
    "r2_id_mean", "r2_id_sd", "r2_all_mean", "r2_all_sd",
    "def2_pass", "def3_pass",
]


def resolve_out_dir(cfg: ExperimentConfig) -> Path:
    """Output directory: $COMPGEN_OUT/<name>, the config's own, or runs/<name>."""
    env = os.environ.get("COMPGEN_OUT")
    if env:
        return Path(env) / cfg.name
    if cfg.out:
        return Path(cfg.out)
    return Path("runs") / cfg.name


@dataclass(frozen=True)
class ExperimentRecord:
    name: str
    config_hash: str
    seed: int
    mse_id: float
    mse_all: float
    r2_id: float
    r2_all: float
    def2_pass: bool
    def3_pass: bool
    wall_time: float
    param_ratio: float = 1.0
    error: str = ""

    @property
    def failed(self) -> bool:
        return bool(self.error)


def run_experiment(
    cfg: ExperimentConfig,
    seed: int | None = None,
    out_dir: Path | None = None,
    save_artifacts: bool = True,
    trained_net_out: list | None = None,
) -> ExperimentRecord:
    """One full run; artifacts (net, loss history) land in the output dir."""
    t0 = time.perf_counter()
    seed = cfg.seed if seed is None else seed
    ground_truth = build_ground_truth(cfg)
    train_spec = build_support(cfg, cfg.train_support)
    test_spec = build_support(cfg, cfg.test_support)

    train_samples = sample_support(train_spec, cfg.train_samples, seed)
    train_data = make_dataset(ground_truth, train_samples)
    id_test = make_dataset(
        ground_truth, sample_support(train_spec, cfg.test_samples, seed + _ID_TEST_OFFSET)
    )
    full_test = make_dataset(
        ground_truth, sample_support(test_spec, cfg.test_samples, seed + _FULL_TEST_OFFSET)
    )

    checks = cfg.checks
    def2 = check_compositional_support(
        train_spec,
        test_spec,
        resolution=checks["def2_resolution"],
        n_probe=checks["def2_probes"],
        seed=seed,
    )
    def3_samples = SampleSet(
        train_samples.points[: checks["def3_sample_cap"]], seed, train_spec
    )
    def3 = check_sufficient_support(
        ground_truth,
        def3_samples,
        probe_grid_resolution=checks["def3_probe_resolution"],
        slice_tol=checks["def3_slice_tol"],
        max_pprime=checks["def3_max_pprime"],
        tau=checks["def3_tau"],
    )

    net, param_ratio = build_net(cfg, seed=seed + _NET_OFFSET)
    train_cfg = replace(cfg.training, seed=seed + _SHUFFLE_OFFSET)
    history = train(net, train_data, train_cfg)
    metrics_id = evaluate_metrics(net, id_test)
    metrics_all = evaluate_metrics(net, full_test)

    if trained_net_out is not None:
        trained_net_out.append(net)
    record = ExperimentRecord(
        name=cfg.name,
        config_hash=config_hash(cfg),
        seed=seed,
        mse_id=metrics_id.mse,
        mse_all=metrics_all.mse,
        r2_id=metrics_id.r2_vw,
        r2_all=metrics_all.r2_vw,
        def2_pass=def2.passed,
        def3_pass=def3.passed,
        wall_time=time.perf_counter() - t0,
        param_ratio=param_ratio,
    )
    if save_artifacts:
        out = resolve_out_dir(cfg) if out_dir is None else Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        save_net(out / f"net_seed{seed}.cgl", net)
        history_to_csv(out / f"history_seed{seed}.csv", history)
    return record


def _run_one(args):
    cfg, seed, out_dir = args
    try:
        return run_experiment(cfg, seed=seed, out_dir=out_dir)
    except Exception as err:  # failures become rows, the table is still emitted
        return ExperimentRecord(
            name=cfg.name,
            config_hash=config_hash(cfg),
            seed=seed,
            mse_id=float("nan"),
            mse_all=float("nan"),
            r2_id=float("nan"),
            r2_all=float("nan"),
            def2_pass=False,
            def3_pass=False,
            wall_time=0.0,
            error=f"{type(err).__name__}: {err}",
        )


def run_table(
    configs,
    seeds: int = 3,
    out_dir: Path | str = "runs/table",
    jobs: int = 1,
) -> list:
    """Run each config over consecutive seeds; write aggregate and per-run CSVs.

    Returns the aggregated rows (one list per config, following
    ``TABLE_HEADER``). Per-run records, with wall time as the final column,
    go to ``runs.csv`` next to ``table.csv``.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    tasks = [
        (cfg, cfg.seed + rep, out_dir / cfg.name / f"seed{cfg.seed + rep}")
        for cfg in configs
        for rep in range(seeds)
    ]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            records = list(pool.map(_run_one, tasks))
    else:
        records = [_run_one(t) for t in tasks]

    by_config = {}
    for (cfg, _, _), record in zip(tasks, records):
        by_config.setdefault(cfg.name, []).append(record)

    rows = []
    for cfg in configs:
        recs = by_config[cfg.name]
        ok = [r for r in recs if not r.failed]
        if ok:
            agg = {
                key: (
                    float(np.mean([getattr(r, key) for r in ok])),
                    float(np.std([getattr(r, key) for r in ok])),
                )
                for key in ("mse_id", "mse_all", "r2_id", "r2_all")
            }
            row = [
                cfg.name, len(ok),
                repr(agg["mse_id"][0]), repr(agg["mse_id"][1]),
                repr(agg["mse_all"][0]), repr(agg["mse_all"][1]),
                repr(agg["r2_id"][0]), repr(agg["r2_id"][1]),
                repr(agg["r2_all"][0]), repr(agg["r2_all"][1]),
                str(all(r.def2_pass for r in ok)).lower(),
                str(all(r.def3_pass for r in ok)).lower(),
            ]
        else:
            row = [cfg.name, 0] + ["nan"] * 8 + ["false", "false"]
        rows.append(row)

    with open(out_dir / "table.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(TABLE_HEADER)
        writer.writerows(rows)
    with open(out_dir / "runs.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            ["name", "config_hash", "seed", "mse_id", "mse_all", "r2_id", "r2_all",
             "def2_pass", "def3_pass", "param_ratio", "error", "wall_time"]
        )
        for record in records:
            writer.writerow(
                [record.name, record.config_hash, record.seed,
                 repr(record.mse_id), repr(record.mse_all),
                 repr(record.r2_id), repr(record.r2_all),
                 str(record.def2_pass).lower(), str(record.def3_pass).lower(),
                 repr(record.param_ratio), record.error,
                 repr(record.wall_time)]
            )
    return rows


@dataclass(frozen=True)
class HeatmapGrid:
    """Mean reconstruction error over a 2-D latent projection."""

    axis_a: tuple  # (slot, dim)
    axis_b: tuple
    edges_a: np.ndarray
    edges_b: np.ndarray
    mean_error: np.ndarray  # (res, res)
    in_support: np.ndarray  # bool (res, res)


def heatmap(
    cfg: ExperimentConfig,
    net=None,
    resolution: int | None = None,
    samples_per_cell: int | None = None,
    seed: int | None = None,
    out_dir: Path | None = None,
    write_files: bool = True,
) -> HeatmapGrid:
    """Reconstruction-error heatmap over two latent axes, support overlaid.

    Trains the configured model first when ``net`` is not supplied. Each
    cell averages the model-vs-ground-truth MSE over latents whose two
    projected coordinates sit at the cell center and whose remaining
    coordinates are drawn uniformly.
    """
    if resolution is None:
        resolution = cfg.heatmap["resolution"]
    if samples_per_cell is None:
        samples_per_cell = cfg.heatmap["samples_per_cell"]
    if resolution < 4:
        raise ValueError("heatmap resolution must be >= 4")
    seed = cfg.seed if seed is None else seed
    if net is None:
        holder: list = []
        run_experiment(cfg, seed=seed, save_artifacts=False, trained_net_out=holder)
        net = holder[0]
    ground_truth = build_ground_truth(cfg)
    slot_a, dim_a = cfg.heatmap["slot_a"], cfg.heatmap["dim_a"]
    slot_b, dim_b = cfg.heatmap["slot_b"], cfg.heatmap["dim_b"]
    edges = np.linspace(0.0, 1.0, resolution + 1)
    centers = 0.5 * (edges[:-1] + edges[1:])
    rng = np.random.Generator(np.random.Philox(seed + _HEATMAP_OFFSET))
    base = rng.uniform(size=(samples_per_cell, cfg.num_slots, cfg.dim))
    mean_error = np.empty((resolution, resolution))
    for i in range(resolution):
        for j in range(resolution):
            z = base.copy()
            z[:, slot_a, dim_a] = centers[i]
            z[:, slot_b, dim_b] = centers[j]
            pred = net.predict(z)
            truth = evaluate_batch(ground_truth, z)
            mean_error[i, j] = float(np.mean((pred - truth) ** 2))

    train_spec = build_support(cfg, cfg.train_support)
    probe = sample_support(train_spec, 20_000, seed + _HEATMAP_OFFSET + 1).points
    hist, _, _ = np.histogram2d(
        probe[:, slot_a, dim_a], probe[:, slot_b, dim_b], bins=[edges, edges]
    )
    in_support = hist >= 1

    grid = HeatmapGrid(
        axis_a=(slot_a, dim_a),
        axis_b=(slot_b, dim_b),
        edges_a=edges,
        edges_b=edges,
        mean_error=mean_error,
        in_support=in_support,
    )
    if write_files:
        out = resolve_out_dir(cfg) if out_dir is None else Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "heatmap.csv", "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(
                ["i", "j", "z1x_lo", "z1x_hi", "z2x_lo", "z2x_hi",
                 "mean_err", "in_support"]
            )
            for i in range(resolution):
                for j in range(resolution):
                    writer.writerow(
                        [i, j, repr(edges[i]), repr(edges[i + 1]),
                         repr(edges[j]), repr(edges[j + 1]),
                         repr(mean_error[i, j]),
                         str(bool(in_support[i, j])).lower()]
                    )
        # linear gray map clipped at the 99th percentile
        clip = np.percentile(mean_error, 99.0)
        image = mean_error / clip if clip > 0 else mean_error
        write_pgm(out / "heatmap.pgm", np.clip(image, 0.0, 1.0))
    return grid
