"""CSV and binary-image writers for the package's data products.

Images are written as binary PGM (P5, grayscale) or PPM (P6, RGB) with
values clamped to [0, 1] and scaled to 0..255. CSV files carry a single
header row; all numbers use ``repr``-faithful formatting so re-runs diff
cleanly.
"""

from __future__ import annotations

import csv
from pathlib import Path

import numpy as np

from .families import CanvasLayout

__all__ = [
    "write_pgm",
    "write_ppm",
    "canvas_to_image_file",
    "canvases_to_csv",
    "coverage_to_csv",
    "sufficiency_to_csv",
    "gridfield_to_csv",
    "history_to_csv",
    "load_coefficients_csv",
]


def _to_bytes(values: np.ndarray) -> np.ndarray:
    clipped = np.clip(values, 0.0, 1.0)
    return np.round(clipped * 255.0).astype(np.uint8)


def write_pgm(path, image: np.ndarray) -> None:
    """Binary PGM (P5) from a (H, W) array of values in [0, 1]."""
    image = np.asarray(image, dtype=float)
    if image.ndim != 2:
        raise ValueError("PGM wants a 2-D array")
    h, w = image.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode())
        fh.write(_to_bytes(image).tobytes())


def write_ppm(path, image: np.ndarray) -> None:
    """Binary PPM (P6) from a (3, H, W) array of values in [0, 1]."""
    image = np.asarray(image, dtype=float)
    if image.ndim != 3 or image.shape[0] != 3:
        raise ValueError("PPM wants a (3, H, W) array")
    _, h, w = image.shape
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode())
        fh.write(_to_bytes(np.moveaxis(image, 0, -1)).tobytes())


def canvas_to_image_file(path, values: np.ndarray, layout: CanvasLayout,
                         scale: float = 1.0) -> None:
    """Write a flat canvas as PGM (1 channel) or PPM (3+; alpha dropped)."""
    if not layout.is_image:
        raise ValueError("flat canvases have no image form")
    img = layout.as_image(np.asarray(values, dtype=float) / scale)
    if layout.channels == 1:
        write_pgm(path, img[0])
    else:
        write_ppm(path, img[:3])


def _write_rows(path, header, rows):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        writer.writerows(rows)


def canvases_to_csv(path, canvases: np.ndarray) -> None:
    """One flat canvas (or observation) per row: index,v0,v1,..."""
    canvases = np.atleast_2d(np.asarray(canvases, dtype=float))
    header = ["index"] + [f"v{i}" for i in range(canvases.shape[1])]
    rows = ([i] + [repr(v) for v in row] for i, row in enumerate(canvases))
    _write_rows(path, header, rows)


def coverage_to_csv(path, grid) -> None:
    """Cell-count export: slot,cell_index,lo...,hi...,count."""
    dim = grid.edges.shape[0]
    header = (
        ["slot", "cell_index"]
        + [f"lo{d}" for d in range(dim)]
        + [f"hi{d}" for d in range(dim)]
        + ["count"]
    )
    rows = []
    for flat_index, index in enumerate(np.ndindex(*grid.counts.shape)):
        lo, hi = grid.cell_bounds(index)
        rows.append(
            [grid.slot, flat_index]
            + [repr(v) for v in lo]
            + [repr(v) for v in hi]
            + [int(grid.counts[index])]
        )
    _write_rows(path, header, rows)


def sufficiency_to_csv(path, report) -> None:
    """Probe-level export: slot,probe_index,probe coords,pprime_size,rank,M,pass."""
    dim = max((p.probe.size for p in report.probes), default=0)
    header = (
        ["slot", "probe_index"]
        + [f"probe{d}" for d in range(dim)]
        + ["pprime_size", "rank", "target", "pass"]
    )
    rows = []
    for p in report.probes:
        rank = p.rank_report.numerical_rank if p.rank_report else 0
        rows.append(
            [p.slot, p.probe_index]
            + [repr(v) for v in p.probe]
            + [p.pprime_size, rank, report.target, str(p.passed).lower()]
        )
    _write_rows(path, header, rows)


def gridfield_to_csv(path_prefix, field) -> list:
    """Per-slot grids: node_coords...,canvas_values... Returns written paths."""
    paths = []
    for slot_field in field.slots:
        path = Path(f"{path_prefix}_slot{slot_field.slot}.csv")
        dim = len(slot_field.axes)
        m = slot_field.values.shape[-1]
        header = [f"z{d}" for d in range(dim)] + [f"v{i}" for i in range(m)]
        rows = []
        for node in np.ndindex(*slot_field.filled.shape):
            if not slot_field.filled[node]:
                continue
            coords = [repr(slot_field.axes[d][node[d]]) for d in range(dim)]
            rows.append(coords + [repr(v) for v in slot_field.values[node]])
        _write_rows(path, header, rows)
        paths.append(path)
    return paths


def history_to_csv(path, history) -> None:
    """Training history export: epoch,mse."""
    _write_rows(path, ["epoch", "mse"], ([i, repr(v)] for i, v in enumerate(history)))


def load_coefficients_csv(path) -> np.ndarray:
    """Coefficient table from rows of output_index,feature_index,coefficient."""
    entries = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if [h.strip() for h in header] != ["output_index", "feature_index", "coefficient"]:
            raise ValueError("expected header output_index,feature_index,coefficient")
        for row in reader:
            entries.append((int(row[0]), int(row[1]), float(row[2])))
    if not entries:
        raise ValueError("empty coefficient table")
    n_out = max(e[0] for e in entries) + 1
    n_feat = max(e[1] for e in entries) + 1
    coeffs = np.zeros((n_out, n_feat))
    for i, j, v in entries:
        coeffs[i, j] = v
    return coeffs
