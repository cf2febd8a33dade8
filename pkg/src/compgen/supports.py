"""Latent boxes, train/test support specifications, samplers, and support checks.

A latent point is a ``(K, D)`` array: ``K`` slots, each a ``D``-vector. A
batch of points has shape ``(n, K, D)``. Supports are declarative: every
kind knows how to sample itself uniformly (or with Gaussian marginals) and
how to test membership, so sampled sets are re-checkable.

Support kinds
-------------
* :class:`FullBox`            -- the whole latent box.
* :class:`OrthogonalAnchors`  -- union of slabs where one slot is pinned to
  an anchor value (within half-width ``eps``) while all other slots vary
  freely.
* :class:`DiagonalBand`       -- all slots within max-norm ``width`` of the
  first slot, in shared normalized coordinates.
* :class:`GappedOrthogonal`   -- :class:`OrthogonalAnchors` with open
  per-axis intervals removed from the support.
* :class:`GaussianOrthogonal` -- anchor slabs with truncated-Gaussian free
  coordinates instead of uniform ones.

The marginal-support check compares, slot by slot, which cells of a regular
grid are hit by probe samples from two supports. Cells are half-open
``[lo, hi)`` except the last cell of each axis, which is closed.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

__all__ = [
    "LatentBox",
    "SupportSpec",
    "FullBox",
    "OrthogonalAnchors",
    "DiagonalBand",
    "GappedOrthogonal",
    "GaussianOrthogonal",
    "AxisGap",
    "SampleSet",
    "CoverageGrid",
    "SlotSupportResult",
    "SupportCheckResult",
    "sample_support",
    "marginal_coverage",
    "check_compositional_support",
    "slice_points",
]

_MAX_REJECTION_ROUNDS = 10_000


def _rng_for(seed: int) -> np.random.Generator:
    # Philox is counter-based, so per-seed streams are independent and
    # reproducible regardless of how sampling work is scheduled.
    return np.random.Generator(np.random.Philox(seed))


@dataclass(frozen=True)
class LatentBox:
    """Axis-aligned box for the K*D latent coordinates.

    ``lo`` and ``hi`` have shape ``(K, D)`` with ``lo < hi`` on every axis.
    """

    lo: np.ndarray
    hi: np.ndarray

    def __post_init__(self):
        lo = np.atleast_2d(np.asarray(self.lo, dtype=float))
        hi = np.atleast_2d(np.asarray(self.hi, dtype=float))
        object.__setattr__(self, "lo", lo)
        object.__setattr__(self, "hi", hi)
        if lo.shape != hi.shape:
            raise ValueError(f"box lo/hi shapes differ: {lo.shape} vs {hi.shape}")
        bad = np.argwhere(~(lo < hi))
        if bad.size:
            k, d = bad[0]
            raise ValueError(f"box axis (slot {k}, dim {d}) has lo >= hi")

    @staticmethod
    def unit(num_slots: int, dim: int) -> "LatentBox":
        """The [0, 1]^(K*D) box."""
        return LatentBox(np.zeros((num_slots, dim)), np.ones((num_slots, dim)))

    @property
    def num_slots(self) -> int:
        return self.lo.shape[0]

    @property
    def dim(self) -> int:
        return self.lo.shape[1]

    def contains(self, points: np.ndarray, atol: float = 0.0) -> np.ndarray:
        """Boolean membership for points of shape (..., K, D)."""
        points = np.asarray(points, dtype=float)
        ok = (points >= self.lo - atol) & (points <= self.hi + atol)
        return ok.all(axis=(-2, -1))

    def center(self) -> np.ndarray:
        return 0.5 * (self.lo + self.hi)

    def padded(self, margin: float) -> "LatentBox":
        """A copy grown by ``margin`` on every axis."""
        return LatentBox(self.lo - margin, self.hi + margin)


@dataclass(frozen=True)
class AxisGap:
    """Open interval ``(lo, hi)`` removed from axis ``(slot, dim)``."""

    slot: int
    dim: int
    lo: float
    hi: float


def _axis_segments(lo: float, hi: float, gaps: Sequence[tuple[float, float]]):
    """Sub-intervals of [lo, hi] left after removing the given open gaps."""
    cuts = sorted((max(g0, lo), min(g1, hi)) for g0, g1 in gaps)
    segments = []
    cursor = lo
    for g0, g1 in cuts:
        if g1 <= g0:  # gap does not intersect [lo, hi]
            continue
        if g0 > cursor:
            segments.append((cursor, g0))
        cursor = max(cursor, g1)
    if cursor < hi:
        segments.append((cursor, hi))
    return [(a, b) for a, b in segments if b > a]


def _sample_segments(rng: np.random.Generator, n: int, segments) -> np.ndarray:
    """Uniform samples over a union of disjoint intervals."""
    lows = np.array([s[0] for s in segments])
    highs = np.array([s[1] for s in segments])
    lengths = highs - lows
    which = rng.choice(len(segments), size=n, p=lengths / lengths.sum())
    return rng.uniform(lows[which], highs[which])


class SupportSpec:
    """Base class for support specifications over a shared latent box."""

    box: LatentBox

    def validate(self) -> None:
        """Raise ValueError if the spec describes an empty or malformed support."""

    def contains(self, points: np.ndarray, atol: float = 1e-12) -> np.ndarray:
        raise NotImplementedError

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        raise NotImplementedError

    @property
    def kind(self) -> str:
        return type(self).__name__


@dataclass(frozen=True)
class FullBox(SupportSpec):
    box: LatentBox

    def contains(self, points, atol=1e-12):
        return self.box.contains(points, atol=atol)

    def sample(self, n, rng):
        return rng.uniform(self.box.lo, self.box.hi, size=(n,) + self.box.lo.shape)


def _as_anchor_list(anchors, box: LatentBox):
    out = []
    for k in range(box.num_slots):
        arr = np.asarray(anchors[k], dtype=float) if k < len(anchors) else np.empty((0, box.dim))
        if arr.size == 0:
            arr = arr.reshape(0, box.dim)
        arr = np.atleast_2d(arr)
        if arr.shape[1] != box.dim:
            raise ValueError(f"slot {k} anchors have dim {arr.shape[1]}, expected {box.dim}")
        out.append(arr)
    return tuple(out)


@dataclass(frozen=True)
class OrthogonalAnchors(SupportSpec):
    """Union of slabs: slot k pinned near one of its anchors, others free.

    ``anchors[k]`` is an ``(n_k, D)`` array of anchor values for slot ``k``
    (``n_k`` may be zero). ``eps`` is the slab half-width in latent units;
    ``eps = 0`` gives exact planes.
    """

    box: LatentBox
    anchors: tuple
    eps: float = 0.02

    def __post_init__(self):
        object.__setattr__(self, "anchors", _as_anchor_list(self.anchors, self.box))
        self.validate()

    def validate(self):
        if self.eps < 0:
            raise ValueError("eps must be >= 0")
        counts = [len(a) for a in self.anchors]
        for k in range(self.box.num_slots):
            if not any(counts[j] > 0 for j in range(self.box.num_slots) if j != k):
                raise ValueError(
                    f"slot {k} never varies freely: no other slot has an anchor"
                )
        for k, arr in enumerate(self.anchors):
            lo, hi = self.box.lo[k], self.box.hi[k]
            for a in arr:
                if np.any(a < lo) or np.any(a > hi):
                    d = int(np.argmax((a < lo) | (a > hi)))
                    raise ValueError(f"anchor for slot {k} outside box on dim {d}")

    def _planes(self):
        return [(k, a) for k, arr in enumerate(self.anchors) for a in arr]

    def _slab_ok(self, points, atol):
        """(..., n_planes) flags: point lies in each anchor slab."""
        flags = []
        for k, a in self._planes():
            d = np.abs(points[..., k, :] - a)
            flags.append((d <= self.eps + atol).all(axis=-1))
        return np.stack(flags, axis=-1)

    def contains(self, points, atol=1e-12):
        points = np.asarray(points, dtype=float)
        in_box = self.box.contains(points, atol=atol)
        return in_box & self._slab_ok(points, atol).any(axis=-1)

    def _sample_free_axis(self, rng, n, k, d):
        return rng.uniform(self.box.lo[k, d], self.box.hi[k, d], size=n)

    def _sample_anchored_axis(self, rng, n, k, d, a):
        lo = max(self.box.lo[k, d], a - self.eps)
        hi = min(self.box.hi[k, d], a + self.eps)
        if hi <= lo:
            return np.full(n, lo)
        return rng.uniform(lo, hi, size=n)

    def sample(self, n, rng):
        planes = self._planes()
        choice = rng.integers(len(planes), size=n)
        points = np.empty((n, self.box.num_slots, self.box.dim))
        for i, (k, a) in enumerate(planes):
            idx = np.nonzero(choice == i)[0]
            if idx.size == 0:
                continue
            for slot in range(self.box.num_slots):
                for d in range(self.box.dim):
                    if slot == k:
                        vals = self._sample_anchored_axis(rng, idx.size, slot, d, a[d])
                    else:
                        vals = self._sample_free_axis(rng, idx.size, slot, d)
                    points[idx, slot, d] = vals
        return points


@dataclass(frozen=True)
class DiagonalBand(SupportSpec):
    """All slots within max-norm ``width`` of slot 0, in normalized coordinates."""

    box: LatentBox
    width: float

    def __post_init__(self):
        self.validate()

    def validate(self):
        if not self.width > 0:
            raise ValueError("band width must be > 0")

    def _normalized(self, points):
        return (points - self.box.lo) / (self.box.hi - self.box.lo)

    def contains(self, points, atol=1e-12):
        points = np.asarray(points, dtype=float)
        t = self._normalized(points)
        dev = np.abs(t - t[..., :1, :]).max(axis=(-2, -1))
        return self.box.contains(points, atol=atol) & (dev <= self.width + atol)

    def sample(self, n, rng):
        # The band constraint is independent per dim, so each axis-tuple
        # (slot 0 .. slot K-1) is drawn by exact rejection in normalized
        # coordinates; the result is uniform over the band.
        num_slots, dim = self.box.num_slots, self.box.dim
        t = np.empty((n, num_slots, dim))
        for d in range(dim):
            need = np.arange(n)
            for _ in range(_MAX_REJECTION_ROUNDS):
                if need.size == 0:
                    break
                draw = rng.uniform(size=(need.size, num_slots))
                ok = np.abs(draw - draw[:, :1]).max(axis=1) <= self.width
                t[need[ok], :, d] = draw[ok]
                need = need[~ok]
            if need.size:
                raise ValueError(f"band rejection sampling stalled on dim {d}")
        return self.box.lo + t * (self.box.hi - self.box.lo)


@dataclass(frozen=True)
class GappedOrthogonal(SupportSpec):
    """Orthogonal anchor slabs with open per-axis intervals excluded."""

    box: LatentBox
    anchors: tuple
    eps: float = 0.02
    gaps: tuple = ()

    def __post_init__(self):
        object.__setattr__(self, "anchors", _as_anchor_list(self.anchors, self.box))
        object.__setattr__(self, "gaps", tuple(self.gaps))
        self.validate()

    def _base(self) -> OrthogonalAnchors:
        return OrthogonalAnchors(self.box, self.anchors, self.eps)

    def _gaps_for(self, k, d):
        return [(g.lo, g.hi) for g in self.gaps if g.slot == k and g.dim == d]

    def validate(self):
        base = self._base()  # validates anchors/eps
        for g in self.gaps:
            lo, hi = self.box.lo[g.slot, g.dim], self.box.hi[g.slot, g.dim]
            if not (g.lo < g.hi):
                raise ValueError(f"gap on axis (slot {g.slot}, dim {g.dim}) is empty")
            if g.lo < lo or g.hi > hi or (g.lo == lo and g.hi == hi):
                raise ValueError(
                    f"gap on axis (slot {g.slot}, dim {g.dim}) is not a strict "
                    f"sub-interval of the box axis"
                )
        for k in range(self.box.num_slots):
            for d in range(self.box.dim):
                segs = _axis_segments(
                    self.box.lo[k, d], self.box.hi[k, d], self._gaps_for(k, d)
                )
                if not segs:
                    raise ValueError(
                        f"empty support after gap subtraction on axis (slot {k}, dim {d})"
                    )
        for k, arr in enumerate(base.anchors):
            for a in arr:
                for d in range(self.box.dim):
                    slab = (
                        max(self.box.lo[k, d], a[d] - self.eps),
                        min(self.box.hi[k, d], a[d] + self.eps),
                    )
                    segs = _axis_segments(slab[0], max(slab[1], slab[0] + 1e-15),
                                          self._gaps_for(k, d))
                    if not segs:
                        raise ValueError(
                            f"anchor slab for slot {k} lies entirely inside a gap "
                            f"on axis (slot {k}, dim {d})"
                        )

    def contains(self, points, atol=1e-12):
        points = np.asarray(points, dtype=float)
        ok = self._base().contains(points, atol=atol)
        for g in self.gaps:
            inside_gap = (points[..., g.slot, g.dim] > g.lo + atol) & (
                points[..., g.slot, g.dim] < g.hi - atol
            )
            ok &= ~inside_gap
        return ok

    def sample(self, n, rng):
        base = self._base()
        planes = base._planes()
        choice = rng.integers(len(planes), size=n)
        points = np.empty((n, self.box.num_slots, self.box.dim))
        for i, (k, a) in enumerate(planes):
            idx = np.nonzero(choice == i)[0]
            if idx.size == 0:
                continue
            for slot in range(self.box.num_slots):
                for d in range(self.box.dim):
                    if slot == k:
                        lo = max(self.box.lo[slot, d], a[d] - self.eps)
                        hi = min(self.box.hi[slot, d], a[d] + self.eps)
                        hi = max(hi, lo + 0.0)
                    else:
                        lo, hi = self.box.lo[slot, d], self.box.hi[slot, d]
                    segs = _axis_segments(lo, hi, self._gaps_for(slot, d))
                    if not segs:  # anchored exactly on a gap edge
                        segs = [(lo, lo)]
                    if len(segs) == 1 and segs[0][0] == segs[0][1]:
                        points[idx, slot, d] = segs[0][0]
                    else:
                        points[idx, slot, d] = _sample_segments(rng, idx.size, segs)
        return points


@dataclass(frozen=True)
class GaussianOrthogonal(SupportSpec):
    """Anchor slabs with truncated-Gaussian free coordinates.

    Free axes are drawn from a normal centered on the box axis midpoint with
    standard deviation ``sigma`` (in latent units), resampled until inside
    the box, so the support equals the :class:`OrthogonalAnchors` support.
    """

    box: LatentBox
    anchors: tuple
    eps: float = 0.02
    sigma: float = 0.25

    def __post_init__(self):
        object.__setattr__(self, "anchors", _as_anchor_list(self.anchors, self.box))
        self.validate()

    def validate(self):
        if not self.sigma > 0:
            raise ValueError("sigma must be > 0")
        OrthogonalAnchors(self.box, self.anchors, self.eps)

    def contains(self, points, atol=1e-12):
        return OrthogonalAnchors(self.box, self.anchors, self.eps).contains(points, atol)

    def _truncated_normal(self, rng, n, lo, hi):
        mid = 0.5 * (lo + hi)
        vals = np.empty(n)
        need = np.arange(n)
        for _ in range(_MAX_REJECTION_ROUNDS):
            if need.size == 0:
                return vals
            draw = rng.normal(mid, self.sigma, size=need.size)
            ok = (draw >= lo) & (draw <= hi)
            vals[need[ok]] = draw[ok]
            need = need[~ok]
        raise ValueError("truncated normal rejection sampling stalled")

    def sample(self, n, rng):
        base = OrthogonalAnchors(self.box, self.anchors, self.eps)
        planes = base._planes()
        choice = rng.integers(len(planes), size=n)
        points = np.empty((n, self.box.num_slots, self.box.dim))
        for i, (k, a) in enumerate(planes):
            idx = np.nonzero(choice == i)[0]
            if idx.size == 0:
                continue
            for slot in range(self.box.num_slots):
                for d in range(self.box.dim):
                    if slot == k:
                        vals = base._sample_anchored_axis(rng, idx.size, slot, d, a[d])
                    else:
                        vals = self._truncated_normal(
                            rng, idx.size, self.box.lo[slot, d], self.box.hi[slot, d]
                        )
                    points[idx, slot, d] = vals
        return points


@dataclass(frozen=True)
class SampleSet:
    """Points drawn from a support spec, with the provenance to re-check them."""

    points: np.ndarray  # (n, K, D)
    seed: int
    spec: SupportSpec

    def __len__(self):
        return self.points.shape[0]


def sample_support(spec: SupportSpec, n: int, seed: int) -> SampleSet:
    """Draw ``n`` points from ``spec``; bit-identical for fixed (spec, n, seed)."""
    if n < 1:
        raise ValueError("n must be >= 1")
    spec.validate()
    points = spec.sample(n, _rng_for(seed))
    return SampleSet(points=points, seed=seed, spec=spec)


@dataclass(frozen=True)
class CoverageGrid:
    """Per-cell hit counts for one slot's marginal samples on a regular grid."""

    slot: int
    edges: np.ndarray  # (D, resolution + 1)
    counts: np.ndarray  # (resolution,) * D

    @property
    def resolution(self) -> int:
        return self.edges.shape[1] - 1

    @property
    def covered(self) -> np.ndarray:
        return self.counts >= 1

    def cell_bounds(self, index: tuple) -> tuple[np.ndarray, np.ndarray]:
        idx = np.asarray(index, dtype=int)
        axes = np.arange(len(idx))
        return self.edges[axes, idx], self.edges[axes, idx + 1]


def _cell_indices(values: np.ndarray, edges: np.ndarray) -> np.ndarray:
    """Half-open cell indices ([lo, hi) except the last cell, which is closed)."""
    res = edges.shape[1] - 1
    idx = np.empty(values.shape, dtype=int)
    for d in range(values.shape[1]):
        idx[:, d] = np.clip(np.searchsorted(edges[d], values[:, d], side="right") - 1, 0, res - 1)
    return idx


def marginal_coverage(samples: SampleSet, k: int, resolution: int) -> CoverageGrid:
    """Histogram slot ``k``'s marginal samples over a regular grid."""
    if resolution < 2:
        raise ValueError("resolution must be >= 2")
    if len(samples) == 0:
        raise ValueError("empty sample set")
    box = samples.spec.box
    edges = np.stack(
        [np.linspace(box.lo[k, d], box.hi[k, d], resolution + 1) for d in range(box.dim)]
    )
    values = samples.points[:, k, :]
    idx = _cell_indices(values, edges)
    counts = np.zeros((resolution,) * box.dim, dtype=np.int64)
    np.add.at(counts, tuple(idx.T), 1)
    return CoverageGrid(slot=k, edges=edges, counts=counts)


@dataclass(frozen=True)
class OffendingCell:
    slot: int
    index: tuple
    lo: np.ndarray
    hi: np.ndarray
    covered_p: bool
    covered_q: bool


@dataclass(frozen=True)
class SlotSupportResult:
    slot: int
    passed: bool
    offending: tuple


@dataclass(frozen=True)
class SupportCheckResult:
    slots: tuple
    resolution: int
    n_probe: int

    @property
    def passed(self) -> bool:
        return all(s.passed for s in self.slots)


def check_compositional_support(
    p: SupportSpec,
    q: SupportSpec,
    resolution: int = 16,
    n_probe: int = 20_000,
    seed: int = 0,
) -> SupportCheckResult:
    """Compare per-slot marginal coverage of two supports on a shared grid.

    A slot passes iff the sets of covered cells agree between probe samples
    of ``p`` and of ``q``. Cells covered on one side only are reported with
    their bounds. Coverage is a Monte Carlo estimate: ``n_probe`` must be
    large enough that every positive-measure cell is hit.
    """
    if (p.box.num_slots, p.box.dim) != (q.box.num_slots, q.box.dim):
        raise ValueError(
            f"support factorizations differ: {p.box.num_slots}x{p.box.dim} vs "
            f"{q.box.num_slots}x{q.box.dim}"
        )
    if not (np.allclose(p.box.lo, q.box.lo) and np.allclose(p.box.hi, q.box.hi)):
        raise ValueError("supports are defined over different latent boxes")
    p_samples = sample_support(p, n_probe, seed)
    q_samples = sample_support(q, n_probe, seed + 1)
    slots = []
    for k in range(p.box.num_slots):
        grid_p = marginal_coverage(p_samples, k, resolution)
        grid_q = marginal_coverage(q_samples, k, resolution)
        disagree = grid_p.covered != grid_q.covered
        offending = []
        for index in np.argwhere(disagree):
            index = tuple(int(i) for i in index)
            lo, hi = grid_p.cell_bounds(index)
            offending.append(
                OffendingCell(
                    slot=k,
                    index=index,
                    lo=lo,
                    hi=hi,
                    covered_p=bool(grid_p.covered[index]),
                    covered_q=bool(grid_q.covered[index]),
                )
            )
        slots.append(
            SlotSupportResult(slot=k, passed=not offending, offending=tuple(offending))
        )
    return SupportCheckResult(slots=tuple(slots), resolution=resolution, n_probe=n_probe)


def slice_points(
    samples: SampleSet, k: int, slot_value: np.ndarray, tol: float
) -> np.ndarray:
    """Points whose slot ``k`` lies within max-norm ``tol`` of ``slot_value``."""
    if tol < 0:
        raise ValueError("tol must be >= 0")
    slot_value = np.asarray(slot_value, dtype=float)
    dev = np.abs(samples.points[:, k, :] - slot_value).max(axis=1)
    return samples.points[dev <= tol]
