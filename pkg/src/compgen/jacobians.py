"""Numerical derivatives of the generative process and rank-based support checks.

Three Jacobians appear throughout, following the chain rule for an
observation built as composition(slot canvases):

* observation w.r.t. one slot's canvas (N x M), from
  :func:`jacobian_of_composition`;
* observation w.r.t. one slot's latent (N x D), from :func:`jacobian_of_f`;
* canvas w.r.t. its latent (M x D), from :func:`jacobian_of_component`.

Finite differences are central only; a point too close to the latent box
boundary is an error rather than a silent one-sided estimate. Analytic
Jacobians are available for the sum, sigmoid-occlusion, and alpha
compositions.

The support check asks, for probe values of each slot, whether some small
set of in-support points sharing that slot value makes the *summed*
composition Jacobian full column rank. Points are grown greedily by how
many currently dark canvas columns they light up; rank is the number of
singular values above ``tau`` times the largest.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .compose import (
    CompositionKind,
    CompositionalModel,
    compose,
    compose_jacobian,
    evaluate,
)
from .compose import _alpha_jacobian_blocks, _split_rgba  # shared internals
from .families import SmoothAnalytic, render_component
from .supports import SampleSet, marginal_coverage, slice_points

__all__ = [
    "JacobianEstimate",
    "RankReport",
    "RankDeficiencyError",
    "jacobian_of_composition",
    "jacobian_of_f",
    "jacobian_of_component",
    "summed_jacobian_rank",
    "SufficiencyProbe",
    "SufficiencyReport",
    "check_sufficient_support",
    "DEFAULT_TAU_FD",
    "DEFAULT_TAU_ANALYTIC",
]

DEFAULT_TAU_FD = 1e-3
DEFAULT_TAU_ANALYTIC = 1e-8

_ANALYTIC_KINDS = (
    CompositionKind.SUM,
    CompositionKind.SIGMOID_OCCLUSION,
    CompositionKind.ALPHA_COMPOSITE,
)


@dataclass(frozen=True)
class JacobianEstimate:
    """A Jacobian matrix plus how it was obtained."""

    matrix: np.ndarray
    method: str  # "central-difference" or "analytic-oracle"
    step: float
    base_point: np.ndarray

    def __post_init__(self):
        if not np.isfinite(self.matrix).all():
            raise ValueError("Jacobian contains non-finite entries")


@dataclass(frozen=True)
class RankReport:
    """Singular values and the numerical rank under a relative threshold."""

    singular_values: np.ndarray  # descending
    numerical_rank: int
    tau: float
    cutoff: float  # tau * sigma_max, the absolute threshold used
    target: int

    @staticmethod
    def from_matrix(matrix: np.ndarray, tau: float, target: int) -> "RankReport":
        sigma = np.linalg.svd(matrix, compute_uv=False)
        cutoff = tau * (sigma[0] if sigma.size else 0.0)
        rank = int(np.sum(sigma > cutoff))
        return RankReport(
            singular_values=sigma,
            numerical_rank=rank,
            tau=tau,
            cutoff=cutoff,
            target=target,
        )

    @property
    def full(self) -> bool:
        return self.numerical_rank == self.target


class RankDeficiencyError(ValueError):
    """Raised when a summed composition Jacobian is not full column rank."""

    def __init__(self, message: str, report: RankReport):
        super().__init__(message)
        self.report = report


def _resolve_method(model: CompositionalModel, method: str) -> str:
    if method == "auto":
        if model.composition in _ANALYTIC_KINDS:
            return "analytic-oracle"
        return "central-difference"
    if method not in ("analytic-oracle", "central-difference"):
        raise ValueError(f"unknown Jacobian method {method!r}")
    if method == "analytic-oracle" and model.composition not in _ANALYTIC_KINDS:
        raise ValueError(f"no analytic Jacobian for {model.composition}")
    return method


def _render_all(model: CompositionalModel, z: np.ndarray) -> list:
    return [render_component(fam, z[k]) for k, fam in enumerate(model.families)]


def jacobian_of_composition(
    model: CompositionalModel,
    z: np.ndarray,
    k: int,
    h: float = 1e-3,
    method: str = "auto",
) -> JacobianEstimate:
    """N x M derivative of the observation w.r.t. slot k's canvas at latent z."""
    z = np.asarray(z, dtype=float)
    method = _resolve_method(model, method)
    canvases = _render_all(model, z)
    layout = model.canvas_layout
    if method == "analytic-oracle":
        matrix = compose_jacobian(model.composition, canvases, k, layout)
        return JacobianEstimate(matrix, method, 0.0, z)
    m = canvases[k].size
    n = model.observation_layout.size
    matrix = np.empty((n, m))
    for i in range(m):
        up = [c.copy() for c in canvases]
        dn = [c.copy() for c in canvases]
        up[k][i] += h
        dn[k][i] -= h
        matrix[:, i] = (
            compose(model.composition, up, layout) - compose(model.composition, dn, layout)
        ) / (2.0 * h)
    return JacobianEstimate(matrix, method, h, z)


def _model_eval_fn(model):
    if isinstance(model, CompositionalModel):
        return model.latent_box, lambda z: evaluate(model, z)
    box = getattr(model, "latent_box", None)
    if box is None or not callable(model):
        raise TypeError("expected a CompositionalModel or a callable with a latent_box")
    return box, model


def jacobian_of_f(model, z: np.ndarray, k: int, h: float = 1e-3) -> JacobianEstimate:
    """N x D central-difference derivative of the observation w.r.t. slot k's latent.

    ``model`` may be a :class:`CompositionalModel` or any black-box evaluator
    exposing ``latent_box``. The point must be interior to the box by at
    least ``h`` on every axis of slot ``k``.
    """
    box, fn = _model_eval_fn(model)
    z = np.asarray(z, dtype=float)
    if h <= 0:
        raise ValueError("h must be > 0")
    lo, hi = box.lo[k], box.hi[k]
    if np.any(z[k] - h < lo) or np.any(z[k] + h > hi):
        d = int(np.argmax((z[k] - h < lo) | (z[k] + h > hi)))
        raise ValueError(
            f"latent too close to the box boundary on (slot {k}, dim {d}) for "
            f"two-sided differences with h={h}"
        )
    dim = box.dim
    columns = []
    for d in range(dim):
        dz = np.zeros_like(z)
        dz[k, d] = h
        columns.append((fn(z + dz) - fn(z - dz)) / (2.0 * h))
    return JacobianEstimate(np.stack(columns, axis=1), "central-difference", h, z)


def jacobian_of_component(family, z_k: np.ndarray, h: float = 1e-3,
                          method: str = "auto") -> JacobianEstimate:
    """M x D derivative of one component canvas w.r.t. its slot latent."""
    z_k = np.asarray(z_k, dtype=float)
    if method == "auto":
        method = "analytic-oracle" if isinstance(family, SmoothAnalytic) else "central-difference"
    if method == "analytic-oracle":
        if not isinstance(family, SmoothAnalytic):
            raise ValueError("analytic component Jacobian only for SmoothAnalytic")
        return JacobianEstimate(family.jacobian(z_k), method, 0.0, z_k)
    columns = []
    for d in range(z_k.size):
        dz = np.zeros_like(z_k)
        dz[d] = h
        columns.append(
            (render_component(family, z_k + dz) - render_component(family, z_k - dz))
            / (2.0 * h)
        )
    return JacobianEstimate(np.stack(columns, axis=1), "central-difference", h, z_k)


def _composition_column_norms(model, z, k, method) -> np.ndarray:
    """Column norms of the N x M composition Jacobian, without densifying."""
    canvases = _render_all(model, z)
    kind = model.composition
    if method == "analytic-oracle" and kind is CompositionKind.SUM:
        return np.ones(canvases[k].size)
    if method == "analytic-oracle" and kind is CompositionKind.SIGMOID_OCCLUSION:
        jac = compose_jacobian(kind, canvases, k)
        return np.abs(np.diag(jac))
    if method == "analytic-oracle" and kind is CompositionKind.ALPHA_COMPOSITE:
        blocks = _alpha_jacobian_blocks(canvases, k, model.canvas_layout)  # (HW, 3, 4)
        norms = np.sqrt((blocks**2).sum(axis=1))  # (HW, 4)
        return norms.T.reshape(-1)  # channel-major to match canvas layout
    jac = jacobian_of_composition(model, z, k, method=method).matrix
    return np.linalg.norm(jac, axis=0)


def summed_jacobian_rank(
    model: CompositionalModel,
    pprime: np.ndarray,
    k: int,
    h: float = 1e-3,
    tau: float = DEFAULT_TAU_FD,
    method: str = "auto",
    slice_tol: float | None = None,
) -> RankReport:
    """Rank of the summed composition Jacobians over a set of latent points.

    All points must share slot ``k``'s value (within ``slice_tol`` around
    their common center, when given).
    """
    pprime = np.asarray(pprime, dtype=float)
    if pprime.ndim != 3 or pprime.shape[0] == 0:
        raise ValueError("pprime must be a nonempty (n, K, D) array")
    if slice_tol is not None:
        center = pprime[:, k, :].mean(axis=0)
        spread = np.abs(pprime[:, k, :] - center).max()
        if spread > slice_tol + 1e-12:
            raise ValueError(
                f"pprime points deviate by {spread:.4g} on slot {k}, beyond "
                f"the slice tolerance {slice_tol}"
            )
    method = _resolve_method(model, method)
    total = None
    for p in pprime:
        jac = jacobian_of_composition(model, p, k, h=h, method=method).matrix
        total = jac if total is None else total + jac
    target = model.families[k].layout.size
    return RankReport.from_matrix(total, tau, target)


@dataclass(frozen=True)
class SufficiencyProbe:
    """Outcome at one (slot, probe latent) pair."""

    slot: int
    probe_index: int
    probe: np.ndarray  # (D,)
    pprime_size: int
    rank_report: RankReport | None
    passed: bool
    reason: str = ""


@dataclass(frozen=True)
class SufficiencyReport:
    probes: tuple
    target: int

    @property
    def passed(self) -> bool:
        return all(p.passed for p in self.probes)

    @property
    def failed_probes(self) -> tuple:
        return tuple(p for p in self.probes if not p.passed)


def _greedy_rank_growth(model, candidates, k, h, tau, method, max_pprime):
    """Grow a point set until the summed Jacobian reaches full column rank.

    Candidates are scored by how many currently dark columns (column norm at
    or below ``tau`` times the current max) they would brighten; rank is
    confirmed by SVD. Returns (chosen points, final RankReport).
    """
    target = model.families[k].layout.size
    norms = np.stack(
        [_composition_column_norms(model, p, k, method) for p in candidates]
    )
    chosen: list[int] = []
    total = None
    col_norms = None
    report = None
    for _ in range(min(max_pprime, len(candidates))):
        remaining = [i for i in range(len(candidates)) if i not in chosen]
        if not remaining:
            break
        if col_norms is None:
            dark = np.ones(target, dtype=bool)
        else:
            dark = col_norms <= tau * col_norms.max()
        if dark.any():
            bright_of = norms[remaining] > tau * norms[remaining].max(
                axis=1, keepdims=True
            )
            gains = bright_of[:, dark].sum(axis=1)
            pick = remaining[int(np.argmax(gains))]
        else:
            pick = remaining[0]
        chosen.append(pick)
        jac = jacobian_of_composition(
            model, candidates[pick], k, h=h, method=method
        ).matrix
        total = jac if total is None else total + jac
        col_norms = np.linalg.norm(total, axis=0)
        if not (col_norms <= tau * col_norms.max()).any():
            report = RankReport.from_matrix(total, tau, target)
            if report.full:
                break
            report = None  # rank-deficient despite bright columns: keep adding
    if report is None:
        report = RankReport.from_matrix(total, tau, target)
    return candidates[chosen], report


def check_sufficient_support(
    model: CompositionalModel,
    samples: SampleSet,
    probe_grid_resolution: int = 3,
    slice_tol: float = 0.15,
    max_pprime: int = 32,
    h: float = 1e-3,
    tau: float = DEFAULT_TAU_FD,
    method: str = "auto",
    candidate_cap: int = 64,
) -> SufficiencyReport:
    """Probe every slot on its covered marginal cells for full summed rank.

    For each probe value, in-support sample points sharing the slot value
    (within ``slice_tol``) are grown greedily until the summed composition
    Jacobian reaches full column rank or candidates run out. A probe with an
    empty slice is recorded as failed, not raised.
    """
    method = _resolve_method(model, method)
    probes = []
    target = model.families[0].layout.size
    for k in range(model.num_slots):
        grid = marginal_coverage(samples, k, probe_grid_resolution)
        centers = 0.5 * (grid.edges[:, :-1] + grid.edges[:, 1:])  # (D, res)
        covered_cells = np.argwhere(grid.covered)
        for probe_index, cell in enumerate(covered_cells):
            probe = np.array([centers[d, cell[d]] for d in range(grid.edges.shape[0])])
            cands = slice_points(samples, k, probe, slice_tol)
            if cands.shape[0] == 0:
                probes.append(
                    SufficiencyProbe(
                        slot=k,
                        probe_index=probe_index,
                        probe=probe,
                        pprime_size=0,
                        rank_report=None,
                        passed=False,
                        reason="no support points",
                    )
                )
                continue
            cands = cands[:candidate_cap]
            chosen, report = _greedy_rank_growth(
                model, cands, k, h, tau, method, max_pprime
            )
            probes.append(
                SufficiencyProbe(
                    slot=k,
                    probe_index=probe_index,
                    probe=probe,
                    pprime_size=chosen.shape[0],
                    rank_report=report,
                    passed=report.full,
                    reason="" if report.full else "rank deficient",
                )
            )
    return SufficiencyReport(probes=tuple(probes), target=target)
