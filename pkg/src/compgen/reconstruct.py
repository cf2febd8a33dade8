"""Reconstruct component functions from a black-box teacher by Jacobian integration.

Given a teacher mapping latents to observations, a known composition rule,
and samples of the training support, the component canvases are recovered on
per-slot grids in three steps:

1. At a slot value, collect in-support sample points sharing that value (a
   superposition set). Summing the observation Jacobians of the teacher over
   the set on one side, and the composition Jacobians on the other, leaves a
   single unknown: the slot's canvas Jacobian. It is recovered by least
   squares, which requires the summed composition Jacobian to have full
   column rank.
2. The recovered canvas Jacobian is a derivative field over the slot's
   latent; integrating it with a 4th-order one-step rule along axis-aligned
   paths from an initial point (where the canvases are known) tabulates the
   canvas on a grid. Paths must stay inside the training support; grid nodes
   whose path would leave it are reported unreachable rather than filled by
   extrapolation.
3. Composing the tabulated canvases (multilinear interpolation between
   nodes) and comparing against the teacher on fresh test latents verifies
   generalization.

The composition Jacobian in step 1 depends on the canvases themselves. They
are resolved, in order, from the running integration state (the active
slot), from already-reconstructed slot grids, or from the initial-point
canvases; ground-truth families may be supplied instead for oracle
injection in tests. For the sum composition the Jacobian is the identity
and step 1 reduces to reading off the teacher's derivative.
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
from .families import CanvasLayout, render_component
from .jacobians import (
    RankDeficiencyError,
    RankReport,
    jacobian_of_composition,
    jacobian_of_f,
)
from .supports import LatentBox, SampleSet, SupportSpec, slice_points

__all__ = [
    "TeacherOracle",
    "PathPlan",
    "SlotField",
    "GridField",
    "LeastSquaresSolution",
    "solve_component_jacobian",
    "plan_paths",
    "integrate_component",
    "initial_canvases",
    "field_from_families",
    "verify_generalization",
    "ReconstructionReport",
]


@dataclass(frozen=True)
class TeacherOracle:
    """A black-box latent-to-observation evaluator with its latent box."""

    fn: object  # callable (K, D) -> (N,)
    latent_box: LatentBox
    label: str = "teacher"

    def __call__(self, z: np.ndarray) -> np.ndarray:
        return self.fn(z)

    @staticmethod
    def from_model(model: CompositionalModel, label: str = "ground-truth") -> "TeacherOracle":
        return TeacherOracle(
            fn=lambda z: evaluate(model, z), latent_box=model.latent_box, label=label
        )


@dataclass(frozen=True)
class LeastSquaresSolution:
    jacobian: np.ndarray  # (M, D)
    residual: float  # Frobenius norm of the unexplained part
    rank_report: RankReport


def solve_component_jacobian(df_list, dc_list, tau: float = 1e-3) -> LeastSquaresSolution:
    """Least-squares solve of (sum dC) @ J = (sum df) for the canvas Jacobian J.

    ``df_list`` holds N x D observation Jacobians and ``dc_list`` the
    matching N x M composition Jacobians over the same superposition set.
    Raises :class:`RankDeficiencyError` (with the rank report attached) when
    the summed composition Jacobian is not full column rank.
    """
    if len(df_list) == 0 or len(df_list) != len(dc_list):
        raise ValueError("df_list and dc_list must be equal-length and nonempty")
    as_matrix = lambda j: j.matrix if hasattr(j, "matrix") else np.asarray(j, dtype=float)
    sum_df = sum(as_matrix(j) for j in df_list)
    sum_dc = sum(as_matrix(j) for j in dc_list)
    target = sum_dc.shape[1]
    report = RankReport.from_matrix(sum_dc, tau, target)
    if not report.full:
        raise RankDeficiencyError(
            f"summed composition Jacobian has rank {report.numerical_rank} < {target}; "
            f"grow the superposition set",
            report,
        )
    solution, _, _, _ = np.linalg.lstsq(sum_dc, sum_df, rcond=None)
    residual = float(np.linalg.norm(sum_dc @ solution - sum_df))
    return LeastSquaresSolution(jacobian=solution, residual=residual, rank_report=report)


@dataclass(frozen=True)
class PathPlan:
    """Axis-aligned integration schedule from an in-support initial point.

    For slot ``k``, paths sweep one latent axis at a time (in
    ``axis_orders[k]``) from the initial point toward every node of
    ``slot_grids[k]``, while all other slots hold their initial values.
    ``unreachable[k]`` flags grid nodes whose path would leave the support.
    """

    start: np.ndarray  # (K, D)
    slot_grids: tuple  # per slot: tuple of per-axis node arrays
    axis_orders: tuple  # per slot: permutation of range(D)
    delta: float
    unreachable: tuple  # per slot: bool array of grid shape
    support: SupportSpec

    def grid_shape(self, k: int) -> tuple:
        return tuple(len(a) for a in self.slot_grids[k])


def _segment_points(point, k, axis, lo, hi, step):
    """Latent points sampled along one axis segment, endpoints included."""
    n = max(2, int(np.ceil(abs(hi - lo) / step)) + 1)
    ts = np.linspace(lo, hi, n)
    pts = np.repeat(point[None], n, axis=0)
    pts[:, k, axis] = ts
    return pts


def _chain_in_support(spec, start, k, order, node, grids, step):
    """Whether the telescoped path from start to this grid node stays in-support."""
    point = start.copy()
    for axis in order:
        target = grids[axis][node[axis]]
        seg = _segment_points(point, k, axis, point[k, axis], target, step)
        if not spec.contains(seg).all():
            return False
        point[k, axis] = target
    return True


def _auto_start(support: SupportSpec) -> np.ndarray:
    anchors = getattr(support, "anchors", None)
    if anchors is not None:
        start = support.box.center()
        for k, arr in enumerate(anchors):
            if len(arr):
                start[k] = arr[0]
        return start
    return support.box.center()


def plan_paths(
    support: SupportSpec,
    slot_grids,
    start: np.ndarray | None = None,
    delta: float = 1.0 / 64.0,
    axis_orders=None,
) -> PathPlan:
    """Build the integration schedule and flag unreachable grid nodes."""
    box = support.box
    grids = tuple(
        tuple(np.asarray(a, dtype=float) for a in axes) for axes in slot_grids
    )
    if len(grids) != box.num_slots:
        raise ValueError(f"expected {box.num_slots} slot grids")
    start = _auto_start(support) if start is None else np.asarray(start, dtype=float)
    if not support.contains(start[None])[0]:
        raise ValueError("initial point is not inside the support")
    if axis_orders is None:
        axis_orders = tuple(tuple(range(box.dim)) for _ in range(box.num_slots))
    else:
        axis_orders = tuple(tuple(o) for o in axis_orders)
    unreachable = []
    for k in range(box.num_slots):
        shape = tuple(len(a) for a in grids[k])
        mask = np.zeros(shape, dtype=bool)
        for node in np.ndindex(shape):
            if not _chain_in_support(
                support, start, k, axis_orders[k], node, grids[k], delta
            ):
                mask[node] = True
        unreachable.append(mask)
    return PathPlan(
        start=start,
        slot_grids=grids,
        axis_orders=axis_orders,
        delta=delta,
        unreachable=tuple(unreachable),
        support=support,
    )


@dataclass
class SlotField:
    """Reconstructed canvas values on one slot's grid; NaN where unfilled."""

    slot: int
    axes: tuple  # per-axis node arrays
    values: np.ndarray  # grid shape + (M,)
    filled: np.ndarray  # bool grid

    def value_near(self, z_k: np.ndarray, snap_tol: float) -> np.ndarray:
        """Node value when within ``snap_tol`` of a grid node, else interpolation."""
        z_k = np.asarray(z_k, dtype=float)
        node = []
        for d, ax in enumerate(self.axes):
            i = int(np.argmin(np.abs(ax - z_k[d])))
            if abs(ax[i] - z_k[d]) > snap_tol:
                return self.interpolate(z_k)
            node.append(i)
        node = tuple(node)
        if not self.filled[node]:
            raise ValueError(f"slot {self.slot} grid node {node} was never reached")
        return self.values[node]

    def interpolate(self, z_k: np.ndarray) -> np.ndarray:
        """Multilinear interpolation; refuses extrapolation and empty nodes."""
        z_k = np.asarray(z_k, dtype=float)
        idx = []
        weights = []
        for d, ax in enumerate(self.axes):
            x = z_k[d]
            if x < ax[0] - 1e-9 or x > ax[-1] + 1e-9:
                raise ValueError(
                    f"slot {self.slot} latent {x:.4g} outside the grid hull on axis {d}"
                )
            i = int(np.clip(np.searchsorted(ax, x) - 1, 0, len(ax) - 2))
            t = (x - ax[i]) / (ax[i + 1] - ax[i])
            idx.append(i)
            weights.append(np.clip(t, 0.0, 1.0))
        out = np.zeros(self.values.shape[-1])
        for corner in np.ndindex(*(2,) * len(self.axes)):
            w = 1.0
            node = []
            for d, c in enumerate(corner):
                w *= weights[d] if c else (1.0 - weights[d])
                node.append(idx[d] + c)
            node = tuple(node)
            if w == 0.0:
                continue
            if not self.filled[node]:
                raise ValueError(
                    f"slot {self.slot} grid node {node} was never reached"
                )
            out += w * self.values[node]
        return out


@dataclass
class GridField:
    """Per-slot reconstructed canvas grids plus integration metadata."""

    slots: tuple  # SlotField per slot
    delta: float
    integrator: str = "rk4"
    audit_mode: bool = False

    def interpolate(self, z: np.ndarray) -> list:
        return [f.interpolate(z[k]) for k, f in enumerate(self.slots)]


def initial_canvases(model: CompositionalModel, start: np.ndarray) -> list:
    """Ground-truth canvases at the initial point (teacher-knows-start mode)."""
    return [render_component(fam, start[k]) for k, fam in enumerate(model.families)]


def field_from_families(families, slot_grids) -> GridField:
    """Tabulate family canvases directly on the grids (oracle injection)."""
    slots = []
    for k, fam in enumerate(families):
        axes = tuple(np.asarray(a, dtype=float) for a in slot_grids[k])
        shape = tuple(len(a) for a in axes)
        values = np.empty(shape + (fam.layout.size,))
        for node in np.ndindex(shape):
            z_k = np.array([axes[d][node[d]] for d in range(len(axes))])
            values[node] = render_component(fam, z_k)
        slots.append(
            SlotField(slot=k, axes=axes, values=values, filled=np.ones(shape, bool))
        )
    return GridField(slots=tuple(slots), delta=0.0, integrator="oracle")


class _CanvasResolver:
    """Looks up canvases for superposition points during integration.

    Resolution sources, from most to least trustworthy: the running
    integration state (active slot), the initial-point canvases, exact grid
    nodes of already-built slots, and multilinear interpolation between
    nodes. Points whose canvases cannot be resolved at all are unusable as
    superposition points and are skipped by the caller.
    """

    def __init__(self, plan, phi0, built_fields, oracle_families, snap_tol):
        self.plan = plan
        self.phi0 = phi0
        self.built = built_fields  # dict slot -> SlotField
        self.oracle_families = oracle_families
        self.snap_tol = snap_tol

    def _slot_quality(self, point, j):
        """0 = exact-ish lookup, 1 = interpolated, None = unresolvable."""
        if self.oracle_families is not None:
            return 0
        if np.abs(point[j] - self.plan.start[j]).max() <= self.snap_tol:
            return 0
        field = self.built.get(j)
        if field is None:
            return None
        near_node = all(
            np.abs(field.axes[d] - point[j, d]).min() <= self.snap_tol
            for d in range(point.shape[1])
        )
        return 0 if near_node else 1

    def quality(self, point, active_slot):
        """Worst slot quality for this point, or None if any slot fails."""
        worst = 0
        for j in range(point.shape[0]):
            if j == active_slot:
                continue
            q = self._slot_quality(point, j)
            if q is None:
                return None
            worst = max(worst, q)
        return worst

    def canvases_at(self, point, active_slot, active_canvas):
        out = []
        for j in range(point.shape[0]):
            if j == active_slot:
                out.append(active_canvas)
            elif self.oracle_families is not None:
                out.append(render_component(self.oracle_families[j], point[j]))
            elif np.abs(point[j] - self.plan.start[j]).max() <= self.snap_tol:
                out.append(self.phi0[j])
            elif j in self.built:
                out.append(self.built[j].value_near(point[j], self.snap_tol))
            else:
                raise ValueError(
                    f"cannot resolve slot {j} canvas at {point[j]}: not yet "
                    f"reconstructed and not near the initial point"
                )
        return out


def _canvas_derivative(
    teacher,
    composition,
    layout,
    samples,
    resolver,
    k,
    z_k,
    running_canvas,
    base_point,
    h,
    tau,
    slice_tol,
    max_pprime,
):
    """The (M, D) canvas derivative of slot k at slot value z_k.

    For the sum composition this is the teacher derivative itself; otherwise
    it is recovered by least squares over a superposition set sliced from
    the support samples.
    """
    point = base_point.copy()
    point[k] = z_k
    if composition is CompositionKind.SUM:
        return jacobian_of_f(teacher, point, k, h=h).matrix
    pts = slice_points(samples, k, z_k, slice_tol)
    if pts.shape[0]:
        # superposition points must share the slot value exactly, or the
        # observation Jacobians belong to different canvas derivatives; snap
        # the active slot onto z_k and keep points that remain in-support
        snapped = pts.copy()
        snapped[:, k, :] = z_k
        in_support = samples.spec.contains(snapped)
        pts = snapped[in_support] if in_support.any() else pts
    qualities = [resolver.quality(p, k) for p in pts]
    usable = [(q, i) for i, q in enumerate(qualities) if q is not None]
    usable.sort(key=lambda pair: pair[0])  # stable: exact lookups first
    pts = pts[[i for _, i in usable[:max_pprime]]]
    if pts.shape[0] == 0:
        raise RankDeficiencyError(
            f"no usable support points share slot {k} value {z_k} within {slice_tol}",
            RankReport(np.zeros(1), 0, tau, 0.0, layout.size),
        )
    df_list = []
    dc_list = []
    for p in pts:
        df_list.append(jacobian_of_f(teacher, p, k, h=h).matrix)
        canvases = resolver.canvases_at(p, k, running_canvas)
        dc_list.append(compose_jacobian(composition, canvases, k, layout))
    return solve_component_jacobian(df_list, dc_list, tau=tau).jacobian


def integrate_component(
    teacher: TeacherOracle,
    composition: CompositionKind,
    samples: SampleSet | None,
    plan: PathPlan,
    phi0,
    canvas_layout: CanvasLayout,
    h: float = 1e-3,
    tau: float = 1e-3,
    slice_tol: float = 0.1,
    max_pprime: int = 16,
    oracle_families=None,
    snap_tol: float = 0.05,
    audit_mode: bool = False,
) -> GridField:
    """Integrate the recovered canvas derivatives over every slot grid.

    ``phi0`` holds the canvases at the plan's initial point. Slots are
    integrated in index order so that later slots may look up canvases of
    earlier ones. Unreachable nodes stay unfilled; a rank failure aborts
    with the offending location attached.
    """
    if composition is not CompositionKind.SUM and samples is None:
        raise ValueError("superposition solving needs support samples")
    phi0 = [np.asarray(c, dtype=float) for c in phi0]
    num_slots = plan.start.shape[0]
    built: dict = {}
    resolver = _CanvasResolver(plan, phi0, built, oracle_families, snap_tol)

    def derivative(k, z_k, y, axis):
        jac = _canvas_derivative(
            teacher,
            composition,
            canvas_layout,
            samples,
            resolver,
            k,
            z_k,
            y,
            plan.start,
            h,
            tau,
            slice_tol,
            max_pprime,
        )
        return jac[:, axis]

    def integrate_segment(k, coords, axis, target, y):
        """March slot k's axis from coords[axis] to target with RK4 steps."""
        t0 = coords[axis]
        span = target - t0
        if span == 0.0:
            return y
        n_steps = max(1, int(np.ceil(abs(span) / plan.delta)))
        dt = span / n_steps
        z = coords.copy()
        for _ in range(n_steps):
            t = z[axis]

            def g(ti, yi):
                zi = z.copy()
                zi[axis] = ti
                return derivative(k, zi, yi, axis)

            k1 = g(t, y)
            k2 = g(t + dt / 2.0, y + dt / 2.0 * k1)
            k3 = g(t + dt / 2.0, y + dt / 2.0 * k2)
            k4 = g(t + dt, y + dt * k3)
            y = y + dt / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
            z[axis] = t + dt
        z[axis] = target  # avoid accumulated roundoff
        return y

    fields = []
    for k in range(num_slots):
        axes = plan.slot_grids[k]
        order = plan.axis_orders[k]
        shape = plan.grid_shape(k)
        values = np.full(shape + (phi0[k].size,), np.nan)
        filled = np.zeros(shape, dtype=bool)
        bad = plan.unreachable[k]

        def subtree_unreachable(node_prefix):
            idx = [slice(None)] * len(order)
            for lvl, ni in enumerate(node_prefix):
                idx[order[lvl]] = ni
            return bool(np.all(bad[tuple(idx)]))

        def sweep(level, coords, y, node_prefix):
            axis = order[level]
            nodes = plan.slot_grids[k][axis]
            start_val = plan.start[k, axis]
            below = [i for i in range(len(nodes)) if nodes[i] <= start_val]
            above = [i for i in range(len(nodes)) if nodes[i] > start_val]
            for direction in (below[::-1], above):
                cur = coords.copy()
                cur_y = y
                for i in direction:
                    node = node_prefix + (i,)
                    # once a node's whole subtree is unreachable, so is
                    # everything farther out in this direction
                    if subtree_unreachable(node):
                        break
                    cur_y = integrate_segment(k, cur, axis, nodes[i], cur_y)
                    cur[axis] = nodes[i]
                    if level == len(order) - 1:
                        full_node = [0] * len(order)
                        for lvl, ni in enumerate(node):
                            full_node[order[lvl]] = ni
                        full_node = tuple(full_node)
                        values[full_node] = cur_y
                        filled[full_node] = True
                    else:
                        sweep(level + 1, cur, cur_y, node)

        try:
            sweep(0, plan.start[k].copy(), phi0[k], ())
        except RankDeficiencyError as err:
            raise RankDeficiencyError(
                f"slot {k}: {err}", err.report
            ) from err
        fields.append(SlotField(slot=k, axes=axes, values=values, filled=filled))
        built[k] = fields[-1]
    return GridField(
        slots=tuple(fields), delta=plan.delta, integrator="rk4", audit_mode=audit_mode
    )


@dataclass(frozen=True)
class ReconstructionReport:
    """Errors of the reconstructed canvases and the composed observations."""

    slot_max_error: tuple  # per slot, or None when no ground truth given
    slot_mean_error: tuple
    q_mse: float
    tol: float
    passed: bool
    audit_mode: bool = False

    def summary(self) -> str:
        lines = []
        for k, (mx, mn) in enumerate(zip(self.slot_max_error, self.slot_mean_error)):
            if mx is None:
                lines.append(f"slot {k}: no ground truth")
            else:
                lines.append(f"slot {k}: max |err| {mx:.3e}, mean |err| {mn:.3e}")
        verdict = "PASS" if self.passed else "FAIL"
        mode = " (audit mode)" if self.audit_mode else ""
        lines.append(f"test-latent MSE {self.q_mse:.3e} vs tol {self.tol:.1e}: {verdict}{mode}")
        return "\n".join(lines)


def verify_generalization(
    field: GridField,
    composition: CompositionKind,
    teacher: TeacherOracle,
    q_samples: SampleSet,
    tol: float,
    canvas_layout: CanvasLayout,
    ground_truth_families=None,
) -> ReconstructionReport:
    """MSE of composed reconstructed canvases against the teacher on test latents."""
    if len(q_samples) == 0:
        raise ValueError("empty test sample set")
    sq_sum = 0.0
    count = 0
    for z in q_samples.points:
        canvases = field.interpolate(z)
        pred = compose(composition, canvases, canvas_layout)
        ref = teacher(z)
        sq_sum += float(np.sum((pred - ref) ** 2))
        count += ref.size
    q_mse = sq_sum / count
    max_errs = []
    mean_errs = []
    for k, slot_field in enumerate(field.slots):
        if ground_truth_families is None:
            max_errs.append(None)
            mean_errs.append(None)
            continue
        fam = ground_truth_families[k]
        errs = []
        for node in np.ndindex(*slot_field.filled.shape):
            if not slot_field.filled[node]:
                continue
            z_k = np.array(
                [slot_field.axes[d][node[d]] for d in range(len(slot_field.axes))]
            )
            truth = render_component(fam, z_k)
            errs.append(np.abs(slot_field.values[node] - truth).max())
        max_errs.append(float(np.max(errs)) if errs else None)
        mean_errs.append(float(np.mean(errs)) if errs else None)
    return ReconstructionReport(
        slot_max_error=tuple(max_errs),
        slot_mean_error=tuple(mean_errs),
        q_mse=q_mse,
        tol=tol,
        passed=q_mse <= tol,
        audit_mode=field.audit_mode,
    )
