"""Tests for the component-reconstruction engine."""

import numpy as np
import pytest

from compgen.compose import CompositionKind, CompositionalModel, compose, evaluate
from compgen.families import SpriteRenderer, random_smooth_family, render_component
from compgen.jacobians import RankDeficiencyError
from compgen.reconstruct import (
    GridField,
    TeacherOracle,
    field_from_families,
    initial_canvases,
    integrate_component,
    plan_paths,
    solve_component_jacobian,
    verify_generalization,
)
from compgen.supports import (
    AxisGap,
    FullBox,
    GappedOrthogonal,
    LatentBox,
    OrthogonalAnchors,
    SampleSet,
    sample_support,
)

SUM = CompositionKind.SUM
SIG = CompositionKind.SIGMOID_OCCLUSION


def smooth_sum_model(m=6, dim=2, slots=2, scale=0.3, seed=0, n_freq=1):
    fams = tuple(
        random_smooth_family(m=m, dim=dim, n_freq=n_freq, seed=seed + k, scale=scale)
        for k in range(slots)
    )
    return CompositionalModel(fams, SUM, LatentBox.unit(slots, dim).padded(0.05))


def unit_grid(nodes, dim):
    return tuple(np.linspace(0.0, 1.0, nodes) for _ in range(dim))


# ---------------------------------------------------------------------------
# least-squares recovery
# ---------------------------------------------------------------------------


def test_identity_composition_returns_observation_jacobian():
    df = np.array([[0.3, -0.1], [0.2, 0.5], [0.0, 1.0]])
    sol = solve_component_jacobian([df], [np.eye(3)], tau=1e-10)
    assert np.allclose(sol.jacobian, df, atol=1e-12)
    assert sol.residual < 1e-12


def test_scalar_toy_normal_equations():
    # dC entries {0.5, 0.25}, df entries {0.1, 0.05}:
    # (0.5*0.1 + 0.25*0.05) / (0.5^2 + 0.25^2) = 0.0625 / 0.3125 = 0.2
    sol = solve_component_jacobian(
        [np.array([[0.1]]), np.array([[0.05]])],
        [np.array([[0.5]]), np.array([[0.25]])],
        tau=1e-10,
    )
    assert sol.jacobian[0, 0] == pytest.approx(0.2, abs=1e-12)


def test_recovers_planted_jacobian_from_consistent_system():
    rng = np.random.default_rng(0)
    planted = rng.normal(size=(5, 3))
    df_list, dc_list = [], []
    for _ in range(4):
        dc = rng.normal(size=(8, 5))
        dc_list.append(dc)
        df_list.append(dc @ planted)
    sol = solve_component_jacobian(df_list, dc_list, tau=1e-10)
    assert np.abs(sol.jacobian - planted).max() < 1e-8
    assert sol.residual < 1e-8


def test_rank_deficient_sum_raises_with_report():
    dc = np.zeros((4, 3))
    dc[0, 0] = 1.0  # rank 1 of target 3
    with pytest.raises(RankDeficiencyError) as exc_info:
        solve_component_jacobian([np.zeros((4, 2))], [dc], tau=1e-6)
    assert exc_info.value.report.numerical_rank == 1
    assert exc_info.value.report.target == 3


# ---------------------------------------------------------------------------
# path planning
# ---------------------------------------------------------------------------


def test_fullbox_plan_reaches_every_node():
    spec = FullBox(LatentBox.unit(2, 2))
    plan = plan_paths(spec, [unit_grid(5, 2), unit_grid(5, 2)])
    assert not plan.unreachable[0].any() and not plan.unreachable[1].any()
    assert np.allclose(plan.start, 0.5)


def test_orthogonal_plan_starts_at_anchor_intersection():
    spec = OrthogonalAnchors(
        LatentBox.unit(2, 2), [[[0.25, 0.25]], [[0.5, 0.5]]], eps=0.02
    )
    plan = plan_paths(spec, [unit_grid(5, 2), unit_grid(5, 2)])
    assert np.allclose(plan.start, [[0.25, 0.25], [0.5, 0.5]])
    # sweeping either slot while the other sits at its anchor stays inside
    assert not plan.unreachable[0].any() and not plan.unreachable[1].any()


def brute_force_reachability(spec, start, k, grids, node, step=0.005):
    """Independent dense-path membership oracle."""
    point = start.copy()
    for axis in range(len(grids)):
        target = grids[axis][node[axis]]
        lo, hi = sorted([point[k, axis], target])
        for t in np.linspace(lo, hi, max(2, int((hi - lo) / step) + 2)):
            probe = point.copy()
            probe[k, axis] = t
            if not spec.contains(probe[None])[0]:
                return False
        point[k, axis] = target
    return True


def test_gapped_plan_flags_nodes_beyond_the_gap():
    spec = GappedOrthogonal(
        LatentBox.unit(2, 2),
        [[[0.1, 0.5]], [[0.5, 0.5]]],
        eps=0.02,
        gaps=(AxisGap(slot=0, dim=0, lo=0.3, hi=0.6),),
    )
    grids = [unit_grid(5, 2), unit_grid(5, 2)]  # nodes at 0, .25, .5, .75, 1
    plan = plan_paths(spec, grids)
    mask = plan.unreachable[0]
    for node in np.ndindex(5, 5):
        expected = not brute_force_reachability(spec, plan.start, 0, grids[0], node)
        assert mask[node] == expected, node
    # nodes with x in the gap or beyond it are unreachable from x=0.1
    xs_unreachable = mask.all(axis=1)
    assert list(xs_unreachable) == [False, False, True, True, True]
    assert not plan.unreachable[1].any()


def test_plan_rejects_out_of_support_start():
    spec = OrthogonalAnchors(
        LatentBox.unit(2, 2), [[[0.25, 0.25]], [[0.5, 0.5]]], eps=0.0
    )
    with pytest.raises(ValueError, match="initial point"):
        plan_paths(spec, [unit_grid(3, 2), unit_grid(3, 2)],
                   start=np.array([[0.4, 0.4], [0.6, 0.6]]))


# ---------------------------------------------------------------------------
# integration
# ---------------------------------------------------------------------------


def reconstruct_sum_model(model, nodes=5, delta=1.0 / 64.0, axis_orders=None,
                          start=None):
    spec = FullBox(LatentBox.unit(2, 2))
    plan = plan_paths(spec, [unit_grid(nodes, 2)] * 2, delta=delta,
                      axis_orders=axis_orders, start=start)
    teacher = TeacherOracle.from_model(model)
    phi0 = initial_canvases(model, plan.start)
    return plan, integrate_component(
        teacher, SUM, None, plan, phi0, model.canvas_layout, h=1e-3
    )


def max_node_error(field, model, k):
    slot_field = field.slots[k]
    errs = []
    for node in np.ndindex(*slot_field.filled.shape):
        assert slot_field.filled[node]
        z_k = np.array([slot_field.axes[d][node[d]] for d in range(2)])
        truth = render_component(model.families[k], z_k)
        errs.append(np.abs(slot_field.values[node] - truth).max())
    return max(errs)


def test_sum_reconstruction_matches_ground_truth_nodes():
    model = smooth_sum_model()
    _, field = reconstruct_sum_model(model, nodes=5)
    for k in range(2):
        assert max_node_error(field, model, k) < 1e-2


def test_constant_components_stay_at_initial_canvases():
    fams = tuple(
        random_smooth_family(m=4, dim=2, seed=k, scale=0.0) for k in range(2)
    )
    model = CompositionalModel(fams, SUM, LatentBox.unit(2, 2).padded(0.05))
    _, field = reconstruct_sum_model(model, nodes=3)
    for k in range(2):
        assert np.abs(field.slots[k].values).max() < 1e-9


def test_single_slot_identity_composition_tracks_teacher():
    fam = random_smooth_family(m=4, dim=2, seed=5, scale=0.4)
    model = CompositionalModel((fam,), SUM, LatentBox.unit(1, 2).padded(0.05))
    spec = FullBox(LatentBox.unit(1, 2))
    plan = plan_paths(spec, [unit_grid(4, 2)])
    teacher = TeacherOracle.from_model(model)
    field = integrate_component(
        teacher, SUM, None, plan, initial_canvases(model, plan.start),
        model.canvas_layout,
    )
    slot_field = field.slots[0]
    for node in np.ndindex(4, 4):
        z = np.array([[slot_field.axes[0][node[0]], slot_field.axes[1][node[1]]]])
        assert np.abs(slot_field.values[node] - teacher(z)).max() < 1e-4


def test_halving_step_shrinks_error_fourth_order():
    model = smooth_sum_model(scale=0.8, n_freq=2, seed=3)
    errors = []
    for delta in [1.0 / 4.0, 1.0 / 8.0, 1.0 / 16.0]:
        _, field = reconstruct_sum_model(model, nodes=3, delta=delta)
        errors.append(max(max_node_error(field, model, k) for k in range(2)))
    assert errors[0] / errors[1] >= 8.0
    assert errors[1] / errors[2] >= 8.0


def test_axis_order_does_not_change_the_field():
    model = smooth_sum_model(seed=9)
    _, field_a = reconstruct_sum_model(model, nodes=4, axis_orders=[(0, 1), (0, 1)])
    _, field_b = reconstruct_sum_model(model, nodes=4, axis_orders=[(1, 0), (1, 0)])
    for k in range(2):
        diff = np.abs(field_a.slots[k].values - field_b.slots[k].values).max()
        assert diff < 5e-5


def test_moving_the_initial_point_does_not_change_the_field():
    model = smooth_sum_model(seed=11)
    _, field_a = reconstruct_sum_model(model, nodes=4)
    start = np.array([[0.2, 0.7], [0.8, 0.3]])
    _, field_b = reconstruct_sum_model(model, nodes=4, start=start)
    for k in range(2):
        diff = np.abs(field_a.slots[k].values - field_b.slots[k].values).max()
        assert diff < 5e-5


def test_occlusion_reconstruction_on_two_anchor_support():
    # mini version of the occluded-background recovery: foreground anchored
    # at two grid-aligned positions, background at one. Amplitude stays
    # below 2 so the soft-occlusion gate derivative never crosses zero.
    fam = SpriteRenderer(height=8, width=8, channels=1, amplitude=1.0,
                         edge_sharpness=10.0, axes=("x", "y"))
    model = CompositionalModel((fam, fam), SIG, LatentBox.unit(2, 2).padded(0.05))
    spec = OrthogonalAnchors(
        LatentBox.unit(2, 2),
        anchors=[[[0.25, 0.25], [0.75, 0.75]], [[0.5, 0.5]]],
        eps=0.01,
    )
    grids = [unit_grid(5, 2), unit_grid(5, 2)]  # anchors lie on nodes
    plan = plan_paths(spec, grids, delta=1.0 / 32.0)
    samples = sample_support(spec, 3000, seed=0)
    teacher = TeacherOracle.from_model(model)
    field = integrate_component(
        teacher, SIG, samples, plan, initial_canvases(model, plan.start),
        model.canvas_layout, h=1e-3, tau=1e-3, slice_tol=0.08, max_pprime=8,
        snap_tol=0.05,
    )
    for k in range(2):
        assert max_node_error(field, model, k) < 0.25
    # composed reconstruction vs teacher on node-aligned test points
    rng = np.random.default_rng(1)
    nodes = np.linspace(0, 1, 5)
    pts = nodes[rng.integers(0, 5, size=(64, 2, 2))]
    report = verify_generalization(
        field, SIG, teacher, SampleSet(pts, 1, spec), tol=5e-2,
        canvas_layout=model.canvas_layout, ground_truth_families=model.families,
    )
    assert report.q_mse < 5e-2


# ---------------------------------------------------------------------------
# generalization verification
# ---------------------------------------------------------------------------


def test_oracle_injected_field_is_exact_on_node_lattice():
    model = smooth_sum_model(seed=13)
    grids = [unit_grid(5, 2), unit_grid(5, 2)]
    field = field_from_families(model.families, grids)
    nodes = np.linspace(0, 1, 5)
    rng = np.random.default_rng(2)
    pts = nodes[rng.integers(0, 5, size=(100, 2, 2))]
    q = SampleSet(pts, 2, FullBox(LatentBox.unit(2, 2)))
    report = verify_generalization(
        field, SUM, TeacherOracle.from_model(model), q, tol=1e-10,
        canvas_layout=model.canvas_layout, ground_truth_families=model.families,
    )
    assert report.q_mse <= 1e-10
    assert report.passed
    assert all(err < 1e-12 for err in report.slot_max_error)


def test_sum_reconstruction_generalizes_to_fresh_latents():
    model = smooth_sum_model(seed=15)
    _, field = reconstruct_sum_model(model, nodes=9)
    q = sample_support(FullBox(LatentBox.unit(2, 2)), 300, seed=3)
    report = verify_generalization(
        field, SUM, TeacherOracle.from_model(model), q, tol=1e-3,
        canvas_layout=model.canvas_layout,
    )
    assert report.passed and report.q_mse < 1e-3
    assert "PASS" in report.summary()


def test_unreached_nodes_raise_when_needed():
    model = smooth_sum_model(seed=17)
    spec = GappedOrthogonal(
        LatentBox.unit(2, 2),
        [[[0.1, 0.5]], [[0.5, 0.5]]],
        eps=0.02,
        gaps=(AxisGap(slot=0, dim=0, lo=0.3, hi=0.6),),
    )
    plan = plan_paths(spec, [unit_grid(5, 2), unit_grid(5, 2)], delta=1.0 / 32.0)
    samples = sample_support(spec, 500, seed=4)
    teacher = TeacherOracle.from_model(model)
    field = integrate_component(
        teacher, SUM, samples, plan, initial_canvases(model, plan.start),
        model.canvas_layout,
    )
    assert not field.slots[0].filled.all()
    q_point = np.array([[[0.9, 0.5], [0.5, 0.5]]])  # slot 0 beyond the gap
    with pytest.raises(ValueError, match="never reached"):
        verify_generalization(
            field, SUM, teacher, SampleSet(q_point, 0, spec), tol=1.0,
            canvas_layout=model.canvas_layout,
        )
