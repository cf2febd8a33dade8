"""Tests for Jacobian estimation and the summed-rank support check."""

import numpy as np
import pytest

from compgen.compose import CompositionKind, CompositionalModel, evaluate
from compgen.families import (
    FeatureBasis,
    SmoothAnalytic,
    SpriteRenderer,
    random_smooth_family,
    render_component,
)
from compgen.jacobians import (
    RankReport,
    check_sufficient_support,
    jacobian_of_component,
    jacobian_of_composition,
    jacobian_of_f,
    summed_jacobian_rank,
)
from compgen.supports import (
    DiagonalBand,
    FullBox,
    LatentBox,
    OrthogonalAnchors,
    sample_support,
)

SUM = CompositionKind.SUM
SIG = CompositionKind.SIGMOID_OCCLUSION
ALPHA = CompositionKind.ALPHA_COMPOSITE


def smooth_model(kind=SUM, m=6, dim=2, slots=2, seed=0, scale=0.4):
    fams = tuple(
        random_smooth_family(m=m, dim=dim, n_freq=1, seed=seed + k, scale=scale)
        for k in range(slots)
    )
    return CompositionalModel(fams, kind, LatentBox.unit(slots, dim))


def sprite_model(kind=SIG, amplitude=20.0, channels=1, size=8):
    # the model box is padded beyond the unit sampling box so that points on
    # the unit-box edge still admit two-sided differences
    fam = SpriteRenderer(height=size, width=size, channels=channels,
                         amplitude=amplitude, edge_sharpness=40.0, axes=("x", "y"))
    return CompositionalModel((fam, fam), kind, LatentBox.unit(2, 2).padded(0.05))


def constant_scalar_model(values, kind=SIG):
    # one-entry canvases with fixed values, for scalar reference checks
    basis = FeatureBasis(dim=1, n_freq=1)
    fams = []
    for v in values:
        coeffs = np.zeros((1, basis.size))
        coeffs[0, 0] = v  # constant feature
        fams.append(SmoothAnalytic(coeffs=coeffs, basis=basis))
    return CompositionalModel(tuple(fams), kind, LatentBox.unit(len(values), 1))


# ---------------------------------------------------------------------------
# jacobian_of_composition
# ---------------------------------------------------------------------------


def test_sum_composition_jacobian_is_identity():
    model = smooth_model(SUM)
    z = np.array([[0.4, 0.3], [0.7, 0.2]])
    analytic = jacobian_of_composition(model, z, 0, method="analytic-oracle")
    assert np.array_equal(analytic.matrix, np.eye(6))
    fd = jacobian_of_composition(model, z, 0, h=1e-4, method="central-difference")
    assert np.abs(fd.matrix - np.eye(6)).max() < 1e-8


def test_sigmoid_scalar_reference_derivatives():
    model = constant_scalar_model([0.0, 2.0], SIG)
    z = np.full((2, 1), 0.5)
    d0 = jacobian_of_composition(model, z, 0).matrix
    d1 = jacobian_of_composition(model, z, 1).matrix
    assert d0[0, 0] == pytest.approx(0.0, abs=1e-12)
    assert d1[0, 0] == pytest.approx(0.5, abs=1e-12)


def test_alpha_transparent_foreground_pixel_gives_zero_rgb_columns():
    model = sprite_model(ALPHA, amplitude=1.0, channels=4)
    # foreground sprite in one corner: pixels far away are fully transparent
    z = np.array([[0.15, 0.15], [0.7, 0.7]])
    jac = jacobian_of_composition(model, z, 0).matrix
    layout = model.canvas_layout
    img_alpha = layout.as_image(render_component(model.families[0], z[0]))[3]
    pixel = int(np.argmin(img_alpha))  # most transparent pixel
    assert img_alpha.ravel()[pixel] < 1e-9
    for c in range(3):
        col = jac[:, c * layout.pixels + pixel]
        assert np.abs(col).max() < 1e-9


@pytest.mark.parametrize("kind", [SUM, SIG, ALPHA])
def test_analytic_matches_central_difference(kind):
    channels = 4 if kind is ALPHA else 1
    amplitude = 1.0 if kind is ALPHA else 2.0
    model = sprite_model(kind, amplitude=amplitude, channels=channels, size=6)
    rng = np.random.default_rng(1)
    for _ in range(5):
        z = rng.uniform(0.2, 0.8, size=(2, 2))
        for k in range(2):
            ja = jacobian_of_composition(model, z, k, method="analytic-oracle").matrix
            jf = jacobian_of_composition(model, z, k, h=1e-4,
                                         method="central-difference").matrix
            rel = np.linalg.norm(ja - jf) / max(np.linalg.norm(ja), 1e-12)
            assert rel < 1e-4


# ---------------------------------------------------------------------------
# jacobian_of_f and jacobian_of_component
# ---------------------------------------------------------------------------


def test_sum_observation_jacobian_equals_component_jacobian():
    model = smooth_model(SUM)
    z = np.array([[0.4, 0.3], [0.7, 0.2]])
    jf = jacobian_of_f(model, z, 0, h=1e-4).matrix
    jc = jacobian_of_component(model.families[0], z[0], method="analytic-oracle").matrix
    assert np.abs(jf - jc).max() < 1e-6


def test_smooth_family_matches_hand_differentiated_basis():
    # canvas[0] = cos(pi z0): d/dz0 = -pi sin(pi z0), d/dz1 = 0
    basis = FeatureBasis(dim=2, n_freq=1)
    coeffs = np.zeros((1, basis.size))
    coeffs[0, 1] = 1.0
    fam = SmoothAnalytic(coeffs=coeffs, basis=basis)
    model = CompositionalModel((fam,), SUM, LatentBox.unit(1, 2))
    for z0 in [0.25, 0.5, 0.8]:
        z = np.array([[z0, 0.4]])
        jf = jacobian_of_f(model, z, 0, h=1e-4).matrix
        expected = np.array([[-np.pi * np.sin(np.pi * z0), 0.0]])
        rel = np.abs(jf - expected).max() / max(np.abs(expected).max(), 1e-6)
        assert rel < 1e-4


def test_perturbing_other_slot_leaves_sum_jacobian_unchanged():
    model = smooth_model(SUM)
    z = np.array([[0.4, 0.3], [0.7, 0.2]])
    z2 = z.copy()
    z2[1] = [0.2, 0.9]
    a = jacobian_of_f(model, z, 0, h=1e-4).matrix
    b = jacobian_of_f(model, z2, 0, h=1e-4).matrix
    # identical up to floating roundoff of the cancelling other-slot term
    assert np.allclose(a, b, atol=1e-9)


def test_boundary_point_is_rejected_not_one_sided():
    model = smooth_model(SUM)
    z = np.array([[0.0, 0.3], [0.7, 0.2]])  # slot 0 sits on the box edge
    with pytest.raises(ValueError, match="boundary"):
        jacobian_of_f(model, z, 0, h=1e-3)
    # the padded sprite box makes edge-of-unit-box points fine
    smodel = sprite_model()
    zs = np.array([[0.0, 0.5], [0.5, 0.5]])
    jacobian_of_f(smodel, zs, 0, h=1e-3)


def test_chain_rule_identity():
    # observation Jacobian == composition Jacobian @ component Jacobian
    model = smooth_model(SIG, seed=7)
    rng = np.random.default_rng(2)
    for _ in range(5):
        z = rng.uniform(0.1, 0.9, size=(2, 2))
        for k in range(2):
            jf = jacobian_of_f(model, z, k, h=1e-3).matrix
            dc = jacobian_of_composition(model, z, k).matrix
            dphi = jacobian_of_component(model.families[k], z[k],
                                         method="analytic-oracle").matrix
            rel = np.linalg.norm(jf - dc @ dphi) / np.linalg.norm(jf)
            assert rel < 1e-3


# ---------------------------------------------------------------------------
# summed rank
# ---------------------------------------------------------------------------


def test_sum_composition_single_point_reaches_full_rank():
    model = smooth_model(SUM)
    pprime = np.array([[[0.4, 0.3], [0.7, 0.2]]])
    report = summed_jacobian_rank(model, pprime, 0, tau=1e-8)
    assert report.full and report.numerical_rank == 6


def test_covered_background_pixel_kills_rank_until_foreground_moves():
    model = sprite_model(SIG, amplitude=20.0)
    # foreground directly on top of the background sprite
    covering = np.array([[[0.5, 0.5], [0.5, 0.5]]])
    report = summed_jacobian_rank(model, covering, 1, tau=1e-3)
    assert not report.full
    # cross-check the summed matrix against the finite-difference route
    fd_report = summed_jacobian_rank(model, covering, 1, tau=1e-3,
                                     method="central-difference")
    assert fd_report.numerical_rank == report.numerical_rank
    # add a second point with the foreground moved away: every background
    # pixel is now exposed at least once
    moved = np.array(
        [[[0.5, 0.5], [0.5, 0.5]], [[0.15, 0.15], [0.5, 0.5]]]
    )
    report2 = summed_jacobian_rank(model, moved, 1, tau=1e-3)
    assert report2.full


def test_rank_monotone_under_nested_point_sets():
    model = sprite_model(SIG, amplitude=20.0)
    rng = np.random.default_rng(3)
    points = np.stack(
        [
            np.stack([rng.uniform(0.2, 0.8, size=2), np.array([0.5, 0.5])])
            for _ in range(6)
        ]
    )
    ranks = [
        summed_jacobian_rank(model, points[: i + 1], 1, tau=1e-3).numerical_rank
        for i in range(6)
    ]
    assert all(b >= a for a, b in zip(ranks, ranks[1:]))


def test_rank_verdict_is_scale_robust():
    for c in [0.5, 1.0, 2.0]:
        model = sprite_model(SIG, amplitude=20.0 * c)
        covering = np.array([[[0.5, 0.5], [0.5, 0.5]]])
        exposed = np.array(
            [[[0.5, 0.5], [0.5, 0.5]], [[0.15, 0.15], [0.5, 0.5]]]
        )
        assert not summed_jacobian_rank(model, covering, 1, tau=1e-3).full
        assert summed_jacobian_rank(model, exposed, 1, tau=1e-3).full


def test_summed_rank_validates_inputs():
    model = smooth_model(SUM)
    with pytest.raises(ValueError, match="nonempty"):
        summed_jacobian_rank(model, np.empty((0, 2, 2)), 0)
    spread = np.array([[[0.2, 0.2], [0.5, 0.5]], [[0.8, 0.8], [0.5, 0.5]]])
    with pytest.raises(ValueError, match="slice tolerance"):
        summed_jacobian_rank(model, spread, 0, slice_tol=0.1)


# ---------------------------------------------------------------------------
# sufficient-support checker
# ---------------------------------------------------------------------------


def test_sum_fullbox_passes_every_probe():
    model = smooth_model(SUM)
    samples = sample_support(FullBox(model.latent_box), 400, seed=0)
    report = check_sufficient_support(model, samples, probe_grid_resolution=2,
                                      slice_tol=0.3, tau=1e-8)
    assert report.passed
    assert all(p.pprime_size >= 1 for p in report.probes)


def test_narrow_diagonal_with_occlusion_fails_somewhere():
    model = sprite_model(SIG, amplitude=20.0)
    spec = DiagonalBand(LatentBox.unit(2, 2), width=0.05)
    samples = sample_support(spec, 600, seed=1)
    report = check_sufficient_support(model, samples, probe_grid_resolution=2,
                                      slice_tol=0.05, max_pprime=16, tau=1e-3)
    assert not report.passed
    failed = report.failed_probes
    assert all(p.slot == 1 for p in failed)  # only the occluded slot fails


def test_two_anchor_orthogonal_passes_every_probe():
    model = sprite_model(SIG, amplitude=20.0)
    spec = OrthogonalAnchors(
        LatentBox.unit(2, 2),
        anchors=[[[0.25, 0.25], [0.75, 0.75]], [[0.5, 0.5]]],
        eps=0.02,
    )
    samples = sample_support(spec, 1500, seed=2)
    report = check_sufficient_support(model, samples, probe_grid_resolution=2,
                                      slice_tol=0.25, max_pprime=16, tau=1e-3)
    assert report.passed


def test_empty_slice_is_a_recorded_failure_not_an_exception():
    model = smooth_model(SUM)
    samples = sample_support(FullBox(model.latent_box), 30, seed=3)
    report = check_sufficient_support(model, samples, probe_grid_resolution=4,
                                      slice_tol=1e-6, tau=1e-8)
    empties = [p for p in report.probes if p.reason == "no support points"]
    assert empties and all(p.pprime_size == 0 for p in empties)
    assert not report.passed
