"""Tests for the feedforward trainer: gradients, training, metrics, serialization."""

import numpy as np
import pytest

from compgen.compose import CompositionKind, Dataset
from compgen.families import CanvasLayout
from compgen.nets import (
    CompositionalNet,
    Metrics,
    MonolithicNet,
    NetSpec,
    TrainConfig,
    TrainingDiverged,
    evaluate_metrics,
    init_params,
    load_net,
    match_param_count,
    param_count,
    save_net,
    train,
)

SIG = CompositionKind.SIGMOID_OCCLUSION
ALPHA = CompositionKind.ALPHA_COMPOSITE


def dataset_for(net, n=32, seed=0, noise=0.0):
    rng = np.random.default_rng(seed)
    z = rng.uniform(0.1, 0.9, size=(n, net.num_slots, net.dim))
    targets = net.predict(z) + noise * rng.normal(size=(n,
                                                        net.predict(z[:1]).shape[1]))
    return Dataset(z, targets)


# ---------------------------------------------------------------------------
# initialization
# ---------------------------------------------------------------------------


def test_init_is_deterministic_and_seed_sensitive():
    spec = NetSpec((4, 16, 8))
    a = init_params(spec, seed=5)
    b = init_params(spec, seed=5)
    c = init_params(spec, seed=6)
    for (wa, ba), (wb, bb) in zip(a, b):
        assert np.array_equal(wa, wb) and np.array_equal(ba, bb)
    assert not np.array_equal(a[0][0], c[0][0])


def test_init_respects_fan_in_bound_and_zero_biases():
    spec = NetSpec((9, 33, 2))
    for (w, b), fan_in in zip(init_params(spec, 1), (9, 33)):
        assert np.abs(w).max() <= np.sqrt(6.0 / fan_in)
        assert np.array_equal(b, np.zeros_like(b))


def test_zero_parameters_predict_zero():
    net = MonolithicNet(NetSpec((2, 3, 4)), num_slots=1, dim=2)
    net.params = [(np.zeros_like(w), np.zeros_like(b)) for w, b in net.params]
    assert np.array_equal(net.predict(np.full((5, 1, 2), 0.3)), np.zeros((5, 4)))


# ---------------------------------------------------------------------------
# gradients
# ---------------------------------------------------------------------------


def test_linear_net_hand_gradient():
    # scalar linear net w*z with w=2, z=3, target 1:
    # d/dw 0.5*(w*z - t)^2 = (w*z - t)*z = 5*3 = 15
    net = MonolithicNet(NetSpec((1, 1)), num_slots=1, dim=1)
    net.params = [(np.array([[2.0]]), np.zeros(1))]
    loss, grads = net.loss_and_gradients(np.array([[[3.0]]]), np.array([[1.0]]))
    assert loss == pytest.approx(0.5 * 25.0)
    assert grads[0][0, 0] == pytest.approx(15.0, abs=1e-12)
    assert grads[1][0] == pytest.approx(5.0, abs=1e-12)


def finite_difference_check(net, z, targets, coords_per_array=3, h=1e-6, seed=0):
    rng = np.random.default_rng(seed)
    _, grads = net.loss_and_gradients(z, targets)
    arrays = net.param_arrays()
    worst = 0.0
    for arr, grad in zip(arrays, grads):
        flat = arr.reshape(-1)
        for i in rng.choice(flat.size, size=min(coords_per_array, flat.size),
                            replace=False):
            old = flat[i]
            flat[i] = old + h
            up, _ = net.loss_and_gradients(z, targets)
            flat[i] = old - h
            dn, _ = net.loss_and_gradients(z, targets)
            flat[i] = old
            fd = (up - dn) / (2.0 * h)
            g = grad.reshape(-1)[i]
            worst = max(worst, abs(fd - g) / max(abs(fd), 1e-8))
    return worst


def test_monolithic_gradients_match_finite_differences():
    net = MonolithicNet(NetSpec((4, 12, 10, 6), "tanh"), num_slots=2, dim=2, seed=3)
    data = dataset_for(net, n=8, noise=0.5, seed=1)
    assert finite_difference_check(net, data.latents, data.observations) < 1e-4


@pytest.mark.parametrize("activation", ["tanh", "relu"])
def test_compositional_gradients_through_sigmoid_occlusion(activation):
    net = CompositionalNet(
        [NetSpec((2, 10, 6), activation)] * 2, SIG, CanvasLayout.flat(6), dim=2,
        seed=4,
    )
    data = dataset_for(net, n=8, noise=0.5, seed=2)
    assert finite_difference_check(net, data.latents, data.observations) < 1e-4


def test_compositional_gradients_through_alpha_composite():
    layout = CanvasLayout.image(2, 2, 4)
    net = CompositionalNet(
        [NetSpec((2, 10, 16), "tanh")] * 2, ALPHA, layout, dim=2, seed=5
    )
    data = dataset_for(net, n=8, noise=0.2, seed=3)
    assert finite_difference_check(net, data.latents, data.observations) < 1e-4


def test_sum_slot_gradients_are_local_when_canvases_do_not_interact():
    # slot 0 writes only output coords 0..2, slot 1 only 3..5; the gradients
    # of slot 0's live parameters must then ignore slot 1's parameter values
    # (the structurally dead last-layer columns are excluded: their gradient
    # is the shared residual itself)
    net = CompositionalNet(
        [NetSpec((2, 8, 6))] * 2, CompositionKind.SUM, CanvasLayout.flat(6), dim=2,
        seed=6,
    )
    for k, cols in [(0, slice(3, 6)), (1, slice(0, 3))]:
        w, b = net.slot_params[k][-1]
        w[:, cols] = 0.0
        b[cols] = 0.0
    data = dataset_for(net, n=10, noise=0.3, seed=4)
    _, before = net.loss_and_gradients(data.latents, data.observations)
    rng = np.random.default_rng(7)
    for w, b in net.slot_params[1][:-1]:  # perturb slot 1's earlier layers
        w += 0.05 * rng.normal(size=w.shape)
    _, after = net.loss_and_gradients(data.latents, data.observations)
    n_arrays_per_slot = len(net.slot_params[0]) * 2
    for i in range(n_arrays_per_slot - 2):  # all of slot 0 except the last layer
        assert np.allclose(before[i], after[i], atol=1e-12)
    w_before, w_after = before[n_arrays_per_slot - 2], after[n_arrays_per_slot - 2]
    assert np.allclose(w_before[:, :3], w_after[:, :3], atol=1e-12)


# ---------------------------------------------------------------------------
# parameter matching
# ---------------------------------------------------------------------------


def test_match_param_count_within_tolerance():
    slot_specs = [NetSpec((3, 128, 128, 128, 128, 768))] * 2
    target = sum(param_count(s) for s in slot_specs)
    mono, ratio = match_param_count(slot_specs, num_slots=2, input_width=6)
    assert abs(param_count(mono) - target) / target <= 0.05
    assert ratio == pytest.approx(param_count(mono) / target)


def test_match_param_count_doubles_one_slot():
    slot = NetSpec((3, 64, 64, 100))
    mono, _ = match_param_count([slot, slot], num_slots=2, input_width=6)
    assert param_count(mono) == pytest.approx(2 * param_count(slot), rel=0.05)
    assert len(mono.widths) == len(slot.widths)


def test_match_param_count_degenerate_single_layer():
    slot = NetSpec((3, 100))
    mono, ratio = match_param_count([slot, slot], num_slots=2, input_width=6)
    assert mono.widths == (6, 100)
    assert ratio == pytest.approx(param_count(mono) / (2 * param_count(slot)))


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------


def test_memorizes_a_single_sample():
    net = MonolithicNet(NetSpec((2, 16, 3)), num_slots=1, dim=2, seed=8)
    z = np.array([[[0.4, 0.6]]])
    t = np.array([[0.3, -0.2, 0.9]])
    history = train(net, Dataset(z, t), TrainConfig(epochs=800, batch_size=1,
                                                    lr=0.02, seed=0))
    assert history[-1] < 1e-6


def test_linear_net_converges_to_least_squares_optimum():
    rng = np.random.default_rng(9)
    x = rng.uniform(-1, 1, size=(40, 3))
    w_true = rng.normal(size=(3, 2))
    targets = x @ w_true + 0.1 * rng.normal(size=(40, 2))
    # closed-form optimum with bias via the normal equations
    xa = np.hstack([x, np.ones((40, 1))])
    coef, _, _, _ = np.linalg.lstsq(xa, targets, rcond=None)
    best_mse = float(np.mean((xa @ coef - targets) ** 2))
    net = MonolithicNet(NetSpec((3, 2)), num_slots=1, dim=3, seed=10)
    history = train(
        net,
        Dataset(x[:, None, :], targets),
        TrainConfig(epochs=4000, batch_size=40, lr=0.02, seed=1, shuffle=False),
    )
    assert history[-1] == pytest.approx(best_mse, abs=1e-6)


def test_training_is_bit_reproducible():
    def run():
        net = CompositionalNet([NetSpec((2, 8, 5))] * 2, CompositionKind.SUM,
                               CanvasLayout.flat(5), dim=2, seed=11)
        data = dataset_for(net, n=24, noise=0.2, seed=5)
        history = train(net, data, TrainConfig(epochs=5, batch_size=8, lr=1e-3,
                                               seed=2))
        return history, net.param_arrays()

    h1, p1 = run()
    h2, p2 = run()
    assert h1 == h2
    for a, b in zip(p1, p2):
        assert np.array_equal(a, b)


@pytest.mark.filterwarnings("ignore:overflow")
def test_divergence_aborts_with_epoch_index():
    net = MonolithicNet(NetSpec((1, 4, 1)), num_slots=1, dim=1, seed=12)
    z = np.full((4, 1, 1), 0.5)
    t = np.full((4, 1), 1e200)  # squared residual overflows immediately
    with pytest.raises(TrainingDiverged) as err:
        train(net, Dataset(z, t), TrainConfig(epochs=3, batch_size=4, lr=1e6))
    assert err.value.epoch == 0


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------


def test_perfect_predictions_score_zero_mse_unit_r2():
    t = np.random.default_rng(13).normal(size=(20, 4))
    data = Dataset(np.zeros((20, 1, 1)), t)
    metrics = evaluate_metrics(lambda z: t, data)
    assert metrics.mse == 0.0 and metrics.r2_vw == 1.0


def test_mean_predictor_scores_zero_r2():
    t = np.random.default_rng(14).normal(size=(30, 3))
    data = Dataset(np.zeros((30, 1, 1)), t)
    mean_pred = np.tile(t.mean(axis=0), (30, 1))
    metrics = evaluate_metrics(lambda z: mean_pred, data)
    assert metrics.r2_vw == pytest.approx(0.0, abs=1e-12)


def test_r2_can_go_negative_and_is_shift_invariant():
    rng = np.random.default_rng(15)
    t = rng.normal(size=(25, 3))
    bad = t + 3.0 * rng.normal(size=t.shape)
    data = Dataset(np.zeros((25, 1, 1)), t)
    m1 = evaluate_metrics(lambda z: bad, data)
    assert m1.r2_vw < 0
    shifted = Dataset(np.zeros((25, 1, 1)), t + 7.5)
    m2 = evaluate_metrics(lambda z: bad + 7.5, shifted)
    assert m2.r2_vw == pytest.approx(m1.r2_vw, abs=1e-9)


def test_zero_variance_targets_are_an_error():
    data = Dataset(np.zeros((10, 1, 1)), np.ones((10, 2)))
    with pytest.raises(ValueError, match="undefined"):
        evaluate_metrics(lambda z: np.ones((10, 2)), data)


# ---------------------------------------------------------------------------
# serialization
# ---------------------------------------------------------------------------


def test_monolithic_round_trip(tmp_path):
    net = MonolithicNet(NetSpec((4, 9, 5), "relu"), num_slots=2, dim=2, seed=16)
    path = tmp_path / "mono.cgl"
    save_net(path, net)
    loaded = load_net(path)
    assert isinstance(loaded, MonolithicNet)
    assert loaded.spec == net.spec
    z = np.random.default_rng(17).uniform(size=(6, 2, 2))
    assert np.array_equal(loaded.predict(z), net.predict(z))


def test_compositional_round_trip(tmp_path):
    layout = CanvasLayout.image(2, 2, 4)
    net = CompositionalNet([NetSpec((3, 7, 16))] * 2, ALPHA, layout, dim=3, seed=18)
    path = tmp_path / "comp.cgl"
    save_net(path, net)
    loaded = load_net(path)
    assert isinstance(loaded, CompositionalNet)
    assert loaded.composition is ALPHA
    assert loaded.canvas_layout == layout
    z = np.random.default_rng(19).uniform(size=(6, 2, 3))
    assert np.array_equal(loaded.predict(z), net.predict(z))


def test_magic_bytes_are_checked(tmp_path):
    path = tmp_path / "junk.bin"
    path.write_bytes(b"NOPE" + b"\0" * 64)
    with pytest.raises(ValueError, match="CGL1"):
        load_net(path)
