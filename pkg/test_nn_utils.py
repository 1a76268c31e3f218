import numpy as np
import pytest

from checkpoint_integrity import attach_integrity
from nn_utils import (
    Activation,
    CheckpointError,
    GradSet,
    Mlp,
    NumericalError,
    ParamSet,
    RmsPropState,
    StaleCacheError,
    WidthMismatch,
    backward,
    check_finite,
    clip_by_global_norm,
    elu,
    elu_grad,
    forward,
    load_checkpoint,
    rmsprop_step,
    save_checkpoint,
)


def numeric_param_grad(mlp, x, weights, eps=1e-6):
    grad = np.zeros(mlp.params.size)
    for k in range(mlp.params.size):
        old = mlp.params.flat[k]
        mlp.params.flat[k] = old + eps
        up = float(np.sum(forward(mlp, x)[0] * weights))
        mlp.params.flat[k] = old - eps
        down = float(np.sum(forward(mlp, x)[0] * weights))
        mlp.params.flat[k] = old
        grad[k] = (up - down) / (2 * eps)
    return grad


def test_forward_shapes_for_agent_network(rng):
    mlp = Mlp([40, 250, 120, 120, 2], rng=rng)
    out, _ = forward(mlp, rng.normal(size=(7, 40)))
    assert out.shape == (7, 2)
    single, _ = forward(mlp, rng.normal(size=40))
    assert single.shape == (2,)


def test_forward_rejects_wrong_width(rng):
    mlp = Mlp([5, 3, 2], rng=rng)
    with pytest.raises(WidthMismatch):
        forward(mlp, np.zeros(4))


def test_mlp_needs_two_widths():
    with pytest.raises(WidthMismatch):
        Mlp([4])


def test_supplied_params_must_match_widths():
    with pytest.raises(WidthMismatch):
        Mlp([3, 2], params=ParamSet([("W0", (3, 3)), ("b0", (3,))]))


def test_init_uniform_respects_fan_in(rng):
    mlp = Mlp([100, 10, 2], rng=rng)
    W0, b0 = mlp.layer(0)
    assert np.all(np.abs(W0) <= 0.1)
    assert np.all(np.abs(b0) <= 0.1)
    assert np.any(W0 != 0.0)


@pytest.mark.parametrize("activation", [Activation.RELU, Activation.ABS, Activation.IDENTITY])
def test_backward_matches_finite_differences(rng, activation):
    mlp = Mlp([6, 5, 4, 3], hidden_activation=activation, rng=rng)
    for _ in range(5):
        x = rng.normal(size=(4, 6))
        weights = rng.normal(size=(4, 3))
        out, cache = forward(mlp, x)
        grads, _ = backward(mlp, cache, weights)
        numeric = numeric_param_grad(mlp, x, weights)
        assert np.allclose(grads.flat, numeric, rtol=1e-4, atol=1e-7)


def test_input_gradient_matches_finite_differences(rng):
    mlp = Mlp([4, 6, 2], rng=rng)
    x = rng.normal(size=4)
    weights = rng.normal(size=2)
    _, cache = forward(mlp, x)
    _, dx = backward(mlp, cache, weights)
    eps = 1e-6
    numeric = np.array([
        (np.sum(forward(mlp, x + eps * e)[0] * weights) - np.sum(forward(mlp, x - eps * e)[0] * weights)) / (2 * eps)
        for e in np.eye(4)
    ])
    assert np.allclose(dx, numeric, rtol=1e-4, atol=1e-7)


def test_backward_sums_over_batch(rng):
    mlp = Mlp([3, 4, 2], rng=rng)
    x = rng.normal(size=(2, 3))
    g = rng.normal(size=(2, 2))
    _, cache = forward(mlp, x)
    total, _ = backward(mlp, cache, g)
    parts = []
    for i in range(2):
        _, c = forward(mlp, x[i])
        parts.append(backward(mlp, c, g[i])[0])
    assert np.allclose(total.flat, parts[0].add(parts[1]).flat)


def test_backward_rejects_stale_cache(rng):
    mlp = Mlp([3, 2], rng=rng)
    _, cache = forward(mlp, np.ones(3))
    mlp.params.touch()
    with pytest.raises(StaleCacheError):
        backward(mlp, cache, np.ones(2))


def test_backward_rejects_cache_of_other_network(rng):
    mlp = Mlp([3, 2], rng=rng)
    twin = mlp.clone()
    _, cache = forward(mlp, np.ones(3))
    with pytest.raises(StaleCacheError):
        backward(twin, cache, np.ones(2))


def test_clone_is_independent(rng):
    mlp = Mlp([3, 2], rng=rng)
    twin = mlp.clone()
    twin.params.flat[:] = 0.0
    assert np.any(mlp.params.flat != 0.0)


def test_assign_copies_and_bumps_version(rng):
    a = Mlp([3, 2], rng=rng).params
    b = Mlp([3, 2], rng=rng).params
    before = a.version
    a.assign(b)
    assert np.array_equal(a.flat, b.flat)
    assert a.version == before + 1
    with pytest.raises(WidthMismatch):
        a.assign(Mlp([3, 3], rng=rng).params)


def test_elu_values_and_gradient():
    x = np.array([-2.0, -1.0, 0.5, 3.0])
    assert np.allclose(elu(x), [np.exp(-2.0) - 1, np.exp(-1.0) - 1, 0.5, 3.0])
    eps = 1e-6
    assert np.allclose(elu_grad(x), (elu(x + eps) - elu(x - eps)) / (2 * eps), rtol=1e-6)


def test_rmsprop_first_step():
    params = ParamSet([("W0", (2,))], np.array([1.0, -1.0]))
    grads = GradSet(params.layout, np.array([2.0, -0.5]))
    state = RmsPropState.for_params(params, lr=0.01)
    rmsprop_step(params, grads, state)

    acc = 0.01 * grads.flat ** 2
    expected = np.array([1.0, -1.0]) - 0.01 * grads.flat / (np.sqrt(acc) + 1e-5)
    assert np.allclose(state.acc, acc)
    assert np.allclose(params.flat, expected)
    assert state.steps == 1


def test_rmsprop_refuses_non_finite_gradient():
    params = ParamSet([("W0", (2,))], np.array([1.0, 2.0]))
    grads = GradSet(params.layout, np.array([np.nan, 0.0]))
    state = RmsPropState.for_params(params, lr=0.1)
    with pytest.raises(NumericalError):
        rmsprop_step(params, grads, state)
    assert np.array_equal(params.flat, [1.0, 2.0])
    assert np.array_equal(state.acc, [0.0, 0.0])


def test_check_finite_names_the_label():
    g = GradSet([("W0", (1,))], np.array([np.inf]))
    with pytest.raises(NumericalError, match="critic"):
        check_finite(g, "critic")


def test_clip_by_global_norm_scales_jointly():
    a = GradSet([("W0", (1,))], np.array([3.0]))
    b = GradSet([("W0", (1,))], np.array([4.0]))
    total = clip_by_global_norm([a, b], 2.5)
    assert total == pytest.approx(5.0)
    assert a.flat[0] == pytest.approx(1.5)
    assert b.flat[0] == pytest.approx(2.0)


def test_clip_by_global_norm_leaves_small_gradients():
    a = GradSet([("W0", (2,))], np.array([0.3, 0.4]))
    assert clip_by_global_norm([a], 10.0) == pytest.approx(0.5)
    assert np.allclose(a.flat, [0.3, 0.4])


def test_checkpoint_roundtrip(tmp_path, rng):
    mlp = Mlp([4, 3, 2], rng=rng)
    path = tmp_path / "net.qpmx"
    save_checkpoint(path, {"q_net": mlp.params}, {"kinds": ["dqn"], "epsilon": [0.5]})
    tensors, meta = load_checkpoint(path)
    assert meta == {"kinds": ["dqn"], "epsilon": [0.5]}
    assert tensors["q_net"].layout == mlp.params.layout
    assert np.array_equal(tensors["q_net"].flat, mlp.params.flat)


def test_checkpoint_detects_tampering(tmp_path, rng):
    path = tmp_path / "net.qpmx"
    save_checkpoint(path, {"q_net": Mlp([4, 2], rng=rng).params})
    blob = bytearray(path.read_bytes())
    blob[-40] ^= 0xFF
    path.write_bytes(bytes(blob))
    with pytest.raises(CheckpointError):
        load_checkpoint(path)


def test_checkpoint_signed_with_other_key_is_rejected(tmp_path, rng, monkeypatch):
    path = tmp_path / "net.qpmx"
    save_checkpoint(path, {"q_net": Mlp([4, 2], rng=rng).params})
    monkeypatch.setenv("QPMIX_CHECKPOINT_SECRET", "another-secret")
    with pytest.raises(CheckpointError, match="HMAC"):
        load_checkpoint(path)


def test_checkpoint_with_bad_magic_is_rejected(tmp_path):
    path = tmp_path / "bogus.qpmx"
    path.write_bytes(attach_integrity(b"NOTACKPT" + bytes(16)))
    with pytest.raises(CheckpointError, match="magic"):
        load_checkpoint(path)


def test_checkpoint_too_short(tmp_path):
    path = tmp_path / "short.qpmx"
    path.write_bytes(b"QPMX")
    with pytest.raises(CheckpointError):
        load_checkpoint(path)


def test_zero_network_outputs_zero(rng):
    mlp = Mlp([5, 3, 2])
    out, _ = forward(mlp, rng.normal(size=5))
    assert np.array_equal(out, np.zeros(2))


def test_identity_single_layer_passes_input_through():
    mlp = Mlp([3, 3])
    mlp.params.view("W0")[...] = np.eye(3)
    out, _ = forward(mlp, np.array([1.5, -2.0, 0.25]))
    assert np.array_equal(out, [1.5, -2.0, 0.25])


def test_forward_matches_hand_computation(rng):
    mlp = Mlp([5, 3, 2], rng=rng)
    x = rng.normal(size=5)
    (W0, b0), (W1, b1) = mlp.layer(0), mlp.layer(1)
    hidden = [max(0.0, sum(x[i] * W0[i, j] for i in range(5)) + b0[j]) for j in range(3)]
    expected = [sum(hidden[j] * W1[j, k] for j in range(3)) + b1[k] for k in range(2)]
    out, _ = forward(mlp, x)
    assert np.allclose(out, expected, rtol=1e-12)


def test_abs_hidden_layers_are_nonnegative(rng):
    mlp = Mlp([4, 6, 1], hidden_activation=Activation.ABS, rng=rng)
    _, cache = forward(mlp, rng.normal(size=(50, 4)))
    assert np.any(cache.pre_activations[0] < 0.0)
    assert np.all(cache.inputs[1] >= 0.0)


def test_zero_output_gradient_gives_zero_grads(rng):
    mlp = Mlp([5, 4, 2], rng=rng)
    _, cache = forward(mlp, rng.normal(size=5))
    grads, dx = backward(mlp, cache, np.zeros(2))
    assert not np.any(grads.flat)
    assert not np.any(dx)


def test_rmsprop_scalar_step():
    params = ParamSet([("W0", (1,))], np.array([0.0]))
    state = RmsPropState.for_params(params, lr=0.1, rho=0.9)
    rmsprop_step(params, GradSet(params.layout, np.array([1.0])), state)
    assert state.acc[0] == pytest.approx(0.1)
    assert params.flat[0] == pytest.approx(-0.1 / (np.sqrt(0.1) + 1e-5))
    assert params.flat[0] == pytest.approx(-0.3162, abs=1e-4)


def test_rmsprop_zero_gradient_is_a_no_op():
    params = ParamSet([("W0", (3,))], np.array([1.0, 2.0, 3.0]))
    rmsprop_step(params, params.zeros_like(), RmsPropState.for_params(params, lr=0.1))
    assert np.array_equal(params.flat, [1.0, 2.0, 3.0])


def test_rmsprop_identical_steps_shrink():
    params = ParamSet([("W0", (1,))], np.array([0.0]))
    state = RmsPropState.for_params(params, lr=0.1)
    g = GradSet(params.layout, np.array([1.0]))
    rmsprop_step(params, g, state)
    first = -params.flat[0]
    rmsprop_step(params, g, state)
    second = -params.flat[0] - first
    assert 0.0 < second < first


def test_param_snapshot_restores_bit_exactly(rng):
    mlp = Mlp([4, 3, 2], rng=rng)
    snapshot = mlp.params.copy()
    original = mlp.params.flat.copy()
    mlp.params.flat += 1.0
    mlp.params.assign(snapshot)
    assert np.array_equal(mlp.params.flat, original)
