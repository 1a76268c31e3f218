import numpy as np
import pytest

from mixer import NET_NAMES, MixingNetwork, mix, mix_backward, state_value


def identity_mixer(state_dim=2):
    """N=1, h=1 parameters with Q_tot = q for q > -10."""
    mixer = MixingNetwork(1, state_dim, hidden=1)
    mixer.nets["hyper_w1"].params.view("b0")[...] = 1.0
    mixer.nets["hyper_b1"].params.view("b0")[...] = 10.0
    mixer.nets["hyper_w2"].params.view("b0")[...] = 1.0
    mixer.nets["hyper_b2"].params.view("b1")[...] = -10.0
    return mixer


def test_zero_parameters_give_zero(rng):
    mixer = MixingNetwork(3, 6, hidden=4)
    for _ in range(10):
        q_tot, v, _ = mix(mixer, rng.normal(size=3), rng.normal(size=6))
        assert q_tot == 0.0
        assert v == 0.0


def test_identity_configuration(rng):
    mixer = identity_mixer()
    for q in rng.uniform(-5, 5, size=20):
        q_tot, _, _ = mix(mixer, np.array([q]), rng.normal(size=2))
        assert q_tot == pytest.approx(q)


def test_batch_and_single_rows_agree(rng):
    mixer = MixingNetwork(2, 4, hidden=3, rng=rng)
    q, s = rng.normal(size=(5, 2)), rng.normal(size=(5, 4))
    q_tot, v, _ = mix(mixer, q, s)
    assert q_tot.shape == (5,)
    for i in range(5):
        single, single_v, _ = mix(mixer, q[i], s[i])
        assert single == pytest.approx(q_tot[i])
        assert single_v == pytest.approx(v[i])
    assert np.allclose(state_value(mixer, s)[0], v)


def test_wrong_agent_count(rng):
    mixer = MixingNetwork(2, 4, rng=rng)
    with pytest.raises(ValueError):
        mix(mixer, np.zeros(3), np.zeros(4))


def test_default_shapes(rng):
    mixer = MixingNetwork(4, 8, rng=rng)
    assert set(mixer.parameters()) == set(NET_NAMES)
    assert mixer.nets["hyper_w1"].widths == [8, 64]
    assert mixer.nets["hyper_b2"].widths == [8, 16, 1]
    assert mixer.nets["value"].widths == [8, 16, 1]


def test_clone_is_independent(rng):
    mixer = MixingNetwork(2, 4, hidden=3, rng=rng)
    twin = mixer.clone()
    q, s = rng.normal(size=2), rng.normal(size=4)
    assert mix(twin, q, s)[0] == mix(mixer, q, s)[0]
    twin.nets["hyper_b2"].params.flat += 1.0
    assert mix(twin, q, s)[0] != mix(mixer, q, s)[0]


def test_monotonic_in_every_agent_q(rng):
    for _ in range(100):
        mixer = MixingNetwork(3, 6, hidden=4, rng=rng)
        for net in mixer.nets.values():
            net.params.flat *= 3.0
        q, s = rng.normal(size=3) * 3, rng.normal(size=6)
        base, _, cache = mix(mixer, q, s)
        _, dq = mix_backward(mixer, cache, 1.0)
        assert np.all(dq >= 0.0)
        for i in range(3):
            bumped = q.copy()
            bumped[i] += 1.0
            assert mix(mixer, bumped, s)[0] >= base - 1e-9
            bumped[i] = q[i] + 1e-6
            assert (mix(mixer, bumped, s)[0] - base) / 1e-6 >= -1e-6


def test_backward_matches_finite_differences(rng):
    for _ in range(10):
        mixer = MixingNetwork(2, 4, hidden=3, rng=rng)
        q, s = rng.normal(size=(5, 2)), rng.normal(size=(5, 4))
        c_q, c_v = rng.normal(size=5), rng.normal(size=5)

        def objective():
            q_tot, v, _ = mix(mixer, q, s)
            return float(c_q @ q_tot + c_v @ v)

        _, _, cache = mix(mixer, q, s)
        grads, dq = mix_backward(mixer, cache, c_q, c_v)
        eps = 1e-6
        for name, net in mixer.nets.items():
            numeric = np.zeros(net.params.size)
            for k in range(net.params.size):
                old = net.params.flat[k]
                net.params.flat[k] = old + eps
                up = objective()
                net.params.flat[k] = old - eps
                down = objective()
                net.params.flat[k] = old
                numeric[k] = (up - down) / (2 * eps)
            assert np.allclose(grads[name].flat, numeric, rtol=1e-4, atol=1e-7), name

        for b in range(5):
            for i in range(2):
                up, down = q.copy(), q.copy()
                up[b, i] += eps
                down[b, i] -= eps
                numeric = (c_q[b] * (mix(mixer, up, s)[0][b] - mix(mixer, down, s)[0][b])) / (2 * eps)
                assert dq[b, i] == pytest.approx(numeric, rel=1e-4, abs=1e-7)


def test_value_gradient_only_when_requested(rng):
    mixer = MixingNetwork(2, 4, hidden=3, rng=rng)
    _, _, cache = mix(mixer, rng.normal(size=2), rng.normal(size=4))
    grads, dq = mix_backward(mixer, cache, 1.0)
    assert "value" not in grads
    assert dq.shape == (2,)
    grads, _ = mix_backward(mixer, cache, 1.0, 1.0)
    assert "value" in grads
