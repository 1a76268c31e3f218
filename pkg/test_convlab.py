import numpy as np
import pytest

from convlab import (
    TRACE_COLUMNS,
    JointPolicy,
    LabConfig,
    LinearMdp,
    ScheduleError,
    SingularSystemError,
    StepSchedule,
    actor_update,
    advantage,
    consensus_matrix,
    consensus_td_update,
    disagreement_norm,
    empirical_tv,
    expected_actor_update,
    expected_td_direction,
    is_column_stochastic,
    policy_evaluation,
    projected_drift,
    random_column_stochastic,
    random_mdp,
    require_valid_schedule,
    run_two_time_scale,
    solve_fixed_point,
    stationarity_probe,
    stationary_distribution,
    td0_update,
    validate_schedule,
)


def reference(rng, **kwargs):
    mdp = random_mdp(rng, **kwargs)
    return mdp, JointPolicy.initial(mdp, ("value", "policy"))


# ---- MDP construction -------------------------------------------------------

def test_random_mdp_is_well_formed(rng):
    mdp = random_mdp(rng, n_states=4)
    assert mdp.P.shape == (4, 4, 4)
    assert np.allclose(mdp.P.sum(axis=2), 1.0)
    assert np.all(mdp.P >= 0.05 / 4 - 1e-12)
    assert mdp.phi.shape == (16, 16)


def test_random_features_are_normalized(rng):
    mdp = random_mdp(rng, features="random", n_features=5)
    assert mdp.n_features == 5
    assert np.allclose(np.linalg.norm(mdp.phi, axis=1), 1.0)


def test_feature_family_errors(rng):
    with pytest.raises(ValueError):
        random_mdp(rng, features="fourier")
    with pytest.raises(ValueError):
        random_mdp(rng, features="random", n_features=13)


def test_rank_deficient_features_rejected(rng):
    mdp = random_mdp(rng, n_states=2)
    phi = np.ones((8, 2))
    with pytest.raises(SingularSystemError):
        LinearMdp(2, 2, mdp.P, mdp.R, phi)


def test_joint_actions_are_row_major(rng):
    mdp = random_mdp(rng)
    assert mdp.joint_index([1, 0]) == 2
    assert list(mdp.joint[2]) == [1, 0]
    assert np.array_equal(mdp.features(1, 3), mdp.phi[7])


# ---- consensus weights --------------------------------------------------------

def test_consensus_matrix_is_doubly_stochastic():
    C = consensus_matrix(4, 0.3)
    assert is_column_stochastic(C)
    assert np.allclose(C.sum(axis=1), 1.0)
    assert np.allclose(consensus_matrix(3, 1.0), np.full((3, 3), 1 / 3))
    with pytest.raises(ValueError):
        consensus_matrix(3, 1.5)


def test_random_column_stochastic(rng):
    C = random_column_stochastic(5, rng)
    assert is_column_stochastic(C)
    assert not is_column_stochastic(C.T * 2)


# ---- critic update ------------------------------------------------------------

def test_single_agent_update_is_plain_td(rng):
    for _ in range(20):
        omega = rng.normal(size=6)
        phi, phi_next = rng.normal(size=6), rng.normal(size=6)
        r, beta = float(rng.normal()), 0.1
        out = consensus_td_update(omega[None, :], phi, phi_next, r, np.ones((1, 1)), beta, 0.5)
        assert np.allclose(out[0], td0_update(omega, phi, phi_next, r, beta, 0.5))


def test_identical_critics_stay_identical(rng):
    omega = rng.normal(size=5)
    omegas = np.tile(omega, (3, 1))
    C = np.ones((3, 3)) / 3
    for _ in range(10):
        omegas = consensus_td_update(omegas, rng.normal(size=5), rng.normal(size=5), 1.0, C, 0.05, 0.5)
    assert disagreement_norm(omegas) < 1e-12


def test_mean_critic_follows_scaled_td(rng):
    n, gamma, beta = 4, 0.5, 0.1
    for _ in range(20):
        omegas = rng.normal(size=(n, 6))
        phi, phi_next = rng.normal(size=6), rng.normal(size=6)
        r = float(rng.normal())
        C = random_column_stochastic(n, rng)
        out = consensus_td_update(omegas, phi, phi_next, r, C, beta, gamma)
        bar = omegas.mean(axis=0)
        expected = bar + beta * (r + (gamma * phi_next @ bar - phi @ bar) / n) * phi
        assert np.allclose(out.mean(axis=0), expected)


def test_disagreement_example():
    assert disagreement_norm(np.array([[1.0, 0.0], [0.0, 1.0]])) == pytest.approx(1.0)
    assert disagreement_norm(np.array([[2.0, 3.0], [2.0, 3.0]])) == 0.0


# ---- fixed point --------------------------------------------------------------

def test_tabular_fixed_point_is_policy_value(rng):
    for _ in range(5):
        mdp, policy = reference(rng)
        q = policy_evaluation(mdp, policy)
        assert np.allclose(solve_fixed_point(mdp, policy), q)
        assert np.allclose(solve_fixed_point(mdp, policy, n_agents=2), 2 * q)


def test_zero_reward_gives_zero_fixed_point(rng):
    mdp = random_mdp(rng, features="random", n_features=6)
    mdp.R[:] = 0.0
    policy = JointPolicy.initial(mdp, ("value", "policy"))
    assert np.allclose(solve_fixed_point(mdp, policy, 2), 0.0)


def test_fixed_point_zeroes_expected_direction(rng):
    for features in ("tabular", "random"):
        mdp, policy = reference(rng, features=features)
        omega = solve_fixed_point(mdp, policy, 2)
        assert np.allclose(expected_td_direction(mdp, policy, omega, 2), 0.0, atol=1e-10)
        assert not np.allclose(expected_td_direction(mdp, policy, omega + 1.0, 2), 0.0)


# ---- policy / stationary distribution --------------------------------------------

def test_stationary_distribution(rng):
    mdp, policy = reference(rng)
    d = stationary_distribution(mdp, policy)
    P = np.einsum("sa,sat->st", policy.table(mdp), mdp.P)
    assert d.sum() == pytest.approx(1.0)
    assert np.allclose(d @ P, d)
    assert empirical_tv(mdp, policy, 200_000, rng) < 1e-2


def test_joint_probs_are_a_product(rng):
    mdp, policy = reference(rng)
    policy.thetas[1] = rng.normal(size=mdp.n_features)
    for s in range(mdp.n_states):
        joint = policy.joint_probs(mdp, s)
        assert joint.sum() == pytest.approx(1.0)
        p0, p1 = policy.agent_probs(mdp, 0, s), policy.agent_probs(mdp, 1, s)
        assert joint[mdp.joint_index([1, 0])] == pytest.approx(p0[1] * p1[0])


def test_value_agent_is_epsilon_greedy(rng):
    mdp, policy = reference(rng)
    policy.critics[0] = np.zeros(mdp.n_features)
    policy.critics[0][mdp.joint_index([1, 1])] = 5.0
    assert policy.agent_probs(mdp, 0, 0) == pytest.approx([0.05, 0.95])


def test_greedy_action_is_own_component_of_argmax_q(rng):
    mdp, policy = reference(rng, features="random")
    for _ in range(10):
        policy.critics[0] = rng.normal(size=mdp.n_features)
        for s in range(mdp.n_states):
            best = int(np.argmax(mdp.state_features(s) @ policy.critics[0]))
            assert policy.greedy_action(mdp, 0, s) == mdp.joint[best, 0]


def test_value_agent_needs_a_critic(rng):
    mdp = random_mdp(rng)
    with pytest.raises(ValueError):
        JointPolicy(("value", "policy"), {1: np.zeros(mdp.n_features)}, {}, 0.1)


def test_grad_log_matches_finite_differences(rng):
    mdp, policy = reference(rng)
    policy.thetas[1] = rng.normal(size=mdp.n_features)
    eps = 1e-6
    for s in range(mdp.n_states):
        for b in range(2):
            numeric = np.zeros(mdp.n_features)
            for k in range(mdp.n_features):
                theta = policy.thetas[1].copy()
                policy.thetas[1] = theta + eps * np.eye(mdp.n_features)[k]
                up = np.log(policy.agent_probs(mdp, 1, s)[b])
                policy.thetas[1] = theta - eps * np.eye(mdp.n_features)[k]
                down = np.log(policy.agent_probs(mdp, 1, s)[b])
                policy.thetas[1] = theta
                numeric[k] = (up - down) / (2 * eps)
            assert np.allclose(policy.grad_log(mdp, 1, s, b), numeric, atol=1e-7)


def test_unknown_agent_kind(rng):
    mdp = random_mdp(rng)
    with pytest.raises(ValueError):
        JointPolicy.initial(mdp, ("value", "greedy"))


# ---- actor ----------------------------------------------------------------------

def test_advantage_example():
    assert advantage(np.array([1.0, 3.0]), np.array([0.5, 0.5]), 1) == pytest.approx(1.0)
    assert advantage(np.array([1.0, 3.0]), np.array([0.5, 0.5]), 0) == pytest.approx(-1.0)


def test_actor_update_is_projected(rng):
    mdp, policy = reference(rng)
    omega = rng.normal(size=mdp.n_features) * 100
    theta = actor_update(mdp, policy, 1, omega, 0, [0, 1], beta=1e3, bound=2.0)
    assert np.all(np.abs(theta) <= 2.0)


def test_projected_drift_blocks_outward_moves():
    theta = np.array([10.0, -10.0, 0.0, 10.0])
    direction = np.array([1.0, -1.0, 1.0, -1.0])
    assert np.array_equal(projected_drift(theta, direction), [0.0, 0.0, 1.0, -1.0])


def test_stationarity_is_zero_without_policy_agents(rng):
    mdp = random_mdp(rng)
    policy = JointPolicy.initial(mdp, ("value", "value"))
    assert stationarity_probe(mdp, policy, n_agents=2) == 0.0


def test_stationarity_is_finite_for_policy_agents(rng):
    mdp, policy = reference(rng)
    assert np.isfinite(stationarity_probe(mdp, policy, n_agents=2))


def one_state_bandit(theta):
    """One state, one softmax agent, rewards 1 and 0; Q(0) - Q(1) = 1 under any policy."""
    mdp = LinearMdp(1, 1, np.ones((1, 2, 1)), np.array([[1.0, 0.0]]), np.eye(2))
    return mdp, JointPolicy(("policy",), {0: np.array(theta, dtype=float)}, {}, 0.1)


def test_expected_update_matches_softmax_bandit_gradient():
    mdp, policy = one_state_bandit([0.3, -0.2])
    p0, p1 = policy.agent_probs(mdp, 0, 0)
    raw = expected_actor_update(mdp, policy, 0, solve_fixed_point(mdp, policy))
    assert np.allclose(raw, [p0 * p1, -p0 * p1])


def test_interior_theta_stationarity_is_raw_update_norm():
    mdp, policy = one_state_bandit([0.3, -0.2])
    raw = expected_actor_update(mdp, policy, 0, solve_fixed_point(mdp, policy))
    assert stationarity_probe(mdp, policy, n_agents=1) == pytest.approx(np.linalg.norm(raw))
    assert stationarity_probe(mdp, policy, n_agents=1) > 0.1


def test_softmax_near_its_optimum_has_vanishing_update():
    mdp, policy = one_state_bandit([8.0, -8.0])
    raw = expected_actor_update(mdp, policy, 0, solve_fixed_point(mdp, policy))
    assert np.linalg.norm(raw) < 1e-6
    assert stationarity_probe(mdp, policy, n_agents=1) < 1e-6


def test_box_optimum_is_stationary_under_projection():
    mdp, policy = one_state_bandit([1.0, -1.0])
    raw = expected_actor_update(mdp, policy, 0, solve_fixed_point(mdp, policy))
    assert raw[0] > 0.05 and raw[1] < -0.05
    assert stationarity_probe(mdp, policy, n_agents=1, bound=1.0) == 0.0


# ---- schedules ------------------------------------------------------------------

def test_default_schedule_is_valid():
    assert validate_schedule(StepSchedule()) == (True, "")
    assert StepSchedule().beta_omega(0) == pytest.approx(80 / 200 ** 0.85)
    assert StepSchedule().beta_omega(0) < 1.0
    assert StepSchedule().beta_theta(9) == pytest.approx(1 / 209 ** 0.9)
    assert StepSchedule(t0=1.0).beta_omega(0) == pytest.approx(80.0)


@pytest.mark.parametrize("schedule", [
    StepSchedule(p_omega=0.4),
    StepSchedule(p_theta=1.2),
    StepSchedule(p_omega=0.8, p_theta=0.7),
    StepSchedule(p_omega=0.7, p_theta=0.7),
    StepSchedule(c_omega=0.0),
])
def test_invalid_schedules(schedule):
    is_valid, reason = validate_schedule(schedule)
    assert not is_valid
    assert reason
    with pytest.raises(ScheduleError):
        require_valid_schedule(schedule)


def test_run_rejects_invalid_schedule(rng):
    mdp = random_mdp(rng)
    with pytest.raises(ScheduleError):
        run_two_time_scale(mdp, LabConfig(schedule=StepSchedule(p_theta=0.5)), rng)


# ---- two-time-scale runs ---------------------------------------------------------

def test_short_critic_run_approaches_fixed_point():
    rng = np.random.default_rng(7)
    mdp = random_mdp(rng, n_states=2, smoothing=0.5)
    config = LabConfig(iterations=50_000, trace_every=50_000, train_actors=False, value_refresh=0, shared_init=False)
    result = run_two_time_scale(mdp, config, rng)

    first, last = result.trace[0], result.trace[-1]
    assert [row["iteration"] for row in result.trace] == [0, 50_000]
    assert list(last) == TRACE_COLUMNS
    assert last["actor_grad_norm"] == ""
    assert last["fixed_point_error"] < 0.2
    assert last["fixed_point_error"] < 0.1 * first["fixed_point_error"]
    assert last["disagreement"] < 0.5 * first["disagreement"]
    target = solve_fixed_point(mdp, result.policy, 2)
    assert np.linalg.norm(result.omega_bar - target) == pytest.approx(last["fixed_point_error"])


def test_independent_starts_reach_consensus():
    rng = np.random.default_rng(5)
    mdp = random_mdp(rng, n_states=2, smoothing=0.5)
    config = LabConfig(iterations=20_000, trace_every=5_000, train_actors=False, value_refresh=0, shared_init=False)
    trace = run_two_time_scale(mdp, config, rng).trace
    assert trace[0]["disagreement"] > 0.1
    assert trace[-1]["disagreement"] < 0.05 * trace[0]["disagreement"]


def test_shared_start_stays_in_consensus():
    rng = np.random.default_rng(6)
    mdp = random_mdp(rng, n_states=2, smoothing=0.5)
    config = LabConfig(iterations=20_000, trace_every=5_000, train_actors=False)
    trace = run_two_time_scale(mdp, config, rng).trace
    assert all(row["disagreement"] < 1e-12 for row in trace)
    assert trace[-1]["fixed_point_error"] < 0.1 * trace[0]["fixed_point_error"]


def test_value_agent_acts_on_its_own_critic():
    rng = np.random.default_rng(9)
    mdp = random_mdp(rng, features="random")
    config = LabConfig(iterations=3_000, trace_every=1_000, shared_init=False)
    result = run_two_time_scale(mdp, config, rng)
    assert np.array_equal(result.policy.critics[0], result.omegas[0])
    for s in range(mdp.n_states):
        best = int(np.argmax(mdp.state_features(s) @ result.omegas[0]))
        assert result.policy.greedy_action(mdp, 0, s) == mdp.joint[best, 0]


def test_value_refresh_zero_freezes_the_greedy_critic():
    rng = np.random.default_rng(9)
    mdp = random_mdp(rng)
    config = LabConfig(iterations=2_000, trace_every=1_000, train_actors=False, value_refresh=0)
    result = run_two_time_scale(mdp, config, rng)
    assert not np.allclose(result.policy.critics[0], result.omegas[0])


def test_time_varying_consensus_run():
    rng = np.random.default_rng(8)
    mdp = random_mdp(rng, n_states=2)
    config = LabConfig(iterations=2000, trace_every=500, time_varying=True)
    result = run_two_time_scale(mdp, config, rng, mdp_id=3)
    assert len(result.trace) == 5
    assert all(row["mdp"] == 3 for row in result.trace)
    assert all(np.all(np.abs(t) <= 10.0) for t in result.policy.thetas.values())
    assert isinstance(result.trace[-1]["actor_grad_norm"], float)


def test_kinds_must_match_agents(rng):
    mdp = random_mdp(rng)
    with pytest.raises(ValueError):
        run_two_time_scale(mdp, LabConfig(kinds=("value",), iterations=10), rng)


# ---- acceptance-scale runs ---------------------------------------------------------

@pytest.mark.slow
@pytest.mark.parametrize("features", ["tabular", "random"])
def test_critic_consensus_reaches_fixed_point(features):
    seeds = np.random.SeedSequence(2024).spawn(10)
    for child in seeds:
        mdp_rng, run_rng = (np.random.default_rng(s) for s in child.spawn(2))
        mdp = random_mdp(mdp_rng, n_states=3, features=features)
        # value_refresh=0 holds the joint policy fixed while the critics converge
        config = LabConfig(iterations=1_000_000, trace_every=100_000, train_actors=False, value_refresh=0)
        last = run_two_time_scale(mdp, config, run_rng).trace[-1]
        assert last["fixed_point_error"] < 1e-2
        assert last["disagreement"] < 1e-3


@pytest.mark.slow
def test_two_time_scale_run_is_stationary():
    rng = np.random.default_rng(11)
    mdp = random_mdp(rng, n_states=3)
    config = LabConfig(iterations=1_000_000, trace_every=100_000, value_epsilon=0.1,
                       schedule=StepSchedule(c_omega=1.0, p_omega=0.6, c_theta=1.0, p_theta=0.9, t0=1.0))
    result = run_two_time_scale(mdp, config, rng)
    assert result.trace[-1]["actor_grad_norm"] < 1e-2
