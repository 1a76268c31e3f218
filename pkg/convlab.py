"""
Convergence lab
===============
Linear-function-approximation experiments on small enumerable MDPs:

- consensus TD updates of per-agent critics omega^i,
- policy-gradient updates of softmax-linear actors theta^j,
- the exact fixed point of the averaged critic recursion (direct solve),
- the disagreement norm ||omega - 1 (x) mean(omega)||,
- the projected expected actor drift at a given theta.

Joint actions are indexed row-major over agents (agent 0 most significant);
state-action rows of the feature matrix are ordered s * |A| + a.

Critic updates carry the 1/N factor on the consensus term, so the averaged
critic converges to N times the standard linear TD fixed point;
solve_fixed_point takes the same n_agents to match.
"""

import itertools
import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

logger = logging.getLogger(__name__)

THETA_BOUND = 10.0
OMEGA_SANITY_BOUND = 1e6
TRACE_COLUMNS = ["mdp", "iteration", "disagreement", "fixed_point_error", "actor_grad_norm"]


class SingularSystemError(ValueError):
    """Fixed-point system is singular (rank-deficient features or reducible chain)."""


class ScheduleError(ValueError):
    """Step-size schedule violates the two-time-scale conditions."""


# ============================================================================
# DOMAIN TYPES
# ============================================================================

@dataclass
class LinearMdp:
    n_states: int
    n_agents: int
    P: np.ndarray           # (S, A, S)
    R: np.ndarray           # (S, A)
    phi: np.ndarray         # (S*A, K)
    gamma: float = 0.5
    n_actions: int = 2      # per agent
    joint: np.ndarray = field(init=False)

    def __post_init__(self):
        self.joint = np.array(list(itertools.product(range(self.n_actions), repeat=self.n_agents)), dtype=np.int64)
        S, A = self.n_states, self.n_joint
        if self.P.shape != (S, A, S) or self.R.shape != (S, A):
            raise ValueError("P must be (S, A, S) and R must be (S, A)")
        if not np.allclose(self.P.sum(axis=2), 1.0) or np.any(self.P < 0):
            raise ValueError("transition rows must be probability vectors")
        if self.phi.shape[0] != S * A:
            raise ValueError(f"feature matrix needs {S * A} rows")
        if np.linalg.matrix_rank(self.phi) != self.phi.shape[1]:
            raise SingularSystemError("feature matrix does not have full column rank")
        if not 0.0 <= self.gamma < 1.0:
            raise ValueError("gamma must lie in [0, 1)")

    @property
    def n_joint(self) -> int:
        return self.n_actions ** self.n_agents

    @property
    def n_features(self) -> int:
        return self.phi.shape[1]

    def features(self, s: int, a: int) -> np.ndarray:
        return self.phi[s * self.n_joint + a]

    def state_features(self, s: int) -> np.ndarray:
        """(A, K) rows of every joint action at state s."""
        A = self.n_joint
        return self.phi[s * A:(s + 1) * A]

    def joint_index(self, actions: Sequence[int]) -> int:
        idx = 0
        for a in actions:
            idx = idx * self.n_actions + int(a)
        return idx


def random_mdp(
    rng: np.random.Generator,
    n_states: int = 3,
    n_agents: int = 2,
    features: str = "tabular",
    n_features: Optional[int] = None,
    gamma: float = 0.5,
    smoothing: float = 0.05,
    reward_scale: float = 0.5,
) -> LinearMdp:
    """
    Seeded random MDP. Every transition row is mixed with a uniform row
    (weight `smoothing`), so the chain is irreducible and aperiodic under
    any policy.
    """
    A = 2 ** n_agents
    raw = rng.dirichlet(np.ones(n_states), size=(n_states, A))
    P = (1.0 - smoothing) * raw + smoothing / n_states
    R = rng.uniform(0.0, reward_scale, size=(n_states, A))

    if features == "tabular":
        phi = np.eye(n_states * A)
    elif features == "random":
        K = n_features or max(1, (n_states * A) // 2)
        if K > n_states * A:
            raise ValueError("more features than state-action pairs")
        phi = rng.normal(size=(n_states * A, K))
        phi /= np.linalg.norm(phi, axis=1, keepdims=True)
    else:
        raise ValueError(f"unknown feature family: {features}")
    return LinearMdp(n_states, n_agents, P, R, phi, gamma)


# ============================================================================
# CONSENSUS WEIGHTS
# ============================================================================

def consensus_matrix(n: int, alpha: float = 0.5) -> np.ndarray:
    """(1 - alpha) I + alpha 11^T / n; doubly stochastic, disagreement eigenvalue 1 - alpha."""
    if not 0.0 <= alpha <= 1.0:
        raise ValueError("alpha must lie in [0, 1]")
    return (1.0 - alpha) * np.eye(n) + alpha * np.ones((n, n)) / n


def random_column_stochastic(n: int, rng: np.random.Generator) -> np.ndarray:
    C = rng.uniform(0.1, 1.0, size=(n, n))
    return C / C.sum(axis=0, keepdims=True)


def is_column_stochastic(C: np.ndarray, tol: float = 1e-12) -> bool:
    return bool(np.all(C >= 0) and np.allclose(C.sum(axis=0), 1.0, atol=tol))


# ============================================================================
# JOINT POLICY
# ============================================================================

@dataclass
class JointPolicy:
    """
    Product policy. Value agent j plays epsilon-greedy on its component of the
    joint arg-max of critics[j], its copy of its own critic omega^j. Policy
    agents play a softmax over theta^T psi(s, b), psi being the state-action
    features averaged over the other agents' actions.
    """
    kinds: Tuple[str, ...]              # "value" or "policy" per agent
    thetas: Dict[int, np.ndarray]
    critics: Dict[int, np.ndarray]      # value agent -> omega^j it acts on
    epsilon: float = 0.1

    def __post_init__(self):
        if not 0.0 <= self.epsilon <= 1.0:
            raise ValueError("epsilon must lie in [0, 1]")
        for j, kind in enumerate(self.kinds):
            if kind == "policy" and j not in self.thetas:
                raise ValueError(f"policy agent {j} has no theta")
            if kind not in ("value", "policy"):
                raise ValueError(f"unknown agent kind: {kind}")
            if kind == "value" and j not in self.critics:
                raise ValueError(f"value agent {j} has no critic")

    @classmethod
    def initial(cls, mdp: LinearMdp, kinds: Sequence[str], epsilon: float = 0.1) -> "JointPolicy":
        K = mdp.n_features
        thetas = {j: np.zeros(K) for j, k in enumerate(kinds) if k == "policy"}
        critics = {j: np.zeros(K) for j, k in enumerate(kinds) if k == "value"}
        return cls(tuple(kinds), thetas, critics, epsilon)

    def policy_features(self, mdp: LinearMdp, j: int, s: int) -> np.ndarray:
        """(n_actions, K): psi^j(s, b)."""
        rows = mdp.state_features(s)
        return np.stack([rows[mdp.joint[:, j] == b].mean(axis=0) for b in range(mdp.n_actions)])

    def greedy_action(self, mdp: LinearMdp, j: int, s: int) -> int:
        """Agent j's component of argmax_a Q(s, a; critics[j])."""
        return int(mdp.joint[int(np.argmax(mdp.state_features(s) @ self.critics[j])), j])

    def agent_probs(self, mdp: LinearMdp, j: int, s: int) -> np.ndarray:
        if self.kinds[j] == "policy":
            logits = self.policy_features(mdp, j, s) @ self.thetas[j]
            z = np.exp(logits - logits.max())
            return z / z.sum()
        greedy = self.greedy_action(mdp, j, s)
        probs = np.full(mdp.n_actions, self.epsilon / mdp.n_actions)
        probs[greedy] += 1.0 - self.epsilon
        return probs

    def joint_probs(self, mdp: LinearMdp, s: int) -> np.ndarray:
        per_agent = [self.agent_probs(mdp, j, s) for j in range(mdp.n_agents)]
        return np.array([np.prod([per_agent[j][a[j]] for j in range(mdp.n_agents)]) for a in mdp.joint])

    def table(self, mdp: LinearMdp) -> np.ndarray:
        """(S, A) joint action probabilities."""
        return np.stack([self.joint_probs(mdp, s) for s in range(mdp.n_states)])

    def grad_log(self, mdp: LinearMdp, j: int, s: int, b: int) -> np.ndarray:
        """d/dtheta^j log pi^j(b | s) = psi(s, b) - sum_c pi(c|s) psi(s, c)."""
        psi = self.policy_features(mdp, j, s)
        return psi[b] - self.agent_probs(mdp, j, s) @ psi


# ============================================================================
# STATIONARY DISTRIBUTION
# ============================================================================

def state_transition_matrix(mdp: LinearMdp, pi: np.ndarray) -> np.ndarray:
    return np.einsum("sa,sat->st", pi, mdp.P)


def stationary_distribution(mdp: LinearMdp, policy: JointPolicy) -> np.ndarray:
    P = state_transition_matrix(mdp, policy.table(mdp))
    S = mdp.n_states
    system = np.vstack([P.T - np.eye(S), np.ones((1, S))])
    rhs = np.zeros(S + 1)
    rhs[-1] = 1.0
    d, *_ = np.linalg.lstsq(system, rhs, rcond=None)
    return d


def empirical_tv(mdp: LinearMdp, policy: JointPolicy, steps: int, rng: np.random.Generator) -> float:
    """Total-variation distance between long-run visit frequencies and d_Theta."""
    P = state_transition_matrix(mdp, policy.table(mdp))
    cum = np.cumsum(P, axis=1)
    u = rng.random(steps)
    counts = np.zeros(mdp.n_states)
    s = 0
    for t in range(steps):
        counts[s] += 1
        s = min(int(np.searchsorted(cum[s], u[t], side="right")), mdp.n_states - 1)
    return 0.5 * float(np.abs(counts / steps - stationary_distribution(mdp, policy)).sum())


# ============================================================================
# STEP SCHEDULES
# ============================================================================

@dataclass(frozen=True)
class StepSchedule:
    """beta_omega,t = c_omega / (t + t0)^p_omega ; beta_theta,t = c_theta / (t + t0)^p_theta."""
    c_omega: float = 80.0
    p_omega: float = 0.85
    c_theta: float = 1.0
    p_theta: float = 0.9
    t0: float = 200.0           # keeps beta_omega,0 below 1

    def beta_omega(self, t: int) -> float:
        return self.c_omega / (t + self.t0) ** self.p_omega

    def beta_theta(self, t: int) -> float:
        return self.c_theta / (t + self.t0) ** self.p_theta


def validate_schedule(schedule: StepSchedule) -> Tuple[bool, str]:
    """
    Power laws satisfy the two-time-scale conditions (divergent sums,
    summable squares, beta_theta/beta_omega -> 0, ratio of consecutive
    critic steps -> 1) exactly when 0.5 < p <= 1 for both and p_theta > p_omega.
    """
    for name in ("p_omega", "p_theta"):
        p = getattr(schedule, name)
        if not 0.5 < p <= 1.0:
            return False, f"{name}={p} must lie in (0.5, 1]"
    if schedule.p_theta <= schedule.p_omega:
        return False, "p_theta must exceed p_omega so the actor runs on the slower time scale"
    if schedule.c_omega <= 0 or schedule.c_theta <= 0 or schedule.t0 <= 0:
        return False, "step coefficients and t0 must be positive"
    return True, ""


def require_valid_schedule(schedule: StepSchedule) -> None:
    is_valid, reason = validate_schedule(schedule)
    if not is_valid:
        raise ScheduleError(reason)


# ============================================================================
# UPDATES
# ============================================================================

def consensus_td_update(
    omegas: np.ndarray,
    phi: np.ndarray,
    phi_next: np.ndarray,
    reward: float,
    C: np.ndarray,
    beta: float,
    gamma: float,
) -> np.ndarray:
    """
    delta^i = r + N^-1 sum_k c(i,k) [gamma Q^k(s',a') - Q^k(s,a)]
    omega^i <- omega^i + beta * delta^i * phi(s,a)
    """
    n = omegas.shape[0]
    td = gamma * (omegas @ phi_next) - omegas @ phi
    delta = reward + (C @ td) / n
    return omegas + beta * delta[:, None] * phi[None, :]


def td0_update(omega: np.ndarray, phi: np.ndarray, phi_next: np.ndarray, reward: float, beta: float, gamma: float) -> np.ndarray:
    """Plain single-critic linear TD(0)."""
    delta = reward + gamma * (omega @ phi_next) - omega @ phi
    return omega + beta * delta * phi


def advantage(q_own: np.ndarray, probs: np.ndarray, b: int) -> float:
    """A = Q(s, b, a^-j) - sum_c pi(c) Q(s, c, a^-j)."""
    return float(q_own[b] - probs @ q_own)


def own_action_values(mdp: LinearMdp, omega: np.ndarray, s: int, actions: Sequence[int], j: int) -> np.ndarray:
    """Q(s, (b, a^-j); omega) for every own action b with the others held fixed."""
    out = np.zeros(mdp.n_actions)
    trial = list(actions)
    for b in range(mdp.n_actions):
        trial[j] = b
        out[b] = mdp.features(s, mdp.joint_index(trial)) @ omega
    return out


def actor_update(
    mdp: LinearMdp,
    policy: JointPolicy,
    j: int,
    omega: np.ndarray,
    s: int,
    actions: Sequence[int],
    beta: float,
    bound: float = THETA_BOUND,
) -> np.ndarray:
    """theta^j <- Gamma[theta^j + beta * A^j * grad log pi^j(a^j | s)], Gamma a box projection."""
    probs = policy.agent_probs(mdp, j, s)
    A = advantage(own_action_values(mdp, omega, s, actions, j), probs, actions[j])
    theta = policy.thetas[j] + beta * A * policy.grad_log(mdp, j, s, actions[j])
    return np.clip(theta, -bound, bound)


# ============================================================================
# FIXED POINT / DISAGREEMENT / STATIONARITY
# ============================================================================

def _weighting(mdp: LinearMdp, policy: JointPolicy) -> Tuple[np.ndarray, np.ndarray]:
    """(diag of D_Theta, P^pi over state-action pairs)."""
    pi = policy.table(mdp)
    d = stationary_distribution(mdp, policy)
    D = (d[:, None] * pi).reshape(-1)
    S, A = mdp.n_states, mdp.n_joint
    P_pi = np.einsum("sat,tb->satb", mdp.P, pi).reshape(S * A, S * A)
    return D, P_pi


def solve_fixed_point(mdp: LinearMdp, policy: JointPolicy, n_agents: int = 1) -> np.ndarray:
    """
    Solve -N^-1 Phi^T D (gamma P^pi - I) Phi omega = Phi^T D R directly.
    With n_agents = 1 this is the standard linear TD fixed point.
    """
    D, P_pi = _weighting(mdp, policy)
    Phi = mdp.phi
    M = Phi.T @ (D[:, None] * ((np.eye(P_pi.shape[0]) - mdp.gamma * P_pi) @ Phi)) / n_agents
    b = Phi.T @ (D * mdp.R.reshape(-1))
    if np.linalg.cond(M) > 1e12:
        raise SingularSystemError("fixed-point system is singular")
    return np.linalg.solve(M, b)


def expected_td_direction(mdp: LinearMdp, policy: JointPolicy, omega: np.ndarray, n_agents: int = 1) -> np.ndarray:
    """Mean critic update direction Phi^T D [R + N^-1 (gamma P^pi - I) Phi omega]."""
    D, P_pi = _weighting(mdp, policy)
    Phi = mdp.phi
    resid = mdp.R.reshape(-1) + ((mdp.gamma * P_pi - np.eye(P_pi.shape[0])) @ (Phi @ omega)) / n_agents
    return Phi.T @ (D * resid)


def policy_evaluation(mdp: LinearMdp, policy: JointPolicy) -> np.ndarray:
    """Exact Q^pi over state-action pairs: (I - gamma P^pi)^-1 R."""
    _, P_pi = _weighting(mdp, policy)
    return np.linalg.solve(np.eye(P_pi.shape[0]) - mdp.gamma * P_pi, mdp.R.reshape(-1))


def disagreement_norm(omegas: np.ndarray) -> float:
    omegas = np.atleast_2d(omegas)
    return float(np.linalg.norm(omegas - omegas.mean(axis=0, keepdims=True)))


def expected_actor_update(mdp: LinearMdp, policy: JointPolicy, j: int, omega: np.ndarray) -> np.ndarray:
    """E_{s~d, a~pi}[A^j * grad log pi^j(a^j|s)] by enumeration."""
    d = stationary_distribution(mdp, policy)
    out = np.zeros_like(policy.thetas[j])
    for s in range(mdp.n_states):
        probs_joint = policy.joint_probs(mdp, s)
        probs_own = policy.agent_probs(mdp, j, s)
        for a_idx, actions in enumerate(mdp.joint):
            w = d[s] * probs_joint[a_idx]
            if w == 0.0:
                continue
            A = advantage(own_action_values(mdp, omega, s, actions, j), probs_own, actions[j])
            out += w * A * policy.grad_log(mdp, j, s, actions[j])
    return out


def projected_drift(theta: np.ndarray, direction: np.ndarray, bound: float = THETA_BOUND) -> np.ndarray:
    """lim_{eta->0} (Gamma[theta + eta v] - theta) / eta for the box |theta|_inf <= bound."""
    blocked = ((theta >= bound) & (direction > 0)) | ((theta <= -bound) & (direction < 0))
    return np.where(blocked, 0.0, direction)


def stationarity_probe(
    mdp: LinearMdp,
    policy: JointPolicy,
    omega: Optional[np.ndarray] = None,
    n_agents: int = 1,
    bound: float = THETA_BOUND,
) -> float:
    """
    Norm of the projected expected actor update over all policy agents. With
    omega omitted, the critic is the exact fixed point at the current policy.
    """
    if omega is None:
        omega = solve_fixed_point(mdp, policy, n_agents)
    total = 0.0
    for j, kind in enumerate(policy.kinds):
        if kind != "policy":
            continue
        drift = projected_drift(policy.thetas[j], expected_actor_update(mdp, policy, j, omega), bound)
        total += float(drift @ drift)
    return float(np.sqrt(total))


# ============================================================================
# TWO-TIME-SCALE RUN
# ============================================================================

@dataclass(frozen=True)
class LabConfig:
    kinds: Tuple[str, ...] = ("value", "policy")
    iterations: int = 1_000_000
    trace_every: int = 10_000
    schedule: StepSchedule = StepSchedule()
    value_epsilon: float = 0.5
    consensus_alpha: float = 0.5
    time_varying: bool = False      # draw alpha_t uniformly in [0, consensus_alpha] each step
    train_actors: bool = True
    value_refresh: int = 1          # copy omega^j into value agent j's greedy critic every k steps; 0 = never
    omega_init_scale: float = 1.0
    shared_init: bool = True        # every agent starts from one draw, i.e. inside the consensus subspace


@dataclass
class LabResult:
    omegas: np.ndarray
    policy: JointPolicy
    trace: List[dict]

    @property
    def omega_bar(self) -> np.ndarray:
        return self.omegas.mean(axis=0)


def run_two_time_scale(mdp: LinearMdp, config: LabConfig, rng: np.random.Generator, mdp_id: int = 0) -> LabResult:
    """
    Sample one on-policy trajectory; every step applies the consensus critic
    update to all agents and, if enabled, the actor update to policy agents.
    """
    require_valid_schedule(config.schedule)
    n, K = mdp.n_agents, mdp.n_features
    if len(config.kinds) != n:
        raise ValueError("kinds must list one entry per agent")

    policy = JointPolicy.initial(mdp, config.kinds, config.value_epsilon)
    if config.shared_init:
        omegas = np.tile(rng.normal(scale=config.omega_init_scale, size=K), (n, 1))
    else:
        omegas = rng.normal(scale=config.omega_init_scale, size=(n, K))
    _refresh_critics(policy, omegas)
    C_fixed = consensus_matrix(n, config.consensus_alpha)
    trace: List[dict] = []

    def sample_action(s: int) -> int:
        return int(rng.choice(mdp.n_joint, p=policy.joint_probs(mdp, s)))

    s = int(rng.integers(0, mdp.n_states))
    a = sample_action(s)
    for t in range(config.iterations):
        if t % config.trace_every == 0:
            trace.append(_trace_row(mdp, policy, omegas, mdp_id, t, config.train_actors))

        s_next = int(rng.choice(mdp.n_states, p=mdp.P[s, a]))
        a_next = sample_action(s_next)
        C = consensus_matrix(n, rng.uniform(0.0, config.consensus_alpha)) if config.time_varying else C_fixed

        omegas = consensus_td_update(omegas, mdp.features(s, a), mdp.features(s_next, a_next), mdp.R[s, a],
                                     C, config.schedule.beta_omega(t), mdp.gamma)
        if not np.all(np.abs(omegas) < OMEGA_SANITY_BOUND):
            raise FloatingPointError(f"critic parameters diverged at iteration {t}")

        if config.train_actors:
            beta_theta = config.schedule.beta_theta(t)
            actions = mdp.joint[a]
            new_thetas = {j: actor_update(mdp, policy, j, omegas[j], s, actions, beta_theta)
                          for j in policy.thetas}
            policy.thetas.update(new_thetas)
        if config.value_refresh and (t + 1) % config.value_refresh == 0:
            _refresh_critics(policy, omegas)

        s, a = s_next, a_next

    trace.append(_trace_row(mdp, policy, omegas, mdp_id, config.iterations, config.train_actors))
    logger.info(f"MDP {mdp_id}: disagreement={trace[-1]['disagreement']:.2e}, "
                f"fixed-point error={trace[-1]['fixed_point_error']:.2e}")
    return LabResult(omegas, policy, trace)


def _refresh_critics(policy: JointPolicy, omegas: np.ndarray) -> None:
    for j in policy.critics:
        policy.critics[j] = omegas[j].copy()


def _trace_row(mdp: LinearMdp, policy: JointPolicy, omegas: np.ndarray, mdp_id: int, t: int, actors: bool) -> dict:
    n = mdp.n_agents
    target = solve_fixed_point(mdp, policy, n)
    return {
        "mdp": mdp_id,
        "iteration": t,
        "disagreement": disagreement_norm(omegas),
        "fixed_point_error": float(np.linalg.norm(omegas.mean(axis=0) - target)),
        "actor_grad_norm": stationarity_probe(mdp, policy, target, n) if actors else "",
    }
