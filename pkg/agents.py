"""
Heterogeneous learning agents
=============================
DqnAgent: epsilon-greedy over a Q-network.
PpoAgent: actor (policy logits) + critic (per-action Q-values), clipped
surrogate objective, GAE advantages computed from a centralized V(s).

Acting reads only the agent's own history; nothing here touches the mixer.
"""

import logging
from typing import Dict, Optional, Sequence, Tuple

import numpy as np

from nn_utils import GradSet, Mlp, NumericalError, ParamSet, backward, forward
from wlan_env import Action

logger = logging.getLogger(__name__)

N_ACTIONS = 2
DEFAULT_HIDDEN = (250, 120, 120)
BOTH = (True, True)


class EmptyTrajectoryError(ValueError):
    pass


# ============================================================================
# AGENTS
# ============================================================================

class DqnAgent:
    kind = "dqn"

    def __init__(
        self,
        input_width: int,
        rng: np.random.Generator,
        hidden: Sequence[int] = DEFAULT_HIDDEN,
        epsilon: float = 1.0,
        epsilon_min: float = 0.01,
        epsilon_decay: float = 0.998,
    ):
        if not 0.0 <= epsilon_min <= epsilon <= 1.0:
            raise ValueError("need 0 <= epsilon_min <= epsilon <= 1")
        self.q_net = Mlp([input_width, *hidden, N_ACTIONS], rng=rng)
        self.epsilon = epsilon
        self.epsilon_min = epsilon_min
        self.epsilon_decay = epsilon_decay

    @property
    def q_network(self) -> Mlp:
        return self.q_net

    def decay_epsilon(self) -> float:
        self.epsilon = max(self.epsilon_min, self.epsilon * self.epsilon_decay)
        return self.epsilon

    def tensors(self) -> Dict[str, ParamSet]:
        return {"q_net": self.q_net.params}

    def load_tensors(self, tensors: Dict[str, ParamSet]) -> None:
        self.q_net.params.assign(tensors["q_net"])


class PpoAgent:
    kind = "ppo"

    def __init__(
        self,
        input_width: int,
        rng: np.random.Generator,
        hidden: Sequence[int] = DEFAULT_HIDDEN,
        clip: float = 0.2,
    ):
        if not 0.0 < clip < 1.0:
            raise ValueError("clip must lie in (0, 1)")
        self.actor = Mlp([input_width, *hidden, N_ACTIONS], rng=rng)
        self.critic = Mlp([input_width, *hidden, N_ACTIONS], rng=rng)
        self.actor_old = self.actor.params.copy()
        self.clip = clip

    @property
    def q_network(self) -> Mlp:
        return self.critic

    def old_actor(self) -> Mlp:
        return Mlp(self.actor.widths, params=self.actor_old)

    def refresh_old(self) -> None:
        self.actor_old.assign(self.actor.params)

    def policy(self, tau: np.ndarray) -> np.ndarray:
        logits, _ = forward(self.actor, tau)
        return softmax(logits)

    def tensors(self) -> Dict[str, ParamSet]:
        return {"actor": self.actor.params, "critic": self.critic.params}

    def load_tensors(self, tensors: Dict[str, ParamSet]) -> None:
        self.actor.params.assign(tensors["actor"])
        self.critic.params.assign(tensors["critic"])
        self.refresh_old()


def build_agent(kind: str, input_width: int, rng: np.random.Generator, hidden=DEFAULT_HIDDEN, **kwargs):
    if kind == "dqn":
        return DqnAgent(input_width, rng, hidden,
                        epsilon=kwargs.get("epsilon", 1.0),
                        epsilon_min=kwargs.get("epsilon_min", 0.01),
                        epsilon_decay=kwargs.get("epsilon_decay", 0.998))
    if kind == "ppo":
        return PpoAgent(input_width, rng, hidden, clip=kwargs.get("clip", 0.2))
    raise ValueError(f"unknown agent kind: {kind}")


# ============================================================================
# ACTING
# ============================================================================

def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - np.max(logits, axis=-1, keepdims=True)
    e = np.exp(z)
    return e / np.sum(e, axis=-1, keepdims=True)


def greedy(q: np.ndarray, available: Sequence[bool] = BOTH) -> int:
    """Arg-max over available actions; ties go to the lowest index (Wait)."""
    masked = np.where(np.asarray(available, dtype=bool), q, -np.inf)
    return int(np.argmax(masked))


def dqn_act(
    agent: DqnAgent,
    tau: np.ndarray,
    rng: np.random.Generator,
    available: Sequence[bool] = BOTH,
) -> Tuple[Action, float]:
    q, _ = forward(agent.q_net, tau)
    choices = [a for a in range(N_ACTIONS) if available[a]]
    if len(choices) > 1 and rng.random() < agent.epsilon:
        a = choices[int(rng.integers(0, len(choices)))]
    else:
        a = greedy(q, available)
    return Action(a), float(q[a])


def ppo_act(
    agent: PpoAgent,
    tau: np.ndarray,
    rng: np.random.Generator,
    available: Sequence[bool] = BOTH,
) -> Tuple[Action, float, float]:
    probs = agent.policy(tau)
    if all(available):
        a = 1 if rng.random() < probs[1] else 0
    else:
        a = available.index(True)
    q, _ = forward(agent.critic, tau)
    return Action(a), float(probs[a]), float(q[a])


# ============================================================================
# ADVANTAGES AND ACTOR LOSS
# ============================================================================

def gae(td_errors: Sequence[float], gamma: float, lam: float) -> np.ndarray:
    """A_t = sum_k (gamma*lam)^k * delta_{t+k}, truncated at the end of the segment."""
    deltas = np.asarray(td_errors, dtype=np.float64)
    if deltas.size == 0:
        raise EmptyTrajectoryError("GAE needs at least one TD error")
    adv = np.zeros_like(deltas)
    running = 0.0
    for t in reversed(range(deltas.size)):
        running = deltas[t] + gamma * lam * running
        adv[t] = running
    return adv


def ppo_actor_loss(
    actor: Mlp,
    old_params: ParamSet,
    taus: np.ndarray,
    actions: np.ndarray,
    advantages: np.ndarray,
    clip: float,
) -> Tuple[float, GradSet]:
    """
    -sum min(ratio*A, clip(ratio, 1-clip, 1+clip)*A) for one agent's batch,
    with its gradient w.r.t. the actor parameters.
    """
    actions = np.asarray(actions, dtype=np.int64)
    adv = np.asarray(advantages, dtype=np.float64)
    rows = np.arange(actions.size)

    logits, cache = forward(actor, taus)
    pi = softmax(logits)
    old_logits, _ = forward(Mlp(actor.widths, params=old_params), taus)
    p_old = softmax(old_logits)[rows, actions]
    if np.any(~np.isfinite(p_old)) or np.any(p_old <= 0.0):
        raise NumericalError("old policy assigns zero probability to a taken action")

    ratio = pi[rows, actions] / p_old
    unclipped = ratio * adv
    clipped = np.clip(ratio, 1.0 - clip, 1.0 + clip) * adv
    loss = -float(np.sum(np.minimum(unclipped, clipped)))

    # the ratio only carries gradient where the unclipped arm is the minimum
    d_ratio = np.where(unclipped <= clipped, -adv, 0.0)
    onehot = np.eye(N_ACTIONS)[actions]
    d_logits = (d_ratio * ratio)[:, None] * (onehot - pi)
    grads, _ = backward(actor, cache, d_logits)
    return loss, grads


# ============================================================================
# INDEPENDENT LEARNING (no mixer)
# ============================================================================

def independent_q_loss(
    q_net: Mlp,
    target_net: Mlp,
    taus: np.ndarray,
    actions: np.ndarray,
    rewards: np.ndarray,
    next_taus: np.ndarray,
    next_avail: np.ndarray,
    gamma: float,
) -> Tuple[float, GradSet]:
    """sum (r + gamma * max_a' Q^-(tau', a') - Q(tau, a))^2 on the agent's own Q."""
    rows = np.arange(len(actions))
    q, cache = forward(q_net, taus)
    q_next, _ = forward(target_net, next_taus)
    q_next = np.where(next_avail, q_next, -np.inf).max(axis=1)
    y = rewards + gamma * q_next
    err = y - q[rows, actions]

    d_q = np.zeros_like(q)
    d_q[rows, actions] = -2.0 * err
    grads, _ = backward(q_net, cache, d_q)
    return float(np.sum(err * err)), grads


def policy_advantage(q: np.ndarray, probs: np.ndarray, actions: np.ndarray) -> np.ndarray:
    """Q(tau, a) - sum_b pi(b) Q(tau, b)."""
    rows = np.arange(len(actions))
    return q[rows, actions] - np.sum(probs * q, axis=1)
