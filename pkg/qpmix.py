"""
QPMIX centralized trainer
=========================
Replay buffer, target networks, the three-part loss
(L_Qtot + L_V + L_actor), the atomic training step and the slot loop that
drives the BSS simulator with heterogeneous DQN/PPO/EDCA stations.

Training is centralized (mixer, global state, shared reward); execution is
decentralized (each agent acts on its own observation history only).
"""

import logging
from collections import deque
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Deque, Dict, List, Optional, Sequence, TextIO, Tuple

import numpy as np

from agents import (
    N_ACTIONS,
    DqnAgent,
    PpoAgent,
    build_agent,
    dqn_act,
    gae,
    independent_q_loss,
    policy_advantage,
    ppo_act,
    ppo_actor_loss,
)
from metrics import RunStats, WindowSeries, reward_averages
from mixer import MixingNetwork, mix, mix_backward, state_value
from nn_utils import (
    CheckpointError,
    GradSet,
    Mlp,
    NumericalError,
    ParamSet,
    RmsPropState,
    backward,
    check_finite,
    clip_by_global_norm,
    forward,
    load_checkpoint,
    rmsprop_step,
    save_checkpoint,
)
from observations import RECORD_WIDTH, AgentObserver, GlobalState, build_global_state, compute_reward
from wlan_env import Action, SimConfig, WlanBss

logger = logging.getLogger(__name__)

LEARNING_KINDS = ("dqn", "ppo")
TRAIN_LOG_COLUMNS = ["update", "loss_qtot", "loss_v", "loss_actor", "epsilon", "mean_reward"]
PROGRESS_EVERY = 1000


class TransitionMode(str, Enum):
    DECISION = "decision"   # one transition per carrier-sensed-idle slot
    SLOT = "slot"           # one transition per slot


# ============================================================================
# CONFIGURATION
# ============================================================================

@dataclass(frozen=True)
class LearningParams:
    history_length: int = 8
    l_max: int = 64
    n_c: int = 10
    n_t: int = 1000
    replay_capacity: int = 500
    batch_size: int = 32
    gamma: float = 0.5
    gae_lambda: float = 0.95
    clip: float = 0.2
    epsilon_start: float = 1.0
    epsilon_min: float = 0.01
    epsilon_decay: float = 0.998
    lr_value: float = 5e-4
    lr_policy: float = 1e-5
    hidden: Tuple[int, ...] = (250, 120, 120)
    mixer_hidden: int = 16
    grad_clip: Optional[float] = 10.0
    use_mixer: bool = True
    transition_mode: TransitionMode = TransitionMode.DECISION

    @property
    def input_width(self) -> int:
        return RECORD_WIDTH * self.history_length


@dataclass(frozen=True)
class RunConfig:
    sim: SimConfig
    kinds: Tuple[str, ...]      # per station: "dqn", "ppo" or "edca"
    learning: LearningParams = LearningParams()
    slots: int = 200_000
    seed: int = 0
    window: int = 500
    reward_chunk: int = 500

    def __post_init__(self):
        if len(self.kinds) != self.sim.n_stations:
            raise ValueError("kinds must list one entry per station")
        for i, (kind, ac) in enumerate(zip(self.kinds, self.sim.edca)):
            if kind == "edca" and ac is None:
                raise ValueError(f"station {i} is EDCA but has no access category")
            if kind in LEARNING_KINDS and ac is not None:
                raise ValueError(f"station {i} is a learning agent but has an access category")
            if kind not in LEARNING_KINDS and kind != "edca":
                raise ValueError(f"unknown station kind: {kind}")
        if self.slots < 1 or self.window < 1 or self.reward_chunk < 1:
            raise ValueError("slots, window and reward_chunk must be >= 1")

    @property
    def learners(self) -> List[int]:
        return [i for i, k in enumerate(self.kinds) if k in LEARNING_KINDS]


def seed_streams(seed: int) -> Tuple[np.random.Generator, np.random.Generator, np.random.Generator]:
    """Independent (init, act, replay) generators; the simulator seeds its own."""
    init_ss, act_ss, sample_ss = np.random.SeedSequence(seed).spawn(3)
    return (np.random.default_rng(init_ss), np.random.default_rng(act_ss), np.random.default_rng(sample_ss))


# ============================================================================
# REPLAY BUFFER
# ============================================================================

@dataclass
class Transition:
    taus: np.ndarray            # (N, 5M) joint observation histories
    state: np.ndarray           # (S,)
    actions: np.ndarray         # (N,)
    reward: float
    next_taus: np.ndarray
    next_state: np.ndarray
    next_avail: np.ndarray      # (N, 2) actions open to each agent at the next step
    free: np.ndarray            # (N,) agent chose between both actions
    generation: int = 0         # updates completed when the actions were taken
    index: int = -1


class ReplayBuffer:
    """FIFO ring of transitions."""

    def __init__(self, capacity: int = 500):
        if capacity < 1:
            raise ValueError("replay capacity must be >= 1")
        self.capacity = capacity
        self.items: Deque[Transition] = deque(maxlen=capacity)
        self.pushed = 0

    def __len__(self) -> int:
        return len(self.items)

    def push(self, transition: Transition) -> None:
        transition.index = self.pushed
        self.pushed += 1
        self.items.append(transition)

    def sample(self, batch_size: int, rng: np.random.Generator) -> List[Transition]:
        if not self.items:
            raise ValueError("cannot sample from an empty replay buffer")
        k = min(batch_size, len(self.items))
        picks = rng.choice(len(self.items), size=k, replace=False)
        return [self.items[int(p)] for p in picks]

    def acted_since(self, generation: int) -> List[Transition]:
        """Transitions whose actions were taken after `generation` updates, oldest first."""
        return [t for t in self.items if t.generation >= generation]


@dataclass
class Batch:
    taus: np.ndarray            # (B, N, W)
    state: np.ndarray           # (B, S)
    actions: np.ndarray         # (B, N)
    rewards: np.ndarray         # (B,)
    next_taus: np.ndarray
    next_state: np.ndarray
    next_avail: np.ndarray      # (B, N, 2)
    free: np.ndarray            # (B, N)

    @classmethod
    def from_transitions(cls, transitions: Sequence[Transition]) -> "Batch":
        return cls(
            taus=np.stack([t.taus for t in transitions]),
            state=np.stack([t.state for t in transitions]),
            actions=np.stack([t.actions for t in transitions]).astype(np.int64),
            rewards=np.array([t.reward for t in transitions], dtype=np.float64),
            next_taus=np.stack([t.next_taus for t in transitions]),
            next_state=np.stack([t.next_state for t in transitions]),
            next_avail=np.stack([t.next_avail for t in transitions]).astype(bool),
            free=np.stack([t.free for t in transitions]).astype(bool),
        )

    def __len__(self) -> int:
        return self.rewards.size


# ============================================================================
# LOSSES
# ============================================================================

def qtot_loss(
    agents: Sequence,
    mixer: MixingNetwork,
    target_q: Sequence[Mlp],
    target_mixer: MixingNetwork,
    batch: Batch,
    gamma: float,
) -> Tuple[float, Dict[str, GradSet]]:
    """
    sum (y_tot - Q_tot)^2 with y_tot = r + gamma * Q_tot^-(tau', a'*, s') and a'*
    the per-agent greedy action of each target Q-network over its open actions.
    """
    B, N = len(batch), len(agents)
    rows = np.arange(B)
    q_chosen = np.zeros((B, N))
    q_next = np.zeros((B, N))
    caches = []
    for j, agent in enumerate(agents):
        q_all, cache = forward(agent.q_network, batch.taus[:, j])
        q_chosen[:, j] = q_all[rows, batch.actions[:, j]]
        caches.append(cache)
        q_target, _ = forward(target_q[j], batch.next_taus[:, j])
        q_next[:, j] = np.where(batch.next_avail[:, j], q_target, -np.inf).max(axis=1)

    next_tot, _, _ = mix(target_mixer, q_next, batch.next_state)
    y = batch.rewards + gamma * next_tot
    q_tot, _, mixer_cache = mix(mixer, q_chosen, batch.state)
    err = y - q_tot

    mixer_grads, dq = mix_backward(mixer, mixer_cache, -2.0 * err)
    grads = {f"mixer.{name}": g for name, g in mixer_grads.items()}
    for j, agent in enumerate(agents):
        d_q = np.zeros((B, N_ACTIONS))
        d_q[rows, batch.actions[:, j]] = dq[:, j]
        grads[f"agent{j}.q"], _ = backward(agent.q_network, caches[j], d_q)
    return float(np.sum(err * err)), grads


def v_loss(
    mixer: MixingNetwork,
    target_mixer: MixingNetwork,
    batch: Batch,
    gamma: float,
) -> Tuple[float, Dict[str, GradSet], np.ndarray]:
    """sum (r + gamma * V^-(s') - V(s))^2; also returns the TD errors."""
    v, cache = state_value(mixer, batch.state)
    v_next, _ = state_value(target_mixer, batch.next_state)
    td = batch.rewards + gamma * v_next - v
    grad, _ = backward(mixer.nets["value"], cache, (-2.0 * td)[:, None])
    return float(np.sum(td * td)), {"mixer.value": grad}, td


def actor_loss(
    agents: Sequence,
    mixer: MixingNetwork,
    target_mixer: MixingNetwork,
    segment: Batch,
    gamma: float,
    lam: float,
) -> Tuple[float, Dict[str, GradSet]]:
    """
    Clipped surrogate for every PPO agent over the on-policy segment. Advantages
    are GAE over TD errors r + gamma * V^-(s') - V(s) of the centralized value
    head; only steps where the agent was free to choose contribute.
    """
    v, _ = state_value(mixer, segment.state)
    v_next, _ = state_value(target_mixer, segment.next_state)
    advantages = gae(segment.rewards + gamma * v_next - v, gamma, lam)

    total, grads = 0.0, {}
    for j, agent in enumerate(agents):
        if not isinstance(agent, PpoAgent):
            continue
        mask = segment.free[:, j]
        if not np.any(mask):
            continue
        loss, g = ppo_actor_loss(agent.actor, agent.actor_old, segment.taus[mask, j],
                                 segment.actions[mask, j], advantages[mask], agent.clip)
        total += loss
        grads[f"agent{j}.actor"] = g
    return total, grads


def independent_losses(
    agents: Sequence,
    target_q: Sequence[Mlp],
    batch: Batch,
    segment: Optional[Batch],
    gamma: float,
) -> Tuple[float, float, Dict[str, GradSet]]:
    """Per-agent losses with the mixer disabled: own-Q TD targets on the shared reward."""
    loss_q, loss_actor, grads = 0.0, 0.0, {}
    for j, agent in enumerate(agents):
        loss, g = independent_q_loss(agent.q_network, target_q[j], batch.taus[:, j], batch.actions[:, j],
                                     batch.rewards, batch.next_taus[:, j], batch.next_avail[:, j], gamma)
        loss_q += loss
        grads[f"agent{j}.q"] = g

        if not isinstance(agent, PpoAgent) or segment is None:
            continue
        mask = segment.free[:, j]
        if not np.any(mask):
            continue
        taus, actions = segment.taus[mask, j], segment.actions[mask, j]
        q, _ = forward(agent.critic, taus)
        adv = policy_advantage(q, agent.policy(taus), actions)
        loss, g = ppo_actor_loss(agent.actor, agent.actor_old, taus, actions, adv, agent.clip)
        loss_actor += loss
        grads[f"agent{j}.actor"] = g
    return loss_q, loss_actor, grads


def merge_grads(*parts: Dict[str, GradSet]) -> Dict[str, GradSet]:
    out: Dict[str, GradSet] = {}
    for part in parts:
        for name, g in part.items():
            out[name] = out[name].add(g) if name in out else g
    return out


# ============================================================================
# TRAINER
# ============================================================================

@dataclass
class TrainerState:
    n_c: int = 10
    n_t: int = 1000
    batch_size: int = 32
    gamma: float = 0.5
    updates: int = 0            # C_t; also the generation of the current old actors

    def __post_init__(self):
        if self.n_c < 1 or self.n_t < 1 or self.batch_size < 1:
            raise ValueError("N_c, N_t and batch size must be >= 1")
        if not 0.0 <= self.gamma <= 1.0:
            raise ValueError("gamma must lie in [0, 1]")


@dataclass
class LossReport:
    update: int
    loss_qtot: float
    loss_v: float
    loss_actor: float
    epsilon: Optional[float]
    mean_reward: float

    def row(self) -> dict:
        return {
            "update": self.update,
            "loss_qtot": self.loss_qtot,
            "loss_v": self.loss_v,
            "loss_actor": self.loss_actor,
            "epsilon": "" if self.epsilon is None else self.epsilon,
            "mean_reward": self.mean_reward,
        }


class QpmixTrainer:
    """Learning agents (in station order), mixer, their targets and optimizers."""

    def __init__(self, agents: Sequence, mixer: Optional[MixingNetwork], params: LearningParams):
        self.agents = list(agents)
        self.mixer = mixer
        self.params = params
        self.state = TrainerState(params.n_c, params.n_t, params.batch_size, params.gamma)
        self.buffer = ReplayBuffer(params.replay_capacity)
        self.target_q = [agent.q_network.clone() for agent in self.agents]
        self.target_mixer = mixer.clone() if mixer is not None else None

        self.groups: Dict[str, Tuple[ParamSet, RmsPropState]] = {}
        for j, agent in enumerate(self.agents):
            self._register(f"agent{j}.q", agent.q_network.params, params.lr_value)
            if isinstance(agent, PpoAgent):
                self._register(f"agent{j}.actor", agent.actor.params, params.lr_policy)
        if mixer is not None:
            for name, ps in mixer.parameters().items():
                self._register(f"mixer.{name}", ps, params.lr_value)

    def _register(self, name: str, params: ParamSet, lr: float) -> None:
        self.groups[name] = (params, RmsPropState.for_params(params, lr))

    @property
    def epsilon(self) -> Optional[float]:
        eps = [a.epsilon for a in self.agents if isinstance(a, DqnAgent)]
        return float(np.mean(eps)) if eps else None

    def copy_targets(self) -> None:
        for target, agent in zip(self.target_q, self.agents):
            target.params.assign(agent.q_network.params)
        if self.mixer is not None:
            self.target_mixer.load(self.mixer.parameters())


def compute_losses(trainer: QpmixTrainer, batch: Batch, segment: Optional[Batch]) -> Tuple[float, float, float, Dict[str, GradSet]]:
    """L_Qtot, L_V, L_actor and the gradient of their sum."""
    p = trainer.params
    if trainer.mixer is None:
        loss_q, loss_a, grads = independent_losses(trainer.agents, trainer.target_q, batch, segment, p.gamma)
        return loss_q, 0.0, loss_a, grads

    loss_q, g_q = qtot_loss(trainer.agents, trainer.mixer, trainer.target_q, trainer.target_mixer, batch, p.gamma)
    loss_v, g_v, _ = v_loss(trainer.mixer, trainer.target_mixer, batch, p.gamma)
    loss_a, g_a = 0.0, {}
    if segment is not None:
        loss_a, g_a = actor_loss(trainer.agents, trainer.mixer, trainer.target_mixer, segment, p.gamma, p.gae_lambda)
    return loss_q, loss_v, loss_a, merge_grads(g_q, g_v, g_a)


def train_step(trainer: QpmixTrainer, rng: np.random.Generator) -> LossReport:
    """
    One centralized update. Every gradient is validated before any parameter
    moves; a non-finite value skips the whole update and raises NumericalError.
    """
    st = trainer.state
    batch = Batch.from_transitions(trainer.buffer.sample(st.batch_size, rng))
    recent = trainer.buffer.acted_since(st.updates)
    segment = Batch.from_transitions(recent) if recent else None

    try:
        loss_q, loss_v, loss_a, grads = compute_losses(trainer, batch, segment)
        if not np.all(np.isfinite([loss_q, loss_v, loss_a])):
            raise NumericalError("non-finite loss")
        for name, g in grads.items():
            check_finite(g, f"gradient of {name}")
    except NumericalError as e:
        logger.warning(f"Update {st.updates + 1} skipped: {e}")
        raise

    clip_by_global_norm(list(grads.values()), trainer.params.grad_clip)
    for name, g in grads.items():
        params, opt = trainer.groups[name]
        rmsprop_step(params, g, opt)

    st.updates += 1
    for agent in trainer.agents:
        if isinstance(agent, PpoAgent):
            agent.refresh_old()
        else:
            agent.decay_epsilon()
    if st.updates % st.n_t == 0:
        trainer.copy_targets()
        logger.debug(f"Target networks copied at update {st.updates}")

    report = LossReport(st.updates, loss_q, loss_v, loss_a, trainer.epsilon, float(batch.rewards.mean()))
    logger.debug(f"Update {report.update}: L_Qtot={loss_q:.4f} L_V={loss_v:.4f} L_actor={loss_a:.4f}")
    return report


# ============================================================================
# SLOT LOOP
# ============================================================================

@dataclass
class RunResult:
    config: RunConfig
    stats: RunStats
    windows: WindowSeries
    agents: Dict[int, object]
    mixer: Optional[MixingNetwork] = None
    trainer: Optional[QpmixTrainer] = None
    rewards: List[float] = field(default_factory=list)
    log: List[dict] = field(default_factory=list)

    def reward_rows(self) -> List[dict]:
        chunk = self.config.reward_chunk
        return [{"step_end": (k + 1) * chunk, "mean_reward": r}
                for k, r in enumerate(reward_averages(self.rewards, chunk))]


@dataclass
class _Pending:
    taus: np.ndarray
    state: GlobalState
    actions: np.ndarray
    free: np.ndarray
    reward: int
    generation: int

    def finish(self, next_taus: np.ndarray, next_state: GlobalState, next_avail: np.ndarray) -> Transition:
        return Transition(self.taus, self.state.encode(), self.actions, float(self.reward),
                          next_taus, next_state.encode(), next_avail, self.free, self.generation)


def _availability(bss: WlanBss, station: int, decision: bool) -> Tuple[bool, bool]:
    if decision:
        return True, bss.has_packet(station)
    forced = bss.forced_action(station)
    return forced == Action.WAIT, forced == Action.TRANSMIT


def _act(agent, tau: np.ndarray, rng: np.random.Generator, available: Tuple[bool, bool]) -> Action:
    if isinstance(agent, DqnAgent):
        return dqn_act(agent, tau, rng, available)[0]
    return ppo_act(agent, tau, rng, available)[0]


def simulate(
    config: RunConfig,
    agents: Dict[int, object],
    trainer: Optional[QpmixTrainer],
    act_rng: np.random.Generator,
    sample_rng: np.random.Generator,
    trace: Optional[TextIO] = None,
) -> RunResult:
    """
    Drive the simulator for config.slots slots. Learning stations act on
    carrier-sensed-idle slots and are forced otherwise (keep transmitting
    until the packet completes, wait during ACK and deferral).
    """
    sim, lp = config.sim, config.learning
    n = sim.n_stations
    windows = WindowSeries(n, config.window, sim.packet_slots, sim.slot_us)
    bss = WlanBss(sim, trace=trace, windows=windows)
    result = RunResult(config, bss.stats, windows, agents, trainer.mixer if trainer else None, trainer)

    learners = sorted(agents)
    if not learners:
        for _ in range(config.slots):
            bss.tick()
        return result

    observers = [AgentObserver(i, lp.history_length) for i in range(n)]
    slot_mode = lp.transition_mode is TransitionMode.SLOT
    pending: Optional[_Pending] = None
    taus = avail = None

    for t in range(config.slots):
        bss.begin_slot()
        decision = not bss.busy and bss.sensed_idle
        state = build_global_state([o.counters for o in observers], bss.last_actions)

        record = decision or slot_mode
        if record:
            taus = np.stack([observers[i].encoded(lp.l_max) for i in learners])
            avail = np.array([_availability(bss, i, decision) for i in learners], dtype=bool)
            if pending is not None:
                transition = pending.finish(taus, state, avail)
                result.rewards.append(transition.reward)
                if trainer is not None:
                    trainer.buffer.push(transition)
                pending = None

        actions = [Action.WAIT] * n
        for i, a in bss.edca_actions().items():
            actions[i] = a
        for j, i in enumerate(learners):
            if decision:
                actions[i] = _act(agents[i], taus[j], act_rng, (bool(avail[j, 0]), bool(avail[j, 1])))
            else:
                actions[i] = bss.forced_action(i)

        outcome = bss.step(actions)
        for observer, a in zip(observers, bss.last_actions):
            observer.observe(outcome, a)

        if record:
            taken = np.array([int(bss.last_actions[i]) for i in learners], dtype=np.int64)
            generation = trainer.state.updates if trainer is not None else 0
            pending = _Pending(taus, state, taken, avail.all(axis=1), compute_reward(state, outcome), generation)
        elif pending is not None and outcome.is_resolved:
            pending.reward = compute_reward(pending.state, outcome)

        if trainer is not None and (t + 1) % lp.n_c == 0 and len(trainer.buffer) > 0:
            report = train_step(trainer, sample_rng)
            result.log.append(report.row())
            if report.update % PROGRESS_EVERY == 0:
                logger.info(f"Slot {t + 1}/{config.slots}: update {report.update}, "
                            f"L_Qtot={report.loss_qtot:.4f}, epsilon={report.epsilon}")

    return result


def build_agents(config: RunConfig, rng: np.random.Generator) -> Dict[int, object]:
    lp = config.learning
    return {
        i: build_agent(config.kinds[i], lp.input_width, rng, lp.hidden, epsilon=lp.epsilon_start,
                       epsilon_min=lp.epsilon_min, epsilon_decay=lp.epsilon_decay, clip=lp.clip)
        for i in config.learners
    }


def run_training(config: RunConfig, trace: Optional[TextIO] = None) -> RunResult:
    init_rng, act_rng, sample_rng = seed_streams(config.seed)
    agents = build_agents(config, init_rng)
    trainer = None
    if agents:
        mixer = None
        if config.learning.use_mixer:
            mixer = MixingNetwork(len(agents), 2 * config.sim.n_stations, config.learning.mixer_hidden, init_rng)
        trainer = QpmixTrainer([agents[i] for i in sorted(agents)], mixer, config.learning)

    logger.info(f"Training: {config.kinds}, {config.slots} slots, seed {config.seed}, "
                f"mixer={'on' if config.learning.use_mixer else 'off'}")
    result = simulate(config, agents, trainer, act_rng, sample_rng, trace)
    logger.info(f"Training finished: {len(result.log)} updates, {len(result.rewards)} transitions")
    return result


# ============================================================================
# CHECKPOINTS / EVALUATION
# ============================================================================

def save_run_checkpoint(result: RunResult, path) -> None:
    lp = result.config.learning
    learners = sorted(result.agents)
    tensors: Dict[str, ParamSet] = {}
    for j, i in enumerate(learners):
        for name, ps in result.agents[i].tensors().items():
            tensors[f"agent{j}.{name}"] = ps
    if result.mixer is not None:
        for name, ps in result.mixer.parameters().items():
            tensors[f"mixer.{name}"] = ps

    metadata = {
        "kinds": [result.agents[i].kind for i in learners],
        "epsilon": [getattr(result.agents[i], "epsilon", None) for i in learners],
        "history_length": lp.history_length,
        "l_max": lp.l_max,
        "hidden": list(lp.hidden),
        "mixer_hidden": lp.mixer_hidden,
        "state_dim": 2 * result.config.sim.n_stations,
        "updates": result.trainer.state.updates if result.trainer else 0,
    }
    save_checkpoint(path, tensors, metadata)


def run_evaluation(checkpoint_path, config: RunConfig, trace: Optional[TextIO] = None) -> RunResult:
    """
    Decentralized execution only: no replay, no updates. The k-th learning
    station of a kind takes the stored agent k (mod stored count) of that kind.
    """
    tensors, meta = load_checkpoint(checkpoint_path)
    stored: Dict[str, List[int]] = {kind: [] for kind in LEARNING_KINDS}
    for j, kind in enumerate(meta["kinds"]):
        stored[kind].append(j)

    lp = config.learning
    if meta["history_length"] != lp.history_length or tuple(meta["hidden"]) != lp.hidden:
        logger.info("Evaluation uses the checkpoint's history length and hidden widths")
        lp = replace(lp, history_length=meta["history_length"], l_max=meta["l_max"], hidden=tuple(meta["hidden"]))
        config = replace(config, learning=lp)

    _, act_rng, sample_rng = seed_streams(config.seed)
    agents: Dict[int, object] = {}
    seen = {kind: 0 for kind in LEARNING_KINDS}
    for i in config.learners:
        kind = config.kinds[i]
        if not stored[kind]:
            raise CheckpointError(f"{checkpoint_path}: no stored {kind} agent for station {i}")
        j = stored[kind][seen[kind] % len(stored[kind])]
        seen[kind] += 1
        agent = build_agent(kind, lp.input_width, None, lp.hidden, clip=lp.clip)
        agent.load_tensors({name.split(".", 1)[1]: ps for name, ps in tensors.items()
                            if name.startswith(f"agent{j}.")})
        if isinstance(agent, DqnAgent):
            agent.epsilon = float(meta["epsilon"][j])
        agents[i] = agent

    logger.info(f"Evaluating {checkpoint_path} on {config.kinds}, {config.slots} slots, seed {config.seed}")
    return simulate(config, agents, None, act_rng, sample_rng, trace)
