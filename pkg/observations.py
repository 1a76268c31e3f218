"""
Per-agent observations, observation histories, the global state and the
shared reward.
"""

from collections import deque
from dataclasses import dataclass
from typing import Deque, List, Sequence, Tuple, Union

import numpy as np

from wlan_env import Action, ChannelOutcome, OutcomeKind

RECORD_WIDTH = 5
DEFAULT_HISTORY = 8
DEFAULT_L_MAX = 64


# ============================================================================
# DOMAIN TYPES
# ============================================================================

@dataclass(frozen=True)
class DelayCounters:
    v_own: int = 0      # slots since own last successful transmission
    v_other: int = 0    # slots since any other station's success

    def __post_init__(self):
        if self.v_own < 0 or self.v_other < 0:
            raise ValueError("delay counters must be nonnegative")


@dataclass(frozen=True)
class ObservationRecord:
    z: int              # 0 idle, 1 busy
    a_prev: int         # Action of the previous slot
    l: int              # slots the (z, a_prev) pair has persisted
    d_own: float
    d_other: float

    def __post_init__(self):
        if self.l < 1:
            raise ValueError("run length must be >= 1")

    @property
    def pair(self) -> Tuple[int, int]:
        return (self.z, self.a_prev)


class HistoryWindow:
    """The last M observation records, oldest first."""

    def __init__(self, length: int = DEFAULT_HISTORY):
        if length < 1:
            raise ValueError("history length must be >= 1")
        self.length = length
        self.records: Deque[ObservationRecord] = deque(maxlen=length)

    def append(self, record: ObservationRecord) -> None:
        self.records.append(record)

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self):
        return iter(self.records)


@dataclass(frozen=True)
class GlobalState:
    joint_prev_action: Tuple[int, ...]
    D: Tuple[float, ...]

    @property
    def max_delay_station(self) -> int:
        """Arg-max of D; ties go to the lowest station id."""
        return int(np.argmax(np.asarray(self.D)))

    def encode(self) -> np.ndarray:
        return np.concatenate([np.asarray(self.joint_prev_action, dtype=np.float64),
                               np.asarray(self.D, dtype=np.float64)])


# ============================================================================
# OPERATIONS
# ============================================================================

def update_counters(counters: DelayCounters, outcome: ChannelOutcome, agent_id: int) -> DelayCounters:
    if outcome.kind is OutcomeKind.SUCCESS:
        if outcome.stations[0] == agent_id:
            return DelayCounters(0, counters.v_other + 1)
        return DelayCounters(counters.v_own + 1, 0)
    return DelayCounters(counters.v_own + 1, counters.v_other + 1)


def normalized_delays(counters: DelayCounters) -> Tuple[float, float]:
    total = counters.v_own + counters.v_other
    if total == 0:
        return 0.5, 0.5
    return counters.v_own / total, counters.v_other / total


def build_observation(counters: DelayCounters, z: int, a_prev: int, run_length: int) -> ObservationRecord:
    d_own, d_other = normalized_delays(counters)
    return ObservationRecord(int(z), int(a_prev), int(run_length), d_own, d_other)


def build_global_state(
    all_counters: Sequence[Union[DelayCounters, int]],
    joint_prev_action: Sequence[int],
) -> GlobalState:
    """D_i = v_i / sum(v); uniform when every counter is zero."""
    if len(all_counters) < 1:
        raise ValueError("global state needs at least one station")
    v = np.array([c.v_own if isinstance(c, DelayCounters) else c for c in all_counters], dtype=np.float64)
    total = v.sum()
    D = v / total if total > 0 else np.full(v.size, 1.0 / v.size)
    return GlobalState(tuple(int(a) for a in joint_prev_action), tuple(float(x) for x in D))


def compute_reward(global_state_D: Union[GlobalState, Sequence[float]], outcome: ChannelOutcome) -> int:
    """
    +1 if the largest-delay station transmitted successfully, 0 if nothing
    was transmitted, -1 otherwise. An unresolved busy slot scores 0.
    """
    if outcome.kind in (OutcomeKind.IDLE, OutcomeKind.BUSY):
        return 0
    if outcome.kind is OutcomeKind.COLLISION:
        return -1
    D = global_state_D.D if isinstance(global_state_D, GlobalState) else global_state_D
    return 1 if outcome.stations[0] == int(np.argmax(np.asarray(D))) else -1


# ============================================================================
# ENCODING
# ============================================================================

def encode_record(record: ObservationRecord, l_max: int = DEFAULT_L_MAX) -> np.ndarray:
    return np.array([
        float(record.z),
        float(record.a_prev),
        min(record.l / l_max, 1.0),
        record.d_own,
        record.d_other,
    ])


def encode_history(window: HistoryWindow, l_max: int = DEFAULT_L_MAX) -> np.ndarray:
    """5*M input vector, zero-padded at the front while the window fills."""
    out = np.zeros(RECORD_WIDTH * window.length)
    records = list(window)
    offset = RECORD_WIDTH * (window.length - len(records))
    for k, rec in enumerate(records):
        start = offset + RECORD_WIDTH * k
        out[start:start + RECORD_WIDTH] = encode_record(rec, l_max)
    return out


def compress_runs(records: Sequence[ObservationRecord]) -> List[ObservationRecord]:
    """Keep only the last record of every run."""
    return [rec for k, rec in enumerate(records) if k + 1 == len(records) or records[k + 1].l == 1]


def expand_runs(run_ends: Sequence[ObservationRecord]) -> List[Tuple[int, int]]:
    """Rebuild the per-slot (z, a_prev) sequence from run-end records."""
    pairs: List[Tuple[int, int]] = []
    for rec in run_ends:
        pairs.extend([rec.pair] * rec.l)
    return pairs


# ============================================================================
# PER-STATION OBSERVER
# ============================================================================

class AgentObserver:
    """
    Tracks one station's counters, (z, a_prev) run length and history.
    Starts with one record describing an idle channel and a Wait action.
    """

    def __init__(self, agent_id: int, history_length: int = DEFAULT_HISTORY):
        self.agent_id = agent_id
        self.counters = DelayCounters()
        self.window = HistoryWindow(history_length)
        self.run_length = 1
        self.window.append(build_observation(self.counters, 0, int(Action.WAIT), 1))

    @property
    def latest(self) -> ObservationRecord:
        return self.window.records[-1]

    def observe(self, outcome: ChannelOutcome, action: Action) -> ObservationRecord:
        self.counters = update_counters(self.counters, outcome, self.agent_id)
        pair = (0 if outcome.is_idle else 1, int(action))
        self.run_length = self.run_length + 1 if pair == self.latest.pair else 1
        record = build_observation(self.counters, pair[0], pair[1], self.run_length)
        self.window.append(record)
        return record

    def encoded(self, l_max: int = DEFAULT_L_MAX) -> np.ndarray:
        return encode_history(self.window, l_max)
