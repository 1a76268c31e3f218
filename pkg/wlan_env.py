"""
Time-slotted single-channel BSS simulator
=========================================
Traffic arrival into finite FIFO buffers, carrier sensing, multi-slot
transmissions, collisions, ACK delivery and built-in EDCA stations.

Timing is slot-quantized. A transmission interval occupies
packet_slots + sifs_slots + ack_slots slots; its outcome (Success or
Collision) is reported on the last of those slots, which is also when the
ACK reaches the sender. A station may start transmitting only if the
previous slot was sensed idle.
"""

import logging
from collections import deque
from dataclasses import dataclass, field
from enum import Enum, IntEnum
from typing import Deque, List, Mapping, Optional, Sequence, TextIO, Tuple

import numpy as np

from metrics import RunStats, WindowSeries

logger = logging.getLogger(__name__)


# ============================================================================
# ERRORS
# ============================================================================

class ProtocolViolation(ValueError):
    """A joint action breaks listen-before-talk; indicates an agent bug."""


class TransmitWhileBusy(ProtocolViolation):
    pass


class TransmitWithEmptyBuffer(ProtocolViolation):
    pass


# ============================================================================
# DOMAIN TYPES
# ============================================================================

class Action(IntEnum):
    WAIT = 0
    TRANSMIT = 1


class OutcomeKind(str, Enum):
    IDLE = "idle"
    BUSY = "busy"
    SUCCESS = "success"
    COLLISION = "collision"


@dataclass(frozen=True)
class ChannelOutcome:
    kind: OutcomeKind
    stations: Tuple[int, ...] = ()

    def __post_init__(self):
        n = len(self.stations)
        if self.kind is OutcomeKind.IDLE and n:
            raise ValueError("an idle slot carries no stations")
        if self.kind is OutcomeKind.SUCCESS and n != 1:
            raise ValueError("Success carries exactly one station id")
        if self.kind is OutcomeKind.COLLISION and n < 2:
            raise ValueError("Collision carries at least two station ids")

    @classmethod
    def idle(cls) -> "ChannelOutcome":
        return cls(OutcomeKind.IDLE)

    @classmethod
    def busy(cls, stations: Sequence[int]) -> "ChannelOutcome":
        return cls(OutcomeKind.BUSY, tuple(sorted(stations)))

    @classmethod
    def success(cls, station: int) -> "ChannelOutcome":
        return cls(OutcomeKind.SUCCESS, (int(station),))

    @classmethod
    def collision(cls, stations: Sequence[int]) -> "ChannelOutcome":
        return cls(OutcomeKind.COLLISION, tuple(sorted(stations)))

    @property
    def is_idle(self) -> bool:
        return self.kind is OutcomeKind.IDLE

    @property
    def is_resolved(self) -> bool:
        return self.kind in (OutcomeKind.SUCCESS, OutcomeKind.COLLISION)


class AccessCategory(str, Enum):
    AC_VO = "AC_VO"
    AC_VI = "AC_VI"
    AC_BE = "AC_BE"


# (CW_min, CW_max) per access category
EDCA_CW = {
    AccessCategory.AC_VO: (7, 15),
    AccessCategory.AC_VI: (15, 31),
    AccessCategory.AC_BE: (31, 1023),
}


class TrafficKind(str, Enum):
    POISSON = "poisson"
    PERIODIC = "periodic"
    SATURATED = "saturated"


@dataclass(frozen=True)
class TrafficModel:
    kind: TrafficKind
    rate: float = 0.0          # packets/s (Poisson)
    period_ms: float = 20.0    # generation period (periodic)
    phase_slots: int = 0       # first generation slot modulo the period (periodic)

    def __post_init__(self):
        if self.rate < 0:
            raise ValueError(f"arrival rate must be >= 0, got {self.rate}")
        if self.period_ms <= 0:
            raise ValueError(f"period must be > 0, got {self.period_ms}")

    @classmethod
    def poisson(cls, rate: float) -> "TrafficModel":
        return cls(TrafficKind.POISSON, rate=rate)

    @classmethod
    def periodic(cls, period_ms: float, phase_slots: int = 0) -> "TrafficModel":
        return cls(TrafficKind.PERIODIC, period_ms=period_ms, phase_slots=phase_slots)

    @classmethod
    def saturated(cls) -> "TrafficModel":
        return cls(TrafficKind.SATURATED)

    def period_slots(self, slot_us: float) -> int:
        return max(1, int(round(self.period_ms * 1000.0 / slot_us)))


def us_to_slots(duration_us: float, slot_us: float) -> int:
    slots = duration_us / slot_us
    if abs(slots - round(slots)) > 1e-9:
        logger.warning(f"{duration_us} us is not a whole number of {slot_us} us slots; rounding")
    return int(round(slots))


@dataclass(frozen=True)
class SimConfig:
    n_stations: int
    slot_us: float = 9.0
    sifs_slots: int = 2
    difs_slots: int = 4
    packet_slots: int = 120
    ack_slots: int = 1
    buffer_capacity: int = 10
    traffic: Tuple[TrafficModel, ...] = ()
    edca: Tuple[Optional[AccessCategory], ...] = ()
    rng_seed: int = 0
    warmup_slots: int = 0

    def __post_init__(self):
        if self.n_stations < 1:
            raise ValueError("n_stations must be >= 1")
        if self.packet_slots < 1:
            raise ValueError("packet_slots must be >= 1")
        if self.buffer_capacity < 1:
            raise ValueError("buffer_capacity must be >= 1")
        for name in ("sifs_slots", "difs_slots", "ack_slots", "warmup_slots"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")

        if not self.traffic:
            object.__setattr__(self, "traffic", (TrafficModel.saturated(),) * self.n_stations)
        elif len(self.traffic) == 1 and self.n_stations > 1:
            object.__setattr__(self, "traffic", tuple(self.traffic) * self.n_stations)
        if not self.edca:
            object.__setattr__(self, "edca", (None,) * self.n_stations)
        if len(self.traffic) != self.n_stations or len(self.edca) != self.n_stations:
            raise ValueError("traffic and edca must list one entry per station")

    @classmethod
    def from_microseconds(
        cls,
        n_stations: int,
        slot_us: float = 9.0,
        sifs_us: float = 18.0,
        difs_us: float = 36.0,
        packet_us: float = 1080.0,
        **kwargs,
    ) -> "SimConfig":
        return cls(
            n_stations=n_stations,
            slot_us=slot_us,
            sifs_slots=us_to_slots(sifs_us, slot_us),
            difs_slots=us_to_slots(difs_us, slot_us),
            packet_slots=us_to_slots(packet_us, slot_us),
            **kwargs,
        )

    @property
    def interval_slots(self) -> int:
        return self.packet_slots + self.sifs_slots + self.ack_slots


@dataclass(frozen=True)
class Packet:
    arrival_slot: int
    station: int

    def __post_init__(self):
        if self.arrival_slot < 0:
            raise ValueError("arrival_slot must be >= 0")


@dataclass
class EdcaStation:
    ac: AccessCategory
    cw_min: int
    cw_max: int
    difs_slots: int = 4
    cw: int = 0
    backoff_counter: int = -1   # -1: no backoff drawn yet
    idle_run: int = 0           # consecutive idle slots sensed

    @classmethod
    def for_class(cls, ac: AccessCategory, difs_slots: int = 4) -> "EdcaStation":
        cw_min, cw_max = EDCA_CW[AccessCategory(ac)]
        return cls(AccessCategory(ac), cw_min, cw_max, difs_slots, cw=cw_min)

    def on_success(self) -> None:
        self.cw = self.cw_min
        self.backoff_counter = -1

    def on_collision(self) -> None:
        self.cw = min(2 * (self.cw + 1) - 1, self.cw_max)
        self.backoff_counter = -1


# ============================================================================
# OPERATIONS
# ============================================================================

def generate_arrivals(
    config: SimConfig,
    slot: int,
    rng: np.random.Generator,
    buffer_levels: Optional[Sequence[int]] = None,
) -> List[List[Packet]]:
    """New packets per station for this slot (before buffer admission)."""
    if slot < 0:
        raise ValueError("slot must be >= 0")

    poisson_idx = [i for i, t in enumerate(config.traffic) if t.kind is TrafficKind.POISSON]
    counts = [0] * config.n_stations
    if poisson_idx:
        lam = np.array([config.traffic[i].rate * config.slot_us * 1e-6 for i in poisson_idx])
        drawn = rng.poisson(lam)
        for i, k in zip(poisson_idx, drawn):
            counts[i] = int(k)

    for i, model in enumerate(config.traffic):
        if model.kind is TrafficKind.PERIODIC:
            period = model.period_slots(config.slot_us)
            counts[i] = 1 if slot % period == model.phase_slots % period else 0
        elif model.kind is TrafficKind.SATURATED:
            level = 0 if buffer_levels is None else buffer_levels[i]
            counts[i] = max(0, config.buffer_capacity - level)

    return [[Packet(slot, i) for _ in range(counts[i])] for i in range(config.n_stations)]


def edca_decide(station: EdcaStation, channel_idle: bool, has_packet: bool, rng: np.random.Generator) -> Action:
    """
    DIFS deferral followed by a uniform backoff in [0, cw]. The counter only
    moves on idle slots and is frozen while the medium is busy.
    """
    if not channel_idle:
        station.idle_run = 0
        return Action.WAIT

    station.idle_run += 1
    if not has_packet or station.idle_run < station.difs_slots:
        return Action.WAIT

    if station.backoff_counter < 0:
        station.backoff_counter = int(rng.integers(0, station.cw + 1))
    if station.backoff_counter == 0:
        return Action.TRANSMIT
    station.backoff_counter -= 1
    return Action.WAIT


def measure_delay(packet: Packet, success_slot: int, min_slots: int = 1) -> int:
    """Slots from generation to successful transmission (at least the transmission itself)."""
    if success_slot < packet.arrival_slot:
        raise ValueError("success_slot precedes arrival_slot")
    return max(success_slot - packet.arrival_slot, min_slots)


# ============================================================================
# SIMULATOR
# ============================================================================

class WlanBss:
    """One BSS instance. Owns its RNG; instances share no state."""

    def __init__(self, config: SimConfig, trace: Optional[TextIO] = None, windows: Optional[WindowSeries] = None):
        self.config = config
        self.rng = np.random.default_rng(config.rng_seed)
        self.trace = trace
        self.windows = windows
        n = config.n_stations

        self.buffers: List[Deque[Packet]] = [deque() for _ in range(n)]
        self.edca: List[Optional[EdcaStation]] = [
            EdcaStation.for_class(ac, config.difs_slots) if ac is not None else None for ac in config.edca
        ]
        self.stats = RunStats(n, config.packet_slots, config.slot_us, config.warmup_slots)

        self.arrivals = np.zeros(n, dtype=np.int64)
        self.delivered = np.zeros(n, dtype=np.int64)
        self.dropped = np.zeros(n, dtype=np.int64)

        self.slot = 0
        self.prev_idle = True
        self.last_actions: List[Action] = [Action.WAIT] * n
        self._tx: Tuple[int, ...] = ()
        self._tx_start = -1
        self._remaining = 0

    # ---------------- channel view ----------------

    @property
    def busy(self) -> bool:
        return self._remaining > 0

    @property
    def sensed_idle(self) -> bool:
        """Carrier-sense result of the previous slot."""
        return self.prev_idle

    @property
    def transmitters(self) -> Tuple[int, ...]:
        return self._tx

    def has_packet(self, station: int) -> bool:
        return len(self.buffers[station]) > 0

    def buffer_levels(self) -> List[int]:
        return [len(b) for b in self.buffers]

    def can_transmit(self, station: int) -> bool:
        return not self.busy and self.sensed_idle and self.has_packet(station)

    def forced_action(self, station: int) -> Action:
        """Action of a station that is not free to decide this slot."""
        if self.busy and station in self._tx and self.slot - self._tx_start < self.config.packet_slots:
            return Action.TRANSMIT
        return Action.WAIT

    # ---------------- slot processing ----------------

    def begin_slot(self) -> None:
        """Admit this slot's arrivals; packets beyond capacity are dropped."""
        new = generate_arrivals(self.config, self.slot, self.rng, self.buffer_levels())
        cap = self.config.buffer_capacity
        for i, packets in enumerate(new):
            for p in packets:
                self.arrivals[i] += 1
                if len(self.buffers[i]) < cap:
                    self.buffers[i].append(p)
                else:
                    self.dropped[i] += 1
                    self.stats.record_drop(i, self.slot)

    def edca_actions(self) -> dict:
        channel_idle = self.sensed_idle and not self.busy
        actions = {}
        for i, st in enumerate(self.edca):
            if st is not None:
                actions[i] = edca_decide(st, channel_idle, self.has_packet(i), self.rng)
        return actions

    def step(self, joint_action: Sequence[Action]) -> ChannelOutcome:
        n = self.config.n_stations
        if len(joint_action) != n:
            raise ValueError(f"joint action has {len(joint_action)} entries, expected {n}")

        if self.busy:
            effective = [self.forced_action(i) for i in range(n)]
            for i, a in enumerate(joint_action):
                if a == Action.TRANSMIT and effective[i] != Action.TRANSMIT:
                    raise TransmitWhileBusy(f"station {i} transmitted during slot {self.slot} while the channel is busy")
            self._remaining -= 1
            outcome = self._resolve() if self._remaining == 0 else ChannelOutcome.busy(self._tx)
        else:
            transmitters = [i for i, a in enumerate(joint_action) if a == Action.TRANSMIT]
            for i in transmitters:
                if not self.sensed_idle:
                    raise TransmitWhileBusy(f"station {i} transmitted at slot {self.slot} without sensing idle")
                if not self.has_packet(i):
                    raise TransmitWithEmptyBuffer(f"station {i} transmitted at slot {self.slot} with an empty buffer")
            effective = [Action(a) for a in joint_action]
            if not transmitters:
                outcome = ChannelOutcome.idle()
            else:
                self._tx = tuple(transmitters)
                self._tx_start = self.slot
                self._remaining = self.config.interval_slots - 1
                outcome = self._resolve() if self._remaining == 0 else ChannelOutcome.busy(self._tx)

        self.last_actions = effective
        self.stats.record_slot(self.slot)
        if self.windows is not None:
            self.windows.record_slot(self.slot)
        if self.trace is not None:
            ids = ",".join(str(s) for s in outcome.stations) or "-"
            self.trace.write(f"{self.slot}\t{outcome.kind.value}\t{ids}\n")

        self.prev_idle = outcome.is_idle
        self.slot += 1
        return outcome

    def _resolve(self) -> ChannelOutcome:
        tx, start = self._tx, self._tx_start
        self._tx, self._tx_start, self._remaining = (), -1, 0

        if len(tx) == 1:
            station = tx[0]
            packet = self.buffers[station].popleft()
            delay = measure_delay(packet, self.slot, self.config.packet_slots)
            self.delivered[station] += 1
            self.stats.record_success(station, self.slot, delay, data_start=start)
            if self.windows is not None and self.stats.counts(start):
                self.windows.record_success(station, start)
            if self.edca[station] is not None:
                self.edca[station].on_success()
            return ChannelOutcome.success(station)

        self.stats.record_collision(tx, self.slot)
        for station in tx:
            if self.edca[station] is not None:
                self.edca[station].on_collision()
        return ChannelOutcome.collision(tx)

    def tick(self, external: Optional[Mapping[int, Action]] = None) -> ChannelOutcome:
        """Arrivals, EDCA decisions, externally supplied actions, then one channel slot."""
        self.begin_slot()
        actions = [Action.WAIT] * self.config.n_stations
        for i, a in self.edca_actions().items():
            actions[i] = a
        for i, a in (external or {}).items():
            actions[i] = a
        return self.step(actions)

    def run_edca(self, n_slots: int) -> RunStats:
        """Pure rule-based run; every station must be an EDCA station."""
        if any(st is None for st in self.edca):
            raise ValueError("run_edca needs every station to be an EDCA station")
        for _ in range(n_slots):
            self.tick()
        return self.stats

    def in_buffer(self) -> np.ndarray:
        return np.array(self.buffer_levels(), dtype=np.int64)
