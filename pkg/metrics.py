"""
Evaluation metrics: throughput, mean delay, delay jitter, collision rate,
Jain fairness index, windowed training curves and CSV emission.
"""

import csv
import logging
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

logger = logging.getLogger(__name__)


class NoSuccesses(ValueError):
    pass


class NothingSent(ValueError):
    pass


class AllZero(ValueError):
    pass


# ============================================================================
# RUN STATISTICS
# ============================================================================

@dataclass
class RunStats:
    """
    Counters collected by the simulator. Events before `warmup_slots` are
    ignored so learning runs can exclude their training transient.
    """
    n_stations: int
    packet_slots: int
    slot_us: float
    warmup_slots: int = 0
    total_slots: int = 0
    success_slots: List[int] = field(default_factory=list)
    sent: List[int] = field(default_factory=list)
    collided: List[int] = field(default_factory=list)
    drops: List[int] = field(default_factory=list)
    delays: List[List[int]] = field(default_factory=list)

    def __post_init__(self):
        n = self.n_stations
        self.success_slots = self.success_slots or [0] * n
        self.sent = self.sent or [0] * n
        self.collided = self.collided or [0] * n
        self.drops = self.drops or [0] * n
        self.delays = self.delays or [[] for _ in range(n)]

    def counts(self, slot: int) -> bool:
        return slot >= self.warmup_slots

    def record_slot(self, slot: int) -> None:
        if self.counts(slot):
            self.total_slots += 1

    def record_drop(self, station: int, slot: int) -> None:
        if self.counts(slot):
            self.drops[station] += 1

    def record_success(self, station: int, slot: int, delay_slots: int, data_start: Optional[int] = None) -> None:
        """
        A packet completing at `slot`. With `data_start` given, only the data
        slots at or after `warmup_slots` count toward throughput.
        """
        if self.counts(slot):
            self.sent[station] += 1
            self.success_slots[station] += self.data_slots_after_warmup(data_start)
            self.delays[station].append(int(delay_slots))

    def data_slots_after_warmup(self, data_start: Optional[int]) -> int:
        if data_start is None:
            return self.packet_slots
        return self.packet_slots - min(self.packet_slots, max(0, self.warmup_slots - data_start))

    def record_collision(self, stations: Iterable[int], slot: int) -> None:
        if self.counts(slot):
            for s in stations:
                self.sent[s] += 1
                self.collided[s] += 1

    def successes(self, station: int) -> int:
        return len(self.delays[station])


# ============================================================================
# THROUGHPUT / DELAY / COLLISIONS
# ============================================================================

def per_station_throughput(stats: RunStats) -> List[float]:
    if stats.total_slots <= 0:
        raise ValueError("throughput needs at least one recorded slot")
    return [s / stats.total_slots for s in stats.success_slots]


def throughput(stats: RunStats) -> float:
    """Successful transmission slots over total slots."""
    return float(sum(per_station_throughput(stats)))


@dataclass
class DelayStats:
    mean_slots: float
    var_slots: float
    mean_s: float
    jitter_s2: float
    cdf: List[Tuple[float, float]]


def delay_stats(stats: RunStats, station: Optional[int] = None) -> DelayStats:
    """
    Mean and population variance of per-packet delay, pooled over all
    stations unless one is given. CDF pairs are (delay in s, fraction).
    """
    pools = stats.delays if station is None else [stats.delays[station]]
    samples = np.array([d for pool in pools for d in pool], dtype=np.float64)
    if samples.size == 0:
        raise NoSuccesses("no successfully transmitted packets")

    mean = float(samples.mean())
    var = float(samples.var()) if samples.size >= 2 else 0.0
    to_s = stats.slot_us * 1e-6

    ordered = np.sort(samples)
    fractions = np.arange(1, ordered.size + 1) / ordered.size
    cdf = []
    for i, d in enumerate(ordered):
        # one point per distinct delay, at its last occurrence
        if i + 1 == ordered.size or ordered[i + 1] != d:
            cdf.append((float(d * to_s), float(fractions[i])))

    return DelayStats(mean, var, mean * to_s, var * to_s * to_s, cdf)


def collision_rate(stats: RunStats, station: Optional[int] = None) -> float:
    sent = sum(stats.sent) if station is None else stats.sent[station]
    collided = sum(stats.collided) if station is None else stats.collided[station]
    if sent <= 0:
        raise NothingSent("no packets were sent")
    return collided / sent


def jfi(e: Sequence[float]) -> float:
    """(sum e)^2 / (N * sum e^2)"""
    e = np.asarray(e, dtype=np.float64)
    if e.size == 0:
        raise ValueError("JFI needs at least one station")
    if np.any(e < 0):
        raise ValueError("throughputs must be nonnegative")
    sq = float(np.sum(e * e))
    if sq == 0.0:
        raise AllZero("all throughputs are zero")
    return float(np.sum(e) ** 2 / (e.size * sq))


# ============================================================================
# TRAINING CURVES
# ============================================================================

class WindowSeries:
    """
    Real-time throughput per fixed window of slots. A success credits its
    data slots to the windows they actually occupied, so no window exceeds 1.
    """

    def __init__(self, n_stations: int, window: int, packet_slots: int, slot_us: float):
        self.n_stations = n_stations
        self.window = window
        self.packet_slots = packet_slots
        self.slot_us = slot_us
        self._slots: Dict[int, np.ndarray] = {}
        self.last_slot = -1

    def _bucket(self, k: int) -> np.ndarray:
        if k not in self._slots:
            self._slots[k] = np.zeros(self.n_stations, dtype=np.int64)
        return self._slots[k]

    def record_slot(self, slot: int) -> None:
        self.last_slot = max(self.last_slot, slot)

    def record_success(self, station: int, data_start: int) -> None:
        start, stop = data_start, data_start + self.packet_slots
        while start < stop:
            k = start // self.window
            edge = min(stop, (k + 1) * self.window)
            self._bucket(k)[station] += edge - start
            start = edge

    def rows(self) -> List[dict]:
        """Completed windows only."""
        n_windows = (self.last_slot + 1) // self.window
        rows = []
        for k in range(n_windows):
            occupied = self._slots.get(k, np.zeros(self.n_stations, dtype=np.int64))
            row = {
                "window": k,
                "end_slot": (k + 1) * self.window,
                "time_s": (k + 1) * self.window * self.slot_us * 1e-6,
                "total_throughput": float(occupied.sum()) / self.window,
            }
            for i in range(self.n_stations):
                row[f"sta{i}_throughput"] = float(occupied[i]) / self.window
            rows.append(row)
        return rows

    def columns(self) -> List[str]:
        return ["window", "end_slot", "time_s", "total_throughput"] + [
            f"sta{i}_throughput" for i in range(self.n_stations)
        ]


def reward_averages(rewards: Sequence[float], chunk: int = 500) -> List[float]:
    """Average every `chunk` consecutive reward values (incomplete tail dropped)."""
    r = np.asarray(rewards, dtype=np.float64)
    n = r.size // chunk
    if n == 0:
        return []
    return [float(x) for x in r[: n * chunk].reshape(n, chunk).mean(axis=1)]


# ============================================================================
# CSV EMISSION
# ============================================================================

STATION_COLUMNS = [
    "scenario", "variant", "seed", "station", "kind",
    "throughput", "mean_delay_s", "delay_jitter_s2", "collision_rate",
    "sent", "collided", "drops", "jfi",
]


def _or_blank(fn, *args):
    try:
        return fn(*args)
    except (NoSuccesses, NothingSent, AllZero):
        return ""


def station_rows(stats: RunStats, scenario: str, variant: str, seed: int, kinds: Sequence[str]) -> List[dict]:
    """One row per station plus an aggregate row (station = "all")."""
    per_sta = per_station_throughput(stats)
    rows = []
    for i in range(stats.n_stations):
        d = _or_blank(delay_stats, stats, i)
        rows.append({
            "scenario": scenario, "variant": variant, "seed": seed, "station": i, "kind": kinds[i],
            "throughput": per_sta[i],
            "mean_delay_s": d.mean_s if d != "" else "",
            "delay_jitter_s2": d.jitter_s2 if d != "" else "",
            "collision_rate": _or_blank(collision_rate, stats, i),
            "sent": stats.sent[i], "collided": stats.collided[i], "drops": stats.drops[i],
            "jfi": "",
        })

    d = _or_blank(delay_stats, stats)
    rows.append({
        "scenario": scenario, "variant": variant, "seed": seed, "station": "all", "kind": "all",
        "throughput": float(sum(per_sta)),
        "mean_delay_s": d.mean_s if d != "" else "",
        "delay_jitter_s2": d.jitter_s2 if d != "" else "",
        "collision_rate": _or_blank(collision_rate, stats),
        "sent": sum(stats.sent), "collided": sum(stats.collided), "drops": sum(stats.drops),
        "jfi": _or_blank(jfi, per_sta),
    })
    return rows


def aggregate_rows(rows: Sequence[dict]) -> List[dict]:
    """Seed-level mean of every numeric column of the "all" rows, per (scenario, variant)."""
    groups: Dict[Tuple[str, str], List[dict]] = {}
    for row in rows:
        if row["station"] == "all":
            groups.setdefault((row["scenario"], row["variant"]), []).append(row)

    out = []
    for (scenario, variant), members in groups.items():
        agg = {"scenario": scenario, "variant": variant, "seed": "mean", "station": "all", "kind": "all"}
        for col in STATION_COLUMNS[5:]:
            values = [m[col] for m in members if m[col] != ""]
            agg[col] = float(np.mean(values)) if values else ""
        agg["seeds"] = len(members)
        out.append(agg)
    return out


def cdf_rows(stats: RunStats) -> List[dict]:
    d = _or_blank(delay_stats, stats)
    if d == "":
        return []
    return [{"delay_s": delay, "fraction": frac} for delay, frac in d.cdf]


def write_csv(path, columns: Sequence[str], rows: Iterable[dict]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.DictWriter(f, fieldnames=list(columns), extrasaction="ignore", lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow(row)
