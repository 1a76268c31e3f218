"""
Scenario configuration
======================
Scenario files are dotenv-style `KEY=value` lines (`#` comments allowed,
keys case-insensitive). parse_config validates them, fills in scenario and
protocol defaults and returns a fully resolved ScenarioSpec;
to_config_text writes a spec back in the same format.
"""

import io
import logging
import math
from dataclasses import dataclass, fields
from typing import Dict, List, Optional, Tuple

from dotenv import dotenv_values

from convlab import LabConfig, StepSchedule
from qpmix import LearningParams, RunConfig, TransitionMode
from wlan_env import AccessCategory, SimConfig, TrafficModel

logger = logging.getLogger(__name__)

SCENARIOS = ("saturated", "unsaturated", "voip", "mixed-roster", "coexistence", "independent-learning", "convlab")

# scenario -> (traffic, arrival rate packets/s)
SCENARIO_TRAFFIC = {
    "saturated": ("poisson", 2000.0),
    "unsaturated": ("poisson", 200.0),
    "voip": ("periodic", 0.0),
    "mixed-roster": ("poisson", 2000.0),
    "coexistence": ("poisson", 200.0),
    "independent-learning": ("poisson", 2000.0),
    "convlab": ("saturated", 0.0),
}


# ============================================================================
# ERRORS
# ============================================================================

class ConfigError(ValueError):
    def __init__(self, key: str, message: str):
        super().__init__(f"{key}: {message}")
        self.key = key


class UnknownKey(ConfigError):
    pass


class RangeViolation(ConfigError):
    pass


class RosterMismatch(ConfigError):
    pass


# ============================================================================
# SCENARIO FILE
# ============================================================================

@dataclass(frozen=True)
class ScenarioSpec:
    scenario: str
    n_stations: int = 2
    # roster
    dqn: int = 0
    ppo: int = 0
    edca_vo: int = 0
    edca_vi: int = 0
    edca_be: int = 0
    # traffic
    traffic: str = "poisson"
    arrival_rate: float = 2000.0
    period_ms: float = 20.0
    # run control
    slots: int = 200_000
    seeds: Tuple[int, ...] = (0, 1, 2)
    out_dir: str = "results"
    warmup_slots: int = 0
    window: int = 500
    transition_mode: str = "decision"
    learning_counts: Tuple[int, ...] = ()
    checkpoint: str = ""
    trace: bool = False
    # PHY/MAC timing
    slot_us: float = 9.0
    sifs_us: float = 18.0
    difs_us: float = 36.0
    packet_us: float = 1080.0
    ack_slots: int = 1
    buffer_capacity: int = 10
    # learning
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
    grad_clip: float = 10.0
    # convergence lab
    mdp_count: int = 10
    mdp_states: int = 3
    features: str = "tabular"
    n_features: int = 0
    iterations: int = 1_000_000
    trace_every: int = 10_000
    p_omega: float = 0.85
    p_theta: float = 0.9
    c_omega: float = 80.0
    c_theta: float = 1.0
    t0: float = 200.0
    value_epsilon: float = 0.5
    value_refresh: int = 1
    shared_init: bool = True
    consensus_alpha: float = 0.5

    @property
    def use_mixer(self) -> bool:
        return self.scenario != "independent-learning"

    def with_overrides(self, **changes) -> "ScenarioSpec":
        """Re-validated copy, e.g. for CLI --seeds/--slots/--out-dir."""
        values = {f.name: getattr(self, f.name) for f in fields(self)}
        values.update({k: v for k, v in changes.items() if v is not None})
        return parse_config(to_config_text(ScenarioSpec(**values)))


FIELD_TYPES = {f.name: f.type for f in fields(ScenarioSpec)}
ROSTER_KEYS = ("dqn", "ppo", "edca_vo", "edca_vi", "edca_be")


# ============================================================================
# PARSING
# ============================================================================

def _convert(key: str, raw: Optional[str]):
    kind = FIELD_TYPES[key]
    text = "" if raw is None else raw.strip()
    try:
        if kind in (int, "int"):
            return int(text)
        if kind in (float, "float"):
            return float(text)
        if kind in (bool, "bool"):
            if text.lower() in ("1", "true", "yes", "on"):
                return True
            if text.lower() in ("0", "false", "no", "off", ""):
                return False
            raise ValueError(text)
        if kind in (str, "str"):
            return text
        # tuples of ints
        return tuple(int(x) for x in text.split(",") if x.strip())
    except ValueError:
        raise RangeViolation(key, f"cannot parse {text!r}")


def _require(ok: bool, key: str, message: str) -> None:
    if not ok:
        raise RangeViolation(key, message)


def _validate(spec: ScenarioSpec) -> None:
    _require(spec.scenario in SCENARIOS, "scenario", f"must be one of {', '.join(SCENARIOS)}")
    _require(spec.n_stations >= 1, "n_stations", "must be >= 1")
    for key in ROSTER_KEYS:
        _require(getattr(spec, key) >= 0, key, "must be >= 0")
    _require(spec.traffic in ("poisson", "periodic", "saturated"), "traffic", "must be poisson, periodic or saturated")
    _require(spec.arrival_rate >= 0 and math.isfinite(spec.arrival_rate), "arrival_rate", "must be >= 0")
    _require(spec.period_ms > 0, "period_ms", "must be > 0")
    for key in ("slots", "window", "buffer_capacity", "history_length", "l_max", "n_c", "n_t",
                "replay_capacity", "batch_size", "mixer_hidden", "mdp_count", "iterations", "trace_every"):
        _require(getattr(spec, key) >= 1, key, "must be >= 1")
    for key in ("warmup_slots", "ack_slots", "n_features", "value_refresh"):
        _require(getattr(spec, key) >= 0, key, "must be >= 0")
    _require(len(spec.seeds) >= 1, "seeds", "at least one seed is required")
    _require(spec.warmup_slots < spec.slots, "warmup_slots", "must be smaller than slots")
    _require(spec.transition_mode in ("decision", "slot"), "transition_mode", "must be decision or slot")
    for key in ("slot_us", "packet_us", "lr_value", "lr_policy", "grad_clip", "c_omega", "c_theta", "t0"):
        _require(getattr(spec, key) > 0, key, "must be > 0")
    for key in ("sifs_us", "difs_us"):
        _require(getattr(spec, key) >= 0, key, "must be >= 0")
    for key in ("gamma", "gae_lambda", "epsilon_min", "epsilon_start", "epsilon_decay", "value_epsilon", "consensus_alpha"):
        _require(0.0 <= getattr(spec, key) <= 1.0, key, "must lie in [0, 1]")
    _require(spec.epsilon_min <= spec.epsilon_start, "epsilon_min", "must not exceed epsilon_start")
    _require(0.0 < spec.clip < 1.0, "clip", "must lie in (0, 1)")
    _require(len(spec.hidden) >= 1 and all(h >= 1 for h in spec.hidden), "hidden", "needs positive layer widths")
    _require(spec.features in ("tabular", "random"), "features", "must be tabular or random")
    _require(spec.mdp_states >= 1, "mdp_states", "must be >= 1")
    for key in ("p_omega", "p_theta"):
        _require(0.5 < getattr(spec, key) <= 1.0, key, "must lie in (0.5, 1]")
    _require(spec.p_theta > spec.p_omega, "p_theta", "must exceed p_omega")

    if spec.scenario == "coexistence":
        for k in spec.learning_counts:
            _require(0 <= k <= spec.n_stations, "learning_counts", f"counts must lie in [0, {spec.n_stations}]")
    else:
        total = sum(getattr(spec, key) for key in ROSTER_KEYS)
        if total != spec.n_stations:
            raise RosterMismatch("n_stations", f"roster lists {total} stations, n_stations is {spec.n_stations}")
    if spec.scenario == "convlab" and spec.edca_vo + spec.edca_vi + spec.edca_be:
        raise RosterMismatch("edca_be", "the convergence lab has no EDCA agents")


def parse_config(text: str) -> ScenarioSpec:
    raw: Dict[str, Optional[str]] = dotenv_values(stream=io.StringIO(text), interpolate=False)
    values = {}
    for key, value in raw.items():
        name = key.strip().lower()
        if name not in FIELD_TYPES:
            raise UnknownKey(name, "unknown configuration key")
        values[name] = _convert(name, value)
    if "scenario" not in values:
        raise RangeViolation("scenario", "is required")
    if values["scenario"] not in SCENARIOS:
        raise RangeViolation("scenario", f"must be one of {', '.join(SCENARIOS)}")

    scenario = values["scenario"]
    n = values.setdefault("n_stations", 4 if scenario == "mixed-roster" else 2)
    traffic, rate = SCENARIO_TRAFFIC[scenario]
    values.setdefault("traffic", traffic)
    values.setdefault("arrival_rate", rate)

    if not any(key in values for key in ROSTER_KEYS):
        if scenario == "mixed-roster" and n == 4:
            values.update(dqn=3, ppo=1)
        elif scenario != "coexistence":
            values.update(dqn=(n + 1) // 2, ppo=n // 2)
    if scenario == "coexistence" and not values.get("learning_counts"):
        values["learning_counts"] = tuple(range(n))

    spec = ScenarioSpec(**values)
    _validate(spec)
    return spec


def load_config(path) -> ScenarioSpec:
    with open(path, "r", encoding="utf-8") as f:
        return parse_config(f.read())


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def to_config_text(spec: ScenarioSpec) -> str:
    """Every key, resolved; parse_config(to_config_text(spec)) == spec."""
    lines = [f"# resolved {spec.scenario} scenario"]
    lines += [f"{f.name}={_format(getattr(spec, f.name))}" for f in fields(spec)]
    return "\n".join(lines) + "\n"


# ============================================================================
# RUN CONSTRUCTION
# ============================================================================

@dataclass(frozen=True)
class Variant:
    name: str
    kinds: Tuple[str, ...]
    edca: Tuple[Optional[AccessCategory], ...]


def _roster(dqn: int, ppo: int, vo: int, vi: int, be: int) -> Variant:
    kinds = ("dqn",) * dqn + ("ppo",) * ppo + ("edca",) * (vo + vi + be)
    edca = (None,) * (dqn + ppo) + (AccessCategory.AC_VO,) * vo + (AccessCategory.AC_VI,) * vi + (AccessCategory.AC_BE,) * be
    return Variant("", kinds, edca)


def variants(spec: ScenarioSpec) -> List[Variant]:
    """Station rosters to run; the coexistence sweep yields one per learning count."""
    if spec.scenario == "coexistence":
        out = []
        for k in spec.learning_counts:
            r = _roster((k + 1) // 2, k // 2, 0, 0, spec.n_stations - k)
            out.append(Variant(f"learning{k}", r.kinds, r.edca))
        return out

    r = _roster(spec.dqn, spec.ppo, spec.edca_vo, spec.edca_vi, spec.edca_be)
    if spec.dqn + spec.ppo == 0:
        name = "edca"
    else:
        name = "qpmix" if spec.use_mixer else "independent"
    return [Variant(name, r.kinds, r.edca)]


def traffic_models(spec: ScenarioSpec) -> Tuple[TrafficModel, ...]:
    n = spec.n_stations
    if spec.traffic == "poisson":
        return (TrafficModel.poisson(spec.arrival_rate),) * n
    if spec.traffic == "periodic":
        period = TrafficModel.periodic(spec.period_ms).period_slots(spec.slot_us)
        # station i starts i/n of a period in
        return tuple(TrafficModel.periodic(spec.period_ms, phase_slots=i * period // n) for i in range(n))
    return (TrafficModel.saturated(),) * n


def learning_params(spec: ScenarioSpec) -> LearningParams:
    return LearningParams(
        history_length=spec.history_length, l_max=spec.l_max, n_c=spec.n_c, n_t=spec.n_t,
        replay_capacity=spec.replay_capacity, batch_size=spec.batch_size, gamma=spec.gamma,
        gae_lambda=spec.gae_lambda, clip=spec.clip, epsilon_start=spec.epsilon_start,
        epsilon_min=spec.epsilon_min, epsilon_decay=spec.epsilon_decay, lr_value=spec.lr_value,
        lr_policy=spec.lr_policy, hidden=tuple(spec.hidden), mixer_hidden=spec.mixer_hidden,
        grad_clip=spec.grad_clip, use_mixer=spec.use_mixer,
        transition_mode=TransitionMode(spec.transition_mode),
    )


def build_run_config(spec: ScenarioSpec, variant: Variant, seed: int) -> RunConfig:
    sim = SimConfig.from_microseconds(
        n_stations=spec.n_stations,
        slot_us=spec.slot_us,
        sifs_us=spec.sifs_us,
        difs_us=spec.difs_us,
        packet_us=spec.packet_us,
        ack_slots=spec.ack_slots,
        buffer_capacity=spec.buffer_capacity,
        traffic=traffic_models(spec),
        edca=variant.edca,
        rng_seed=seed,
        warmup_slots=spec.warmup_slots,
    )
    return RunConfig(sim=sim, kinds=variant.kinds, learning=learning_params(spec),
                     slots=spec.slots, seed=seed, window=spec.window)


def build_lab_config(spec: ScenarioSpec) -> LabConfig:
    kinds = ("value",) * spec.dqn + ("policy",) * spec.ppo
    schedule = StepSchedule(c_omega=spec.c_omega, p_omega=spec.p_omega, c_theta=spec.c_theta, p_theta=spec.p_theta,
                            t0=spec.t0)
    return LabConfig(kinds=kinds, iterations=spec.iterations, trace_every=spec.trace_every, schedule=schedule,
                     value_epsilon=spec.value_epsilon, consensus_alpha=spec.consensus_alpha,
                     value_refresh=spec.value_refresh, shared_init=spec.shared_init)
