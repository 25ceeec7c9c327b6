"""Discrete-time activation simulator over sectors and abstraction levels.

Each (sector, level) carries a scalar activation in ``[0, a_max]``.  One tick
applies::

    a_j^k(t+1) = clamp((1 - decay) a_j^k + sum_i g_ij^k a_i^k
                       + lambda_j a_j^(k-1) + v_j a_j^(k+1) + input_gain u_j^k, 0, a_max)

Abstraction (``lambda``) and elaboration (``v``) only move activity between
adjacent levels of the same sector.  Threshold crossings become events.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from .core import CouplingProfile, FloatArray, SectorRegistry, build_profile
from .errors import ShapeMismatch, UnknownScenario, ValidationError
from .events import Event, EventLog, write_jsonl

log = logging.getLogger(__name__)

NONLINEARITIES = ("relu_clamp", "logistic")


def _per_sector(value, n: int, name: str) -> FloatArray:
    a = np.broadcast_to(np.asarray(value, dtype=np.float64), (n,)).copy()
    if not np.all(np.isfinite(a)) or np.any(a < 0):
        raise ValidationError(f"{name} must be finite and non-negative")
    return a


@dataclass(frozen=True, eq=False)
class OperatorConfig:
    """Gains of the inter-level and input operators plus output nonlinearity.

    ``decay`` broadcasts to a ``(levels, n)`` table, so one scalar fits every unit.
    """

    lambda_gain: FloatArray
    v_gain: FloatArray
    decay: FloatArray | float = 0.5
    input_gain: float = 1.0
    nonlinearity: str = "relu_clamp"
    a_max: float = 1.0
    event_threshold: float = 0.1

    def __post_init__(self) -> None:
        lam = np.asarray(self.lambda_gain, dtype=np.float64)
        n = lam.size
        object.__setattr__(self, "lambda_gain", _per_sector(lam, n, "lambda_gain"))
        object.__setattr__(self, "v_gain", _per_sector(self.v_gain, n, "v_gain"))
        d = np.asarray(self.decay, dtype=np.float64)
        if not np.all(np.isfinite(d)) or np.any(d < 0) or np.any(d > 1):
            raise ValidationError("decay must lie in [0, 1]")
        object.__setattr__(self, "decay", d)
        if not (math.isfinite(self.input_gain) and self.input_gain >= 0):
            raise ValidationError("input_gain must be finite and non-negative")
        if self.nonlinearity not in NONLINEARITIES:
            raise ValidationError(f"nonlinearity must be one of {NONLINEARITIES}")
        if not (self.a_max > 0 and math.isfinite(self.a_max)):
            raise ValidationError("a_max must be positive")
        if not 0 < self.event_threshold < self.a_max:
            raise ValidationError("event_threshold must lie in (0, a_max)")

    @classmethod
    def uniform(cls, n: int, lambda_gain: float = 0.0, v_gain: float = 0.0, **kw) -> "OperatorConfig":
        return cls(np.full(n, float(lambda_gain)), np.full(n, float(v_gain)), **kw)

    @property
    def n(self) -> int:
        return self.lambda_gain.size

    def decay_table(self, levels: int) -> FloatArray:
        try:
            return np.broadcast_to(self.decay, (levels, self.n)).copy()
        except ValueError:
            raise ShapeMismatch(f"decay of shape {self.decay.shape} does not fit ({levels}, {self.n})") from None

    def to_dict(self, registry: SectorRegistry | None = None) -> dict:
        def per(a):
            return dict(zip(registry.labels, a.tolist())) if registry else a.tolist()
        return {
            "lambda_gain": per(self.lambda_gain),
            "v_gain": per(self.v_gain),
            "decay": self.decay.tolist(),
            "input_gain": self.input_gain,
            "nonlinearity": self.nonlinearity,
            "a_max": self.a_max,
            "event_threshold": self.event_threshold,
        }

    @classmethod
    def from_dict(cls, doc: Mapping, registry: SectorRegistry) -> "OperatorConfig":
        def per(key, default):
            val = doc.get(key, default)
            if isinstance(val, Mapping):
                out = np.zeros(registry.n)
                for lab, x in val.items():
                    out[registry.index(lab)] = float(x)
                return out
            return np.broadcast_to(np.asarray(val, dtype=np.float64), (registry.n,))
        return cls(per("lambda_gain", 0.0), per("v_gain", 0.0), doc.get("decay", 0.5),
                   float(doc.get("input_gain", 1.0)), doc.get("nonlinearity", "relu_clamp"),
                   float(doc.get("a_max", 1.0)), float(doc.get("event_threshold", 0.1)))


@dataclass(frozen=True, eq=False)
class ActivationState:
    t: int
    a: FloatArray  # (levels, n)

    @property
    def load(self) -> FloatArray:
        """Per-sector activity summed over levels."""
        return self.a.sum(axis=0)

    @classmethod
    def zeros(cls, levels: int, n: int) -> "ActivationState":
        return cls(0, np.zeros((levels, n)))


@dataclass(frozen=True)
class Stimulus:
    tick: int
    sector: str
    level: int
    magnitude: float


class StimulusScript(tuple):
    """External inputs as ``(tick, sector, level, magnitude)`` rows."""

    def __new__(cls, rows: Iterable = ()):
        out = []
        for r in rows:
            s = r if isinstance(r, Stimulus) else Stimulus(int(r[0]), str(r[1]), int(r[2]), float(r[3]))
            if s.tick < 0 or s.level < 0:
                raise ValidationError(f"stimulus {s} has a negative tick or level")
            if not math.isfinite(s.magnitude):
                raise ValidationError(f"stimulus {s} has a non-finite magnitude")
            out.append(s)
        return super().__new__(cls, sorted(out, key=lambda s: s.tick))

    def inputs_at(self, tick: int, registry: SectorRegistry, levels: int) -> FloatArray | None:
        u = None
        for s in self:
            if s.tick == tick:
                if s.level >= levels:
                    raise ValidationError(f"stimulus level {s.level} beyond simulated levels")
                if u is None:
                    u = np.zeros((levels, registry.n))
                u[s.level, registry.index(s.sector)] += s.magnitude
        return u


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def step(state: ActivationState, profile: CouplingProfile, ops: OperatorConfig,
         inputs: FloatArray | None = None) -> ActivationState:
    """Advance one tick under the update rule in the module docstring."""
    a = state.a
    levels, n = a.shape
    if n != profile.n or ops.n != n or levels != profile.max_level + 1:
        raise ShapeMismatch(f"state {a.shape} does not match profile ({profile.max_level + 1}, {profile.n}) "
                            f"or operator config n={ops.n}")
    G = profile.stack()
    drive = (1.0 - ops.decay_table(levels)) * a
    drive += np.einsum("ki,kij->kj", a, G)
    drive[1:] += ops.lambda_gain * a[:-1]
    drive[:-1] += ops.v_gain * a[1:]
    if inputs is not None:
        if inputs.shape != a.shape:
            raise ShapeMismatch(f"inputs shape {inputs.shape} != state shape {a.shape}")
        drive += ops.input_gain * inputs
    if ops.nonlinearity == "logistic":
        drive = _sigmoid(drive)
    return ActivationState(state.t + 1, np.clip(drive, 0.0, ops.a_max))


@dataclass(frozen=True, eq=False)
class TraceLog:
    registry: SectorRegistry
    snapshots: FloatArray  # (ticks + 1, levels, n)
    events: tuple[Event, ...]
    dt: float
    seed: int
    runaway: tuple[tuple[str, int], ...] = ()
    scenario: str = "custom"

    @property
    def runaway_flag(self) -> bool:
        return bool(self.runaway)

    def activation(self, sector: str, level: int) -> FloatArray:
        return self.snapshots[:, level, self.registry.index(sector)]

    def load(self) -> FloatArray:
        return self.snapshots.sum(axis=1)

    def first_event_tick(self, sector: str, level: int = 0) -> int | None:
        for e in self.events:
            if e.sector == sector and e.level == level:
                return int(round(e.t / self.dt))
        return None

    def event_log(self) -> EventLog:
        return EventLog(self.events)


@dataclass(frozen=True, eq=False)
class Scenario:
    name: str
    profile: CouplingProfile
    ops: OperatorConfig
    script: StimulusScript
    ticks: int = 40
    description: str = ""


def simulate(profile: CouplingProfile, ops: OperatorConfig, script: StimulusScript | Sequence = (),
             ticks: int = 40, seed: int = 42, dt: float = 0.1, noise_std: float = 0.0,
             initial: FloatArray | None = None, name: str = "custom") -> TraceLog:
    """Run the simulator and collect snapshots and threshold events.

    Events fire when an activation reaches ``event_threshold`` while armed;
    the unit re-arms once it falls below half the threshold.  Observation
    noise perturbs logged magnitudes only.
    """
    if ticks < 0:
        raise ValidationError("ticks must be non-negative")
    if noise_std < 0 or dt <= 0:
        raise ValidationError("noise_std must be >= 0 and dt > 0")
    script = script if isinstance(script, StimulusScript) else StimulusScript(script)
    reg = profile.registry
    levels, n = profile.max_level + 1, profile.n
    rng = np.random.default_rng(seed)
    state = ActivationState(0, np.zeros((levels, n)) if initial is None else np.array(initial, dtype=np.float64))
    if state.a.shape != (levels, n):
        raise ShapeMismatch(f"initial state must have shape {(levels, n)}")
    theta = ops.event_threshold
    snaps = np.empty((ticks + 1, levels, n))
    snaps[0] = state.a
    armed = state.a < theta
    events = []
    for t in range(ticks):
        state = step(state, profile, ops, script.inputs_at(t, reg, levels))
        snaps[t + 1] = state.a
        fire = armed & (state.a >= theta)
        for k, j in zip(*np.nonzero(fire)):
            mag = float(state.a[k, j])
            if noise_std > 0:
                mag += float(rng.normal(0.0, noise_std))
            events.append(Event(round((t + 1) * dt, 12), reg.labels[j], int(k), "event", mag))
        armed = (armed & ~fire) | (state.a < 0.5 * theta)
    growth = (1.0 - ops.decay_table(levels)) + np.array([np.diag(profile.matrix(k).entries) for k in range(levels)])
    hit = snaps.max(axis=0) >= ops.a_max
    runaway = tuple((reg.labels[j], int(k)) for k, j in zip(*np.nonzero((growth > 1.0) & hit)))
    return TraceLog(reg, snaps, tuple(events), dt, seed, runaway, name)


# --- preset scenarios -----------------------------------------------------------

REACTIVE_BASE = [[0.2, 0.9, 0.1], [0.1, 0.3, 0.1], [0.0, 0.2, 0.4]]
DELIBERATIVE_BASE = [[0.2, 0.5, 0.8], [0.2, 0.4, 0.3], [0.1, 0.7, 0.5]]


def _matrix(labels: Sequence[str], couplings: Mapping[tuple[str, str], float], base=None) -> FloatArray:
    n = len(labels)
    m = np.zeros((n, n))
    if base is not None:
        b = np.asarray(base)
        m[: b.shape[0], : b.shape[1]] = b
    for (src, tgt), g in couplings.items():
        m[labels.index(src), labels.index(tgt)] = g
    return m


def extended_reactive_profile() -> CouplingProfile:
    """The worked-example reactive matrix plus an execution sector (plan -> exe = 0.9)."""
    labels = ("perc", "plan", "refl", "exe")
    g0 = _matrix(labels, {("plan", "exe"): 0.9}, REACTIVE_BASE)
    return build_profile(SectorRegistry.standard(labels), {0: g0}, 1)


def _gains(labels, values: Mapping[str, float]) -> FloatArray:
    return np.array([values.get(lab, 0.0) for lab in labels])


def _reflex_arc() -> Scenario:
    profile = extended_reactive_profile()
    ops = OperatorConfig(np.full(4, 0.05), np.full(4, 0.05), decay=0.5)
    return Scenario("reflex-arc", profile, ops, StimulusScript([(0, "perc", 0, 1.0)]), 40,
                    "perc -> plan -> exe at level 0")


def _affect_modulated_reflex() -> Scenario:
    labels = ("perc", "plan", "refl", "exe", "affect")
    g0 = _matrix(labels, {("perc", "affect"): 0.8, ("affect", "plan"): 0.7, ("perc", "plan"): 0.3,
                          ("plan", "exe"): 0.9, ("perc", "perc"): 0.2, ("affect", "affect"): 0.3})
    profile = build_profile(SectorRegistry.standard(labels), {0: g0}, 1)
    ops = OperatorConfig(np.full(5, 0.05), np.full(5, 0.05), decay=0.5)
    return Scenario("affect-modulated-reflex", profile, ops, StimulusScript([(0, "perc", 0, 1.0)]), 40,
                    "perc -> affect -> plan -> exe at level 0")


def _deliberative_cycle() -> Scenario:
    labels = ("perc", "plan", "refl", "exe")
    g0 = _matrix(labels, {("perc", "perc"): 0.2, ("perc", "refl"): 0.8, ("perc", "plan"): 0.05,
                          ("refl", "refl"): 0.3, ("plan", "exe"): 0.9})
    g1 = _matrix(labels, {}, DELIBERATIVE_BASE)
    profile = build_profile(SectorRegistry.standard(labels), {0: g0, 1: g1}, 1)
    ops = OperatorConfig(_gains(labels, {"refl": 0.8}), _gains(labels, {"plan": 0.8}), decay=0.5)
    return Scenario("deliberative-cycle", profile, ops, StimulusScript([(0, "perc", 0, 1.0)]), 40,
                    "perc -> refl(0) -Lambda-> refl(1) -> plan(1) -V-> plan(0) -> exe(0)")


def _rumination() -> Scenario:
    labels = ("perc", "plan", "refl", "exe")
    g1 = _matrix(labels, {("refl", "refl"): 1.2})
    profile = build_profile(SectorRegistry.standard(labels), {1: g1}, 1)
    ops = OperatorConfig.uniform(4, decay=0.1)
    return Scenario("rumination", profile, ops, StimulusScript([(0, "refl", 1, 0.05)]), 40,
                    "refl(1) self-loop with growth factor (1 - 0.1) + 1.2 = 2.1")


def _load_management() -> Scenario:
    labels = ("perc", "plan", "refl", "exe")
    g0 = _matrix(labels, {("plan", "plan"): 0.4, ("plan", "refl"): 0.6, ("refl", "plan"): -0.8,
                          ("plan", "exe"): 0.5})
    g1 = _matrix(labels, {("refl", "refl"): 0.3})
    profile = build_profile(SectorRegistry.standard(labels), {0: g0, 1: g1}, 1)
    ops = OperatorConfig(_gains(labels, {"refl": 0.8}), _gains(labels, {"refl": 0.8}), decay=0.5)
    script = StimulusScript([(t, "plan", 0, 0.4) for t in range(30)])
    return Scenario("load-management", profile, ops, script, 60,
                    "plan load -> refl(0) -Lambda-> refl(1) -V-> refl(0) -| plan(0)")


def _memory_informed_planning() -> Scenario:
    labels = ("perc", "plan", "refl", "exe", "mem")
    g0 = _matrix(labels, {("perc", "perc"): 0.2, ("plan", "exe"): 0.9})
    g1 = _matrix(labels, {("perc", "plan"): 0.7, ("plan", "mem"): 0.6, ("mem", "plan"): 0.5,
                          ("plan", "refl"): 0.5, ("refl", "plan"): 0.4})
    profile = build_profile(SectorRegistry.standard(labels), {0: g0, 1: g1}, 1)
    ops = OperatorConfig(_gains(labels, {"perc": 0.8}), _gains(labels, {"plan": 0.8}), decay=0.5)
    return Scenario("memory-informed-planning", profile, ops, StimulusScript([(0, "perc", 0, 1.0)]), 40,
                    "perc(0) -Lambda-> perc(1) -> plan(1) <-> mem(1), plan(1) -V-> plan(0) -> exe(0)")


PRESETS: dict[str, Callable[[], Scenario]] = {
    "reflex-arc": _reflex_arc,
    "affect-modulated-reflex": _affect_modulated_reflex,
    "deliberative-cycle": _deliberative_cycle,
    "rumination": _rumination,
    "load-management": _load_management,
    "memory-informed-planning": _memory_informed_planning,
}


def get_scenario(name: str) -> Scenario:
    try:
        return PRESETS[name]()
    except KeyError:
        raise UnknownScenario(f"unknown scenario {name!r}; available: {', '.join(PRESETS)}") from None


def run_scenario(scenario: str | Scenario, profile: CouplingProfile | None = None,
                 ops: OperatorConfig | None = None, script: StimulusScript | Sequence | None = None,
                 ticks: int | None = None, seed: int = 42, dt: float = 0.1,
                 noise_std: float = 0.0) -> TraceLog:
    """Run a named preset or a custom :class:`Scenario`; any argument overrides the preset's."""
    sc = get_scenario(scenario) if isinstance(scenario, str) else scenario
    profile = profile or sc.profile
    if ops is None:
        ops = sc.ops if sc.ops.n == profile.n else OperatorConfig.uniform(profile.n, decay=0.5)
    script = sc.script if script is None else script
    return simulate(profile, ops, script, sc.ticks if ticks is None else ticks, seed, dt, noise_std,
                    name=sc.name)


def emit_log(trace: TraceLog, path, full: bool = False) -> int:
    """Write the trace's events (and snapshots when ``full``) as JSONL; returns the line count."""
    lines = [(e.t, 1, e.to_dict()) for e in trace.events]
    if full:
        labels = trace.registry.labels
        for t, snap in enumerate(trace.snapshots):
            doc = {"t": round(t * trace.dt, 12), "kind": "snapshot",
                   "a": {lab: snap[:, j].tolist() for j, lab in enumerate(labels)}}
            lines.append((doc["t"], 0, doc))
    lines.sort(key=lambda x: (x[0], x[1]))
    return write_jsonl((doc for _, _, doc in lines), path)


# --- synthetic logs for estimation ------------------------------------------------

def gated_emission_log(profile: CouplingProfile, level: int = 0, trials: int = 200, seed: int = 42,
                       scale: float = 5.0, bias: float = 0.0, dt: float = 0.1, gap: float = 1.0,
                       magnitude_range: tuple[float, float] = (0.0, 1.0)) -> EventLog:
    """Probe trials with stochastic response emission.

    Each trial starts every unit at rest, pulses one source sector with a
    random magnitude ``x`` and steps the simulator twice with a probe
    configuration (full decay, no inter-level transfer) so the target
    activation one tick later is the pure coupling drive ``g_ij x``.  Each
    target then emits a ``response`` event with probability
    ``sigmoid(bias + scale * activation)``.  ``trials`` trials are run per
    source sector, cycling through sources.  Negative couplings clamp to zero
    activation and so look like null couplings in this model.
    """
    reg = profile.registry
    n, levels = profile.n, profile.max_level + 1
    if not 0 <= level < levels:
        raise ValidationError(f"level {level} outside profile levels 0..{levels - 1}")
    ops = OperatorConfig.uniform(n, decay=1.0, a_max=max(1.0, magnitude_range[1]))
    rng = np.random.default_rng(seed)
    events = []
    t0 = 0.0
    for trial in range(trials * n):
        src = trial % n
        x = float(rng.uniform(*magnitude_range))
        u = np.zeros((levels, n))
        u[level, src] = x
        s1 = step(ActivationState.zeros(levels, n), profile, ops, u)
        s2 = step(s1, profile, ops)
        attrs = {"trial": trial}
        events.append(Event(round(t0 + dt, 12), reg.labels[src], level, "stimulus", float(s1.a[level, src]), attrs))
        p = _sigmoid(bias + scale * s2.a[level])
        fired = rng.random(n) < p
        for j in np.nonzero(fired)[0]:
            events.append(Event(round(t0 + 2 * dt, 12), reg.labels[j], level, "response",
                                float(s2.a[level, j]), attrs))
        t0 += gap
    return EventLog(events)
