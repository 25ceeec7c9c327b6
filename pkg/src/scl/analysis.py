"""Graph-level reading of a coupling profile.

Thresholded influence graphs, pathway tracing, loop detection (optionally
across levels through the lift/lower operators), cognitive-style labels and
profile perturbations.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import networkx as nx
import numpy as np

from .core import CouplingProfile, SectorRegistry, frobenius_distance
from .dynamics import OperatorConfig
from .errors import ValidationError

EDGE, LIFT, LOWER = "edge", "lambda", "v"


@dataclass(frozen=True)
class InfluenceGraph:
    """Directed edges ``i -> j`` of one level whose coupling meets ``|g| >= theta``."""

    registry: SectorRegistry
    level: int
    theta: float
    edges: tuple[tuple[int, int, float], ...]

    def weight(self, i: int, j: int) -> float | None:
        for a, b, w in self.edges:
            if (a, b) == (i, j):
                return w
        return None

    def to_networkx(self) -> nx.DiGraph:
        g = nx.DiGraph()
        g.add_nodes_from(range(self.registry.n))
        g.add_weighted_edges_from(self.edges)
        return g

    def to_dict(self) -> dict:
        labels = self.registry.labels
        return {"level": self.level, "theta": self.theta,
                "edges": [{"source": labels[i], "target": labels[j], "weight": w} for i, j, w in self.edges]}


def influence_graph(profile: CouplingProfile, level: int, theta: float = 0.0) -> InfluenceGraph:
    if theta < 0:
        raise ValidationError("theta must be non-negative")
    g = profile.matrix(level).entries
    edges = tuple((int(i), int(j), float(g[i, j]))
                  for i, j in zip(*np.nonzero((np.abs(g) >= theta) & (g != 0))))
    return InfluenceGraph(profile.registry, level, theta, edges)


@dataclass(frozen=True)
class Step:
    """One hop: an intra-level edge, or a lift (``lambda``) / lower (``v``) bridge within a sector."""

    source: int
    target: int
    source_level: int
    target_level: int
    weight: float
    kind: str = EDGE

    def describe(self, labels: Sequence[str]) -> str:
        a, b = labels[self.source], labels[self.target]
        if self.kind == EDGE:
            return f"{a}->{b}@{self.source_level} ({self.weight:g})"
        op = "Lambda" if self.kind == LIFT else "V"
        return f"{a}^{self.source_level}-{op}->{b}^{self.target_level} ({self.weight:g})"


@dataclass(frozen=True)
class Pathway:
    steps: tuple[Step, ...]

    def __post_init__(self) -> None:
        for a, b in zip(self.steps, self.steps[1:]):
            if (a.target, a.target_level) != (b.source, b.source_level):
                raise ValidationError("pathway steps are not endpoint-compatible")

    @property
    def weight_product(self) -> float:
        return math.prod(s.weight for s in self.steps)

    @property
    def gain(self) -> float:
        return math.prod(abs(s.weight) for s in self.steps)

    def nodes(self) -> list[tuple[int, int]]:
        out = [(self.steps[0].source, self.steps[0].source_level)]
        out += [(s.target, s.target_level) for s in self.steps]
        return out

    def sectors(self, labels: Sequence[str]) -> list[str]:
        return [labels[i] for i, _ in self.nodes()]

    def to_dict(self, registry: SectorRegistry) -> dict:
        labels = registry.labels
        return {"nodes": [[labels[i], k] for i, k in self.nodes()],
                "steps": [{"source": labels[s.source], "target": labels[s.target], "source_level": s.source_level,
                           "target_level": s.target_level, "weight": s.weight, "kind": s.kind}
                          for s in self.steps],
                "product": self.weight_product}


def trace_pathways(profile: CouplingProfile, level: int, theta: float, max_len: int = 3) -> list[Pathway]:
    """All simple paths of 1..max_len edges at ``level`` whose edges meet ``theta``.

    Sorted by the product of edge weights, largest first.
    """
    if max_len < 1:
        raise ValidationError("max_len must be at least 1")
    graph = influence_graph(profile, level, theta)
    out_edges: dict[int, list[tuple[int, float]]] = {}
    for i, j, w in graph.edges:
        if i != j:
            out_edges.setdefault(i, []).append((j, w))
    paths: list[Pathway] = []

    def extend(steps: list[Step], visited: set[int]) -> None:
        for j, w in out_edges.get(steps[-1].target, ()):
            if j in visited:
                continue
            nxt = steps + [Step(steps[-1].target, j, level, level, w)]
            paths.append(Pathway(tuple(nxt)))
            if len(nxt) < max_len:
                extend(nxt, visited | {j})

    for i, j, w in graph.edges:
        if i != j:
            first = [Step(i, j, level, level, w)]
            paths.append(Pathway(tuple(first)))
            if max_len > 1:
                extend(first, {i, j})
    paths.sort(key=lambda p: -p.weight_product)
    return paths


# --- loops ------------------------------------------------------------------------

def loop_class(gain: float, tol: float = 1e-9) -> str:
    if abs(gain - 1.0) <= tol:
        return "neutral"
    return "explosive" if gain > 1.0 else "damped"


@dataclass(frozen=True)
class Loop:
    cycle: Pathway
    gain: float
    classification: str

    def to_dict(self, registry: SectorRegistry) -> dict:
        d = self.cycle.to_dict(registry)
        d.update(gain=self.gain, classification=self.classification)
        return d


@dataclass(frozen=True)
class LoopReport:
    registry: SectorRegistry
    theta: float
    multi_level: bool
    loops: tuple[Loop, ...]

    def find(self, *sectors: str, level: int | None = None) -> Loop | None:
        """The loop visiting exactly ``sectors`` in that cyclic order (first node repeated implicitly)."""
        want = list(sectors)
        for lp in self.loops:
            nodes = lp.cycle.nodes()[:-1]
            if level is not None and any(k != level for _, k in nodes):
                continue
            labels = [self.registry.labels[i] for i, _ in nodes]
            if len(labels) == len(want) and any(labels[r:] + labels[:r] == want for r in range(len(labels))):
                return lp
        return None

    def to_dict(self) -> dict:
        return {"theta": self.theta, "multi_level": self.multi_level,
                "loops": [lp.to_dict(self.registry) for lp in self.loops]}


def _canonical(cycle: list) -> list:
    r = cycle.index(min(cycle))
    return cycle[r:] + cycle[:r]


# Below this size a plain backtracking search beats networkx, whose per-call
# setup dominates on the handful of sectors a profile usually has.
SMALL_GRAPH = 8


def _backtrack_cycles(graph: nx.DiGraph) -> list[list]:
    order = sorted(graph.nodes)
    rank = {v: r for r, v in enumerate(order)}
    succ = {v: sorted(graph.successors(v), key=rank.__getitem__) for v in order}
    found: list[list] = []
    for start in order:
        floor = rank[start]
        path, on_path = [start], {start}

        def walk(v):
            for w in succ[v]:
                if w == start:
                    found.append(list(path))
                elif rank[w] > floor and w not in on_path:
                    path.append(w)
                    on_path.add(w)
                    walk(w)
                    path.pop()
                    on_path.discard(w)

        walk(start)
    return found


def enumerate_cycles(graph: nx.DiGraph) -> list[list]:
    """Simple cycles, self-loops included.

    Each cycle is rotated to start at its smallest node; the list is sorted.
    """
    if graph.number_of_nodes() <= SMALL_GRAPH:
        return sorted(_backtrack_cycles(graph))
    return sorted(_canonical(list(c)) for c in nx.simple_cycles(graph))


def find_loops(profile: CouplingProfile, ops: OperatorConfig | None = None, theta: float = 0.0,
               multi_level: bool = False, tol: float = 1e-9) -> LoopReport:
    """Feedback loops of the thresholded influence network.

    Nodes are ``(sector, level)``.  With ``multi_level`` the lift and lower
    bridges join each sector to itself one level up and down, weighted by the
    configured gains (1.0 each without ``ops``); zero-gain bridges are absent.
    """
    if theta < 0:
        raise ValidationError("theta must be non-negative")
    n = profile.n
    steps: dict[tuple, Step] = {}
    graph = nx.DiGraph()
    cycles: list[list] = []
    for k in range(profile.max_level + 1):
        level_graph = influence_graph(profile, k, theta)
        for i, j, w in level_graph.edges:
            steps[(i, k), (j, k)] = Step(i, j, k, k, w)
        if multi_level:
            graph.add_nodes_from((i, k) for i in range(n))
            graph.add_edges_from(((i, k), (j, k)) for i, j, _ in level_graph.edges)
        elif level_graph.edges:
            # without bridges the levels are disconnected, so each is searched on its own
            cycles += [[(i, k) for i in cyc] for cyc in enumerate_cycles(level_graph.to_networkx())]
    if multi_level:
        lift = np.ones(n) if ops is None else ops.lambda_gain
        lower = np.ones(n) if ops is None else ops.v_gain
        for k in range(profile.max_level):
            for s in range(n):
                if lift[s] != 0:
                    graph.add_edge((s, k), (s, k + 1))
                    steps[(s, k), (s, k + 1)] = Step(s, s, k, k + 1, float(lift[s]), LIFT)
                if lower[s] != 0:
                    graph.add_edge((s, k + 1), (s, k))
                    steps[(s, k + 1), (s, k)] = Step(s, s, k + 1, k, float(lower[s]), LOWER)
        cycles = enumerate_cycles(graph)
    loops = []
    for cyc in cycles:
        path = Pathway(tuple(steps[a, b] for a, b in zip(cyc, cyc[1:] + cyc[:1])))
        loops.append(Loop(path, path.gain, loop_class(path.gain, tol)))
    loops.sort(key=lambda lp: (-lp.gain, lp.cycle.nodes()))
    return LoopReport(profile.registry, theta, multi_level, tuple(loops))


# --- cognitive styles ---------------------------------------------------------------

@dataclass(frozen=True)
class StyleThresholds:
    reactive_drive: float = 0.7
    reactive_reflective_mean: float = 0.5
    deliberative_link: float = 0.6
    inert: float = 0.05
    decay: float = 0.5

    @classmethod
    def from_dict(cls, doc: Mapping) -> "StyleThresholds":
        unknown = set(doc) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValidationError(f"unknown style threshold field(s): {sorted(unknown)}")
        return cls(**{k: float(v) for k, v in doc.items()})


@dataclass(frozen=True)
class Evidence:
    rule: str
    entries: tuple[str, ...]
    values: tuple[float, ...]


@dataclass(frozen=True)
class StyleReport:
    labels: tuple[str, ...]
    evidence: tuple[Evidence, ...]
    notices: tuple[str, ...] = ()

    def to_dict(self) -> dict:
        return {"labels": list(self.labels),
                "evidence": [{"rule": e.rule, "entries": list(e.entries), "values": list(e.values)}
                             for e in self.evidence],
                "notices": list(self.notices)}


def classify_style(profile: CouplingProfile, thresholds: StyleThresholds | None = None) -> StyleReport:
    """Label the profile reactive, deliberative, ruminative-risk and/or inert.

    reactive
        some perceptual->planning coupling at level 0 reaches ``reactive_drive``
        and the mean ``|g|`` of couplings into or out of reflective sectors
        (self-couplings excluded) stays at or below ``reactive_reflective_mean``.
    deliberative
        at some level >= 1 a perceptual->reflective and a reflective->planning
        coupling through the same reflective sector both reach ``deliberative_link``.
    ruminative-risk
        some self-coupling makes a unit's linear growth ``(1 - decay) + g_jj`` exceed 1.
    inert
        every ``|g|`` is below ``inert``.
    """
    th = thresholds or StyleThresholds()
    reg = profile.registry
    labels = reg.labels
    perc, plan, refl = reg.with_role("perceptual"), reg.with_role("planning"), reg.with_role("reflective")
    evidence: list[Evidence] = []
    notices: list[str] = []
    found: list[str] = []
    stack = profile.stack()

    def name(i, j, k):
        return f"{labels[i]}->{labels[j]}@{k}"

    if perc and plan and refl:
        g0 = stack[0]
        p, q = max(((p, q) for p in perc for q in plan), key=lambda pq: g0[pq])
        pairs = [(i, j) for i in range(reg.n) for j in range(reg.n) if i != j and (i in refl or j in refl)]
        mean = float(np.mean([abs(g0[i, j]) for i, j in pairs])) if pairs else 0.0
        if g0[p, q] >= th.reactive_drive and mean <= th.reactive_reflective_mean:
            found.append("reactive")
            evidence.append(Evidence("reactive", (name(p, q, 0), "reflective-coupling-mean@0"),
                                     (float(g0[p, q]), mean)))
        for k in range(1, profile.max_level + 1):
            gk = stack[k]
            hits = [(p, r, q) for r in refl for p in perc for q in plan
                    if gk[p, r] >= th.deliberative_link and gk[r, q] >= th.deliberative_link]
            if hits:
                p, r, q = max(hits, key=lambda prq: (gk[prq[0], prq[1]], gk[prq[1], prq[2]]))
                if "deliberative" not in found:
                    found.append("deliberative")
                evidence.append(Evidence("deliberative", (name(p, r, k), name(r, q, k)),
                                         (float(gk[p, r]), float(gk[r, q]))))
    else:
        missing = [role for role, members in (("perceptual", perc), ("planning", plan), ("reflective", refl))
                   if not members]
        notices.append(f"reactive and deliberative rules skipped: no sector with role(s) {', '.join(missing)}")

    for k in range(profile.max_level + 1):
        for j in range(reg.n):
            growth = (1.0 - th.decay) + stack[k, j, j]
            if growth > 1.0:
                if "ruminative-risk" not in found:
                    found.append("ruminative-risk")
                evidence.append(Evidence("ruminative-risk", (name(j, j, k),), (float(stack[k, j, j]), growth)))

    peak = float(np.max(np.abs(stack))) if stack.size else 0.0
    if peak < th.inert:
        found.append("inert")
        evidence.append(Evidence("inert", ("max|g|",), (peak,)))
    return StyleReport(tuple(found), tuple(evidence), tuple(notices))


# --- perturbations and export -----------------------------------------------------------

def perturb_profile(profile: CouplingProfile,
                    edits: Iterable[tuple[str | int, str | int, int, float]]) -> tuple[CouplingProfile, float]:
    """Apply ``(source, target, level, new_value)`` edits; return the new profile and its Frobenius distance."""
    reg = profile.registry
    stack = profile.stack().copy()
    for src, tgt, level, value in edits:
        if not 0 <= level <= profile.max_level:
            raise ValidationError(f"edit level {level} outside 0..{profile.max_level}")
        value = float(value)
        if not math.isfinite(value) or abs(value) > profile.g_max:
            raise ValidationError(f"edit value {value} outside [-{profile.g_max}, {profile.g_max}]")
        stack[level, reg.index(src), reg.index(tgt)] = value
    keep = set(profile.levels)
    edited_levels = {k for k in range(profile.max_level + 1) if k in keep or np.any(stack[k])}
    edited = CouplingProfile(reg, {k: stack[k] for k in sorted(edited_levels)}, profile.max_level, profile.g_max)
    return edited, frobenius_distance(profile, edited)


def to_dot(graph: InfluenceGraph) -> str:
    """Graphviz DOT text for an influence graph; inhibitory edges are dashed."""
    labels = graph.registry.labels
    lines = [f'digraph "level_{graph.level}" {{']
    lines += [f'  "{lab}";' for lab in labels]
    for i, j, w in graph.edges:
        style = ", style=dashed" if w < 0 else ""
        lines.append(f'  "{labels[i]}" -> "{labels[j]}" [label="{w:g}"{style}];')
    lines.append("}")
    return "\n".join(lines) + "\n"
