"""Coupling profiles: one matrix of sector-to-sector couplings per level.

Orientation is fixed throughout the package: ``entries[i, j]`` is the
coupling from source sector ``i`` to target sector ``j`` (row = source,
column = target).  Vectorization is row-major, so the coupling ``i -> j``
sits at index ``i * n + j``.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from types import MappingProxyType
from typing import Iterable, Mapping, Sequence

import numpy as np
from numpy.typing import NDArray

from .errors import (
    IoError,
    DimensionMismatch,
    LengthMismatch,
    LevelOutOfRange,
    NonFiniteEntry,
    ParseError,
    ShapeMismatch,
    ValidationError,
)

FloatArray = NDArray[np.float64]

DEFAULT_G_MAX = 10.0

ROLE_TAGS = frozenset({
    "perceptual", "planning", "reflective", "execution", "memory",
    "affective", "language-out", "social", "ethical", "creative",
    "knowledge", "goal", "simulation",
})

# Conventional short labels and the role each one plays.
STANDARD_ROLES = {
    "perc": "perceptual",
    "plan": "planning",
    "refl": "reflective",
    "exe": "execution",
    "mem": "memory",
    "narr": "memory",
    "affect": "affective",
    "lang-out": "language-out",
    "social": "social",
    "ethic": "ethical",
    "create": "creative",
    "know": "knowledge",
    "goal": "goal",
    "sim": "simulation",
}


def _frozen(a: FloatArray) -> FloatArray:
    a = np.array(a, dtype=np.float64, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class SectorRegistry:
    """Ordered sector labels with optional role tags."""

    labels: tuple[str, ...]
    roles: Mapping[str, str] = field(default_factory=dict)

    def __post_init__(self) -> None:
        labels = tuple(self.labels)
        if not labels:
            raise ValidationError("registry needs at least one sector")
        for lab in labels:
            if not isinstance(lab, str) or not lab:
                raise ValidationError(f"sector label must be a non-empty string, got {lab!r}")
        if len(set(labels)) != len(labels):
            raise ValidationError(f"duplicate sector labels in {labels}")
        roles = dict(self.roles)
        for lab, role in roles.items():
            if lab not in labels:
                raise ValidationError(f"role given for unknown sector {lab!r}")
            if role not in ROLE_TAGS:
                raise ValidationError(f"unknown role tag {role!r} for sector {lab!r}")
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "roles", MappingProxyType(roles))

    @classmethod
    def standard(cls, labels: Iterable[str]) -> "SectorRegistry":
        """Registry whose roles are inferred from conventional labels."""
        labels = tuple(labels)
        return cls(labels, {lab: STANDARD_ROLES[lab] for lab in labels if lab in STANDARD_ROLES})

    @property
    def n(self) -> int:
        return len(self.labels)

    def index(self, label: str | int) -> int:
        if isinstance(label, (int, np.integer)):
            if not 0 <= label < self.n:
                raise ValidationError(f"sector index {label} out of range for n={self.n}")
            return int(label)
        try:
            return self.labels.index(label)
        except ValueError:
            raise ValidationError(f"unknown sector {label!r}") from None

    def with_role(self, role: str) -> list[int]:
        return [self.labels.index(lab) for lab, r in self.roles.items() if r == role]

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, SectorRegistry):
            return NotImplemented
        return self.labels == other.labels and dict(self.roles) == dict(other.roles)

    def __hash__(self) -> int:
        return hash((self.labels, tuple(sorted(self.roles.items()))))


@dataclass(frozen=True)
class NatureTag:
    """Sign class of one coupling; ``modulatory`` is an inert annotation."""

    kind: str
    modulatory: bool = False


def nature_of(g: float, modulatory: bool = False) -> NatureTag:
    if g > 0:
        return NatureTag("excitatory", modulatory)
    if g < 0:
        return NatureTag("inhibitory", modulatory)
    return NatureTag("null", modulatory)


@dataclass(frozen=True, eq=False)
class CouplingMatrix:
    """One level's n x n coupling matrix (row = source, column = target).

    Entries must be finite.  The magnitude bound ``g_max`` is enforced when a
    matrix is placed into a :class:`CouplingProfile`, so intermediate results
    of propagation may temporarily exceed it.
    """

    entries: FloatArray
    level: int = 0

    def __post_init__(self) -> None:
        try:
            a = np.asarray(self.entries, dtype=np.float64)
        except (TypeError, ValueError) as exc:
            raise DimensionMismatch(f"matrix rows are ragged or non-numeric: {exc}") from None
        if a.ndim != 2 or a.shape[0] != a.shape[1] or a.shape[0] == 0:
            raise DimensionMismatch(f"coupling matrix must be square and non-empty, got shape {a.shape}")
        if not np.all(np.isfinite(a)):
            bad = tuple(int(x) for x in np.argwhere(~np.isfinite(a))[0])
            raise NonFiniteEntry(f"non-finite coupling at {bad} on level {self.level}")
        if int(self.level) < 0:
            raise LevelOutOfRange(f"level must be non-negative, got {self.level}")
        object.__setattr__(self, "entries", _frozen(a))
        object.__setattr__(self, "level", int(self.level))

    @property
    def n(self) -> int:
        return self.entries.shape[0]

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, CouplingMatrix):
            return NotImplemented
        return self.level == other.level and np.array_equal(self.entries, other.entries)

    def __repr__(self) -> str:
        return f"CouplingMatrix(level={self.level}, entries={self.entries.tolist()})"

    def with_level(self, level: int) -> "CouplingMatrix":
        return CouplingMatrix(self.entries, level)


def zero_matrix(n: int, level: int = 0) -> CouplingMatrix:
    return CouplingMatrix(np.zeros((n, n)), level)


@dataclass(frozen=True, eq=False)
class CouplingProfile:
    """The full set of intra-level couplings ``G`` over a shared registry.

    Levels not stored (including all levels above ``max_level``) are read as
    zero matrices.
    """

    registry: SectorRegistry
    matrices: Mapping[int, CouplingMatrix]
    max_level: int
    g_max: float = DEFAULT_G_MAX

    def __post_init__(self) -> None:
        n = self.registry.n
        if not (self.g_max > 0 and math.isfinite(self.g_max)):
            raise ValidationError(f"g_max must be positive and finite, got {self.g_max}")
        if int(self.max_level) < 0:
            raise LevelOutOfRange(f"max_level must be non-negative, got {self.max_level}")
        mats = {}
        for k, m in self.matrices.items():
            k = int(k)
            if not isinstance(m, CouplingMatrix):
                m = CouplingMatrix(m, k)
            if m.level != k:
                m = m.with_level(k)
            if k > self.max_level:
                raise LevelOutOfRange(f"level {k} exceeds max_level {self.max_level}")
            if m.n != n:
                raise DimensionMismatch(f"level {k} matrix is {m.n}x{m.n} but registry has {n} sectors")
            worst = float(np.max(np.abs(m.entries)))
            if worst > self.g_max:
                raise ValidationError(f"level {k} has |g| = {worst} above g_max = {self.g_max}")
            mats[k] = m
        object.__setattr__(self, "matrices", MappingProxyType(dict(sorted(mats.items()))))
        object.__setattr__(self, "max_level", int(self.max_level))
        object.__setattr__(self, "g_max", float(self.g_max))

    @property
    def n(self) -> int:
        return self.registry.n

    @property
    def levels(self) -> tuple[int, ...]:
        return tuple(self.matrices)

    def matrix(self, level: int) -> CouplingMatrix:
        if level < 0:
            raise LevelOutOfRange(f"level must be non-negative, got {level}")
        m = self.matrices.get(level)
        return m if m is not None else zero_matrix(self.n, level)

    def g(self, source: str | int, target: str | int, level: int) -> float:
        return float(self.matrix(level).entries[self.registry.index(source), self.registry.index(target)])

    def stack(self) -> FloatArray:
        """Dense ``(max_level + 1, n, n)`` array with zeros for missing levels."""
        out = np.zeros((self.max_level + 1, self.n, self.n))
        for k, m in self.matrices.items():
            out[k] = m.entries
        return out

    def restrict(self, levels: Iterable[int]) -> "CouplingProfile":
        keep = set(levels)
        return CouplingProfile(self.registry, {k: m for k, m in self.matrices.items() if k in keep},
                               self.max_level, self.g_max)

    def with_matrix(self, matrix: CouplingMatrix) -> "CouplingProfile":
        mats = dict(self.matrices)
        mats[matrix.level] = matrix
        return CouplingProfile(self.registry, mats, max(self.max_level, matrix.level), self.g_max)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, CouplingProfile):
            return NotImplemented
        return (self.registry == other.registry and self.max_level == other.max_level
                and self.g_max == other.g_max and dict(self.matrices) == dict(other.matrices))

    def __repr__(self) -> str:
        return (f"CouplingProfile(sectors={list(self.registry.labels)}, max_level={self.max_level}, "
                f"levels={list(self.levels)})")


def build_profile(registry: SectorRegistry, matrices: Mapping[int, object], max_level: int,
                  g_max: float = DEFAULT_G_MAX) -> CouplingProfile:
    """Validate matrices against ``registry`` and assemble a profile.

    Raises DimensionMismatch, NonFiniteEntry or LevelOutOfRange.
    """
    built = {}
    for k, m in matrices.items():
        k = int(k)
        if k > max_level:
            raise LevelOutOfRange(f"level {k} exceeds max_level {max_level}")
        built[k] = m.with_level(k) if isinstance(m, CouplingMatrix) else CouplingMatrix(m, k)
    return CouplingProfile(registry, built, max_level, g_max)


def _scaled_norm(d: FloatArray) -> float:
    # Scaling by the largest entry keeps tiny differences from underflowing to 0.
    peak = float(np.max(np.abs(d)))
    if peak == 0.0:
        return 0.0
    return peak * math.sqrt(float(np.sum((d / peak) ** 2)))


def frobenius_distance(a: CouplingProfile | CouplingMatrix, b: CouplingProfile | CouplingMatrix) -> float:
    """Frobenius norm of ``a - b`` over matrices or whole profiles.

    For profiles the sum runs over the union of stored levels, missing levels
    counting as zero matrices.
    """
    if isinstance(a, CouplingMatrix) and isinstance(b, CouplingMatrix):
        if a.entries.shape != b.entries.shape:
            raise ShapeMismatch(f"shapes {a.entries.shape} and {b.entries.shape} differ")
        return _scaled_norm(a.entries - b.entries)
    if isinstance(a, CouplingProfile) and isinstance(b, CouplingProfile):
        if a.registry.labels != b.registry.labels:
            raise ShapeMismatch(f"registries differ: {a.registry.labels} vs {b.registry.labels}")
        levels = sorted(set(a.levels) | set(b.levels))
        if not levels:
            return 0.0
        return _scaled_norm(np.stack([a.matrix(k).entries - b.matrix(k).entries for k in levels]))
    raise ShapeMismatch(f"cannot compare {type(a).__name__} with {type(b).__name__}")


def vectorize(m: CouplingMatrix | FloatArray) -> FloatArray:
    entries = m.entries if isinstance(m, CouplingMatrix) else np.asarray(m, dtype=np.float64)
    return entries.reshape(-1).copy()


def devectorize(v: Sequence[float] | FloatArray, registry: SectorRegistry | int, level: int = 0) -> CouplingMatrix:
    n = registry if isinstance(registry, int) else registry.n
    v = np.asarray(v, dtype=np.float64).reshape(-1)
    if v.size != n * n:
        raise LengthMismatch(f"vector of length {v.size} cannot fill a {n}x{n} matrix")
    return CouplingMatrix(v.reshape(n, n), level)


# --- JSON --------------------------------------------------------------------

def profile_to_dict(p: CouplingProfile) -> dict:
    doc = {
        "sectors": list(p.registry.labels),
        "roles": dict(p.registry.roles),
        "max_level": p.max_level,
        "levels": {str(k): m.entries.tolist() for k, m in p.matrices.items()},
    }
    if p.g_max != DEFAULT_G_MAX:
        doc["g_max"] = p.g_max
    return doc


def serialize_profile(p: CouplingProfile, indent: int | None = 2) -> str:
    return json.dumps(profile_to_dict(p), indent=indent)


def _require(doc: Mapping, key: str, kind: type | tuple, where: str = "document"):
    if key not in doc:
        raise ParseError(f"{where}: missing required field {key!r}")
    val = doc[key]
    if not isinstance(val, kind) or isinstance(val, bool):
        raise ParseError(f"{where}: field {key!r} has type {type(val).__name__}")
    return val


def _matrix_rows(rows, field_name: str) -> FloatArray:
    if not isinstance(rows, list) or not all(isinstance(r, list) for r in rows):
        raise ParseError(f"field {field_name!r} must be an array of row arrays")
    widths = {len(r) for r in rows}
    if len(widths) > 1:
        raise DimensionMismatch(f"field {field_name!r} has ragged rows (widths {sorted(widths)})")
    for r in rows:
        for x in r:
            if not isinstance(x, (int, float)) or isinstance(x, bool):
                raise ParseError(f"field {field_name!r} contains non-numeric value {x!r}")
    return np.array(rows, dtype=np.float64)


def profile_from_dict(doc: Mapping) -> CouplingProfile:
    if not isinstance(doc, Mapping):
        raise ParseError("profile document must be a JSON object")
    sectors = _require(doc, "sectors", list)
    roles = doc.get("roles", {}) or {}
    if not isinstance(roles, Mapping):
        raise ParseError("field 'roles' must be an object")
    max_level = _require(doc, "max_level", int)
    levels = _require(doc, "levels", Mapping)
    g_max = doc.get("g_max", DEFAULT_G_MAX)
    mats = {}
    for key, rows in levels.items():
        try:
            k = int(key)
        except ValueError:
            raise ParseError(f"levels: key {key!r} is not an integer level") from None
        mats[k] = _matrix_rows(rows, f"levels.{key}")
    registry = SectorRegistry(tuple(sectors), dict(roles))
    return build_profile(registry, mats, max_level, g_max)


def parse_profile(text: str) -> CouplingProfile:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParseError(f"line {exc.lineno} column {exc.colno}: {exc.msg}") from None
    return profile_from_dict(doc)


def load_profile(path) -> CouplingProfile:
    try:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise IoError(f"cannot read {path}: {exc.strerror or exc}") from None
    try:
        return parse_profile(text)
    except ParseError as exc:
        raise ParseError(f"{path}: {exc}") from None
