"""Propagation of coupling profiles across abstraction levels.

Discrete engine: ``vec(G^(k+1)) = M_k vec(G^(k))`` with ``M_k`` either an
entrywise scale table or a dense ``n^2 x n^2`` map on row-major vectors.

Continuous engine: ``dG/dk = beta(G)`` integrated with classical RK4, plus a
damped Newton root finder for fixed-point profiles and the relevant /
irrelevant classification of single couplings.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np
from numpy.polynomial import polynomial as P

from .core import (
    DEFAULT_G_MAX,
    CouplingMatrix,
    FloatArray,
    SectorRegistry,
    devectorize,
    vectorize,
)
from .errors import IoError, NonFiniteState, NumericalFailure, ParseError, ShapeMismatch, ValidationError

log = logging.getLogger(__name__)

DEFAULT_MODE_TOL = 1e-9


@dataclass(frozen=True, eq=False)
class PropagationOperator:
    """Linear map taking a level-k coupling matrix to level k+1.

    Use :meth:`entrywise` or :meth:`dense` to construct.
    """

    kind: str
    data: FloatArray
    registry: SectorRegistry | None = None

    def __post_init__(self) -> None:
        a = np.array(self.data, dtype=np.float64, copy=True)
        if self.kind == "entrywise":
            if a.ndim != 2 or a.shape[0] != a.shape[1] or a.shape[0] == 0:
                raise ShapeMismatch(f"entrywise factors must be n x n, got {a.shape}")
        elif self.kind == "dense":
            if a.ndim != 2 or a.shape[0] != a.shape[1]:
                raise ShapeMismatch(f"dense operator must be square, got {a.shape}")
            n = math.isqrt(a.shape[0])
            if n * n != a.shape[0] or n == 0:
                raise ShapeMismatch(f"dense operator size {a.shape[0]} is not a perfect square n^2")
        else:
            raise ValidationError(f"unknown operator kind {self.kind!r}")
        if not np.all(np.isfinite(a)):
            raise ValidationError("propagation operator has non-finite entries")
        if self.registry is not None and self.registry.n != (a.shape[0] if self.kind == "entrywise" else math.isqrt(a.shape[0])):
            raise ShapeMismatch("operator size does not match its registry")
        a.setflags(write=False)
        object.__setattr__(self, "data", a)

    @classmethod
    def entrywise(cls, factors, registry: SectorRegistry | None = None) -> "PropagationOperator":
        return cls("entrywise", factors, registry)

    @classmethod
    def dense(cls, matrix, registry: SectorRegistry | None = None) -> "PropagationOperator":
        return cls("dense", matrix, registry)

    @classmethod
    def identity(cls, n: int) -> "PropagationOperator":
        return cls("entrywise", np.ones((n, n)))

    @property
    def n(self) -> int:
        return self.data.shape[0] if self.kind == "entrywise" else math.isqrt(self.data.shape[0])

    def as_dense(self) -> FloatArray:
        if self.kind == "dense":
            return np.array(self.data)
        return np.diag(self.data.reshape(-1))

    def to_dict(self) -> dict:
        key = "factors" if self.kind == "entrywise" else "matrix"
        return {"kind": self.kind, key: self.data.tolist()}

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, PropagationOperator):
            return NotImplemented
        return self.kind == other.kind and np.array_equal(self.data, other.data)


def operator_from_dict(doc: Mapping, registry: SectorRegistry | None = None) -> PropagationOperator:
    if not isinstance(doc, Mapping) or "kind" not in doc:
        raise ParseError("operator document: missing required field 'kind'")
    kind = doc["kind"]
    key = {"entrywise": "factors", "dense": "matrix"}.get(kind)
    if key is None:
        raise ParseError(f"operator document: field 'kind' must be 'entrywise' or 'dense', got {kind!r}")
    if key not in doc:
        raise ParseError(f"operator document: missing required field {key!r}")
    rows = doc[key]
    if not isinstance(rows, list) or len({len(r) if isinstance(r, list) else -1 for r in rows}) > 1:
        raise ShapeMismatch(f"operator document: field {key!r} has ragged rows")
    return PropagationOperator(kind, np.array(rows, dtype=np.float64), registry)


def load_operator(path, registry: SectorRegistry | None = None) -> PropagationOperator:
    try:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise IoError(f"cannot read {path}: {exc.strerror or exc}") from None
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}: line {exc.lineno}: {exc.msg}") from None
    return operator_from_dict(doc, registry)


def _check(m: PropagationOperator, g: CouplingMatrix) -> None:
    if m.n != g.n:
        raise ShapeMismatch(f"operator acts on {m.n} sectors but matrix has {g.n}")


def apply_propagation(m: PropagationOperator, g: CouplingMatrix) -> CouplingMatrix:
    """Propagate ``g`` one level up; the result carries level ``g.level + 1``."""
    _check(m, g)
    if m.kind == "entrywise":
        return CouplingMatrix(m.data * g.entries, g.level + 1)
    return devectorize(m.data @ vectorize(g), g.n, g.level + 1)


def compose_and_apply(ms: Sequence[PropagationOperator], g: CouplingMatrix) -> CouplingMatrix:
    out = g
    for m in ms:
        out = apply_propagation(m, out)
    return out


# --- spectral analysis ----------------------------------------------------------

@dataclass(frozen=True, eq=False)
class ModeClassification:
    eigenvalue: complex
    eigenvector: np.ndarray
    cls: str
    oscillatory: bool = False
    coordinate: tuple[int, int] | None = None

    @property
    def modulus(self) -> float:
        return abs(self.eigenvalue)

    def to_dict(self, registry: SectorRegistry | None = None) -> dict:
        d = {
            "eigenvalue": [self.eigenvalue.real, self.eigenvalue.imag],
            "modulus": self.modulus,
            "class": self.cls,
            "oscillatory": self.oscillatory,
        }
        if self.coordinate is not None:
            i, j = self.coordinate
            d["coupling"] = f"{registry.labels[i]}->{registry.labels[j]}" if registry else [i, j]
        return d


def classify_modulus(modulus: float, tol: float = DEFAULT_MODE_TOL) -> str:
    if abs(modulus - 1.0) <= tol:
        return "fixed"
    return "amplified" if modulus > 1.0 else "damped"


def eigenmodes(m: PropagationOperator | FloatArray, tol: float = DEFAULT_MODE_TOL) -> list[ModeClassification]:
    """All modes of ``m`` sorted by modulus, largest first.

    Entrywise operators are diagonal in the coupling basis: their factors are
    the eigenvalues and the eigenvectors are coordinate vectors.  A bare
    square array is analysed as a dense map of any size.
    """
    if tol <= 0:
        raise ValidationError("mode tolerance must be positive")
    if not isinstance(m, PropagationOperator):
        a = np.asarray(m, dtype=np.float64)
        if a.ndim != 2 or a.shape[0] != a.shape[1] or not np.all(np.isfinite(a)):
            raise ShapeMismatch(f"expected a finite square matrix, got shape {a.shape}")
        m = _RawDense(a)
    modes = []
    if m.kind == "entrywise":
        n2 = m.n * m.n
        for idx, lam in enumerate(m.data.reshape(-1)):
            vec = np.zeros(n2, dtype=complex)
            vec[idx] = 1.0
            modes.append(ModeClassification(complex(lam), vec, classify_modulus(abs(lam), tol),
                                            False, divmod(idx, m.n)))
    else:
        try:
            vals, vecs = np.linalg.eig(m.data)
        except np.linalg.LinAlgError as exc:
            raise NumericalFailure(f"eigendecomposition failed: {exc}") from None
        if not (np.all(np.isfinite(vals)) and np.all(np.isfinite(vecs))):
            raise NumericalFailure("eigendecomposition produced non-finite values")
        for lam, vec in zip(vals, vecs.T):
            vec = vec / np.linalg.norm(vec)
            modes.append(ModeClassification(complex(lam), vec, classify_modulus(abs(lam), tol),
                                            bool(abs(lam.imag) > tol)))
    order = sorted(range(len(modes)), key=lambda i: -modes[i].modulus)
    return [modes[i] for i in order]


@dataclass(frozen=True)
class _RawDense:
    data: FloatArray
    kind: str = "dense"


def spectral_radius(m: PropagationOperator) -> float:
    if m.kind == "entrywise":
        return float(np.max(np.abs(m.data)))
    return float(np.max(np.abs(np.linalg.eigvals(m.data))))


@dataclass(frozen=True, eq=False)
class ConvergenceReport:
    """Outcome of iterating one operator on a starting matrix.

    ``trace[k]`` is ``max |g|`` after ``k`` applications.
    """

    verdict: str
    trace: tuple[float, ...]
    levels_run: int
    limit: CouplingMatrix | None
    unit_modes_excited: bool
    amplified_modes_excited: bool
    note: str = ""

    def to_dict(self) -> dict:
        return {
            "verdict": self.verdict,
            "levels_run": self.levels_run,
            "trace": list(self.trace),
            "unit_modes_excited": self.unit_modes_excited,
            "amplified_modes_excited": self.amplified_modes_excited,
            "limit": None if self.limit is None else self.limit.entries.tolist(),
            "note": self.note,
        }


def _excited(m: PropagationOperator, g0: CouplingMatrix, tol: float) -> tuple[bool, bool]:
    """Whether ``g0`` has a component along unit-modulus / amplified modes."""
    v = vectorize(g0)
    if m.kind == "entrywise":
        mod = np.abs(m.data.reshape(-1))
        live = v != 0
        return bool(np.any(live & (np.abs(mod - 1) <= tol))), bool(np.any(live & (mod > 1 + tol)))
    vals, vecs = np.linalg.eig(m.data)
    coeffs, *_ = np.linalg.lstsq(vecs, v.astype(complex), rcond=None)
    live = np.abs(coeffs) > 1e-12 * max(1.0, float(np.max(np.abs(v))))
    mod = np.abs(vals)
    return bool(np.any(live & (np.abs(mod - 1) <= tol))), bool(np.any(live & (mod > 1 + tol)))


def check_convergence(m: PropagationOperator, g0: CouplingMatrix, max_levels: int, eps: float = 1e-6,
                      g_max: float = DEFAULT_G_MAX, tol: float = DEFAULT_MODE_TOL) -> ConvergenceReport:
    """Iterate ``m`` from ``g0`` and report whether couplings vanish.

    ``converges_to_zero`` when ``max |g| <= eps`` at some level up to
    ``max_levels``; ``diverges`` as soon as ``max |g| > g_max``; otherwise
    ``stalls`` with the last profile as the limit.
    """
    if max_levels < 1:
        raise ValidationError("max_levels must be at least 1")
    if eps <= 0:
        raise ValidationError("eps must be positive")
    _check(m, g0)
    unit, amp = _excited(m, g0, tol)
    trace = []
    g = g0.entries
    dense = m.as_dense() if m.kind == "dense" else None
    for k in range(max_levels + 1):
        peak = float(np.max(np.abs(g)))
        trace.append(peak)
        if peak <= eps:
            return ConvergenceReport("converges_to_zero", tuple(trace), k, None, unit, amp)
        if not math.isfinite(peak) or peak > g_max:
            return ConvergenceReport("diverges", tuple(trace), k, None, unit, amp,
                                     f"max |g| exceeded g_max={g_max} at level {k}")
        if k == max_levels:
            break
        g = m.data * g if dense is None else (dense @ g.reshape(-1)).reshape(g.shape)
    note = "bounded but above eps"
    if unit:
        note = ("unit-modulus modes are excited: couplings persist across levels, which violates the "
                "Coupling Convergence Hypothesis unless the hierarchy is bounded at N")
    elif amp:
        note = "amplified modes are excited; growth would exceed g_max beyond this horizon"
    return ConvergenceReport("stalls", tuple(trace), max_levels, CouplingMatrix(g, g0.level + max_levels),
                             unit, amp, note)


# --- continuous flow ------------------------------------------------------------

def _pair_key(key: str, registry: SectorRegistry | None) -> tuple[int, int]:
    if "->" not in key:
        raise ParseError(f"beta polys key {key!r} must look like 'source->target'")
    a, b = (s.strip() for s in key.split("->", 1))
    if registry is not None:
        return registry.index(a), registry.index(b)
    try:
        return int(a), int(b)
    except ValueError:
        raise ParseError(f"beta polys key {key!r} uses labels but no registry was given") from None


@dataclass(frozen=True, eq=False)
class BetaField:
    """Right-hand side of ``dG/dk = beta(G)``.

    ``linear``: ``beta(G) = (M - I) vec(G)``.  ``tabulated``: each listed
    coupling gets a polynomial in its own value (coefficients ascending);
    unlisted couplings have zero flow.
    """

    kind: str
    n: int
    operator: PropagationOperator | None = None
    polys: Mapping[tuple[int, int], tuple[float, ...]] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.kind == "linear":
            if self.operator is None or self.operator.n != self.n:
                raise ShapeMismatch("linear beta needs an operator of matching size")
        elif self.kind == "tabulated":
            polys = {}
            for (i, j), coeffs in self.polys.items():
                if not (0 <= i < self.n and 0 <= j < self.n):
                    raise ShapeMismatch(f"polynomial for ({i}, {j}) outside {self.n}x{self.n}")
                c = tuple(float(x) for x in coeffs)
                if not all(math.isfinite(x) for x in c):
                    raise ValidationError(f"non-finite polynomial coefficient at ({i}, {j})")
                polys[(int(i), int(j))] = c
            object.__setattr__(self, "polys", polys)
        else:
            raise ValidationError(f"unknown beta kind {self.kind!r}")

    @classmethod
    def linear(cls, operator: PropagationOperator) -> "BetaField":
        return cls("linear", operator.n, operator=operator)

    @classmethod
    def tabulated(cls, n: int, polys: Mapping[tuple[int, int], Sequence[float]]) -> "BetaField":
        return cls("tabulated", n, polys=polys)

    def __call__(self, v: FloatArray) -> FloatArray:
        """Evaluate on a row-major vector of length ``n^2``."""
        v = np.asarray(v, dtype=np.float64)
        if self.kind == "linear":
            if self.operator.kind == "entrywise":
                return (self.operator.data.reshape(-1) - 1.0) * v
            return self.operator.data @ v - v
        out = np.zeros_like(v)
        # overflow far from the origin yields inf, which callers treat as divergence
        with np.errstate(over="ignore", invalid="ignore"):
            for (i, j), coeffs in self.polys.items():
                idx = i * self.n + j
                out[idx] = P.polyval(v[idx], coeffs)
        return out

    def at(self, g: CouplingMatrix) -> CouplingMatrix:
        return devectorize(self(vectorize(g)), self.n, g.level)

    def to_dict(self, registry: SectorRegistry | None = None) -> dict:
        if self.kind == "linear":
            return {"kind": "linear", "operator": self.operator.to_dict()}

        def name(i, j):
            return f"{registry.labels[i]}->{registry.labels[j]}" if registry else f"{i}->{j}"
        return {"kind": "tabulated", "polys": {name(i, j): list(c) for (i, j), c in self.polys.items()}}


def beta_from_dict(doc: Mapping, n: int | None = None, registry: SectorRegistry | None = None) -> BetaField:
    if not isinstance(doc, Mapping) or "kind" not in doc:
        raise ParseError("beta document: missing required field 'kind'")
    if registry is not None:
        n = registry.n
    if doc["kind"] == "linear":
        if "operator" not in doc:
            raise ParseError("beta document: missing required field 'operator'")
        op = operator_from_dict(doc["operator"], registry)
        return BetaField.linear(op)
    if doc["kind"] == "tabulated":
        if "polys" not in doc or not isinstance(doc["polys"], Mapping):
            raise ParseError("beta document: missing required object field 'polys'")
        if n is None:
            raise ParseError("tabulated beta needs the sector count (pass a registry)")
        polys = {_pair_key(k, registry): v for k, v in doc["polys"].items()}
        return BetaField.tabulated(n, polys)
    raise ParseError(f"beta document: unknown kind {doc['kind']!r}")


@dataclass(frozen=True, eq=False)
class FlowTrajectory:
    ks: FloatArray
    profiles: FloatArray  # (len(ks), n, n)

    def at_end(self) -> CouplingMatrix:
        return CouplingMatrix(self.profiles[-1])


def rk4_integrate(f: Callable[[FloatArray], FloatArray], y0: FloatArray, k0: float, k1: float,
                  step: float) -> tuple[FloatArray, FloatArray]:
    """Classical RK4 for an autonomous system on ``[k0, k1]``.

    The step is shrunk uniformly so the last node lands exactly on ``k1``.
    """
    if step <= 0:
        raise ValidationError("step must be positive")
    if not k1 > k0:
        raise ValidationError("k_span must satisfy k1 > k0")
    steps = max(1, math.ceil((k1 - k0) / step - 1e-9))
    h = (k1 - k0) / steps
    ys = np.empty((steps + 1, y0.size))
    ys[0] = y = np.asarray(y0, dtype=np.float64)
    for s in range(steps):
        with np.errstate(over="ignore", invalid="ignore"):
            a = f(y)
            b = f(y + 0.5 * h * a)
            c = f(y + 0.5 * h * b)
            d = f(y + h * c)
            y = y + (h / 6.0) * (a + 2 * b + 2 * c + d)
        if not np.all(np.isfinite(y)):
            raise NonFiniteState(f"state left the finite range at k = {k0 + (s + 1) * h:.6g}")
        ys[s + 1] = y
    return k0 + h * np.arange(steps + 1), ys


def integrate_beta(beta: BetaField, g0: CouplingMatrix, k_span: tuple[float, float], step: float) -> FlowTrajectory:
    if beta.n != g0.n:
        raise ShapeMismatch(f"beta acts on {beta.n} sectors but matrix has {g0.n}")
    ks, ys = rk4_integrate(beta, vectorize(g0), float(k_span[0]), float(k_span[1]), step)
    return FlowTrajectory(ks, ys.reshape(len(ks), g0.n, g0.n))


@dataclass(frozen=True, eq=False)
class FixedPointResult:
    profile_vector: FloatArray
    residual: float
    iterations: int
    converged: bool
    singular_jacobian: bool = False
    message: str = ""

    def matrix(self, n: int) -> CouplingMatrix:
        return devectorize(self.profile_vector, n)

    def to_dict(self) -> dict:
        return {
            "profile_vector": self.profile_vector.tolist(),
            "residual": self.residual,
            "iterations": self.iterations,
            "converged": self.converged,
            "singular_jacobian": self.singular_jacobian,
            "message": self.message,
        }


def fd_jacobian(f: Callable[[FloatArray], FloatArray], v: FloatArray, fv: FloatArray | None = None) -> FloatArray:
    """Forward-difference Jacobian with step ``1e-6 * max(1, |v_i|)``."""
    fv = f(v) if fv is None else fv
    J = np.empty((fv.size, v.size))
    for i in range(v.size):
        h = 1e-6 * max(1.0, abs(v[i]))
        w = v.copy()
        w[i] += h
        J[:, i] = (f(w) - fv) / h
    return J


def find_fixed_point(beta: BetaField, guess: CouplingMatrix, tol: float = 1e-10,
                     max_iter: int = 100) -> FixedPointResult:
    """Solve ``beta(G) = 0`` by damped Newton.

    When the Jacobian is singular the step falls back to the plain fixed-point
    iteration ``G <- G + beta(G)`` and the result records it.
    """
    if tol <= 0:
        raise ValidationError("tol must be positive")
    if beta.n != guess.n:
        raise ShapeMismatch(f"beta acts on {beta.n} sectors but guess has {guess.n}")
    v = vectorize(guess)
    fv = beta(v)
    res = float(np.max(np.abs(fv)))
    singular = False
    for it in range(max_iter + 1):
        if res <= tol:
            return FixedPointResult(v, res, it, True, singular)
        if it == max_iter:
            break
        J = fd_jacobian(beta, v, fv)
        step = None
        if np.linalg.cond(J) < 1e12:
            step = np.linalg.solve(J, -fv)
        else:
            singular = True
        if step is None:
            cand = v + fv
            fc = beta(cand)
        else:
            t = 1.0
            while True:
                cand = v + t * step
                fc = beta(cand)
                if (np.all(np.isfinite(fc)) and np.max(np.abs(fc)) < res) or t < 1e-4:
                    break
                t *= 0.5
        if not (np.all(np.isfinite(cand)) and np.all(np.isfinite(fc))):
            return FixedPointResult(v, res, it + 1, False, singular, "iterate left the finite range")
        v, fv = cand, fc
        res = float(np.max(np.abs(fv)))
    return FixedPointResult(v, res, max_iter, False, singular, f"no root within {max_iter} iterations")


def classify_relevance(beta: BetaField, at: CouplingMatrix, source: int | str, target: int | str,
                       registry: SectorRegistry | None = None, tol: float = 1e-12) -> str:
    """Relevant if the flow pushes the coupling away from zero, irrelevant if toward it.

    A coupling sitting at exactly zero is relevant whenever it has any flow.
    """
    i = registry.index(source) if registry else int(source)
    j = registry.index(target) if registry else int(target)
    b = float(beta.at(at).entries[i, j])
    g = float(at.entries[i, j])
    score = b * math.copysign(1.0, g) if g != 0 else abs(b)
    if score > tol:
        return "relevant"
    if score < -tol:
        return "irrelevant"
    return "marginal"
