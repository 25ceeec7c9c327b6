"""Estimating couplings from event logs, inferring propagation operators and
checking propagation consistency.

The pipeline follows three phases: pair source events with target responses
inside a time window, fit a per-mode model whose slope is the coupling
estimate, then validate (bootstrap intervals, held-out scoring with a
permutation p-value).  Modes:

``gated``
    logistic model ``P(response | x) = sigmoid(b0 + g x)`` fit by IRLS.
``outcome``
    least squares of a response feature on ``x`` over answered stimuli.
``parameter``
    least squares of a named response attribute on ``x``.
"""

from __future__ import annotations

import bisect
import logging
import math
from dataclasses import dataclass, field
from typing import Iterable, Mapping, NamedTuple, Sequence

import numpy as np
from scipy import stats

from .core import CouplingMatrix, FloatArray, SectorRegistry, frobenius_distance, vectorize
from .errors import (
    EmptyLog,
    InsufficientData,
    NonIdentifiable,
    NumericalFailure,
    RankDeficient,
    Separation,
    ShapeMismatch,
    ValidationError,
)
from .events import Event, EventLog
from .propagation import PropagationOperator, apply_propagation

log = logging.getLogger(__name__)

MODES = ("gated", "outcome", "parameter")
MIN_PAIRS = 10


@dataclass(frozen=True)
class EstimationSpec:
    source: str
    target: str
    level: int
    mode: str = "gated"
    window: float = 0.5
    feature: str = "magnitude"
    response_feature: str = "magnitude"
    stimulus_kind: str | None = None
    response_kind: str | None = None
    stratify_by: str | None = None

    def __post_init__(self) -> None:
        if self.mode not in MODES:
            raise ValidationError(f"mode must be one of {MODES}, got {self.mode!r}")
        if not self.window > 0:
            raise ValidationError("window must be positive")
        if self.level < 0:
            raise ValidationError("level must be non-negative")
        if self.mode == "parameter" and self.response_feature in ("magnitude", "latency"):
            raise ValidationError("parameter mode needs response_feature to name a response attribute")


@dataclass(frozen=True)
class PairedInteraction:
    stimulus: Event
    response: Event | None = None
    latency: float | None = None

    @property
    def answered(self) -> bool:
        return self.response is not None


def _matches(e: Event, sector: str, level: int, kind: str | None) -> bool:
    return e.sector == sector and e.level == level and (kind is None or e.kind == kind)


def pair_events(log: EventLog | Sequence[Event], spec: EstimationSpec) -> list[PairedInteraction]:
    """Pair each source event with at most one later target event.

    Responses are visited in time order and claimed by the nearest unclaimed
    stimulus that precedes them by at most ``window``; each response is used
    once.  Unclaimed stimuli become unanswered pairs.
    """
    if not log:
        raise EmptyLog("event log is empty")
    stimuli = [e for e in log if _matches(e, spec.source, spec.level, spec.stimulus_kind)]
    responses = [e for e in log if _matches(e, spec.target, spec.level, spec.response_kind)]
    times = [s.t for s in stimuli]
    claimed: dict[int, Event] = {}
    for r in responses:
        i = bisect.bisect_left(times, r.t) - 1
        while i >= 0 and r.t - stimuli[i].t <= spec.window + 1e-12:
            if i not in claimed and stimuli[i] is not r:
                claimed[i] = r
                break
            i -= 1
    out = []
    for i, s in enumerate(stimuli):
        r = claimed.get(i)
        out.append(PairedInteraction(s, r, None if r is None else r.t - s.t))
    return out


@dataclass(frozen=True)
class EstimateResult:
    g_hat: float
    stderr: float
    ci95: tuple[float, float]
    n_pairs: int
    fit: Mapping[str, float]
    intercept: float = 0.0
    mode: str = "gated"
    holdout: Mapping[str, float] | None = None

    def to_dict(self) -> dict:
        return {"g_hat": self.g_hat, "stderr": self.stderr, "ci95": list(self.ci95), "n_pairs": self.n_pairs,
                "intercept": self.intercept, "mode": self.mode, "fit": dict(self.fit),
                "holdout": None if self.holdout is None else dict(self.holdout)}


def _value(e: Event, name: str, latency: float | None = None) -> float:
    if name == "magnitude":
        return e.magnitude
    if name == "latency":
        return float(latency)
    try:
        return float(e.attrs[name])
    except KeyError:
        raise ValidationError(f"event at t={e.t} has no attribute {name!r}") from None


def design(pairs: Sequence[PairedInteraction], spec: EstimationSpec) -> tuple[FloatArray, FloatArray]:
    """Regressor and response vectors for the requested estimation mode."""
    if spec.mode == "gated":
        x = np.array([_value(p.stimulus, spec.feature) for p in pairs], dtype=float)
        y = np.array([1.0 if p.answered else 0.0 for p in pairs])
        return x, y
    pos = [p for p in pairs if p.answered]
    x = np.array([_value(p.stimulus, spec.feature) for p in pos], dtype=float)
    y = np.array([_value(p.response, spec.response_feature, p.latency) for p in pos], dtype=float)
    return x, y


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def _loglik(b0: float, b1: float, x: FloatArray, y: FloatArray) -> float:
    z = b0 + b1 * x
    # log sigmoid(z) = -logaddexp(0, -z)
    return float(-np.sum(y * np.logaddexp(0, -z) + (1 - y) * np.logaddexp(0, z)))


def logistic_fit(x: FloatArray, y: FloatArray, max_iter: int = 100, tol: float = 1e-10):
    """Maximum-likelihood intercept and slope by Newton/IRLS.

    Returns ``(b0, b1, cov)`` with ``cov`` the inverse Fisher information.
    """
    if np.all(y == y[0]):
        raise NonIdentifiable("response outcome is constant; the gating slope is not identifiable")
    hi0, lo1 = x[y == 0].max(), x[y == 1].min()
    hi1, lo0 = x[y == 1].max(), x[y == 0].min()
    if hi0 <= lo1:
        raise Separation("responses perfectly separated by the stimulus feature", +1)
    if hi1 <= lo0:
        raise Separation("responses perfectly separated by the stimulus feature", -1)
    X = np.column_stack([np.ones_like(x), x])
    beta = np.zeros(2)
    beta[0] = math.log(y.mean() / (1 - y.mean()))
    for _ in range(max_iter):
        p = _sigmoid(X @ beta)
        w = p * (1 - p)
        H = X.T @ (X * w[:, None])
        delta = np.linalg.solve(H, X.T @ (y - p))
        beta += delta
        if np.max(np.abs(delta)) < tol:
            break
    else:
        raise NumericalFailure("IRLS did not converge")
    p = _sigmoid(X @ beta)
    cov = np.linalg.inv(X.T @ (X * (p * (1 - p))[:, None]))
    return float(beta[0]), float(beta[1]), cov


def batched_logistic_slopes(xs: FloatArray, ys: FloatArray, max_iter: int = 100, tol: float = 1e-10) -> FloatArray:
    """Logistic slopes for each row of ``(B, n)`` data, solved jointly.

    A row gives NaN when its outcomes are separated or constant, or when Newton stalls.
    """
    hi0 = np.where(ys == 0, xs, -np.inf).max(axis=1)
    lo1 = np.where(ys == 1, xs, np.inf).min(axis=1)
    hi1 = np.where(ys == 1, xs, -np.inf).max(axis=1)
    lo0 = np.where(ys == 0, xs, np.inf).min(axis=1)
    ok = (hi0 > lo1) & (hi1 > lo0)
    xs, ys = xs[ok], ys[ok]
    rate = ys.mean(axis=1)
    b0 = np.log(rate / (1 - rate))
    b1 = np.zeros_like(b0)
    done = np.zeros(b0.shape, dtype=bool)
    for _ in range(max_iter):
        p = _sigmoid(b0[:, None] + b1[:, None] * xs)
        w = p * (1 - p)
        h00, h01, h11 = w.sum(axis=1), (w * xs).sum(axis=1), (w * xs * xs).sum(axis=1)
        r = ys - p
        g0, g1 = r.sum(axis=1), (r * xs).sum(axis=1)
        det = h00 * h11 - h01 * h01
        d0 = (h11 * g0 - h01 * g1) / det
        d1 = (h00 * g1 - h01 * g0) / det
        d0[done], d1[done] = 0.0, 0.0
        b0 += d0
        b1 += d1
        done |= np.maximum(np.abs(d0), np.abs(d1)) < tol
        if done.all():
            break
    out = np.full(ok.shape, np.nan)
    out[np.flatnonzero(ok)[done]] = b1[done]
    return out


def ols_fit(x: FloatArray, y: FloatArray):
    """Least-squares intercept, slope, slope stderr and R^2."""
    X = np.column_stack([np.ones_like(x), x])
    (b0, b1), *_ = np.linalg.lstsq(X, y, rcond=None)
    resid = y - (b0 + b1 * x)
    n = x.size
    sxx = float(np.sum((x - x.mean()) ** 2))
    s2 = float(resid @ resid) / (n - 2) if n > 2 else 0.0
    sst = float(np.sum((y - y.mean()) ** 2))
    r2 = 1.0 - float(resid @ resid) / sst if sst > 0 else 1.0
    return float(b0), float(b1), math.sqrt(s2 / sxx), r2


def _fit_xy(x: FloatArray, y: FloatArray, mode: str, min_pairs: int = MIN_PAIRS) -> EstimateResult:
    n = x.size
    if n < min_pairs:
        raise InsufficientData(f"{n} usable pairs, need at least {min_pairs}")
    if np.ptp(x) == 0:
        raise NonIdentifiable("regressor has zero variance")
    if mode == "gated":
        b0, b1, cov = logistic_fit(x, y)
        se = math.sqrt(max(cov[1, 1], 0.0))
        z = stats.norm.ppf(0.975)
        pval = float(2 * stats.norm.sf(abs(b1) / se)) if se > 0 else 0.0
        return EstimateResult(b1, se, (b1 - z * se, b1 + z * se), n,
                              {"loglik": _loglik(b0, b1, x, y), "p_value": pval}, b0, mode)
    b0, b1, se, r2 = ols_fit(x, y)
    q = stats.t.ppf(0.975, max(n - 2, 1))
    pval = float(2 * stats.t.sf(abs(b1) / se, n - 2)) if se > 0 else 0.0
    return EstimateResult(b1, se, (b1 - q * se, b1 + q * se), n, {"r2": r2, "p_value": pval}, b0, mode)


def fit_coupling(pairs: Sequence[PairedInteraction], spec: EstimationSpec,
                 min_pairs: int = MIN_PAIRS) -> EstimateResult:
    """Fit the requested estimation mode; the slope is the coupling estimate.

    Too few pairs raise InsufficientData and a constant regressor raises
    NonIdentifiable.  In gated mode perfectly separated classes raise
    Separation, which carries the slope's sign.
    """
    x, y = design(pairs, spec)
    return _fit_xy(x, y, spec.mode, min_pairs)


def fit_stratified(pairs: Sequence[PairedInteraction], spec: EstimationSpec,
                   min_pairs: int = MIN_PAIRS) -> dict[str, EstimateResult | Exception]:
    """Separate fits per value of the stimulus attribute ``spec.stratify_by``."""
    if spec.stratify_by is None:
        raise ValidationError("spec.stratify_by is not set")
    groups: dict[str, list[PairedInteraction]] = {}
    for p in pairs:
        groups.setdefault(str(p.stimulus.attrs.get(spec.stratify_by)), []).append(p)
    out: dict[str, EstimateResult | Exception] = {}
    for key, group in sorted(groups.items()):
        try:
            out[key] = fit_coupling(group, spec, min_pairs)
        except (ValidationError, NumericalFailure) as exc:
            out[key] = exc
    return out


class BootstrapCI(NamedTuple):
    lo: float
    hi: float
    stderr: float


def bootstrap_ci(pairs: Sequence[PairedInteraction], spec: EstimationSpec, B: int = 1000, seed: int = 42,
                 min_pairs: int = MIN_PAIRS) -> BootstrapCI:
    """Percentile 95% interval from ``B`` resamples of the pairs.

    Resamples whose refit fails (constant regressor, separation) are dropped.
    """
    if B < 100:
        raise ValidationError("bootstrap needs B >= 100")
    x, y = design(pairs, spec)
    n = x.size
    if n < min_pairs:
        raise InsufficientData(f"{n} usable pairs, need at least {min_pairs}")
    rng = np.random.default_rng(seed)
    idx = rng.integers(0, n, size=(B, n))
    if spec.mode == "gated":
        slopes = batched_logistic_slopes(x[idx], y[idx])
        slopes = slopes[np.isfinite(slopes)]
    else:
        xs, ys = x[idx], y[idx]
        xc = xs - xs.mean(axis=1, keepdims=True)
        yc = ys - ys.mean(axis=1, keepdims=True)
        sxx = np.sum(xc * xc, axis=1)
        ok = sxx > 0
        slopes = np.sum(xc * yc, axis=1)[ok] / sxx[ok]
    if slopes.size < B // 2:
        raise NumericalFailure(f"only {slopes.size} of {B} bootstrap refits succeeded")
    if slopes.size < B:
        log.info("bootstrap: %d of %d resamples dropped", B - slopes.size, B)
    lo, hi = np.percentile(slopes, [2.5, 97.5])
    return BootstrapCI(float(lo), float(hi), float(np.std(slopes, ddof=1)))


def validate_holdout(pairs: Sequence[PairedInteraction], spec: EstimationSpec, split: float = 0.3,
                     seed: int = 42, n_perm: int = 200, min_pairs: int = MIN_PAIRS) -> dict:
    """Fit on a training split and score on the held-out fraction ``split``.

    Gated: log-likelihood gain over an intercept-only model and accuracy at
    0.5.  Outcome/parameter: test R^2.  The p-value comes from ``n_perm``
    shuffles of the held-out responses.
    """
    if not 0 < split < 1:
        raise ValidationError("split must lie in (0, 1)")
    x, y = design(pairs, spec)
    n = x.size
    rng = np.random.default_rng(seed)
    order = rng.permutation(n)
    n_test = int(round(split * n))
    test, train = order[:n_test], order[n_test:]
    if train.size < min_pairs or test.size < min_pairs:
        raise InsufficientData(f"split leaves {train.size} train / {test.size} test pairs; need {min_pairs} each")
    fit = _fit_xy(x[train], y[train], spec.mode, min_pairs)
    xt, yt = x[test], y[test]

    if spec.mode == "gated":
        rate = float(np.clip(y[train].mean(), 1e-12, 1 - 1e-12))
        null_b0 = math.log(rate / (1 - rate))

        def metric(labels):
            return _loglik(fit.intercept, fit.g_hat, xt, labels) - _loglik(null_b0, 0.0, xt, labels)
        name = "loglik_improvement"
    else:
        pred = fit.intercept + fit.g_hat * xt

        def metric(labels):
            sst = float(np.sum((labels - labels.mean()) ** 2))
            sse = float(np.sum((labels - pred) ** 2))
            return 1.0 - sse / sst if sst > 0 else (1.0 if sse == 0 else -math.inf)
        name = "r2"
    value = metric(yt)
    perms = np.array([metric(rng.permutation(yt)) for _ in range(n_perm)])
    out = {"metric": name, "value": value, "p_value": float((1 + np.sum(perms >= value)) / (n_perm + 1)),
           "n_train": int(train.size), "n_test": int(test.size)}
    if spec.mode == "gated":
        prob = _sigmoid(fit.intercept + fit.g_hat * xt)
        out["accuracy"] = float(np.mean((prob >= 0.5) == (yt == 1)))
    return out


# --- whole-profile estimation -----------------------------------------------------

@dataclass(frozen=True, eq=False)
class ProfileEstimate:
    """Per-entry estimates at one level; absent entries are NaN in ``raw``."""

    registry: SectorRegistry
    level: int
    mode: str
    raw: FloatArray
    flags: Mapping[str, str]
    results: Mapping[tuple[int, int], EstimateResult]
    calibration: tuple[float, float] | None = None  # raw = slope * g + intercept

    @property
    def available(self) -> FloatArray:
        return np.isfinite(self.raw)

    @property
    def calibrated(self) -> FloatArray:
        if self.calibration is None:
            return self.raw.copy()
        a, b = self.calibration
        return (self.raw - b) / a

    def matrix(self) -> CouplingMatrix:
        """Calibrated estimates with absent entries written as 0 (see ``flags``)."""
        return CouplingMatrix(np.nan_to_num(self.calibrated, nan=0.0), self.level)

    def to_dict(self) -> dict:
        return {
            "sectors": list(self.registry.labels),
            "roles": dict(self.registry.roles),
            "max_level": self.level,
            "levels": {str(self.level): self.matrix().entries.tolist()},
            "flags": dict(self.flags),
            "calibration": None if self.calibration is None else
            {"slope": self.calibration[0], "intercept": self.calibration[1]},
            "raw": [[None if not math.isfinite(v) else v for v in row] for row in self.raw.tolist()],
        }


def affine_calibration(raw: FloatArray, anchors: Mapping[tuple[int, int], float]) -> tuple[float, float]:
    """Least-squares ``raw = slope * g + intercept`` over anchor entries."""
    gs, rs = [], []
    for (i, j), g in anchors.items():
        if math.isfinite(raw[i, j]):
            gs.append(g)
            rs.append(raw[i, j])
    if len(set(gs)) < 2:
        raise InsufficientData("calibration needs at least two available anchors with distinct values")
    slope, intercept = np.polyfit(gs, rs, 1)
    if slope == 0:
        raise NonIdentifiable("calibration slope is zero")
    return float(slope), float(intercept)


def estimate_profile(log: EventLog | Sequence[Event], registry: SectorRegistry, level: int, mode: str = "gated",
                     window: float = 0.5, anchors: Mapping[tuple[str | int, str | int], float] | None = None,
                     stimulus_kind: str | None = None, response_kind: str | None = None,
                     feature: str = "magnitude", response_feature: str = "magnitude",
                     min_pairs: int = MIN_PAIRS) -> ProfileEstimate:
    """Estimate every ordered sector pair at ``level``.

    Entries whose fit fails are flagged (``insufficient_data``,
    ``non_identifiable``, ``separation``) and left absent.  With ``anchors``
    (known true couplings) an affine calibration maps raw slopes onto the
    coupling scale.
    """
    if not log:
        raise EmptyLog("event log is empty")
    n = registry.n
    raw = np.full((n, n), np.nan)
    flags, results = {}, {}
    for i, src in enumerate(registry.labels):
        for j, tgt in enumerate(registry.labels):
            spec = EstimationSpec(src, tgt, level, mode, window, feature, response_feature,
                                  stimulus_kind, response_kind)
            key = f"{src}->{tgt}"
            try:
                res = fit_coupling(pair_events(log, spec), spec, min_pairs)
            except InsufficientData:
                flags[key] = "insufficient_data"
            except NonIdentifiable:
                flags[key] = "non_identifiable"
            except Separation:
                flags[key] = "separation"
            except NumericalFailure:
                flags[key] = "numerical_failure"
            else:
                raw[i, j] = res.g_hat
                results[(i, j)] = res
                flags[key] = "ok"
    calibration = None
    if anchors:
        idx = {(registry.index(a), registry.index(b)): float(g) for (a, b), g in anchors.items()}
        calibration = affine_calibration(raw, idx)
    return ProfileEstimate(registry, level, mode, raw, flags, results, calibration)


# --- propagation inference and diagnostics --------------------------------------------

@dataclass(frozen=True, eq=False)
class InferredOperator:
    operator: PropagationOperator
    residual: float
    undefined: tuple[tuple[int, int], ...] = ()

    def to_dict(self, registry: SectorRegistry | None = None) -> dict:
        def name(i, j):
            return f"{registry.labels[i]}->{registry.labels[j]}" if registry else [i, j]
        return {"operator": self.operator.to_dict(), "residual": self.residual,
                "ratio_undefined": [name(i, j) for i, j in self.undefined]}


def infer_propagation(gk: CouplingMatrix, gk1: CouplingMatrix, model: str = "entrywise",
                      extra_pairs: Iterable[tuple[CouplingMatrix, CouplingMatrix]] = (),
                      eps_div: float = 1e-9) -> InferredOperator:
    """Recover the level-k propagation operator from observed profiles.

    ``entrywise``: ratio ``gk1 / gk`` per entry; entries with ``|gk| <= eps_div``
    are flagged undefined and given factor 1.  ``dense-lsq``: least squares
    over all supplied ``(G^(k), G^(k+1))`` pairs, which must span ``n^2``
    dimensions.  The residual is the 2-norm of the misfit over every pair.
    """
    if gk.entries.shape != gk1.entries.shape:
        raise ShapeMismatch(f"shapes {gk.entries.shape} and {gk1.entries.shape} differ")
    n = gk.n
    if model == "entrywise":
        a, b = gk.entries, gk1.entries
        defined = np.abs(a) > eps_div
        factors = np.ones_like(a)
        factors[defined] = b[defined] / a[defined]
        op = PropagationOperator.entrywise(factors)
        undefined = tuple((int(i), int(j)) for i, j in zip(*np.nonzero(~defined)))
        residual = float(np.linalg.norm(factors * a - b))
        return InferredOperator(op, residual, undefined)
    if model != "dense-lsq":
        raise ValidationError(f"model must be 'entrywise' or 'dense-lsq', got {model!r}")
    pairs = [(gk, gk1), *extra_pairs]
    for p, q in pairs:
        if p.entries.shape != (n, n) or q.entries.shape != (n, n):
            raise ShapeMismatch("all profile pairs must share the registry size")
    X = np.array([vectorize(p) for p, _ in pairs])
    Y = np.array([vectorize(q) for _, q in pairs])
    rank = np.linalg.matrix_rank(X)
    if rank < n * n:
        raise RankDeficient(f"profile pairs span {rank} of {n * n} dimensions")
    Mt, *_ = np.linalg.lstsq(X, Y, rcond=None)
    residual = float(np.linalg.norm(X @ Mt - Y))
    return InferredOperator(PropagationOperator.dense(Mt.T), residual)


@dataclass(frozen=True, eq=False)
class DiagnosticReport:
    predicted: CouplingMatrix
    actual: CouplingMatrix
    deviation: float
    tau: float
    alert: bool
    worst_entries: tuple[tuple[str, str, float], ...]

    def to_dict(self) -> dict:
        return {"predicted": self.predicted.entries.tolist(), "actual": self.actual.entries.tolist(),
                "deviation": self.deviation, "tau": self.tau, "alert": self.alert,
                "worst_entries": [list(w) for w in self.worst_entries]}


def diagnose(predicted: CouplingMatrix, actual: CouplingMatrix, tau: float,
             registry: SectorRegistry | None = None) -> DiagnosticReport:
    if tau <= 0:
        raise ValidationError("tau must be positive")
    deviation = frobenius_distance(predicted, actual)
    diff = np.abs(predicted.entries - actual.entries)
    n = diff.shape[0]
    order = np.argsort(-diff, axis=None, kind="stable")[:3]
    labels = registry.labels if registry else tuple(str(i) for i in range(n))
    worst = tuple((labels[i], labels[j], float(diff[i, j])) for i, j in (divmod(int(o), n) for o in order))
    return DiagnosticReport(predicted, actual, deviation, tau, deviation > tau, worst)


def predict_and_diagnose(m: PropagationOperator, gk: CouplingMatrix, actual_gk1: CouplingMatrix, tau: float,
                         registry: SectorRegistry | None = None) -> DiagnosticReport:
    """Compare the propagated prediction with the measured next level; alert when the gap exceeds ``tau``."""
    if actual_gk1.entries.shape != gk.entries.shape:
        raise ShapeMismatch(f"shapes {gk.entries.shape} and {actual_gk1.entries.shape} differ")
    return diagnose(apply_propagation(m, gk), actual_gk1, tau, registry)
