import json
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from scl.core import CouplingProfile, SectorRegistry, build_profile
from scl.dynamics import (
    PRESETS,
    ActivationState,
    OperatorConfig,
    StimulusScript,
    emit_log,
    extended_reactive_profile,
    gated_emission_log,
    get_scenario,
    run_scenario,
    simulate,
    step,
)
from scl.errors import IoError, ShapeMismatch, UnknownScenario, ValidationError
from scl.events import Event, read_log


def one_sector(g_self, levels=1):
    reg = SectorRegistry(("s",))
    return build_profile(reg, {k: [[g_self]] for k in range(levels)}, levels - 1)


def reference_step(a, G, lam, v, decay, u, input_gain, a_max, logistic=False):
    """Scalar-loop restatement of the update rule."""
    levels, n = a.shape
    out = np.zeros_like(a)
    for k in range(levels):
        for j in range(n):
            x = (1 - decay[k][j]) * a[k][j]
            x += sum(G[k][i][j] * a[k][i] for i in range(n))
            if k > 0:
                x += lam[j] * a[k - 1][j]
            if k + 1 < levels:
                x += v[j] * a[k + 1][j]
            x += input_gain * u[k][j]
            if logistic:
                x = 1 / (1 + math.exp(-x))
            out[k][j] = min(max(x, 0.0), a_max)
    return out


class TestStep:
    def test_decay_only(self):
        s = step(ActivationState(0, np.array([[0.4]])), one_sector(0.0), OperatorConfig.uniform(1, decay=0.5))
        assert s.a[0, 0] == pytest.approx(0.2)
        assert s.t == 1

    def test_growth_factor(self):
        s = step(ActivationState(0, np.array([[0.1]])), one_sector(1.2), OperatorConfig.uniform(1, decay=0.1))
        assert s.a[0, 0] == pytest.approx(0.21)

    def test_clamp(self):
        s = step(ActivationState(0, np.array([[1.0]])), one_sector(4.5), OperatorConfig.uniform(1, decay=0.5))
        assert s.a[0, 0] == 1.0

    def test_shape_mismatch(self):
        with pytest.raises(ShapeMismatch):
            step(ActivationState.zeros(2, 1), one_sector(0.0), OperatorConfig.uniform(1))

    def test_config_validation(self):
        with pytest.raises(ValidationError):
            OperatorConfig.uniform(2, decay=1.5)
        with pytest.raises(ValidationError):
            OperatorConfig.uniform(2, lambda_gain=-0.1)
        with pytest.raises(ValidationError):
            OperatorConfig.uniform(2, event_threshold=2.0)

    @given(st.integers(1, 3), st.integers(1, 3), st.data(), st.booleans())
    def test_matches_scalar_reference(self, n, levels, data, logistic):
        unit = st.floats(0, 1)
        arr = lambda shape, el: np.array(data.draw(st.lists(el, min_size=int(np.prod(shape)),  # noqa: E731
                                                            max_size=int(np.prod(shape))))).reshape(shape)
        a = arr((levels, n), unit)
        G = arr((levels, n, n), st.floats(-2, 2))
        lam, v = arr((n,), st.floats(0, 1)), arr((n,), st.floats(0, 1))
        decay = arr((levels, n), unit)
        u = arr((levels, n), st.floats(-1, 1))
        reg = SectorRegistry(tuple(f"s{i}" for i in range(n)))
        profile = CouplingProfile(reg, dict(enumerate(G)), levels - 1)
        ops = OperatorConfig(lam, v, decay, 0.7, "logistic" if logistic else "relu_clamp", 1.5)
        got = step(ActivationState(0, a), profile, ops, u).a
        want = reference_step(a, G, lam, v, decay, u, 0.7, 1.5, logistic)
        np.testing.assert_allclose(got, want, atol=1e-12)
        assert np.all((got >= 0) & (got <= 1.5))


class TestSimulate:
    def test_zero_profile_is_silent(self):
        reg = SectorRegistry.standard(["perc", "plan"])
        trace = simulate(build_profile(reg, {}, 1), OperatorConfig.uniform(2, 0.5, 0.5), (), ticks=30)
        assert np.all(trace.snapshots == 0)
        assert trace.events == ()

    def test_reflex_exe_within_three_ticks(self):
        trace = run_scenario("reflex-arc")
        assert trace.first_event_tick("exe") <= 3

    def test_latency_ordering(self):
        assert run_scenario("reflex-arc").first_event_tick("exe") < run_scenario("deliberative-cycle").first_event_tick("exe")

    def test_deliberative_route_goes_through_level_one(self):
        trace = run_scenario("deliberative-cycle")
        assert trace.first_event_tick("refl", 1) is not None
        assert trace.first_event_tick("plan", 1) < trace.first_event_tick("exe", 0)

    def test_rumination_runaway(self):
        trace = run_scenario("rumination")
        a = trace.activation("refl", 1)
        top = int(np.argmax(a >= 1.0))
        assert top > 0 and np.all(np.diff(a[: top + 1]) > 0)
        assert np.all(a[top:] == 1.0)
        assert trace.runaway_flag and ("refl", 1) in trace.runaway

    @pytest.mark.parametrize("name", sorted(PRESETS))
    def test_presets_are_deterministic_and_bounded(self, name):
        a, b = run_scenario(name, seed=7, noise_std=0.05), run_scenario(name, seed=7, noise_std=0.05)
        assert np.array_equal(a.snapshots, b.snapshots) and a.events == b.events
        ops = get_scenario(name).ops
        assert np.all((a.snapshots >= 0) & (a.snapshots <= ops.a_max))
        assert [e.t for e in a.events] == sorted(e.t for e in a.events)

    def test_unknown_scenario(self):
        with pytest.raises(UnknownScenario):
            get_scenario("nap-time")

    def test_noise_touches_magnitudes_only(self):
        clean, noisy = run_scenario("reflex-arc"), run_scenario("reflex-arc", noise_std=0.1)
        assert np.array_equal(clean.snapshots, noisy.snapshots)
        assert [(e.t, e.sector) for e in clean.events] == [(e.t, e.sector) for e in noisy.events]
        assert any(a.magnitude != b.magnitude for a, b in zip(clean.events, noisy.events))

    def test_event_magnitude_is_crossing_activation(self):
        trace = run_scenario("deliberative-cycle")
        for e in trace.events:
            tick = round(e.t / trace.dt)
            assert e.magnitude == trace.snapshots[tick, e.level, trace.registry.index(e.sector)]
            assert trace.snapshots[tick - 1, e.level, trace.registry.index(e.sector)] < 0.1

    def test_load_is_level_sum(self):
        trace = run_scenario("load-management")
        np.testing.assert_allclose(trace.load(), trace.snapshots.sum(axis=1), atol=1e-12)

    @given(st.floats(0.0, 1.0), st.floats(0.0, 2.0), st.floats(0.01, 0.5))
    def test_runaway_criterion(self, decay, g_self, a0):
        growth = (1 - decay) + g_self
        if abs(growth - 1) < 1e-3:
            return
        ticks = 200 if growth < 1 else math.ceil(math.log(1 / a0) / math.log(growth)) + 2
        trace = simulate(one_sector(g_self), OperatorConfig.uniform(1, decay=decay), (), ticks=ticks,
                         initial=np.array([[a0]]))
        a = trace.activation("s", 0)
        if growth > 1:
            top = int(np.argmax(a >= 1.0))
            assert top > 0 and np.all(np.diff(a[: top + 1]) > 0)
            assert trace.runaway_flag
        else:
            assert np.all(np.diff(a) <= 0)
            assert a[-1] <= a0 * growth ** 200 + 1e-12
            assert not trace.runaway_flag


class TestScript:
    def test_rejects_negative_tick(self):
        with pytest.raises(ValidationError):
            StimulusScript([(-1, "perc", 0, 1.0)])

    def test_inputs_accumulate(self):
        reg = SectorRegistry(("a", "b"))
        u = StimulusScript([(2, "b", 0, 0.5), (2, "b", 0, 0.25)]).inputs_at(2, reg, 1)
        assert u.tolist() == [[0.0, 0.75]]


class TestEmitLog:
    def test_round_trip(self, tmp_path):
        trace = run_scenario("deliberative-cycle")
        path = tmp_path / "t.jsonl"
        assert emit_log(trace, path) == len(trace.events)
        assert tuple(read_log(path)) == trace.events

    def test_full_snapshots_match_schema(self, tmp_path):
        trace = run_scenario("reflex-arc", ticks=3)
        path = tmp_path / "t.jsonl"
        emit_log(trace, path, full=True)
        snaps = [json.loads(line) for line in path.read_text().splitlines() if '"snapshot"' in line]
        assert len(snaps) == 4
        assert snaps[1]["a"]["perc"] == trace.snapshots[1, :, 0].tolist()
        assert tuple(read_log(path)) == trace.events

    def test_empty_trace(self, tmp_path):
        reg = SectorRegistry(("a",))
        trace = simulate(build_profile(reg, {}, 0), OperatorConfig.uniform(1), (), ticks=5)
        path = tmp_path / "e.jsonl"
        assert emit_log(trace, path) == 0
        assert path.read_text() == ""

    def test_unwritable(self, tmp_path):
        with pytest.raises(IoError):
            emit_log(run_scenario("reflex-arc"), tmp_path / "missing" / "t.jsonl")


class TestGatedEmission:
    def test_structure(self):
        p = extended_reactive_profile()
        log = gated_emission_log(p, trials=5, seed=1)
        stimuli = [e for e in log if e.kind == "stimulus"]
        assert len(stimuli) == 5 * p.n
        assert all(isinstance(e, Event) for e in log)
        assert [e.t for e in log] == sorted(e.t for e in log)

    def test_response_rate_follows_coupling(self):
        p = extended_reactive_profile()
        log = gated_emission_log(p, trials=400, seed=3, scale=5.0)
        perc_trials = {e.attrs["trial"] for e in log if e.kind == "stimulus" and e.sector == "perc"}
        plan_hits = sum(1 for e in log if e.kind == "response" and e.sector == "plan" and e.attrs["trial"] in perc_trials)
        exe_hits = sum(1 for e in log if e.kind == "response" and e.sector == "exe" and e.attrs["trial"] in perc_trials)
        # g(perc->plan) = 0.9 gives a high response rate; g(perc->exe) = 0 sits at one half
        assert plan_hits / len(perc_trials) > 0.8
        assert abs(exe_hits / len(perc_trials) - 0.5) < 0.1
