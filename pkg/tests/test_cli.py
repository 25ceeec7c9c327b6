import json
import shutil
import subprocess
import sys

import inspect

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

import scl.cli
import scl.errors

from scl.cli import demo_worked_example, main
from scl.core import load_profile
from scl.fixtures import data_dir
from scl.propagation import apply_propagation, load_operator
from tests.conftest import PREDICTED

DATA = data_dir()
PROFILE = str(DATA / "worked_example_profile.json")
OPERATOR = str(DATA / "worked_example_operator.json")
EXPECTED = str(DATA / "worked_example_expected.json")


def write(path, doc):
    path.write_text(json.dumps(doc))
    return str(path)


def run(*argv):
    return main([str(a) for a in argv])


class TestExitCodes:
    def test_unknown_subcommand(self, capsys):
        assert run("teleport") == 1
        assert "invalid choice" in capsys.readouterr().err

    def test_missing_subcommand(self):
        assert run() == 1

    def test_missing_file(self, capsys):
        assert run("analyze", "--profile", "/nowhere/p.json") == 1
        assert "cannot read" in capsys.readouterr().err

    def test_malformed_json(self, tmp_path, capsys):
        bad = tmp_path / "bad.json"
        bad.write_text('{"sectors": ["a"],\n "max_level": }')
        assert run("analyze", "--profile", bad) == 1
        assert "line 2" in capsys.readouterr().err

    def test_bad_threads(self):
        assert run("analyze", "--profile", PROFILE, "--threads", "0") == 1

    def test_console_script_entry(self):
        proc = subprocess.run([sys.executable, "-m", "scl.cli", "demo", "paper-example"], capture_output=True,
                              text=True)
        assert proc.returncode == 0, proc.stderr
        assert "all checks passed" in proc.stdout


ERROR_CLASSES = sorted((c for _, c in inspect.getmembers(scl.errors, inspect.isclass)
                        if issubclass(c, scl.errors.SCLError)), key=lambda c: c.__name__)


def documented_code(cls):
    return 2 if issubclass(cls, scl.errors.NumericalFailure) else 1


class TestErrorMapping:
    @given(st.sampled_from(ERROR_CLASSES))
    def test_every_error_class_maps_to_its_code(self, cls):
        exc = cls("boom", 1) if cls is scl.errors.Separation else cls("boom")

        def failing(args):
            raise exc
        original = scl.cli.cmd_perturb
        scl.cli.cmd_perturb = failing
        try:
            assert main(["perturb", "--profile", PROFILE]) == documented_code(cls)
        finally:
            scl.cli.cmd_perturb = original


class TestPropagate:
    def test_worked_step_round_trips(self, tmp_path):
        out = tmp_path / "g2.json"
        assert run("propagate", "--profile", PROFILE, "--operator", OPERATOR, "--from", 1, "--to", 2, "--out", out) == 0
        written = load_profile(out)
        np.testing.assert_allclose(written.matrix(2).entries, np.array(PREDICTED), atol=1e-12)
        direct = apply_propagation(load_operator(OPERATOR), load_profile(PROFILE).matrix(1))
        assert written.matrix(2).entries.tolist() == direct.entries.tolist()

    def test_backwards_levels(self):
        assert run("propagate", "--profile", PROFILE, "--operator", OPERATOR, "--from", 1, "--to", 1) == 1

    def test_wrong_size_operator(self, tmp_path):
        op = write(tmp_path / "op.json", {"kind": "entrywise", "factors": [[1.0, 1.0], [1.0, 1.0]]})
        assert run("propagate", "--profile", PROFILE, "--operator", op, "--from", 1, "--to", 2) == 1


class TestSpectral:
    def test_eigen(self, tmp_path):
        out = tmp_path / "modes.json"
        assert run("eigen", "--operator", OPERATOR, "--profile", PROFILE, "--out", out) == 0
        modes = json.loads(out.read_text())["modes"]
        assert sorted(m["class"] for m in modes).count("amplified") == 3
        assert [m["coupling"] for m in modes if m["class"] == "damped"] == ["perc->plan"]

    def test_converge(self, tmp_path):
        op = write(tmp_path / "half.json", {"kind": "entrywise", "factors": [[0.5] * 3] * 3})
        out = tmp_path / "c.json"
        assert run("converge", "--operator", op, "--profile", PROFILE, "--level", 0, "--out", out) == 0
        assert json.loads(out.read_text())["verdict"] == "converges_to_zero"


class TestFlow:
    def test_linear_flow(self, tmp_path):
        beta = write(tmp_path / "b.json", {"kind": "linear",
                                           "operator": {"kind": "entrywise", "factors": [[0.0] * 3] * 3}})
        out = tmp_path / "f.json"
        assert run("flow", "--beta", beta, "--profile", PROFILE, "--level", 0, "--k1", 1.0, "--step", 0.1,
                   "--out", out) == 0
        doc = json.loads(out.read_text())
        # factor 0 means beta = -g, so every entry decays like exp(-k)
        np.testing.assert_allclose(doc["profiles"][-1], np.array(doc["profiles"][0]) * np.exp(-1.0), rtol=1e-5)

    def test_fixpoint(self, tmp_path):
        beta = write(tmp_path / "b.json", {"kind": "tabulated", "polys": {"perc->plan": [0.5, -1.0]}})
        out = tmp_path / "fp.json"
        assert run("fixpoint", "--beta", beta, "--guess", PROFILE, "--level", 0, "--out", out) == 0
        doc = json.loads(out.read_text())
        assert doc["converged"]
        # the flow vanishes at a fixed point, so every coupling there is marginal
        assert doc["relevance"]["perc->plan"] == "marginal"

    def test_fixpoint_failure_exits_two(self, tmp_path):
        beta = write(tmp_path / "b.json", {"kind": "tabulated", "polys": {"perc->plan": [1.0, 0.0, 1.0]}})
        assert run("fixpoint", "--beta", beta, "--guess", PROFILE, "--level", 0, "--max-iter", 20) == 2


class TestSimulate:
    def test_trace_file(self, tmp_path, capsys):
        out = tmp_path / "t.jsonl"
        assert run("simulate", "--scenario", "reflex-arc", "--out", out) == 0
        lines = out.read_text().splitlines()
        assert lines and all(json.loads(line)["sector"] for line in lines)
        assert f"wrote {len(lines)} lines" in capsys.readouterr().out

    def test_unknown_scenario(self):
        assert run("simulate", "--scenario", "nap-time") == 1

    def test_rumination_reports_runaway(self, capsys):
        assert run("simulate", "--scenario", "rumination") == 0
        assert "runaway: refl^1" in capsys.readouterr().out


class TestEstimate:
    @pytest.fixture
    def log(self, tmp_path):
        rng = np.random.default_rng(0)
        lines = []
        for i in range(300):
            x = float(rng.uniform(0, 1))
            lines.append({"t": 2.0 * i, "sector": "perc", "level": 0, "kind": "event", "magnitude": x})
            lines.append({"t": 2.0 * i + 0.1, "sector": "plan", "level": 0, "kind": "event",
                          "magnitude": 0.8 * x + float(rng.normal(0, 0.05))})
        path = tmp_path / "log.jsonl"
        path.write_text("\n".join(json.dumps(d) for d in lines) + "\n")
        return path

    def test_single_pair(self, log, tmp_path):
        out = tmp_path / "e.json"
        assert run("estimate", "--log", log, "--source", "perc", "--target", "plan", "--mode", "outcome",
                   "--bootstrap", 200, "--holdout", 0.3, "--out", out) == 0
        doc = json.loads(out.read_text())
        assert doc["g_hat"] == pytest.approx(0.8, abs=0.02)
        assert doc["bootstrap"]["lo"] <= doc["g_hat"] <= doc["bootstrap"]["hi"]
        assert doc["holdout"]["p_value"] < 0.05

    def test_whole_profile(self, log, tmp_path):
        out = tmp_path / "p.json"
        assert run("estimate", "--log", log, "--mode", "outcome", "--out", out) == 0
        doc = json.loads(out.read_text())
        assert doc["flags"]["perc->plan"] == "ok"
        assert doc["flags"]["plan->perc"] == "insufficient_data"

    def test_half_pair_is_rejected(self, log):
        assert run("estimate", "--log", log, "--source", "perc") == 1

    def test_empty_log(self, tmp_path):
        empty = tmp_path / "empty.jsonl"
        empty.write_text("")
        assert run("estimate", "--log", empty) == 1


class TestInferAndDiagnose:
    def test_infer_entrywise(self, tmp_path):
        out = tmp_path / "m.json"
        assert run("infer-m", "--profile", PROFILE, "--level", 0, "--out", out) == 0
        doc = json.loads(out.read_text())
        assert doc["operator"]["factors"][2][2] == pytest.approx(1.25)
        assert doc["ratio_undefined"] == ["refl->perc"]

    def test_infer_dense_needs_pairs(self):
        assert run("infer-m", "--profile", PROFILE, "--level", 0, "--model", "dense-lsq") == 2

    def test_diagnose_alert(self, tmp_path):
        actual = np.array(PREDICTED)
        actual[0, 2] = 0.38
        prof = json.loads((DATA / "worked_example_profile.json").read_text())
        prof["levels"]["2"] = actual.tolist()
        path = write(tmp_path / "actual.json", prof)
        out = tmp_path / "d.json"
        assert run("diagnose", "--actual", path, "--operator", OPERATOR, "--profile", PROFILE, "--level", 2,
                   "--tau", 0.1, "--out", out) == 3
        doc = json.loads(out.read_text())
        assert doc["deviation"] == pytest.approx(0.5)
        assert run("diagnose", "--actual", path, "--operator", OPERATOR, "--profile", PROFILE, "--level", 2,
                   "--tau", 0.6) == 0

    def test_diagnose_predicted_file(self, tmp_path):
        prof = json.loads((DATA / "worked_example_profile.json").read_text())
        prof["levels"]["2"] = PREDICTED
        predicted = write(tmp_path / "p.json", prof)
        shifted = np.array(PREDICTED)
        shifted[2, 1] += 0.5
        prof["levels"]["2"] = shifted.tolist()
        actual = write(tmp_path / "a.json", prof)
        assert run("diagnose", "--predicted", predicted, "--actual", actual, "--level", 2, "--tau", 0.1) == 3
        assert run("diagnose", "--predicted", predicted, "--actual", predicted, "--level", 2, "--tau", 0.1) == 0

    def test_diagnose_needs_a_prediction(self):
        assert run("diagnose", "--actual", PROFILE, "--tau", 0.1) == 1


class TestAnalyze:
    def test_report_and_dot(self, tmp_path):
        out, dot = tmp_path / "a.json", tmp_path / "g.dot"
        assert run("analyze", "--profile", PROFILE, "--theta", 0.3, "--out", out, "--dot", dot, "--level", 1) == 0
        doc = json.loads(out.read_text())
        assert doc["style"]["labels"] == ["reactive", "deliberative"]
        assert len(doc["loops"]["loops"]) == 3
        assert dot.read_text().startswith("digraph")

    def test_perturb_round_trip(self, tmp_path):
        out = tmp_path / "p.json"
        assert run("perturb", "--profile", PROFILE, "--edit", "perc,plan,0,0.4", "--out", out) == 0
        doc = json.loads(out.read_text())
        assert doc["distance"] == pytest.approx(0.5)
        assert load_profile(out).g("perc", "plan", 0) == 0.4

    def test_perturb_rejects_large_value(self):
        assert run("perturb", "--profile", PROFILE, "--edit", "perc,plan,0,99") == 1
        assert run("perturb", "--profile", PROFILE, "--edit", "perc,plan") == 1


class TestDemo:
    def test_bundled(self, tmp_path):
        out = tmp_path / "demo.json"
        assert run("demo", "paper-example", "--out", out) == 0
        assert json.loads(out.read_text())["failures"] == []

    @pytest.fixture
    def fixtures(self, tmp_path):
        for f in DATA.iterdir():
            if f.suffix == ".json":
                shutil.copy(f, tmp_path / f.name)
        return tmp_path

    def test_tampered_profile(self, fixtures, capsys):
        path = fixtures / "worked_example_profile.json"
        doc = json.loads(path.read_text())
        doc["levels"]["0"][0][1] = 0.8
        path.write_text(json.dumps(doc))
        assert run("demo", "paper-example", "--fixtures", fixtures) == 2
        assert "MISMATCH" in capsys.readouterr().err

    def test_tampered_operator(self, fixtures):
        path = fixtures / "worked_example_operator.json"
        doc = json.loads(path.read_text())
        doc["factors"][0][2] = 1.2
        path.write_text(json.dumps(doc))
        assert run("demo", "paper-example", "--fixtures", fixtures) == 2


class TestThinAdapters:
    """The JSON each subcommand writes equals the library result, value for value."""

    def _out(self, tmp_path, *argv):
        out = tmp_path / "out.json"
        assert run(*argv, "--out", out) in (0, 3)
        return json.loads(out.read_text())

    def same(self, doc, obj):
        assert doc == json.loads(json.dumps(obj))

    def test_eigen(self, tmp_path):
        from scl.propagation import eigenmodes
        reg = load_profile(PROFILE).registry
        doc = self._out(tmp_path, "eigen", "--operator", OPERATOR, "--profile", PROFILE)
        self.same(doc, {"modes": [m.to_dict(reg) for m in eigenmodes(load_operator(OPERATOR, reg))]})

    def test_converge(self, tmp_path):
        from scl.propagation import check_convergence
        p = load_profile(PROFILE)
        doc = self._out(tmp_path, "converge", "--operator", OPERATOR, "--profile", PROFILE, "--level", 1)
        self.same(doc, check_convergence(load_operator(OPERATOR), p.matrix(1), 200, 1e-6, p.g_max).to_dict())

    def test_infer_m(self, tmp_path):
        from scl.estimation import infer_propagation
        p = load_profile(PROFILE)
        doc = self._out(tmp_path, "infer-m", "--profile", PROFILE, "--level", 0)
        self.same(doc, infer_propagation(p.matrix(0), p.matrix(1)).to_dict(p.registry))

    def test_analyze(self, tmp_path):
        from scl.analysis import classify_style, find_loops
        p = load_profile(PROFILE)
        doc = self._out(tmp_path, "analyze", "--profile", PROFILE, "--theta", 0.3)
        self.same(doc["style"], classify_style(p).to_dict())
        self.same(doc["loops"], find_loops(p, theta=0.3).to_dict())

    def test_perturb(self, tmp_path):
        from scl.analysis import perturb_profile
        from scl.core import profile_to_dict
        p = load_profile(PROFILE)
        doc = self._out(tmp_path, "perturb", "--profile", PROFILE, "--edit", "refl,refl,1,0.7")
        edited, distance = perturb_profile(p, [("refl", "refl", 1, 0.7)])
        self.same(doc, {**profile_to_dict(edited), "distance": distance})

    def test_demo(self, tmp_path):
        doc = self._out(tmp_path, "demo", "paper-example")
        self.same(doc, demo_worked_example()[0])
