"""``scl`` command-line entry point.

Each subcommand validates its input files, calls one library operation,
prints a short human report and, with ``--out``, writes the machine-readable
JSON.  Exit codes: 0 ok, 1 validation error, 2 numerical failure,
3 diagnostic alert.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
from typing import Callable, Sequence

import numpy as np

from . import analysis, estimation, propagation
from .core import CouplingMatrix, CouplingProfile, SectorRegistry, load_profile, profile_to_dict
from .dynamics import OperatorConfig, PRESETS, emit_log, run_scenario
from .errors import IoError, NumericalFailure, ParseError, SCLError, ValidationError
from .events import read_log
from .fixtures import load_worked_example

EXIT_OK, EXIT_VALIDATION, EXIT_NUMERICAL, EXIT_ALERT = 0, 1, 2, 3

LOG_LEVELS = {"error": logging.ERROR, "warn": logging.WARNING, "info": logging.INFO, "debug": logging.DEBUG}

log = logging.getLogger("scl")


class UsageError(ValidationError):
    pass


class _Parser(argparse.ArgumentParser):
    """Argument parser that raises instead of exiting with argparse's code 2."""

    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


# --- file helpers -------------------------------------------------------------------

def _read_json(path: str) -> object:
    try:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise IoError(f"cannot read {path}: {exc.strerror or exc}") from None
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}: line {exc.lineno} column {exc.colno}: {exc.msg}") from None


def _write_json(path: str | None, doc: object) -> None:
    if not path:
        return
    try:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(doc, fh, indent=2)
            fh.write("\n")
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc.strerror or exc}") from None


def _format_matrix(m: np.ndarray, labels: Sequence[str]) -> str:
    width = max(6, *(len(lab) for lab in labels))
    cell = max(width, 10) + 2
    head = " " * width + "".join(f"{lab:>{cell}}" for lab in labels)
    rows = [f"{lab:<{width}}" + "".join(f"{v:>{cell}.4g}" for v in row) for lab, row in zip(labels, m)]
    return "\n".join([head, *rows])


def _level_of(profile: CouplingProfile, level: int | None) -> int:
    if level is None:
        if not profile.levels:
            raise ValidationError("profile stores no levels")
        return profile.levels[-1]
    if not 0 <= level <= profile.max_level:
        raise ValidationError(f"level {level} outside 0..{profile.max_level}")
    return level


# --- subcommands --------------------------------------------------------------------

def cmd_propagate(args) -> int:
    profile = load_profile(args.profile)
    op = propagation.load_operator(args.operator, profile.registry)
    if args.to <= args.from_level:
        raise ValidationError("--to must exceed --from")
    g = profile.matrix(_level_of(profile, args.from_level))
    g = propagation.compose_and_apply([op] * (args.to - args.from_level), g)
    out = CouplingProfile(profile.registry, {args.to: g}, max(profile.max_level, args.to), profile.g_max)
    print(f"predicted level {args.to}:")
    print(_format_matrix(g.entries, profile.registry.labels))
    _write_json(args.out, profile_to_dict(out))
    return EXIT_OK


def cmd_eigen(args) -> int:
    registry = load_profile(args.profile).registry if args.profile else None
    op = propagation.load_operator(args.operator, registry)
    modes = propagation.eigenmodes(op, args.tol)
    for m in modes:
        d = m.to_dict(registry)
        where = f"  {d['coupling']}" if "coupling" in d else ""
        osc = " oscillatory" if m.oscillatory else ""
        print(f"{m.eigenvalue.real:+.6g}{m.eigenvalue.imag:+.6g}j  |{m.modulus:.6g}|  {m.cls}{osc}{where}")
    _write_json(args.out, {"modes": [m.to_dict(registry) for m in modes]})
    return EXIT_OK


def cmd_converge(args) -> int:
    profile = load_profile(args.profile)
    op = propagation.load_operator(args.operator, profile.registry)
    report = propagation.check_convergence(op, profile.matrix(_level_of(profile, args.level)), args.max_levels,
                                           args.eps, profile.g_max)
    print(f"verdict: {report.verdict} after {report.levels_run} levels")
    if report.note:
        print(report.note)
    _write_json(args.out, report.to_dict())
    return EXIT_OK


def cmd_flow(args) -> int:
    profile = load_profile(args.profile)
    beta = propagation.beta_from_dict(_read_json(args.beta), registry=profile.registry)
    traj = propagation.integrate_beta(beta, profile.matrix(_level_of(profile, args.level)),
                                      (args.k0, args.k1), args.step)
    print(f"integrated {len(traj.ks) - 1} steps to k = {traj.ks[-1]:g}")
    print(_format_matrix(traj.profiles[-1], profile.registry.labels))
    _write_json(args.out, {"ks": traj.ks.tolist(), "profiles": traj.profiles.tolist()})
    return EXIT_OK


def cmd_fixpoint(args) -> int:
    profile = load_profile(args.guess)
    beta = propagation.beta_from_dict(_read_json(args.beta), registry=profile.registry)
    res = propagation.find_fixed_point(beta, profile.matrix(_level_of(profile, args.level)), args.tol,
                                       args.max_iter)
    print(f"converged: {res.converged}  residual: {res.residual:.3g}  iterations: {res.iterations}")
    if res.message:
        print(res.message)
    print(_format_matrix(res.matrix(profile.n).entries, profile.registry.labels))
    doc = res.to_dict()
    doc["relevance"] = {f"{a}->{b}": propagation.classify_relevance(beta, res.matrix(profile.n), a, b,
                                                                    profile.registry)
                        for a in profile.registry.labels for b in profile.registry.labels}
    _write_json(args.out, doc)
    return EXIT_OK if res.converged else EXIT_NUMERICAL


def cmd_simulate(args) -> int:
    profile = load_profile(args.profile) if args.profile else None
    ops = None
    if args.ops:
        if profile is None:
            raise ValidationError("--ops needs --profile to name the sectors")
        ops = OperatorConfig.from_dict(_read_json(args.ops), profile.registry)
    trace = run_scenario(args.scenario, profile, ops, ticks=args.ticks, seed=args.seed, noise_std=args.noise)
    lines = emit_log(trace, args.out, args.full) if args.out else 0
    ticks = {lab: trace.first_event_tick(lab, 0) for lab in trace.registry.labels}
    print(f"scenario {trace.scenario}: {len(trace.events)} events over {len(trace.snapshots) - 1} ticks")
    print("first level-0 event tick: " + ", ".join(f"{k}={v}" for k, v in ticks.items()))
    if trace.runaway_flag:
        print("runaway: " + ", ".join(f"{s}^{k}" for s, k in trace.runaway))
    if args.out:
        print(f"wrote {lines} lines to {args.out}")
    return EXIT_OK


def _anchors(path: str | None) -> dict | None:
    if not path:
        return None
    doc = _read_json(path)
    if not isinstance(doc, dict):
        raise ParseError(f"{path}: anchors must be an object of 'source->target': value")
    out = {}
    for key, val in doc.items():
        src, sep, tgt = key.partition("->")
        if not sep:
            raise ParseError(f"{path}: anchor key {key!r} is not of the form 'source->target'")
        out[(src, tgt)] = float(val)
    return out


def cmd_estimate(args) -> int:
    events = read_log(args.log)
    if args.profile:
        registry = load_profile(args.profile).registry
    else:
        registry = SectorRegistry.standard(sorted(set(e.sector for e in events)))
    if bool(args.source) != bool(args.target):
        raise ValidationError("give both --source and --target, or neither for a whole-profile estimate")
    if not args.source:
        est = estimation.estimate_profile(events, registry, args.level, args.mode, args.window,
                                          _anchors(args.anchors), args.stimulus_kind, args.response_kind,
                                          args.feature, args.response_feature)
        print(f"estimated level {args.level} ({args.mode}); calibration: {est.calibration}")
        print(_format_matrix(est.calibrated, registry.labels))
        bad = {k: v for k, v in est.flags.items() if v != "ok"}
        if bad:
            print("flags: " + ", ".join(f"{k}={v}" for k, v in bad.items()))
        _write_json(args.out, est.to_dict())
        return EXIT_OK
    registry.index(args.source)
    registry.index(args.target)
    spec = estimation.EstimationSpec(args.source, args.target, args.level, args.mode, args.window, args.feature,
                                     args.response_feature, args.stimulus_kind, args.response_kind)
    pairs = estimation.pair_events(events, spec)
    res = estimation.fit_coupling(pairs, spec)
    doc = res.to_dict()
    print(f"{args.source}->{args.target}@{args.level} ({args.mode}): g_hat = {res.g_hat:.6g} "
          f"+/- {res.stderr:.3g}  n = {res.n_pairs}")
    if args.bootstrap:
        ci = estimation.bootstrap_ci(pairs, spec, args.bootstrap, args.seed)
        doc["bootstrap"] = ci._asdict()
        print(f"bootstrap 95% CI: [{ci.lo:.6g}, {ci.hi:.6g}]")
    if args.holdout:
        ho = estimation.validate_holdout(pairs, spec, args.holdout, args.seed)
        doc["holdout"] = ho
        print(f"hold-out {ho['metric']} = {ho['value']:.4g}  p = {ho['p_value']:.3g}")
    _write_json(args.out, doc)
    return EXIT_OK


def _matrix_list(doc, where: str) -> list[CouplingMatrix]:
    try:
        return [CouplingMatrix(np.array(m, dtype=np.float64)) for m in doc]
    except (TypeError, ValueError) as exc:
        raise ParseError(f"{where}: {exc}") from None


def cmd_infer_m(args) -> int:
    profile = load_profile(args.profile)
    extra = []
    if args.pairs:
        doc = _read_json(args.pairs)
        if not isinstance(doc, dict) or "pairs" not in doc:
            raise ParseError(f"{args.pairs}: missing required field 'pairs'")
        for idx, pair in enumerate(doc["pairs"]):
            if not isinstance(pair, list) or len(pair) != 2:
                raise ParseError(f"{args.pairs}: pairs[{idx}] must be [before, after]")
            extra.append(tuple(_matrix_list(pair, f"{args.pairs}: pairs[{idx}]")))
    res = estimation.infer_propagation(profile.matrix(args.level), profile.matrix(args.level + 1), args.model,
                                       extra)
    doc = res.to_dict(profile.registry)
    if res.operator.kind == "entrywise":
        print(_format_matrix(res.operator.data, profile.registry.labels))
    print(f"residual: {res.residual:.3g}")
    if res.undefined:
        print("ratio undefined at: " + ", ".join(doc["ratio_undefined"]))
    _write_json(args.out, doc)
    return EXIT_OK


def cmd_diagnose(args) -> int:
    actual = load_profile(args.actual)
    level = _level_of(actual, args.level)
    if args.predicted:
        predicted = load_profile(args.predicted)
        if predicted.registry.labels != actual.registry.labels:
            raise ValidationError("--predicted and --actual name different sectors")
        report = estimation.diagnose(predicted.matrix(level), actual.matrix(level), args.tau, actual.registry)
    else:
        if not (args.operator and args.profile):
            raise ValidationError("give --predicted, or --operator with --profile")
        base = load_profile(args.profile)
        op = propagation.load_operator(args.operator, base.registry)
        if level < 1:
            raise ValidationError("the compared level must be at least 1 to have a predecessor")
        report = estimation.predict_and_diagnose(op, base.matrix(level - 1), actual.matrix(level), args.tau,
                                                 actual.registry)
    print(f"deviation {report.deviation:.6g} (tau {report.tau:g}): {'ALERT' if report.alert else 'ok'}")
    for src, tgt, d in report.worst_entries:
        print(f"  {src}->{tgt}: {d:.4g}")
    _write_json(args.out, report.to_dict())
    return EXIT_ALERT if report.alert else EXIT_OK


def cmd_analyze(args) -> int:
    profile = load_profile(args.profile)
    labels = profile.registry.labels
    ops = OperatorConfig.from_dict(_read_json(args.ops), profile.registry) if args.ops else None
    thresholds = analysis.StyleThresholds.from_dict(_read_json(args.thresholds)) if args.thresholds else None
    levels = [args.level] if args.level is not None else list(range(profile.max_level + 1))
    for k in levels:
        _level_of(profile, k)
    paths = {k: analysis.trace_pathways(profile, k, args.theta, args.max_len) for k in levels}
    loops = analysis.find_loops(profile, ops, args.theta, args.multi_level)
    if args.level is not None and not args.multi_level:
        kept = tuple(lp for lp in loops.loops if lp.cycle.steps[0].source_level == args.level)
        loops = dataclasses.replace(loops, loops=kept)
    style = analysis.classify_style(profile, thresholds)
    print("style: " + (", ".join(style.labels) or "(none)"))
    for ev in style.evidence:
        print(f"  {ev.rule}: " + ", ".join(f"{e}={v:g}" for e, v in zip(ev.entries, ev.values)))
    for note in style.notices:
        print(f"  note: {note}")
    for k, ps in paths.items():
        print(f"level {k}: {len(ps)} pathways with |g| >= {args.theta:g}")
        for p in ps[:5]:
            print("  " + " -> ".join(p.sectors(labels)) + f"  ({p.weight_product:.4g})")
    print(f"{len(loops.loops)} loops")
    for lp in loops.loops:
        print("  " + " ; ".join(s.describe(labels) for s in lp.cycle.steps) + f"  gain {lp.gain:.4g} {lp.classification}")
    if args.dot:
        k = levels[0]
        try:
            with open(args.dot, "w", encoding="utf-8") as fh:
                fh.write(analysis.to_dot(analysis.influence_graph(profile, k, args.theta)))
        except OSError as exc:
            raise IoError(f"cannot write {args.dot}: {exc.strerror or exc}") from None
    _write_json(args.out, {
        "style": style.to_dict(),
        "pathways": {str(k): [p.to_dict(profile.registry) for p in ps] for k, ps in paths.items()},
        "loops": loops.to_dict(),
    })
    return EXIT_OK


def _parse_edit(text: str) -> tuple[str, str, int, float]:
    parts = text.split(",")
    if len(parts) != 4:
        raise ValidationError(f"--edit {text!r}: expected source,target,level,value")
    try:
        return parts[0], parts[1], int(parts[2]), float(parts[3])
    except ValueError:
        raise ValidationError(f"--edit {text!r}: level must be an integer and value a number") from None


def cmd_perturb(args) -> int:
    profile = load_profile(args.profile)
    edited, distance = analysis.perturb_profile(profile, [_parse_edit(e) for e in args.edit or ()])
    print(f"Frobenius distance: {distance:.6g}")
    doc = profile_to_dict(edited)
    doc["distance"] = distance
    _write_json(args.out, doc)
    return EXIT_OK


def demo_worked_example(fixtures: str | None = None) -> tuple[dict, list[str]]:
    """Run the bundled worked example; return the report and any failed checks."""
    ex = load_worked_example(fixtures)
    reg = ex.profile.registry
    g1 = ex.profile.matrix(1)
    g2 = propagation.apply_propagation(ex.operator, g1)
    failures = []
    changed = {("perc", "plan"): 0.25, ("perc", "refl"): 0.88, ("refl", "plan"): 0.77, ("refl", "refl"): 0.60}
    for (a, b), want in changed.items():
        got = g2.entries[reg.index(a), reg.index(b)]
        if abs(got - want) > 1e-12:
            failures.append(f"{a}->{b}: predicted {got!r}, expected {want}")
    for i in range(reg.n):
        for j in range(reg.n):
            if (reg.labels[i], reg.labels[j]) not in changed and g2.entries[i, j] != g1.entries[i, j]:
                failures.append(f"{reg.labels[i]}->{reg.labels[j]}: not copied from level 1")
    if np.max(np.abs(g2.entries - ex.expected.entries)) > 1e-12:
        failures.append("prediction differs from the bundled expected level-2 matrix")
    modes = propagation.eigenmodes(ex.operator)
    damped = sorted(m.modulus for m in modes if m.cls == "damped")
    amplified = sorted(m.modulus for m in modes if m.cls == "amplified")
    if not np.allclose(damped, [0.5], atol=1e-12) or not np.allclose(amplified, [1.1, 1.1, 1.2], atol=1e-12):
        failures.append(f"eigenmodes: damped {damped}, amplified {amplified}")
    styles = {k: analysis.classify_style(ex.profile.restrict([k])) for k in (0, 1)}
    if "reactive" not in styles[0].labels:
        failures.append(f"level 0 styles {styles[0].labels} lack 'reactive'")
    if "deliberative" not in styles[1].labels:
        failures.append(f"level 1 styles {styles[1].labels} lack 'deliberative'")
    # The worked example quotes the evidence behind both labels.
    quoted = {(0, "reactive"): (0.9, 0.1), (1, "deliberative"): (0.8, 0.7)}
    for (k, rule), want in quoted.items():
        rows = [e.values for e in styles[k].evidence if e.rule == rule]
        if not rows or not np.allclose(rows[0], want, atol=1e-12):
            failures.append(f"level {k} {rule} evidence {rows[:1]} differs from {want}")
    report = {
        "predicted": g2.entries.tolist(),
        "changed": {f"{a}->{b}": float(g2.entries[reg.index(a), reg.index(b)]) for a, b in changed},
        "modes": [m.to_dict(reg) for m in modes],
        "styles": {str(k): s.to_dict() for k, s in styles.items()},
        "failures": failures,
    }
    return report, failures


def cmd_demo(args) -> int:
    report, failures = demo_worked_example(args.fixtures)
    labels = ("perc", "plan", "refl")
    print("predicted level-2 profile:")
    print(_format_matrix(np.array(report["predicted"]), labels))
    for mode in report["modes"]:
        print(f"  mode {mode['coupling']}: factor {mode['modulus']:g} {mode['class']}")
    for k, s in report["styles"].items():
        print(f"level {k} style: {', '.join(s['labels']) or '(none)'}")
    _write_json(args.out, report)
    if failures:
        for f in failures:
            print(f"MISMATCH {f}", file=sys.stderr)
        return EXIT_NUMERICAL
    print("all checks passed")
    return EXIT_OK


# --- parser -------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--out", help="write the JSON report (or JSONL trace) here")
    common.add_argument("--seed", type=int, default=42, help="seed for every random draw (default 42)")
    common.add_argument("--threads", type=int, default=1,
                        help="accepted for interface stability; computations run single-threaded")

    parser = _Parser(prog="scl", description="Sectoral coupling profiles: propagate, simulate, estimate, analyze.")
    sub = parser.add_subparsers(dest="command", metavar="command", parser_class=_Parser)

    def add(name: str, func: Callable, help_text: str) -> argparse.ArgumentParser:
        p = sub.add_parser(name, parents=[common], help=help_text, description=help_text)
        p.set_defaults(func=func)
        return p

    p = add("propagate", cmd_propagate, "propagate a level's couplings upward through an operator")
    p.add_argument("--profile", required=True)
    p.add_argument("--operator", required=True)
    p.add_argument("--from", dest="from_level", type=int, required=True)
    p.add_argument("--to", type=int, required=True)

    p = add("eigen", cmd_eigen, "classify the modes of a propagation operator")
    p.add_argument("--operator", required=True)
    p.add_argument("--profile", help="profile whose sectors label the modes")
    p.add_argument("--tol", type=float, default=propagation.DEFAULT_MODE_TOL)

    p = add("converge", cmd_converge, "iterate an operator and report the limiting behaviour")
    p.add_argument("--operator", required=True)
    p.add_argument("--profile", required=True)
    p.add_argument("--level", type=int)
    p.add_argument("--max-levels", type=int, default=200)
    p.add_argument("--eps", type=float, default=1e-6)

    p = add("flow", cmd_flow, "integrate the continuous coupling flow with RK4")
    p.add_argument("--beta", required=True)
    p.add_argument("--profile", required=True)
    p.add_argument("--level", type=int)
    p.add_argument("--k0", type=float, default=0.0)
    p.add_argument("--k1", type=float, required=True)
    p.add_argument("--step", type=float, default=0.01)

    p = add("fixpoint", cmd_fixpoint, "find a zero of the coupling flow and classify each coupling")
    p.add_argument("--beta", required=True)
    p.add_argument("--guess", required=True, help="profile holding the starting matrix")
    p.add_argument("--level", type=int)
    p.add_argument("--tol", type=float, default=1e-10)
    p.add_argument("--max-iter", type=int, default=100)

    p = add("simulate", cmd_simulate, "run a preset scenario and write its event trace")
    p.add_argument("--scenario", required=True, choices=sorted(PRESETS))
    p.add_argument("--profile", help="override the preset's coupling profile")
    p.add_argument("--ops", help="override the preset's operator configuration")
    p.add_argument("--ticks", type=int)
    p.add_argument("--noise", type=float, default=0.0, help="observation noise on logged magnitudes")
    p.add_argument("--full", action="store_true", help="also write activation snapshots")

    p = add("estimate", cmd_estimate, "estimate couplings from an event log")
    p.add_argument("--log", required=True)
    p.add_argument("--profile", help="profile whose registry names the sectors")
    p.add_argument("--source")
    p.add_argument("--target")
    p.add_argument("--level", type=int, default=0)
    p.add_argument("--mode", choices=estimation.MODES, default="gated")
    p.add_argument("--window", type=float, default=0.5)
    p.add_argument("--feature", default="magnitude")
    p.add_argument("--response-feature", default="magnitude")
    p.add_argument("--stimulus-kind")
    p.add_argument("--response-kind")
    p.add_argument("--bootstrap", type=int, default=0, metavar="B")
    p.add_argument("--holdout", type=float, default=0.0, metavar="FRACTION")
    p.add_argument("--anchors", help="JSON object of known couplings used for calibration")

    p = add("infer-m", cmd_infer_m, "infer the propagation operator between two levels")
    p.add_argument("--profile", required=True)
    p.add_argument("--level", type=int, default=0)
    p.add_argument("--model", choices=("entrywise", "dense-lsq"), default="entrywise")
    p.add_argument("--pairs", help="JSON {'pairs': [[before, after], ...]} of extra matrix pairs")

    p = add("diagnose", cmd_diagnose, "compare a predicted level with the measured one")
    p.add_argument("--actual", required=True)
    p.add_argument("--predicted")
    p.add_argument("--operator")
    p.add_argument("--profile")
    p.add_argument("--level", type=int)
    p.add_argument("--tau", type=float, required=True)

    p = add("analyze", cmd_analyze, "pathways, loops and cognitive style of a profile")
    p.add_argument("--profile", required=True)
    p.add_argument("--level", type=int)
    p.add_argument("--theta", type=float, default=0.3)
    p.add_argument("--max-len", type=int, default=3)
    p.add_argument("--multi-level", action="store_true")
    p.add_argument("--ops")
    p.add_argument("--thresholds")
    p.add_argument("--dot", help="write the influence graph of the first analysed level as DOT")

    p = add("perturb", cmd_perturb, "edit couplings and report the Frobenius distance")
    p.add_argument("--profile", required=True)
    p.add_argument("--edit", action="append", metavar="SRC,TGT,LEVEL,VALUE")

    p = add("demo", cmd_demo, "run a bundled demonstration")
    p.add_argument("name", choices=("paper-example",))
    p.add_argument("--fixtures", help="directory with replacement fixture files")
    return parser


def _configure_logging() -> None:
    level = os.environ.get("SCL_LOG_LEVEL", "warn").lower()
    logging.basicConfig(level=LOG_LEVELS.get(level, logging.WARNING), format="%(levelname)s %(name)s: %(message)s",
                        stream=sys.stderr)


def main(argv: Sequence[str] | None = None) -> int:
    _configure_logging()
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            parser.print_usage(sys.stderr)
            raise UsageError("a command is required")
        if args.threads < 1:
            raise ValidationError("--threads must be at least 1")
        return args.func(args)
    except UsageError as exc:
        print(f"scl: error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except NumericalFailure as exc:
        print(f"scl: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (ValidationError, IoError, SCLError) as exc:
        print(f"scl: error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())
