"""Sectoral coupling profiles across abstraction levels.

A profile holds one coupling matrix per level over a shared registry of
sectors (rows are sources, columns are targets).  Profiles can be pushed up
the hierarchy or driven in a simulator.  Going the other way, couplings are
estimated back from event logs, and their influence graphs are read for
loops and style labels.
"""

from .analysis import (
    InfluenceGraph,
    LoopReport,
    Pathway,
    StyleReport,
    StyleThresholds,
    classify_style,
    find_loops,
    influence_graph,
    perturb_profile,
    to_dot,
    trace_pathways,
)
from .core import (
    CouplingMatrix,
    CouplingProfile,
    SectorRegistry,
    build_profile,
    devectorize,
    frobenius_distance,
    load_profile,
    parse_profile,
    profile_from_dict,
    profile_to_dict,
    serialize_profile,
    vectorize,
)
from .dynamics import (
    OperatorConfig,
    PRESETS,
    StimulusScript,
    TraceLog,
    emit_log,
    extended_reactive_profile,
    gated_emission_log,
    get_scenario,
    run_scenario,
    simulate,
    step,
)
from .errors import NumericalFailure, SCLError, ValidationError
from .estimation import (
    EstimationSpec,
    bootstrap_ci,
    diagnose,
    estimate_profile,
    fit_coupling,
    infer_propagation,
    pair_events,
    predict_and_diagnose,
    validate_holdout,
)
from .events import Event, EventLog, read_log
from .fixtures import load_worked_example
from .propagation import (
    BetaField,
    PropagationOperator,
    apply_propagation,
    check_convergence,
    classify_relevance,
    compose_and_apply,
    eigenmodes,
    find_fixed_point,
    integrate_beta,
)

__all__ = [name for name in dir() if not name.startswith("_")]
