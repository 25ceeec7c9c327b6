"""Bundled three-sector worked example.

Two measured levels come with the entrywise rule linking them, plus the
level-2 matrix that rule should predict."""

from __future__ import annotations

from dataclasses import dataclass
from importlib import resources
from pathlib import Path

from .core import CouplingMatrix, CouplingProfile, load_profile
from .propagation import PropagationOperator, load_operator

PROFILE_FILE = "worked_example_profile.json"
OPERATOR_FILE = "worked_example_operator.json"
EXPECTED_FILE = "worked_example_expected.json"


@dataclass(frozen=True)
class WorkedExample:
    profile: CouplingProfile
    operator: PropagationOperator
    expected: CouplingMatrix


def data_dir() -> Path:
    return Path(str(resources.files("scl") / "data"))


def load_worked_example(directory: str | Path | None = None) -> WorkedExample:
    """Load the worked example from ``directory`` (the bundled copy by default)."""
    base = Path(directory) if directory is not None else data_dir()
    profile = load_profile(base / PROFILE_FILE)
    operator = load_operator(base / OPERATOR_FILE, profile.registry)
    expected = load_profile(base / EXPECTED_FILE).matrix(2)
    return WorkedExample(profile, operator, expected)
