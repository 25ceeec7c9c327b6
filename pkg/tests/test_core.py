import json
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from scl.core import (
    CouplingMatrix,
    CouplingProfile,
    SectorRegistry,
    build_profile,
    devectorize,
    frobenius_distance,
    nature_of,
    parse_profile,
    profile_from_dict,
    serialize_profile,
    vectorize,
)
from scl.errors import (
    DimensionMismatch,
    LengthMismatch,
    LevelOutOfRange,
    NonFiniteEntry,
    ParseError,
    ShapeMismatch,
    ValidationError,
)
from tests.conftest import DELIBERATIVE, REACTIVE
from tests.strategies import matrices, profiles


def slow_frobenius(a, b):
    """Loop-and-fsum reference for the Frobenius distance."""
    return math.sqrt(math.fsum((x - y) ** 2 for ra, rb in zip(a, b) for x, y in zip(ra, rb)))


class TestRegistry:
    def test_standard_infers_roles(self):
        reg = SectorRegistry.standard(["perc", "plan", "refl", "custom"])
        assert reg.roles == {"perc": "perceptual", "plan": "planning", "refl": "reflective"}
        assert reg.with_role("reflective") == [2]

    @pytest.mark.parametrize("labels", [(), ("a", "a"), ("a", "")])
    def test_rejects_bad_labels(self, labels):
        with pytest.raises(ValidationError):
            SectorRegistry(labels)

    def test_rejects_unknown_role(self):
        with pytest.raises(ValidationError):
            SectorRegistry(("a",), {"a": "wizardry"})
        with pytest.raises(ValidationError):
            SectorRegistry(("a",), {"b": "planning"})

    def test_index_by_label_and_position(self, registry):
        assert registry.index("refl") == 2
        assert registry.index(1) == 1
        with pytest.raises(ValidationError):
            registry.index("exe")


class TestBuildProfile:
    def test_reactive_example_is_valid(self, registry):
        p = build_profile(registry, {0: REACTIVE}, 4)
        assert p.max_level == 4
        assert p.g("perc", "plan", 0) == 0.9  # row = source, column = target
        assert p.g("plan", "perc", 0) == 0.1

    def test_nan_entry(self, registry):
        bad = np.array(REACTIVE)
        bad[1, 2] = np.nan
        with pytest.raises(NonFiniteEntry):
            build_profile(registry, {0: bad}, 4)

    def test_level_above_max(self, registry):
        with pytest.raises(LevelOutOfRange):
            build_profile(registry, {7: REACTIVE}, 4)

    def test_dimension_mismatch(self, registry):
        with pytest.raises(DimensionMismatch):
            build_profile(registry, {0: np.eye(2)}, 1)
        with pytest.raises(DimensionMismatch):
            CouplingMatrix(np.ones((2, 3)))

    def test_g_max_bound(self, registry):
        with pytest.raises(ValidationError):
            build_profile(registry, {0: np.full((3, 3), 10.5)}, 0)
        p = build_profile(registry, {0: np.full((3, 3), 10.5)}, 0, g_max=11.0)
        assert p.g_max == 11.0

    def test_missing_levels_read_as_zero(self, registry):
        p = build_profile(registry, {0: REACTIVE}, 4)
        assert np.array_equal(p.matrix(3).entries, np.zeros((3, 3)))
        assert p.matrix(3).level == 3
        assert p.stack().shape == (5, 3, 3)

    def test_entries_are_read_only(self):
        m = CouplingMatrix(np.eye(2))
        with pytest.raises(ValueError):
            m.entries[0, 0] = 5.0

    @given(st.integers(1, 4), st.data())
    def test_any_non_finite_value_is_rejected(self, n, data):
        a = data.draw(matrices(n))
        i, j = data.draw(st.integers(0, n - 1)), data.draw(st.integers(0, n - 1))
        a[i, j] = data.draw(st.sampled_from([np.nan, np.inf, -np.inf]))
        with pytest.raises(NonFiniteEntry):
            build_profile(SectorRegistry(tuple(f"s{k}" for k in range(n))), {0: a}, 0)


class TestNature:
    def test_sign_classes(self):
        assert nature_of(0.4).kind == "excitatory"
        assert nature_of(-0.1).kind == "inhibitory"
        assert nature_of(0.0).kind == "null"
        assert nature_of(0.3, modulatory=True).modulatory


class TestFrobenius:
    def test_examples(self, two_level):
        g0, g1 = two_level.matrix(0), two_level.matrix(1)
        assert frobenius_distance(g0, g0) == 0.0
        assert frobenius_distance(g0.with_level(0), CouplingMatrix(DELIBERATIVE)) == pytest.approx(0.98995, abs=1e-5)
        assert frobenius_distance(g0, g1) == pytest.approx(slow_frobenius(REACTIVE, DELIBERATIVE), abs=1e-15)
        shifted = np.array(REACTIVE)
        shifted[0, 1] += 0.5
        assert frobenius_distance(g0, CouplingMatrix(shifted)) == pytest.approx(0.5, abs=1e-15)

    def test_shape_mismatch(self, registry):
        with pytest.raises(ShapeMismatch):
            frobenius_distance(CouplingMatrix(np.eye(2)), CouplingMatrix(np.eye(3)))
        a = build_profile(registry, {0: REACTIVE}, 1)
        b = build_profile(SectorRegistry(("x", "y", "z")), {0: REACTIVE}, 1)
        with pytest.raises(ShapeMismatch):
            frobenius_distance(a, b)

    def test_profiles_sum_over_levels(self, registry):
        a = build_profile(registry, {0: REACTIVE, 1: DELIBERATIVE}, 2)
        b = build_profile(registry, {0: REACTIVE}, 2)
        assert frobenius_distance(a, b) == pytest.approx(slow_frobenius(DELIBERATIVE, np.zeros((3, 3))))

    @given(st.integers(1, 4).flatmap(lambda n: st.tuples(matrices(n), matrices(n), matrices(n))))
    def test_metric_axioms(self, abc):
        a, b, c = (CouplingMatrix(x) for x in abc)
        dab = frobenius_distance(a, b)
        assert dab == frobenius_distance(b, a)
        assert frobenius_distance(a, a) == 0.0
        assert dab <= frobenius_distance(a, c) + frobenius_distance(c, b) + 1e-12
        assert dab == pytest.approx(slow_frobenius(abc[0], abc[1]), rel=1e-12, abs=1e-12)
        assert (dab == 0.0) == np.array_equal(abc[0], abc[1])


class TestVectorize:
    def test_row_major(self):
        assert vectorize(CouplingMatrix([[1, 2], [3, 4]])).tolist() == [1, 2, 3, 4]

    def test_length_mismatch(self):
        with pytest.raises(LengthMismatch):
            devectorize([1, 2, 3, 4, 5], 2)

    @given(st.integers(1, 8).flatmap(matrices), st.integers(0, 5))
    def test_round_trip(self, a, level):
        m = CouplingMatrix(a, level)
        back = devectorize(vectorize(m), m.n, level)
        assert back == m

    def test_source_major_index(self):
        a = np.arange(16.0).reshape(4, 4)
        v = vectorize(CouplingMatrix(a))
        for i in range(4):
            for j in range(4):
                assert v[i * 4 + j] == a[i, j]


class TestJson:
    def test_round_trip_worked_profile(self, two_level):
        assert parse_profile(serialize_profile(two_level)) == two_level

    def test_documented_schema(self):
        doc = {"sectors": ["perc", "plan", "refl"], "roles": {"perc": "perceptual"}, "max_level": 4,
               "levels": {"0": REACTIVE}}
        p = profile_from_dict(doc)
        assert p.registry.roles == {"perc": "perceptual"}
        assert p.g("perc", "plan", 0) == 0.9

    def test_missing_sectors_names_field(self):
        with pytest.raises(ParseError, match="sectors"):
            parse_profile(json.dumps({"max_level": 0, "levels": {}}))

    def test_ragged_rows(self):
        doc = {"sectors": ["a", "b"], "max_level": 0, "levels": {"0": [[1, 2], [3]]}}
        with pytest.raises(DimensionMismatch):
            profile_from_dict(doc)

    def test_malformed_json_reports_position(self):
        with pytest.raises(ParseError, match="line 2"):
            parse_profile('{"sectors": ["a"],\n "max_level": }')

    def test_schema_failures_mirror_build_errors(self):
        doc = {"sectors": ["a"], "max_level": 1, "levels": {"3": [[0.1]]}}
        with pytest.raises(LevelOutOfRange):
            profile_from_dict(doc)

    @given(profiles(elements=st.sampled_from([0.0, 10.0, -10.0, 0.2, 0.9, 0.1, 0.3, 0.4, 0.5, 0.8, 0.7]))
           | profiles())
    def test_round_trip_exact(self, p):
        back = parse_profile(serialize_profile(p))
        assert back == p
        for k in p.levels:
            assert np.array_equal(back.matrix(k).entries, p.matrix(k).entries)

    def test_non_default_g_max_is_kept(self, registry):
        p = CouplingProfile(registry, {0: np.full((3, 3), 12.0)}, 0, g_max=20.0)
        assert parse_profile(serialize_profile(p)).g_max == 20.0
