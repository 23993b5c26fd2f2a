import random
from fractions import Fraction

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from capgeo.keypoints import (
    RELATIONS,
    ArityError,
    Dimension,
    EntityRef,
    KeypointSet,
    KeypointSyntaxError,
    NumericalK,
    RelationFamily,
    UnknownRelationError,
    canonicalize,
    parse_entity,
    parse_keypoint_document,
    parse_keypoint_line,
    relation_type,
    serialize_keypoints,
)

import generators as gen


def test_taxonomy_has_31_relations_in_five_families():
    assert len(RELATIONS) == 31
    sizes = {f: sum(r.family is f for r in RELATIONS.values()) for f in RelationFamily}
    assert sizes == {
        RelationFamily.POINT_LINE: 5,
        RelationFamily.LINE_LINE: 4,
        RelationFamily.LINE_SHAPE: 7,
        RelationFamily.POINT_SHAPE: 6,
        RelationFamily.SHAPE_SHAPE: 9,
    }


def test_relation_name_normalization():
    assert relation_type("Angle Bisector") is RELATIONS["angle-bisector"]
    assert relation_type("foot_of_perpendicular") is RELATIONS["foot-of-perpendicular"]
    with pytest.raises(UnknownRelationError):
        relation_type("collinear-ish")


@pytest.mark.parametrize("text, kind, labels", [
    ("segment BA", "segment", ("A", "B")),
    ("BA", "segment", ("A", "B")),
    ("M", "point", ("M",)),
    ("∠CBA", "angle", ("A", "B", "C")),
    ("angle B", "angle", ("B",)),
    ("triangle CAB", "polygon-shape", ("A", "B", "C")),
    ("quadrilateral DCBA", "polygon-shape", ("A", "B", "C", "D")),
    ("circle O", "circle", ("O",)),
    ("line l", "line", ("l",)),
    ("arc BA", "arc", ("A", "B")),
    ("point A'", "point", ("A'",)),
])
def test_parse_entity_canonical(text, kind, labels):
    e = parse_entity(text)
    assert (e.kind, e.labels) == (kind, labels)


def test_polygon_cycle_is_minimal_rotation_or_reflection():
    assert EntityRef("square", ("C", "D", "A", "B")).labels == ("A", "B", "C", "D")
    assert EntityRef("square", ("C", "B", "A", "D")).labels == ("A", "B", "C", "D")
    # a different cyclic order is a different quadrilateral
    assert EntityRef("square", ("A", "C", "B", "D")).labels != ("A", "B", "C", "D")


def test_midpoint_example_parses_and_canonicalizes():
    kp = parse_keypoint_line("R: midpoint(M; segment BA)")
    assert kp.dimension is Dimension.SPATIAL
    assert str(kp) == "R: midpoint(point M; segment AB)"


def test_arity_error_reports_line():
    with pytest.raises(ArityError) as exc:
        parse_keypoint_document("E: point A\n\nR: midpoint(M)")
    assert exc.value.line == 3


@pytest.mark.parametrize("bad", [
    "X: point A",
    "E:",
    "R: midpoint point M",
    "R: frobnicate(point A; point B)",
    "N: length(segment AB)",
    "E: segment ABC",
    "E: angle AB",
    "N: weight(segment AB) = 3",
])
def test_malformed_lines_raise(bad):
    with pytest.raises(KeypointSyntaxError):
        parse_keypoint_line(bad)


def test_numerical_values_are_exact_and_units_normalized():
    a = parse_keypoint_line("N: length(segment AB) = 0.5").payload
    b = parse_keypoint_line("N: length(segment BA) = 1/2").payload
    assert a == b and a.value == Fraction(1, 2)
    deg = parse_keypoint_line("N: angle(angle ABC) = 60°").payload
    assert deg.quantity == "angle-measure" and deg.unit == "degree"
    expr = parse_keypoint_line("N: length(segment AB) = expr:  2x  + 1").payload
    assert expr.expression == "2x + 1" and expr.value is None


def test_ratio_keeps_subject_order():
    ab_cd = parse_keypoint_line("N: ratio(segment AB; segment CD) = 2").payload
    cd_ab = parse_keypoint_line("N: ratio(segment CD; segment AB) = 2").payload
    assert ab_cd != cd_ab
    assert ab_cd.comparator == "ratio-of"


def test_numerical_needs_exactly_one_of_value_or_expression():
    with pytest.raises(KeypointSyntaxError):
        NumericalK("length", (parse_entity("AB"),))
    with pytest.raises(KeypointSyntaxError):
        NumericalK("length", (parse_entity("AB"),), value=Fraction(1), expression="x")


def test_document_dedupes_and_skips_comments():
    ks = parse_keypoint_document("# figure 1\nE: segment AB\nE: segment BA\n\nE: point C\n")
    assert ks.counts() == {"E": 2, "R": 0, "N": 0}
    assert parse_keypoint_document("# none") == KeypointSet()


def test_serialize_order_is_dimension_then_text():
    ks = parse_keypoint_document("N: radius(circle O) = 2\nE: point B\nR: parallel(CD; AB)\nE: point A")
    assert serialize_keypoints(ks).splitlines() == [
        "E: point A",
        "E: point B",
        "R: parallel(segment AB; segment CD)",
        "N: radius(circle O) = 2",
    ]


@settings(max_examples=300, deadline=None)
@given(st.integers(min_value=0, max_value=2**32 - 1))
def test_property_round_trip_and_idempotence(seed):
    rng = random.Random(seed)
    ks = gen.keypoint_set(rng)
    assert parse_keypoint_document(serialize_keypoints(ks)) == ks
    for kp in ks.keypoints():
        assert canonicalize(canonicalize(kp)) == canonicalize(kp) == kp
