"""Geometric keypoints: data model, canonical forms and the line notation.

A caption is decomposed into three sets of atomic facts:

* Element keypoints -- named objects (``E: segment AB``)
* Spatial keypoints -- taxonomy relations (``R: midpoint(M; segment AB)``)
* Numerical keypoints -- quantities bound to entities
  (``N: length(segment AB) = 5 cm``)

Every constructor returns a canonical value, so structural equality of two
keypoints is the equivalence used by the deterministic matcher.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from enum import Enum
from fractions import Fraction
from typing import Iterable, Union


class KeypointError(ValueError):
    """Base class for keypoint construction and parsing failures."""

    def __init__(self, message: str, line: int | None = None):
        self.message = message
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)

    def at_line(self, line: int) -> "KeypointError":
        return type(self)(self.message, line)


class KeypointSyntaxError(KeypointError):
    pass


class ArityError(KeypointSyntaxError):
    pass


class UnknownRelationError(KeypointSyntaxError):
    pass


class Dimension(str, Enum):
    ELEMENT = "E"
    SPATIAL = "R"
    NUMERICAL = "N"


# --------------------------------------------------------------------------
# Entities

ENTITY_KINDS = (
    "point", "segment", "line", "ray", "angle", "arc", "circle",
    "polygon-shape", "axis", "curve", "region",
)

_ALL_SHAPE_NAMES = {
    "triangle", "quadrilateral", "parallelogram", "trapezoid", "rectangle",
    "square", "rhombus", "kite", "pentagon", "hexagon", "polygon",
}

_KIND_ALIASES = {
    "pt": "point",
    "seg": "segment",
    "polygon-shape": "polygon-shape",
    "shape": "polygon-shape",
}

_POINT_LABEL = re.compile(r"[A-Z][0-9]*'*")
_POINT_RUN = re.compile(r"(?:[A-Z][0-9]*'*)+")

# (min, max) label counts; None means unbounded
_LABEL_ARITY = {
    "point": (1, 1),
    "segment": (2, 2),
    "line": (1, 2),
    "ray": (2, 2),
    "angle": (1, 3),
    "arc": (2, 3),
    "circle": (1, 1),
    "polygon-shape": (3, None),
    "axis": (1, 1),
    "curve": (1, None),
    "region": (1, None),
}


def _min_cycle(labels: tuple[str, ...]) -> tuple[str, ...]:
    n = len(labels)
    candidates = []
    for seq in (labels, labels[::-1]):
        for i in range(n):
            candidates.append(seq[i:] + seq[:i])
    return min(candidates)


@dataclass(frozen=True)
class EntityRef:
    """A reference to one geometric object by its labels.

    Construction canonicalizes: unordered label lists are sorted, polygon
    vertex cycles are reduced to their minimal rotation/reflection.
    """

    kind: str
    labels: tuple[str, ...]
    shape_name: str | None = None

    def __post_init__(self):
        kind = _KIND_ALIASES.get(self.kind.lower(), self.kind.lower())
        shape_name = self.shape_name.lower() if self.shape_name else None
        if kind in _ALL_SHAPE_NAMES:
            if shape_name is None and kind != "polygon":
                shape_name = kind
            kind = "polygon-shape"
        if kind not in ENTITY_KINDS:
            raise KeypointSyntaxError(f"unknown entity kind {self.kind!r}")
        labels = tuple(str(lab).strip() for lab in self.labels)
        if not labels or any(not lab for lab in labels):
            raise ArityError(f"{kind} needs nonempty labels")
        if kind == "point":
            labels = tuple(lab.upper() if len(lab) == 1 else lab for lab in labels)
        lo, hi = _LABEL_ARITY[kind]
        if len(labels) < lo or (hi is not None and len(labels) > hi):
            raise ArityError(f"{kind} takes {lo}..{hi or 'n'} labels, got {len(labels)}")
        if kind == "angle" and len(labels) == 2:
            raise ArityError("angle takes 1 or 3 labels")
        if kind in ("segment", "line"):
            labels = tuple(sorted(labels))
        elif kind in ("angle", "arc") and len(labels) == 3:
            a, vertex, b = labels
            labels = (min(a, b), vertex, max(a, b))
        elif kind == "arc":
            labels = tuple(sorted(labels))
        elif kind == "polygon-shape":
            labels = _min_cycle(labels)
        object.__setattr__(self, "kind", kind)
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "shape_name", shape_name)

    def __str__(self) -> str:
        word = self.kind
        if self.kind == "polygon-shape":
            word = self.shape_name or "polygon"
        return f"{word} {_format_labels(self.labels)}"

    @property
    def point_labels(self) -> frozenset[str]:
        return frozenset(self.labels)


def _format_labels(labels: tuple[str, ...]) -> str:
    if len(labels) > 1 and all(_POINT_LABEL.fullmatch(lab) for lab in labels):
        return "".join(labels)
    return " ".join(labels)


def _split_labels(text: str) -> tuple[str, ...]:
    text = text.strip()
    if re.search(r"[\s,]", text):
        return tuple(tok for tok in re.split(r"[\s,]+", text) if tok)
    if _POINT_RUN.fullmatch(text):
        return tuple(_POINT_LABEL.findall(text))
    return (text,)


def parse_entity(text: str) -> EntityRef:
    """Parse ``kind labels``; a bare label run defaults to point/segment/angle."""
    text = text.strip()
    if not text:
        raise KeypointSyntaxError("empty subject")
    if text.startswith("∠"):
        return EntityRef("angle", _split_labels(text[1:]))
    head, _, rest = text.partition(" ")
    word = head.lower()
    if rest and (word in ENTITY_KINDS or word in _ALL_SHAPE_NAMES or word in _KIND_ALIASES):
        return EntityRef(word, _split_labels(rest))
    if not rest and _POINT_RUN.fullmatch(text):
        labels = tuple(_POINT_LABEL.findall(text))
        default = {1: "point", 2: "segment", 3: "angle"}.get(len(labels))
        if default is None:
            raise KeypointSyntaxError(f"cannot infer entity kind for {text!r}")
        return EntityRef(default, labels)
    raise KeypointSyntaxError(f"cannot parse entity {text!r}")


# --------------------------------------------------------------------------
# Relation taxonomy


class RelationFamily(str, Enum):
    POINT_LINE = "PointLine"
    LINE_LINE = "LineLine"
    LINE_SHAPE = "LineShape"
    POINT_SHAPE = "PointShape"
    SHAPE_SHAPE = "ShapeShape"


# name -> (family, min subjects, max subjects, symmetric)
_TAXONOMY: dict[str, tuple[RelationFamily, int, int, bool]] = {}


def _register(family: RelationFamily, spec: Iterable[tuple[str, int, int, bool]]) -> None:
    for name, lo, hi, sym in spec:
        _TAXONOMY[name] = (family, lo, hi, sym)


_register(RelationFamily.POINT_LINE, [
    ("midpoint", 2, 2, False),
    ("foot-of-perpendicular", 2, 3, False),
    ("intersection-point", 3, 4, False),
    ("trisection-point", 2, 3, False),
    ("endpoint", 2, 2, False),
])
_register(RelationFamily.LINE_LINE, [
    ("perpendicular", 2, 2, True),
    ("parallel", 2, 2, True),
    ("oblique-intersection", 2, 2, True),
    ("coincidence", 2, 2, True),
])
_register(RelationFamily.LINE_SHAPE, [
    ("angle-bisector", 2, 2, False),
    ("diagonal", 2, 2, False),
    ("median", 2, 2, False),
    ("altitude", 2, 2, False),
    ("chord", 2, 2, False),
    ("tangent", 2, 3, False),
    ("diameter", 2, 2, False),
])
_register(RelationFamily.POINT_SHAPE, [
    ("centroid", 2, 2, False),
    ("orthocenter", 2, 2, False),
    ("circumcenter", 2, 2, False),
    ("incenter", 2, 2, False),
    ("vertex", 2, 2, False),
    ("circle-center", 2, 2, False),
])
_register(RelationFamily.SHAPE_SHAPE, [
    ("disjoint", 2, 2, True),
    ("tangency", 2, 2, True),
    ("intersection", 2, 2, True),
    ("containment", 2, 2, False),
    ("congruence", 2, 2, True),
    ("similarity", 2, 2, True),
    ("concentric", 2, 2, True),
    ("inscribed", 2, 2, False),
    ("circumscribed", 2, 2, False),
])


@dataclass(frozen=True)
class RelationType:
    """One member of the closed spatial-relation taxonomy."""

    family: RelationFamily
    name: str

    def __post_init__(self):
        entry = _TAXONOMY.get(self.name)
        if entry is None:
            raise UnknownRelationError(f"unknown relation {self.name!r}")
        family = RelationFamily(self.family)
        if entry[0] is not family:
            raise UnknownRelationError(f"{self.name!r} is not a {family.value} relation")
        object.__setattr__(self, "family", family)

    @property
    def min_arity(self) -> int:
        return _TAXONOMY[self.name][1]

    @property
    def max_arity(self) -> int:
        return _TAXONOMY[self.name][2]

    @property
    def symmetric(self) -> bool:
        return _TAXONOMY[self.name][3]


RELATIONS: dict[str, RelationType] = {
    name: RelationType(entry[0], name) for name, entry in _TAXONOMY.items()
}


def relation_type(name: str) -> RelationType:
    key = re.sub(r"[\s_]+", "-", name.strip().lower())
    try:
        return RELATIONS[key]
    except KeyError:
        raise UnknownRelationError(f"unknown relation {name!r}") from None


# --------------------------------------------------------------------------
# Keypoint payloads


@dataclass(frozen=True)
class ElementK:
    entity: EntityRef

    def __str__(self) -> str:
        return str(self.entity)


@dataclass(frozen=True)
class SpatialK:
    relation: RelationType
    subjects: tuple[EntityRef, ...]

    def __post_init__(self):
        rel = self.relation
        if isinstance(rel, str):
            rel = relation_type(rel)
        subjects = tuple(self.subjects)
        if not rel.min_arity <= len(subjects) <= rel.max_arity:
            raise ArityError(
                f"{rel.name} takes {rel.min_arity}..{rel.max_arity} subjects, got {len(subjects)}"
            )
        if rel.symmetric:
            subjects = tuple(sorted(subjects, key=str))
        object.__setattr__(self, "relation", rel)
        object.__setattr__(self, "subjects", subjects)

    def __str__(self) -> str:
        return f"{self.relation.name}({'; '.join(map(str, self.subjects))})"


QUANTITIES = (
    "length", "angle-measure", "area", "radius", "diameter", "perimeter",
    "coordinate", "ratio", "count", "other",
)
_QUANTITY_ALIASES = {"angle": "angle-measure", "measure": "angle-measure", "coord": "coordinate"}

_UNIT_ALIASES = {
    "°": "degree", "deg": "degree", "degrees": "degree", "∘": "degree",
    "rad": "radian", "radians": "radian",
    "cm^2": "cm²", "cm2": "cm²", "m^2": "m²", "m2": "m²",
}

_RATIONAL = re.compile(r"[+-]?(?:\d+/\d+|\d+(?:\.\d+)?|\.\d+)")


def parse_rational(text: str) -> Fraction | None:
    """Exact value of an integer, fraction or terminating decimal, else None."""
    text = text.strip()
    if not _RATIONAL.fullmatch(text):
        return None
    value = Fraction(text)
    return value


def normalize_unit(unit: str | None) -> str | None:
    if unit is None:
        return None
    unit = unit.strip().lower()
    if not unit:
        return None
    return _UNIT_ALIASES.get(unit, unit)


def _format_rational(value: Fraction) -> str:
    if value.denominator == 1:
        return str(value.numerator)
    return f"{value.numerator}/{value.denominator}"


@dataclass(frozen=True)
class NumericalK:
    """A value bound to entities, e.g. ``length(segment AB) = 5 cm``.

    Exactly one of ``value`` (exact rational) and ``expression`` (verbatim
    symbolic text such as ``2x``) is set.
    """

    quantity: str
    subjects: tuple[EntityRef, ...]
    value: Fraction | None = None
    unit: str | None = None
    expression: str | None = None
    comparator: str = field(default="equals")

    def __post_init__(self):
        quantity = self.quantity.strip().lower()
        quantity = _QUANTITY_ALIASES.get(quantity, quantity)
        if quantity not in QUANTITIES:
            raise KeypointSyntaxError(f"unknown quantity {self.quantity!r}")
        subjects = tuple(self.subjects)
        if not subjects:
            raise ArityError(f"{quantity} needs at least one subject")
        comparator = "ratio-of" if quantity == "ratio" else "equals"
        if comparator == "ratio-of" and len(subjects) < 2:
            raise ArityError("ratio needs at least two subjects")
        if comparator == "equals":
            subjects = tuple(sorted(set(subjects), key=str))
        expression = " ".join(self.expression.split()) if self.expression else None
        value = self.value
        if value is not None and not isinstance(value, Fraction):
            value = Fraction(value)
        if (value is None) == (expression is None):
            raise KeypointSyntaxError("exactly one of value/expression is required")
        object.__setattr__(self, "quantity", quantity)
        object.__setattr__(self, "subjects", subjects)
        object.__setattr__(self, "value", value)
        object.__setattr__(self, "unit", normalize_unit(self.unit))
        object.__setattr__(self, "expression", expression)
        object.__setattr__(self, "comparator", comparator)

    def __str__(self) -> str:
        head = f"{self.quantity}({'; '.join(map(str, self.subjects))}) = "
        if self.expression is not None:
            return head + "expr: " + self.expression
        tail = _format_rational(self.value)
        if self.unit:
            tail += " " + self.unit
        return head + tail


Payload = Union[ElementK, SpatialK, NumericalK]

_PAYLOAD_DIMENSION = {ElementK: Dimension.ELEMENT, SpatialK: Dimension.SPATIAL, NumericalK: Dimension.NUMERICAL}


@dataclass(frozen=True)
class Keypoint:
    dimension: Dimension
    payload: Payload

    def __post_init__(self):
        dim = Dimension(self.dimension)
        if _PAYLOAD_DIMENSION.get(type(self.payload)) is not dim:
            raise KeypointSyntaxError(
                f"{type(self.payload).__name__} payload under dimension {dim.value}"
            )
        object.__setattr__(self, "dimension", dim)

    @classmethod
    def of(cls, payload: Payload) -> "Keypoint":
        return cls(_PAYLOAD_DIMENSION[type(payload)], payload)

    def __str__(self) -> str:
        return f"{self.dimension.value}: {self.payload}"


def canonicalize(kp: Keypoint) -> Keypoint:
    """Return the canonical form of ``kp``.

    Payload constructors already canonicalize, so this rebuilds the payload
    from its parts; the result is idempotent and order-insensitive for
    symmetric relations.
    """
    p = kp.payload
    if isinstance(p, ElementK):
        payload: Payload = ElementK(_recanon(p.entity))
    elif isinstance(p, SpatialK):
        payload = SpatialK(relation_type(p.relation.name), tuple(_recanon(s) for s in p.subjects))
    else:
        payload = NumericalK(
            p.quantity, tuple(_recanon(s) for s in p.subjects),
            value=p.value, unit=p.unit, expression=p.expression,
        )
    return Keypoint(kp.dimension, payload)


def _recanon(entity: EntityRef) -> EntityRef:
    return EntityRef(entity.kind, entity.labels, entity.shape_name)


# --------------------------------------------------------------------------
# Sets and the notation


@dataclass(frozen=True)
class KeypointSet:
    elements: frozenset[ElementK] = frozenset()
    spatial: frozenset[SpatialK] = frozenset()
    numerical: frozenset[NumericalK] = frozenset()

    @classmethod
    def from_keypoints(cls, keypoints: Iterable[Keypoint]) -> "KeypointSet":
        buckets: dict[Dimension, set] = {d: set() for d in Dimension}
        for kp in keypoints:
            buckets[kp.dimension].add(canonicalize(kp).payload)
        return cls(
            frozenset(buckets[Dimension.ELEMENT]),
            frozenset(buckets[Dimension.SPATIAL]),
            frozenset(buckets[Dimension.NUMERICAL]),
        )

    def items(self, dim: Dimension | str) -> frozenset:
        dim = Dimension(dim)
        if dim is Dimension.ELEMENT:
            return self.elements
        if dim is Dimension.SPATIAL:
            return self.spatial
        return self.numerical

    def sorted_items(self, dim: Dimension | str) -> list:
        return sorted(self.items(dim), key=str)

    def keypoints(self) -> list[Keypoint]:
        return [Keypoint(d, p) for d in Dimension for p in self.sorted_items(d)]

    def counts(self) -> dict[str, int]:
        return {d.value: len(self.items(d)) for d in Dimension}

    def __len__(self) -> int:
        return len(self.elements) + len(self.spatial) + len(self.numerical)


_RELATION_BODY = re.compile(r"([A-Za-z][A-Za-z _-]*?)\s*\((.*)\)\s*$")
_NUMERIC_BODY = re.compile(r"([A-Za-z][A-Za-z _-]*?)\s*\((.*?)\)\s*=\s*(.+)$")


def _subjects(text: str, lineno: int) -> tuple[EntityRef, ...]:
    parts = [p for p in (s.strip() for s in text.split(";"))]
    if any(not p for p in parts):
        raise KeypointSyntaxError("empty subject", lineno)
    return tuple(parse_entity(p) for p in parts)


def _parse_value(text: str) -> tuple[Fraction | None, str | None, str | None]:
    text = text.strip()
    if text.lower().startswith("expr:"):
        return None, None, text[5:].strip()
    m = re.fullmatch(r"(\S+?)(°)?(?:\s+(\S+))?", text)
    if m:
        value = parse_rational(m.group(1))
        if value is not None and not (m.group(2) and m.group(3)):
            return value, m.group(2) or m.group(3), None
    return None, None, text


def parse_keypoint_line(line: str, lineno: int | None = None) -> Keypoint:
    tag, sep, body = line.partition(":")
    tag = tag.strip().upper()
    if not sep or tag not in ("E", "R", "N"):
        raise KeypointSyntaxError(f"expected 'E:', 'R:' or 'N:' prefix in {line!r}", lineno)
    body = body.strip()
    if not body:
        raise KeypointSyntaxError("empty keypoint body", lineno)
    try:
        if tag == "E":
            return Keypoint.of(ElementK(parse_entity(body)))
        if tag == "R":
            m = _RELATION_BODY.match(body)
            if not m:
                raise KeypointSyntaxError(f"expected relation(subject; ...) in {body!r}", lineno)
            return Keypoint.of(SpatialK(relation_type(m.group(1)), _subjects(m.group(2), lineno)))
        m = _NUMERIC_BODY.match(body)
        if not m:
            raise KeypointSyntaxError(f"expected quantity(subjects) = value in {body!r}", lineno)
        value, unit, expression = _parse_value(m.group(3))
        return Keypoint.of(NumericalK(
            m.group(1), _subjects(m.group(2), lineno),
            value=value, unit=unit, expression=expression,
        ))
    except KeypointError as exc:
        if exc.line is None and lineno is not None:
            raise exc.at_line(lineno) from None
        raise


def parse_keypoint_document(text: str) -> KeypointSet:
    """Parse a notation document into a canonical :class:`KeypointSet`.

    Blank lines and ``#`` comments are skipped; duplicates collapse.
    """
    keypoints = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        keypoints.append(parse_keypoint_line(line, lineno))
    return KeypointSet.from_keypoints(keypoints)


def serialize_keypoints(ks: KeypointSet) -> str:
    return "\n".join(str(kp) for kp in ks.keypoints())
