"""Covered-item matching and recall scoring for keypoint sets."""

from __future__ import annotations

import math
from dataclasses import dataclass
from decimal import ROUND_HALF_UP, Decimal
from typing import Iterable, Optional, Sequence

from .keypoints import (
    Dimension,
    ElementK,
    Keypoint,
    KeypointSet,
    NumericalK,
    SpatialK,
    canonicalize,
)

CLASS_TAGS = ("AG", "PG", "SG")
DIFFICULTY_TAGS = ("T1", "T2", "T3", "T4")


class DimensionMismatchError(ValueError):
    pass


def _dimension_of(item) -> Dimension:
    if isinstance(item, Keypoint):
        return item.dimension
    if isinstance(item, ElementK):
        return Dimension.ELEMENT
    if isinstance(item, SpatialK):
        return Dimension.SPATIAL
    if isinstance(item, NumericalK):
        return Dimension.NUMERICAL
    raise TypeError(f"not a keypoint: {item!r}")


def _units_compatible(a: str | None, b: str | None) -> bool:
    return a == b or a is None or b is None


def equivalent(a, b) -> bool:
    """Deterministic stand-in for the judge's semantic equivalence.

    Accepts :class:`Keypoint` objects or bare payloads. Numerical values are
    compared exactly; a unitless value matches the same value with a unit.
    """
    dim = _dimension_of(a)
    if _dimension_of(b) is not dim:
        raise DimensionMismatchError(f"cannot compare {dim.value} with {_dimension_of(b).value}")
    pa = canonicalize(a).payload if isinstance(a, Keypoint) else a
    pb = canonicalize(b).payload if isinstance(b, Keypoint) else b
    if dim is not Dimension.NUMERICAL:
        return pa == pb
    if (pa.quantity, pa.comparator, pa.subjects) != (pb.quantity, pb.comparator, pb.subjects):
        return False
    if not _units_compatible(pa.unit, pb.unit):
        return False
    if pa.value is not None and pb.value is not None:
        return pa.value == pb.value
    if pa.expression is not None and pb.expression is not None:
        return pa.expression == pb.expression
    return False


@dataclass(frozen=True)
class MatchResult:
    """Covered ground-truth items for one dimension.

    ``pairs`` index into the canonically sorted ground-truth and response
    item lists. A judge that names covered items without pointing at a
    response item yields ``None`` on the response side.
    """

    dimension: Dimension
    pairs: tuple[tuple[int, Optional[int]], ...]
    gt_count: int
    response_count: int

    def __post_init__(self):
        gt_side = [g for g, _ in self.pairs]
        resp_side = [r for _, r in self.pairs if r is not None]
        if len(set(gt_side)) != len(gt_side) or len(set(resp_side)) != len(resp_side):
            raise ValueError("pairs must be one-to-one")
        if self.tp_count > self.gt_count:
            raise ValueError("tp_count exceeds gt_count")

    @property
    def tp_count(self) -> int:
        return len(self.pairs)


def _max_matching(adjacency: list[list[int]], n_right: int) -> list[Optional[int]]:
    # Kuhn's augmenting paths; left vertices and their neighbours are visited in
    # index order, so the result is a deterministic function of the sorted inputs.
    match_right: list[Optional[int]] = [None] * n_right

    def augment(u: int, seen: list[bool]) -> bool:
        for v in adjacency[u]:
            if seen[v]:
                continue
            seen[v] = True
            if match_right[v] is None or augment(match_right[v], seen):
                match_right[v] = u
                return True
        return False

    for u in range(len(adjacency)):
        augment(u, [False] * n_right)
    match_left: list[Optional[int]] = [None] * len(adjacency)
    for v, u in enumerate(match_right):
        if u is not None:
            match_left[u] = v
    return match_left


def oracle_match(response: KeypointSet, gt: KeypointSet, dim: Dimension | str) -> MatchResult:
    """Maximum one-to-one matching of gt items to equivalent response items."""
    dim = Dimension(dim)
    gt_items = gt.sorted_items(dim)
    resp_items = response.sorted_items(dim)
    adjacency = [
        [j for j, r in enumerate(resp_items) if equivalent(g, r)]
        for g in gt_items
    ]
    match_left = _max_matching(adjacency, len(resp_items))
    pairs = tuple((i, j) for i, j in enumerate(match_left) if j is not None)
    return MatchResult(dim, pairs, len(gt_items), len(resp_items))


def match_all(response: KeypointSet, gt: KeypointSet) -> tuple[MatchResult, MatchResult, MatchResult]:
    return tuple(oracle_match(response, gt, d) for d in Dimension)  # type: ignore[return-value]


def recall_score(match: MatchResult) -> Optional[float]:
    """``tp / gt``; ``None`` when the ground truth has nothing in this dimension."""
    if match.gt_count == 0:
        return None
    return match.tp_count / match.gt_count


def _mean_defined(values: Iterable[Optional[float]]) -> Optional[float]:
    defined = [v for v in values if v is not None]
    if not defined:
        return None
    return math.fsum(defined) / len(defined)


@dataclass(frozen=True)
class DimensionScores:
    s_element: Optional[float]
    s_spatial: Optional[float]
    s_numerical: Optional[float]

    def __post_init__(self):
        for v in self.as_tuple():
            if v is not None and not 0.0 <= v <= 1.0:
                raise ValueError(f"score {v} outside [0, 1]")

    def as_tuple(self) -> tuple[Optional[float], Optional[float], Optional[float]]:
        return (self.s_element, self.s_spatial, self.s_numerical)

    @property
    def mean(self) -> Optional[float]:
        return _mean_defined(self.as_tuple())


def dimension_scores(matches: Sequence[MatchResult]) -> DimensionScores:
    by_dim = {m.dimension: m for m in matches}
    if set(by_dim) != set(Dimension) or len(matches) != 3:
        raise ValueError("need exactly one MatchResult per dimension")
    return DimensionScores(*(recall_score(by_dim[d]) for d in Dimension))


def round_half_up(value: float, places: int = 1) -> float:
    # Pre-round to kill binary noise (e.g. 48.449999...) before the half-up step.
    exact = Decimal(repr(round(value, 9)))
    return float(exact.quantize(Decimal(1).scaleb(-places), rounding=ROUND_HALF_UP))


SCORE_DIMENSIONS = ("Element", "Relation", "Numerical")
BENCH_COLUMNS = CLASS_TAGS + DIFFICULTY_TAGS + ("Overall",)


@dataclass(frozen=True)
class BenchTable:
    """Percent scores by dimension and by class or difficulty group.

    ``cells[dimension][column]`` is a percent rounded half-up to one decimal,
    or ``None`` when no record in the group defines that dimension.
    """

    cells: dict
    avg: Optional[float]
    counts: dict

    def row(self, dimension: str) -> list[Optional[float]]:
        return [self.cells[dimension][c] for c in BENCH_COLUMNS]

    @property
    def overall(self) -> tuple[Optional[float], ...]:
        return tuple(self.cells[d]["Overall"] for d in SCORE_DIMENSIONS)

    @property
    def is_empty(self) -> bool:
        return self.counts.get("Overall", 0) == 0

    def to_dict(self) -> dict:
        return {"cells": self.cells, "avg": self.avg, "counts": self.counts}

    @classmethod
    def from_dict(cls, d: dict) -> "BenchTable":
        return cls(cells=d["cells"], avg=d["avg"], counts=d["counts"])


def _normalize_difficulty(tag) -> str:
    tag = str(tag).strip().upper()
    return tag if tag.startswith("T") else f"T{tag}"


def aggregate_scores(rows: Iterable[tuple[DimensionScores, str, str]]) -> BenchTable:
    """Group per-caption scores by class and difficulty.

    Group and Overall cells average the defined scores of their records; the
    Avg value is the mean of the three Overall means, rounded at emission only.
    """
    groups: dict[str, list[DimensionScores]] = {c: [] for c in BENCH_COLUMNS}
    for scores, cls, difficulty in rows:
        cls = str(cls).strip().upper()
        difficulty = _normalize_difficulty(difficulty)
        if cls not in CLASS_TAGS:
            raise ValueError(f"unknown class tag {cls!r}")
        if difficulty not in DIFFICULTY_TAGS:
            raise ValueError(f"unknown difficulty tag {difficulty!r}")
        groups[cls].append(scores)
        groups[difficulty].append(scores)
        groups["Overall"].append(scores)

    cells: dict[str, dict[str, Optional[float]]] = {d: {} for d in SCORE_DIMENSIONS}
    raw_overall: list[Optional[float]] = []
    for i, dim in enumerate(SCORE_DIMENSIONS):
        for col in BENCH_COLUMNS:
            mean = _mean_defined(s.as_tuple()[i] for s in groups[col])
            cells[dim][col] = None if mean is None else round_half_up(100.0 * mean)
            if col == "Overall":
                raw_overall.append(None if mean is None else 100.0 * mean)
    avg = _mean_defined(raw_overall)
    return BenchTable(
        cells=cells,
        avg=None if avg is None else round_half_up(avg),
        counts={c: len(v) for c, v in groups.items()},
    )
