"""Independent reference implementations used to check the library."""

from __future__ import annotations

import math
from fractions import Fraction

from capgeo.keypoints import NumericalK


def same_fact(a, b) -> bool:
    """Equivalence written against the printed notation, not the matcher's code."""
    if isinstance(a, NumericalK) and isinstance(b, NumericalK):
        head_a = (a.quantity, [str(s) for s in a.subjects])
        head_b = (b.quantity, [str(s) for s in b.subjects])
        if head_a != head_b:
            return False
        if a.unit and b.unit and a.unit != b.unit:
            return False
        if a.expression is not None or b.expression is not None:
            return a.expression == b.expression
        return a.value == b.value
    return type(a) is type(b) and str(a) == str(b)


def brute_force_tp(gt_items, resp_items, equiv=same_fact) -> int:
    """Largest one-to-one matching by enumerating every injective assignment.

    Each ground-truth item in turn is left unmatched or given any still unused
    response item it is equivalent to; the best count over all leaves wins.
    """
    gt_items, resp_items = list(gt_items), list(resp_items)
    best = 0

    def walk(i: int, used: frozenset, count: int) -> None:
        nonlocal best
        if count + (len(gt_items) - i) <= best:
            return  # cannot beat the incumbent; pruning keeps enumeration exact
        if i == len(gt_items):
            best = max(best, count)
            return
        for j, r in enumerate(resp_items):
            if j not in used and equiv(gt_items[i], r):
                walk(i + 1, used | {j}, count + 1)
        walk(i + 1, used, count)

    walk(0, frozenset(), 0)
    return best


def pearson_reference(points) -> float:
    """Computational formula in exact rationals; one float sqrt at the end."""
    pts = [(Fraction(x), Fraction(y)) for x, y in points]
    n = len(pts)
    sx = sum(x for x, _ in pts)
    sy = sum(y for _, y in pts)
    sxx = sum(x * x for x, _ in pts)
    syy = sum(y * y for _, y in pts)
    sxy = sum(x * y for x, y in pts)
    num = n * sxy - sx * sy
    den = (n * sxx - sx * sx) * (n * syy - sy * sy)
    return float(num) / math.sqrt(float(den))
