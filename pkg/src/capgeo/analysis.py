"""Result tables, caption-quality/accuracy correlation and report files."""

from __future__ import annotations

import csv
import io
import json
import math
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Optional, Sequence, Union

from .gateway import _atomic_write
from .matching import BENCH_COLUMNS, SCORE_DIMENSIONS, BenchTable, round_half_up
from .pipeline import Mode, ReasoningRecord

DASH = "--"
LAYOUTS = ("mathverse", "mathvista-geoqa", "bench")
Cell = Union[str, float, None]


@dataclass(frozen=True)
class AccuracyCell:
    reasoner: str
    captioner: Optional[str]
    mode: str
    benchmark: str
    variant: str
    correct: int
    n: int

    def __post_init__(self):
        if self.n < 1:
            raise ValueError("accuracy cell needs n >= 1")

    @property
    def accuracy(self) -> float:
        return 100.0 * self.correct / self.n


def accuracy_cells(records: Iterable[ReasoningRecord]) -> list[AccuracyCell]:
    """Recount correct/n from raw records for every combination present."""
    tally: dict[tuple, list[int]] = defaultdict(lambda: [0, 0])
    for r in records:
        key = (r.reasoner, r.captioner, r.mode, r.benchmark, r.variant)
        tally[key][0] += bool(r.correct)
        tally[key][1] += 1
    return [
        AccuracyCell(*key, correct=c, n=n)
        for key, (c, n) in sorted(tally.items(), key=lambda kv: tuple(str(x) for x in kv[0]))
    ]


@dataclass(frozen=True)
class Table:
    name: str
    columns: tuple[str, ...]
    rows: tuple[tuple[Cell, ...], ...] = ()

    def format_cell(self, value: Cell) -> str:
        if value is None:
            return DASH
        if isinstance(value, float):
            return f"{round_half_up(value):.1f}"
        return str(value)

    def formatted_rows(self) -> list[list[str]]:
        return [[self.format_cell(v) for v in row] for row in self.rows]

    def to_markdown(self) -> str:
        lines = [
            "| " + " | ".join(self.columns) + " |",
            "|" + "|".join("---" for _ in self.columns) + "|",
        ]
        lines += ["| " + " | ".join(r) + " |" for r in self.formatted_rows()]
        return "\n".join(lines)


def _order(found: Iterable[str], explicit: Optional[Sequence[str]]) -> list[str]:
    found = list(dict.fromkeys(found))
    if explicit is None:
        return sorted(found)
    return [x for x in explicit if x in found] + sorted(x for x in found if x not in explicit)


def _reasoner_order(cells: Sequence[AccuracyCell], explicit: Optional[Sequence[str]]) -> list[str]:
    if explicit is not None:
        return _order((c.reasoner for c in cells), explicit)
    vision = sorted({c.reasoner for c in cells if c.mode != Mode.CAPTION_WITHOUT_IMAGE.value})
    text_only = sorted({c.reasoner for c in cells} - set(vision))
    return vision + text_only


def _mathverse(cells, reasoners, captioners) -> Table:
    cells = [c for c in cells if c.benchmark == "mathverse"]
    lookup = {(c.variant, c.reasoner, c.captioner, c.mode): round_half_up(c.accuracy) for c in cells}
    caps = _order((c.captioner for c in cells if c.captioner), captioners)
    columns = ["variant", "reasoner", "w/o caption (w img)"]
    for cap in caps:
        columns += [f"{cap} w/o img", f"{cap} w img"]
    rows = []
    for variant in ("vision-only", "vision-intensive"):
        vc = [c for c in cells if c.variant == variant]
        for reasoner in _reasoner_order(vc, reasoners):
            row: list[Cell] = [variant, reasoner, lookup.get((variant, reasoner, None, Mode.DIRECT_VISION.value))]
            for cap in caps:
                row.append(lookup.get((variant, reasoner, cap, Mode.CAPTION_WITHOUT_IMAGE.value)))
                row.append(lookup.get((variant, reasoner, cap, Mode.CAPTION_WITH_IMAGE.value)))
            rows.append(tuple(row))
    return Table("mathverse", tuple(columns), tuple(rows))


def _mathvista_geoqa(cells, reasoners, captioners) -> Table:
    benches = ("mathvista-geometry", "geoqa")
    cells = [c for c in cells if c.benchmark in benches]
    lookup = {(c.benchmark, c.reasoner, c.captioner, c.mode): round_half_up(c.accuracy) for c in cells}
    caps = _order((c.captioner for c in cells if c.captioner), captioners)
    columns = ["reasoner"]
    for b in benches:
        columns += [f"{b} w/o caption"] + [f"{b} {cap}" for cap in caps]
    rows = []
    for reasoner in _reasoner_order(cells, reasoners):
        row: list[Cell] = [reasoner]
        for b in benches:
            row.append(lookup.get((b, reasoner, None, Mode.DIRECT_VISION.value)))
            for cap in caps:
                # one value per captioner: with the image when the reasoner can see it
                value = lookup.get((b, reasoner, cap, Mode.CAPTION_WITH_IMAGE.value))
                if value is None:
                    value = lookup.get((b, reasoner, cap, Mode.CAPTION_WITHOUT_IMAGE.value))
                row.append(value)
        rows.append(tuple(row))
    return Table("mathvista-geoqa", tuple(columns), tuple(rows))


def _bench(tables: Mapping[str, BenchTable], captioners) -> Table:
    columns = ("captioner", "dimension") + BENCH_COLUMNS + ("Avg",)
    rows = []
    for cap in _order(tables, captioners):
        t = tables[cap]
        for dim in SCORE_DIMENSIONS:
            rows.append((cap, dim, *t.row(dim), t.avg))
    return Table("bench", columns, tuple(rows))


def tabulate(
    results,
    layout: str,
    reasoners: Optional[Sequence[str]] = None,
    captioners: Optional[Sequence[str]] = None,
) -> Table:
    """Arrange results in one of the published result-table layouts.

    ``results`` is a sequence of :class:`ReasoningRecord` for the accuracy
    layouts and a mapping ``captioner -> BenchTable`` for ``bench``.
    Combinations with no records become ``None`` (rendered ``--``).
    """
    if layout not in LAYOUTS:
        raise ValueError(f"unknown layout {layout!r}; expected one of {LAYOUTS}")
    if layout == "bench":
        return _bench(results, captioners)
    cells = accuracy_cells(results)
    if layout == "mathverse":
        return _mathverse(cells, reasoners, captioners)
    return _mathvista_geoqa(cells, reasoners, captioners)


def bench_table_from_overall(overall: Sequence[float]) -> BenchTable:
    """A table holding only Overall percentages (for checking the Avg arithmetic)."""
    from .matching import DimensionScores, aggregate_scores

    scores = DimensionScores(*(v / 100.0 for v in overall))
    return aggregate_scores([(scores, "PG", "T1")])


# --------------------------------------------------------------------------
# Correlation


class DegenerateInputError(ValueError):
    pass


@dataclass(frozen=True)
class CorrelationInput:
    points: tuple[tuple[float, float], ...]
    labels: tuple[str, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "points", tuple((float(x), float(y)) for x, y in self.points))
        if len(self.points) < 2:
            raise DegenerateInputError("need at least two points")
        if self.labels and len(self.labels) != len(self.points):
            raise ValueError("one label per point")


def pearson(points: Union[CorrelationInput, Sequence[tuple[float, float]]]) -> Optional[float]:
    """Sample Pearson correlation; ``None`` when either axis has zero variance."""
    if not isinstance(points, CorrelationInput):
        points = CorrelationInput(tuple(points))
    xs = [p[0] for p in points.points]
    ys = [p[1] for p in points.points]
    n = len(xs)
    mx = math.fsum(xs) / n
    my = math.fsum(ys) / n
    dx = [x - mx for x in xs]
    dy = [y - my for y in ys]
    sxx = math.fsum(d * d for d in dx)
    syy = math.fsum(d * d for d in dy)
    if sxx == 0.0 or syy == 0.0:
        return None
    sxy = math.fsum(a * b for a, b in zip(dx, dy))
    r = sxy / math.sqrt(sxx * syy)
    return max(-1.0, min(1.0, r))


@dataclass(frozen=True)
class CorrelationResult:
    name: str
    r: Optional[float]
    points: tuple[tuple[float, float], ...]
    labels: tuple[str, ...]
    x_label: str = "caption score"
    y_label: str = "accuracy"
    statistic: str = "pearson"

    @property
    def defined(self) -> bool:
        return self.r is not None


def correlate(
    x_by_label: Mapping[str, float],
    y_by_label: Mapping[str, float],
    name: str = "correlation",
    x_label: str = "caption score",
    y_label: str = "accuracy",
) -> CorrelationResult:
    """Pair values sharing a label (e.g. captioner id) and correlate them."""
    labels = tuple(sorted(set(x_by_label) & set(y_by_label)))
    pts = tuple((float(x_by_label[k]), float(y_by_label[k])) for k in labels)
    r = pearson(CorrelationInput(pts, labels))
    return CorrelationResult(name, r, pts, labels, x_label, y_label)


def captioner_accuracies(
    records: Iterable[ReasoningRecord],
    reasoner: str,
    mode: str = Mode.CAPTION_WITH_IMAGE.value,
    benchmark: Optional[str] = None,
    variant: Optional[str] = None,
) -> dict[str, float]:
    """Accuracy of one reasoner per captioner, for the y axis of the correlation."""
    out = {}
    for c in accuracy_cells(records):
        if c.reasoner != reasoner or c.mode != mode or c.captioner is None:
            continue
        if benchmark is not None and c.benchmark != benchmark:
            continue
        if variant is not None and c.variant != variant:
            continue
        out.setdefault(c.captioner, [0, 0])
        out[c.captioner][0] += c.correct
        out[c.captioner][1] += c.n
    return {k: 100.0 * c / n for k, (c, n) in out.items()}


# --------------------------------------------------------------------------
# Emission

FORMATS = ("markdown", "csv", "jsonl")


def _csv_text(table: Table, run_id: str) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(("run_id",) + table.columns)
    for row in table.formatted_rows():
        writer.writerow([run_id] + row)
    return buf.getvalue()


def _parse_cell(text: str) -> Cell:
    if text == DASH:
        return None
    try:
        return float(text)
    except ValueError:
        return text


def read_table_csv(path: Union[str, Path]) -> tuple[str, Table]:
    """Inverse of the csv emission: returns ``(run_id, table)``."""
    path = Path(path)
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    header, body = rows[0], rows[1:]
    run_ids = {r[0] for r in body}
    run_id = run_ids.pop() if len(run_ids) == 1 else ""
    # label columns stay text even when they look numeric
    label_cols = {"variant", "reasoner", "captioner", "dimension", "label"}
    parsed = tuple(
        tuple(v if h in label_cols else _parse_cell(v) for h, v in zip(header[1:], r[1:]))
        for r in body
    )
    return run_id, Table(path.stem, tuple(header[1:]), parsed)


def _correlation_table(correlations: Sequence[CorrelationResult]) -> Table:
    rows = []
    for c in correlations:
        for label, (x, y) in zip(c.labels, c.points):
            r = DASH if c.r is None else f"{c.r:.12f}"
            rows.append((c.name, label, repr(x), repr(y), r))
    return Table(
        "correlation",
        ("name", "label", "x", "y", "r"),
        tuple(rows),
    )


def _correlation_markdown(c: CorrelationResult) -> str:
    r = "undefined (zero variance)" if c.r is None else f"{c.r:.4f}"
    lines = [f"### {c.name}", "", f"{c.statistic} r = {r} over {len(c.points)} points ({c.x_label} vs {c.y_label})", ""]
    lines.append("| label | x | y |")
    lines.append("|---|---|---|")
    lines += [f"| {lab} | {x:.1f} | {y:.1f} |" for lab, (x, y) in zip(c.labels, c.points)]
    return "\n".join(lines)


def emit_report(
    tables: Sequence[Table],
    correlations: Sequence[CorrelationResult],
    fmt: str,
    out_path: Union[str, Path],
    run_id: str,
) -> list[Path]:
    """Write tables and correlations; output bytes depend only on the inputs.

    ``markdown`` writes ``report.md``; ``csv`` one ``<table>.csv`` per table
    plus ``correlation.csv``; ``jsonl`` a single ``report.jsonl``.
    """
    if fmt not in FORMATS:
        raise ValueError(f"unknown format {fmt!r}; expected one of {FORMATS}")
    out = Path(out_path)
    out.mkdir(parents=True, exist_ok=True)
    written: list[Path] = []
    if fmt == "markdown":
        parts = [f"# CapGeo report (run {run_id})", ""]
        for t in tables:
            parts += [f"## {t.name}", "", t.to_markdown(), ""]
        if correlations:
            parts += ["## correlation", ""]
            for c in correlations:
                parts += [_correlation_markdown(c), ""]
        path = out / "report.md"
        _atomic_write(path, ("\n".join(parts).rstrip() + "\n").encode("utf-8"))
        written.append(path)
    elif fmt == "csv":
        for t in list(tables) + [_correlation_table(correlations)]:
            path = out / f"{t.name}.csv"
            _atomic_write(path, _csv_text(t, run_id).encode("utf-8"))
            written.append(path)
    else:
        lines = []
        for t in tables:
            for row in t.formatted_rows():
                lines.append({"run_id": run_id, "table": t.name, **dict(zip(t.columns, row))})
        for c in correlations:
            lines.append({
                "run_id": run_id, "table": "correlation", "name": c.name, "statistic": c.statistic,
                "r": c.r, "labels": list(c.labels), "points": [list(p) for p in c.points],
            })
        path = out / "report.jsonl"
        text = "".join(json.dumps(x, ensure_ascii=False, sort_keys=True) + "\n" for x in lines)
        _atomic_write(path, text.encode("utf-8"))
        written.append(path)
    return written
