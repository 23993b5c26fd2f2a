"""Keypoint-based caption evaluation: extract, match, score, aggregate."""

from __future__ import annotations

import json
import logging
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Optional, Sequence

from .gateway import ChatRequest, Decoding, Gateway, GatewayError, Message, ModelSpec, cache_key
from .jsonl import PathLike, iter_jsonl
from .keypoints import (
    Dimension,
    KeypointError,
    KeypointSet,
    parse_keypoint_document,
    serialize_keypoints,
)
from .matching import (
    BenchTable,
    DimensionScores,
    MatchResult,
    aggregate_scores,
    dimension_scores,
    match_all,
)
from .pipeline import ProblemRecord, build_caption_prompt
from .prompts import render

logger = logging.getLogger(__name__)

BENCH_QUESTION = "(No problem statement is given. Describe the figure completely.)"


class JudgeError(Exception):
    pass


class JudgeOutputError(JudgeError):
    """The judge's reply could not be parsed, even after one reformat retry."""


class EmptyCaptionError(JudgeError):
    pass


@dataclass(frozen=True)
class CaptionPair:
    record_id: str
    gt_caption: str
    class_tag: str
    difficulty: str
    response_caption: Optional[str] = None
    image: Optional[str] = None
    language: str = "en"

    def __post_init__(self):
        if not self.gt_caption.strip():
            raise ValueError(f"{self.record_id}: empty ground-truth caption")
        if self.response_caption is not None and not self.response_caption.strip():
            raise ValueError(f"{self.record_id}: empty response caption")
        if self.class_tag not in ("AG", "PG", "SG"):
            raise ValueError(f"{self.record_id}: bad class {self.class_tag!r}")
        if self.difficulty not in ("T1", "T2", "T3", "T4"):
            raise ValueError(f"{self.record_id}: bad difficulty {self.difficulty!r}")


def ingest_pairs(path: PathLike, store=None) -> tuple[list[CaptionPair], list[tuple[int, str]]]:
    """Read a CapGeo-Bench pair file; returns (pairs, [(row, reason), ...])."""
    path = Path(path)
    pairs, rejects, seen = [], [], set()
    for lineno, line in iter_jsonl(path):
        try:
            row = json.loads(line)
            difficulty = str(row["difficulty"]).strip().upper()
            if not difficulty.startswith("T"):
                difficulty = f"T{difficulty}"
            language = str(row.get("language", "en")).lower()
            if language not in ("zh", "en"):
                raise ValueError(f"bad language {language!r}")
            image = None
            if row.get("image_path"):
                image_path = Path(row["image_path"])
                if not image_path.is_absolute():
                    image_path = path.parent / image_path
                if not image_path.is_file():
                    raise ValueError(f"image not found: {row['image_path']}")
                if store is not None:
                    image = store.put_file(image_path)
            pair = CaptionPair(
                record_id=str(row["id"]),
                gt_caption=row["gt_caption"],
                class_tag=str(row["class"]).strip().upper(),
                difficulty=difficulty,
                response_caption=row.get("response_caption"),
                image=image,
                language=language,
            )
            if pair.record_id in seen:
                raise ValueError(f"duplicate id {pair.record_id!r}")
        except (ValueError, KeyError, TypeError) as exc:
            rejects.append((lineno, str(exc)))
            continue
        seen.add(pair.record_id)
        pairs.append(pair)
    return pairs, rejects


# --------------------------------------------------------------------------
# Judges


@dataclass(frozen=True)
class Exchange:
    step: str
    prompt: str
    reply: str
    fingerprint: str = ""
    cache_hit: bool = False


class OracleJudge:
    """Deterministic judge: captions must already be written in keypoint notation."""

    name = "oracle"

    def extract(self, caption: str, role: str, log: list) -> KeypointSet:
        try:
            return parse_keypoint_document(caption)
        except KeypointError as exc:
            raise JudgeOutputError(f"{role} caption is not keypoint notation: {exc}") from exc

    def covered(self, response_set: KeypointSet, gt_set: KeypointSet, log: list):
        return None  # signals: use the oracle matcher


class LLMJudge:
    """Judge backed by a chat model through the gateway.

    ``oracle_matching=True`` keeps model extraction but replaces the
    covered-item step with the deterministic matcher.
    """

    def __init__(
        self,
        gateway: Gateway,
        model: ModelSpec,
        decoding: Optional[Decoding] = None,
        oracle_matching: bool = False,
    ):
        self.gateway = gateway
        self.model = model
        self.decoding = decoding or gateway.decoding
        self.oracle_matching = oracle_matching

    @property
    def name(self) -> str:
        return self.model.id + ("+oracle-match" if self.oracle_matching else "")

    def _ask_parsed(self, step: str, prompt: str, log: list) -> KeypointSet:
        messages = [Message("user", prompt)]
        for attempt in (1, 2):
            req = ChatRequest(self.model.provider, self.model.model, tuple(messages), self.decoding)
            resp = self.gateway.complete(req)
            if not resp.ok:
                raise GatewayError(resp.error or "judge request failed")
            log.append(Exchange(step, messages[-1].text, resp.text, cache_key(req), resp.provenance.cache_hit))
            try:
                if not resp.text.strip():
                    raise KeypointError("empty output")
                return parse_keypoint_document(resp.text)
            except KeypointError as exc:
                if attempt == 2:
                    raise JudgeOutputError(f"{step}: unparseable judge output after retry: {exc}") from exc
                messages += [
                    Message("assistant", resp.text),
                    Message("user", (
                        f"Your output could not be parsed ({exc}). Re-emit the complete answer "
                        "using only lines of the form 'E: ...', 'R: ...' or 'N: ...', or '# none'."
                    )),
                ]
        raise AssertionError("unreachable")

    def extract(self, caption: str, role: str, log: list) -> KeypointSet:
        template = "extract_gt" if role == "ground-truth" else "extract_response"
        return self._ask_parsed(f"extract-{role}", render(template, caption=caption.strip()), log)

    def covered(self, response_set: KeypointSet, gt_set: KeypointSet, log: list):
        if self.oracle_matching:
            return None
        prompt = render(
            "match",
            gt_keypoints=serialize_keypoints(gt_set) or "# none",
            response_keypoints=serialize_keypoints(response_set) or "# none",
        )
        return self._ask_parsed("match", prompt, log)


def extract_keypoints(caption: str, role: str, judge, log: Optional[list] = None) -> KeypointSet:
    if role not in ("ground-truth", "response"):
        raise ValueError(f"role must be 'ground-truth' or 'response', got {role!r}")
    if not caption or not caption.strip():
        raise EmptyCaptionError(f"empty {role} caption")
    return judge.extract(caption, role, log if log is not None else [])


def validate_covered(
    claimed: KeypointSet,
    response_set: KeypointSet,
    gt_set: KeypointSet,
    rejected: Optional[list] = None,
) -> tuple[MatchResult, MatchResult, MatchResult]:
    """Turn a judge's covered-item list into match results.

    Claimed items absent from the ground truth are dropped (and reported in
    ``rejected``); repeated claims count once because sets deduplicate.
    """
    results = []
    for dim in Dimension:
        gt_items = gt_set.sorted_items(dim)
        index = {item: i for i, item in enumerate(gt_items)}
        pairs = []
        for item in claimed.sorted_items(dim):
            if item in index:
                pairs.append((index[item], None))
            else:
                logger.warning("judge claimed %s: %s which is not in the ground truth", dim.value, item)
                if rejected is not None:
                    rejected.append(f"{dim.value}: {item}")
        results.append(MatchResult(dim, tuple(sorted(pairs)), len(gt_items), len(response_set.items(dim))))
    return tuple(results)  # type: ignore[return-value]


def judge_match(
    response_set: KeypointSet,
    gt_set: KeypointSet,
    judge,
    log: Optional[list] = None,
    rejected: Optional[list] = None,
) -> tuple[MatchResult, MatchResult, MatchResult]:
    claimed = judge.covered(response_set, gt_set, log if log is not None else [])
    if claimed is None:
        return match_all(response_set, gt_set)
    return validate_covered(claimed, response_set, gt_set, rejected)


# --------------------------------------------------------------------------
# Traces


@dataclass
class EvalTrace:
    record_id: str
    class_tag: str
    difficulty: str
    judge: str
    gt_set: Optional[KeypointSet] = None
    response_set: Optional[KeypointSet] = None
    matches: Optional[tuple[MatchResult, ...]] = None
    transcripts: list[Exchange] = field(default_factory=list)
    rejected: list[str] = field(default_factory=list)
    error: Optional[str] = None

    @property
    def evaluated(self) -> bool:
        return self.error is None and self.matches is not None

    @property
    def scores(self) -> Optional[DimensionScores]:
        return dimension_scores(self.matches) if self.evaluated else None

    def to_dict(self) -> dict:
        matches = None
        if self.matches is not None:
            matches = {
                m.dimension.value: {
                    "pairs": [list(p) for p in m.pairs],
                    "tp": m.tp_count,
                    "gt": m.gt_count,
                    "response": m.response_count,
                }
                for m in self.matches
            }
        scores = self.scores
        return {
            "record_id": self.record_id,
            "class": self.class_tag,
            "difficulty": self.difficulty,
            "judge": self.judge,
            "gt_keypoints": serialize_keypoints(self.gt_set).splitlines() if self.gt_set is not None else None,
            "response_keypoints": (
                serialize_keypoints(self.response_set).splitlines() if self.response_set is not None else None
            ),
            "matches": matches,
            "scores": None if scores is None else {
                "element": scores.s_element,
                "spatial": scores.s_spatial,
                "numerical": scores.s_numerical,
                "mean": scores.mean,
            },
            "rejected_claims": self.rejected,
            "transcripts": [e.__dict__ for e in self.transcripts],
            "error": self.error,
        }

    def to_text(self) -> str:
        return json.dumps(self.to_dict(), ensure_ascii=False, indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, d: Mapping) -> "EvalTrace":
        def keypoints(lines):
            return None if lines is None else parse_keypoint_document("\n".join(lines))

        matches = None
        if d.get("matches") is not None:
            matches = tuple(
                MatchResult(
                    Dimension(dim),
                    tuple((g, r) for g, r in d["matches"][dim.value]["pairs"]),
                    d["matches"][dim.value]["gt"],
                    d["matches"][dim.value]["response"],
                )
                for dim in Dimension
            )
        return cls(
            record_id=d["record_id"],
            class_tag=d["class"],
            difficulty=d["difficulty"],
            judge=d["judge"],
            gt_set=keypoints(d.get("gt_keypoints")),
            response_set=keypoints(d.get("response_keypoints")),
            matches=matches,
            transcripts=[Exchange(**e) for e in d.get("transcripts", [])],
            rejected=list(d.get("rejected_claims", [])),
            error=d.get("error"),
        )


def evaluate_caption(pair: CaptionPair, judge, response_caption: Optional[str] = None) -> EvalTrace:
    """Extract both keypoint sets, match them and score; errors land in the trace."""
    response_caption = response_caption if response_caption is not None else pair.response_caption
    trace = EvalTrace(pair.record_id, pair.class_tag, pair.difficulty, judge.name)
    try:
        if response_caption is None:
            raise EmptyCaptionError("no response caption")
        trace.gt_set = extract_keypoints(pair.gt_caption, "ground-truth", judge, trace.transcripts)
        trace.response_set = extract_keypoints(response_caption, "response", judge, trace.transcripts)
        trace.matches = judge_match(trace.response_set, trace.gt_set, judge, trace.transcripts, trace.rejected)
    except (JudgeError, GatewayError) as exc:
        trace.error = f"{type(exc).__name__}: {exc}"
    return trace


@dataclass
class BenchReport:
    traces: list[EvalTrace]
    table: BenchTable
    caption_failures: dict = field(default_factory=dict)

    @property
    def coverage(self) -> dict:
        evaluated = sum(t.evaluated for t in self.traces)
        return {"total": len(self.traces), "evaluated": evaluated, "failed": len(self.traces) - evaluated}


def generate_response_captions(
    pairs: Sequence[CaptionPair],
    captioner: ModelSpec,
    gateway: Gateway,
    max_in_flight: int = 4,
) -> tuple[dict[str, str], dict[str, str]]:
    """Caption each pair's figure; returns (captions, failures) keyed by record id."""
    todo = [p for p in pairs if p.image is not None]
    problems = [
        ProblemRecord(p.record_id, "capgeo-bench", BENCH_QUESTION, "", "text", image=p.image)
        for p in todo
    ]
    reqs = [build_caption_prompt(p, captioner, gateway.decoding, gateway.store) for p in problems]
    captions, failures = {}, {}
    for p, resp in zip(todo, gateway.batch_complete(reqs, max_in_flight)):
        if resp.ok and resp.text.strip():
            captions[p.record_id] = resp.text
        else:
            failures[p.record_id] = resp.error or "empty caption"
    for p in pairs:
        if p.image is None:
            failures[p.record_id] = "no image to caption"
    return captions, failures


def run_bench(
    pairs: Sequence[CaptionPair],
    judge,
    captioner: Optional[ModelSpec] = None,
    gateway: Optional[Gateway] = None,
    max_in_flight: int = 4,
) -> BenchReport:
    """Evaluate every pair and aggregate by class and difficulty.

    With a captioner, response captions are generated from the figures;
    otherwise each pair must carry its own ``response_caption``.
    """
    responses: dict[str, Optional[str]] = {p.record_id: p.response_caption for p in pairs}
    failures: dict[str, str] = {}
    if captioner is not None:
        if gateway is None:
            raise ValueError("a gateway is required to generate captions")
        generated, failures = generate_response_captions(pairs, captioner, gateway, max_in_flight)
        responses = {p.record_id: generated.get(p.record_id) for p in pairs}

    def one(pair: CaptionPair) -> EvalTrace:
        trace = evaluate_caption(pair, judge, responses[pair.record_id])
        if pair.record_id in failures and trace.error:
            trace.error = f"captioning failed: {failures[pair.record_id]}"
        return trace

    if max_in_flight <= 1 or isinstance(judge, OracleJudge):
        traces = [one(p) for p in pairs]
    else:
        with ThreadPoolExecutor(max_workers=max_in_flight) as pool:
            traces = list(pool.map(one, pairs))
    traces.sort(key=lambda t: t.record_id)
    table = aggregate_scores((t.scores, t.class_tag, t.difficulty) for t in traces if t.evaluated)
    return BenchReport(traces, table, failures)


_UNSAFE = re.compile(r"[^A-Za-z0-9._-]+")


def write_traces(traces: Sequence[EvalTrace], root: PathLike, run_id: str) -> Path:
    """One self-contained ``<record-id>.trace`` file per record under ``root/<run-id>/``."""
    out = Path(root) / run_id
    out.mkdir(parents=True, exist_ok=True)
    for t in traces:
        (out / f"{_UNSAFE.sub('_', t.record_id)}.trace").write_text(t.to_text(), encoding="utf-8")
    return out


def read_traces(directory: PathLike) -> list[EvalTrace]:
    return [
        EvalTrace.from_dict(json.loads(p.read_text(encoding="utf-8")))
        for p in sorted(Path(directory).glob("*.trace"))
    ]


def score_rows(traces: Sequence[EvalTrace]) -> list[dict]:
    """Flat per-record score rows (undefined scores and unevaluated records as None)."""
    rows = []
    for t in traces:
        s = t.scores
        row = {
            "record_id": t.record_id,
            "class": t.class_tag,
            "difficulty": t.difficulty,
            "s_element": None if s is None else s.s_element,
            "s_spatial": None if s is None else s.s_spatial,
            "s_numerical": None if s is None else s.s_numerical,
            "mean": None if s is None else s.mean,
        }
        for dim, m in zip(("element", "spatial", "numerical"), t.matches or (None, None, None)):
            row[f"tp_{dim}"] = None if m is None else m.tp_count
            row[f"gt_{dim}"] = None if m is None else m.gt_count
        rows.append(row)
    return rows


def export_for_review(traces: Sequence[EvalTrace], path: PathLike) -> Path:
    """Markdown digest of evaluation traces for a human reviewer."""
    lines = ["# Caption evaluation traces", ""]
    for t in traces:
        lines.append(f"## {t.record_id} ({t.class_tag}, {t.difficulty}, judge {t.judge})")
        if t.error:
            lines += ["", f"Not evaluated: {t.error}", ""]
            continue
        covered = {
            m.dimension: {g for g, _ in m.pairs} for m in t.matches
        }
        for dim in Dimension:
            m = next(x for x in t.matches if x.dimension is dim)
            lines += ["", f"### {dim.value}: {m.tp_count}/{m.gt_count} covered", ""]
            for i, item in enumerate(t.gt_set.sorted_items(dim)):
                mark = "x" if i in covered[dim] else " "
                lines.append(f"- [{mark}] {item}")
            extra = t.response_set.sorted_items(dim)
            if extra:
                lines.append("")
                lines.append("Response keypoints: " + "; ".join(str(x) for x in extra))
        if t.rejected:
            lines += ["", "Rejected judge claims: " + "; ".join(t.rejected)]
        lines.append("")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path
