"""Caption-assisted reasoning: ingest, caption, reason, grade.

Three reasoning modes are supported:

* ``direct-vision`` -- question and figure, no caption
* ``caption-with-image`` -- question, figure and caption
* ``caption-without-image`` -- question and caption only
"""

from __future__ import annotations

import hashlib
import json
import logging
import random
import re
from dataclasses import asdict, dataclass, field
from enum import Enum
from fractions import Fraction
from pathlib import Path
from typing import Iterable, Mapping, Optional, Sequence

from . import __version__
from .gateway import (
    ChatRequest,
    ContentStore,
    Decoding,
    Gateway,
    Message,
    ModelSpec,
    canonical_json,
    cache_key,
)
from .jsonl import PathLike, iter_jsonl
from .keypoints import parse_rational
from .prompts import load_template, render

logger = logging.getLogger(__name__)

BENCHMARKS = ("mathverse", "mathvista-geometry", "geoqa", "capgeo-bench")
VARIANTS = ("vision-only", "vision-intensive", "n/a")
ANSWER_TYPES = ("choice", "numeric", "text")
CLASS_TAGS = ("AG", "PG", "SG", "n/a")
DIFFICULTY_TAGS = ("T1", "T2", "T3", "T4", "n/a")
FORMAT_TAGS = ("jsonl", "ndjson")


class PipelineError(Exception):
    pass


class IngestError(PipelineError):
    pass


class MissingImageError(PipelineError):
    pass


class MissingCaptionError(PipelineError):
    pass


class Mode(str, Enum):
    DIRECT_VISION = "direct-vision"
    CAPTION_WITH_IMAGE = "caption-with-image"
    CAPTION_WITHOUT_IMAGE = "caption-without-image"

    @property
    def uses_caption(self) -> bool:
        return self is not Mode.DIRECT_VISION

    @property
    def uses_image(self) -> bool:
        return self is not Mode.CAPTION_WITHOUT_IMAGE


# --------------------------------------------------------------------------
# Records


@dataclass(frozen=True)
class ProblemRecord:
    id: str
    benchmark: str
    question: str
    gold: str
    answer_type: str
    variant: str = "n/a"
    image: Optional[str] = None
    options: tuple[str, ...] = ()
    option_texts: tuple[str, ...] = ()
    class_tag: str = "n/a"
    difficulty: str = "n/a"

    def to_dict(self) -> dict:
        d = asdict(self)
        d["options"] = list(self.options)
        d["option_texts"] = list(self.option_texts)
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "ProblemRecord":
        d = dict(d)
        d["options"] = tuple(d.get("options") or ())
        d["option_texts"] = tuple(d.get("option_texts") or ())
        return cls(**d)


@dataclass(frozen=True)
class CaptionRecord:
    problem_id: str
    captioner: str
    text: str
    fingerprint: str

    def __post_init__(self):
        if not self.text.strip():
            raise PipelineError(f"empty caption for {self.problem_id}")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class ReasoningRecord:
    problem_id: str
    reasoner: str
    mode: str
    raw_response: str
    extracted: Optional[str]
    correct: bool
    captioner: Optional[str] = None
    benchmark: str = ""
    variant: str = "n/a"
    extraction_failed: bool = False
    fingerprint: str = ""
    error: Optional[str] = None

    def __post_init__(self):
        if self.mode == Mode.DIRECT_VISION.value and self.captioner is not None:
            raise PipelineError("direct-vision records carry no captioner")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: Mapping) -> "ReasoningRecord":
        return cls(**d)


@dataclass
class Reject:
    row: int
    id: Optional[str]
    reason: str


@dataclass
class IngestResult:
    records: list[ProblemRecord]
    rejects: list[Reject] = field(default_factory=list)


# --------------------------------------------------------------------------
# Ingestion


def _normalize_difficulty(value) -> str:
    if value is None:
        return "n/a"
    text = str(value).strip().upper()
    if text in ("", "N/A", "NA", "NONE"):
        return "n/a"
    if text.isdigit():
        text = f"T{text}"
    if text not in DIFFICULTY_TAGS:
        raise ValueError(f"bad difficulty {value!r}")
    return text


def _normalize_class(value) -> str:
    if value is None:
        return "n/a"
    text = str(value).strip()
    if text.lower() in ("", "n/a", "na", "none"):
        return "n/a"
    text = text.upper()
    if text not in CLASS_TAGS:
        raise ValueError(f"bad class {value!r}")
    return text


def _validate_row(row: Mapping, base: Path, store: Optional[ContentStore]) -> ProblemRecord:
    if not isinstance(row, Mapping):
        raise ValueError("row is not an object")
    for key in ("id", "benchmark", "question", "gold", "answer_type"):
        if row.get(key) in (None, ""):
            raise ValueError(f"missing field {key!r}")
    benchmark = str(row["benchmark"]).strip().lower()
    if benchmark not in BENCHMARKS:
        raise ValueError(f"unknown benchmark {row['benchmark']!r}")
    variant = str(row.get("variant") or "n/a").strip().lower()
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {row.get('variant')!r}")
    answer_type = str(row["answer_type"]).strip().lower()
    if answer_type not in ANSWER_TYPES:
        raise ValueError(f"unknown answer_type {row['answer_type']!r}")
    gold = str(row["gold"]).strip()

    raw_options = row.get("options")
    if isinstance(raw_options, Mapping):
        options = tuple(str(k).strip().upper() for k in raw_options)
        option_texts = tuple(str(v) for v in raw_options.values())
    elif raw_options:
        options = tuple(str(k).strip().upper() for k in raw_options)
        option_texts = ()
    else:
        options, option_texts = (), ()
    if answer_type == "choice":
        if not options:
            raise ValueError("choice question without options")
        gold = gold.strip("() .").upper()
        if gold not in options:
            raise ValueError(f"gold answer {gold!r} not among options {list(options)}")
    elif answer_type == "numeric" and parse_number(gold) is None:
        raise ValueError(f"numeric gold {gold!r} is not an exact rational")

    image = None
    if row.get("image_path"):
        image_path = Path(row["image_path"])
        if not image_path.is_absolute():
            image_path = base / image_path
        if not image_path.is_file():
            raise ValueError(f"image not found: {row['image_path']}")
        image = store.put_file(image_path) if store is not None else hashlib.sha256(image_path.read_bytes()).hexdigest()

    return ProblemRecord(
        id=str(row["id"]),
        benchmark=benchmark,
        question=str(row["question"]),
        gold=gold,
        answer_type=answer_type,
        variant=variant,
        image=image,
        options=options,
        option_texts=option_texts,
        class_tag=_normalize_class(row.get("class")),
        difficulty=_normalize_difficulty(row.get("difficulty")),
    )


def ingest_benchmark(
    path: PathLike,
    format_tag: str = "jsonl",
    store: Optional[ContentStore] = None,
    strict: bool = False,
) -> IngestResult:
    """Validate a line-delimited benchmark file and copy its images into ``store``.

    Bad rows go to ``rejects`` with their row number; with ``strict=True`` the
    first bad row raises :class:`IngestError` instead.
    """
    if format_tag not in FORMAT_TAGS:
        raise IngestError(f"unknown format tag {format_tag!r}; expected one of {FORMAT_TAGS}")
    path = Path(path)
    result = IngestResult([])
    seen: set[str] = set()
    try:
        rows = list(iter_jsonl(path))
    except (OSError, UnicodeDecodeError) as exc:
        raise IngestError(f"cannot read {path}: {exc}") from exc
    for lineno, line in rows:
        row_id = None
        try:
            row = json.loads(line)
            row_id = str(row.get("id")) if isinstance(row, Mapping) and row.get("id") is not None else None
            record = _validate_row(row, path.parent, store)
            if record.id in seen:
                raise ValueError(f"duplicate id {record.id!r}")
        except (ValueError, TypeError) as exc:
            if strict:
                raise IngestError(f"row {lineno}: {exc}") from exc
            result.rejects.append(Reject(lineno, row_id, str(exc)))
            continue
        seen.add(record.id)
        result.records.append(record)
    return result


def load_problems(path: PathLike) -> list[ProblemRecord]:
    """Read records previously written by :func:`ingest_benchmark` output."""
    records = []
    for lineno, line in iter_jsonl(path):
        try:
            records.append(ProblemRecord.from_dict(json.loads(line)))
        except (TypeError, ValueError) as exc:
            raise PipelineError(f"{path}:{lineno}: not an ingested problem record ({exc}); run ingest first") from exc
    return records


def dataset_digest(records: Iterable[ProblemRecord]) -> str:
    return hashlib.sha256(canonical_json([r.to_dict() for r in records])).hexdigest()


def sample_subset(records: Sequence, n: int, seed: int) -> list:
    """Uniform sample without replacement, kept in original order."""
    if n > len(records):
        raise ValueError(f"cannot sample {n} of {len(records)} records")
    picked = sorted(random.Random(seed).sample(range(len(records)), n))
    return [records[i] for i in picked]


# --------------------------------------------------------------------------
# Prompts


def _require_image(problem: ProblemRecord, store: Optional[ContentStore]) -> str:
    if problem.image is None:
        raise MissingImageError(f"problem {problem.id} has no image")
    if store is not None and problem.image not in store:
        raise MissingImageError(f"image {problem.image} of {problem.id} missing from content store")
    return problem.image


def build_caption_prompt(
    problem: ProblemRecord,
    captioner: ModelSpec,
    decoding: Decoding = Decoding(),
    store: Optional[ContentStore] = None,
    template: Optional[str] = None,
) -> ChatRequest:
    image = _require_image(problem, store)
    text = render("caption", template, question=problem.question)
    return ChatRequest(captioner.provider, captioner.model, (Message("user", text, image),), decoding)


def answer_instruction(problem: ProblemRecord) -> str:
    if problem.answer_type == "choice":
        lines = []
        if problem.option_texts:
            lines.append("Options:")
            lines += [f"({k}) {v}" for k, v in zip(problem.options, problem.option_texts)]
        letters = ", ".join(problem.options)
        lines.append(
            f"Choose one of the options {letters}. "
            "End your response with 'The answer is (X)' where X is the option letter."
        )
        return "\n".join(lines)
    if problem.answer_type == "numeric":
        return (
            "End your response with 'The answer is N' where N is the final value "
            "written as an integer, a fraction or a decimal."
        )
    return "End your response with 'The answer is ...' followed by the final answer."


def build_reasoning_prompt(
    problem: ProblemRecord,
    caption: Optional[CaptionRecord],
    include_image: bool,
    reasoner: ModelSpec,
    decoding: Decoding = Decoding(),
    store: Optional[ContentStore] = None,
    template: Optional[str] = None,
) -> ChatRequest:
    """Build the request for one of the three modes.

    (question, image) when ``caption`` is None, (question, image, caption)
    or (question, caption) otherwise depending on ``include_image``.
    """
    if caption is None and not include_image:
        raise MissingCaptionError(f"problem {problem.id}: caption required when the image is withheld")
    if caption is not None and caption.problem_id != problem.id:
        raise PipelineError(f"caption for {caption.problem_id} passed with problem {problem.id}")
    image = None
    if include_image:
        if not reasoner.vision:
            raise PipelineError(f"{reasoner.id} is text-only and cannot receive images")
        image = _require_image(problem, store)
    caption_section = ""
    if caption is not None:
        caption_section = f"\nFigure description:\n{caption.text.strip()}\n"
    text = render(
        "reasoning", template,
        question=problem.question,
        caption_section=caption_section,
        answer_instruction=answer_instruction(problem),
    )
    return ChatRequest(reasoner.provider, reasoner.model, (Message("user", text, image),), decoding)


def mode_of(caption: Optional[CaptionRecord], include_image: bool) -> Mode:
    if caption is None:
        return Mode.DIRECT_VISION
    return Mode.CAPTION_WITH_IMAGE if include_image else Mode.CAPTION_WITHOUT_IMAGE


# --------------------------------------------------------------------------
# Grading

_NUMBER = re.compile(
    r"\\d?frac\{\s*(-?\d+(?:\.\d+)?)\s*\}\{\s*(-?\d+(?:\.\d+)?)\s*\}"
    r"|(-?\d+(?:\.\d+)?(?:\s*/\s*\d+(?:\.\d+)?)?)"
)
_FINAL_SEGMENT = re.compile(
    r"(?:answer\s*(?:is|:)|\\boxed\{)(.*?)(?:\n|$)", re.IGNORECASE
)


@dataclass(frozen=True)
class Grade:
    extracted: Optional[str]
    correct: bool
    extraction_failed: bool = False


def parse_number(text: str) -> Optional[Fraction]:
    """Exact value of an integer, decimal, ``a/b`` or ``\\frac{a}{b}`` string."""
    text = text.strip().strip("$").strip()
    m = _NUMBER.fullmatch(text)
    if not m:
        return None
    try:
        if m.group(1) is not None:
            return Fraction(m.group(1)) / Fraction(m.group(2))
        num, _, den = m.group(3).partition("/")
        value = Fraction(num.strip())
        return value / Fraction(den.strip()) if den else value
    except ZeroDivisionError:
        return None


def _final_segments(raw: str) -> list[str]:
    return [m.group(1) for m in _FINAL_SEGMENT.finditer(raw)]


def _last_choice(text: str, letters: Sequence[str]) -> Optional[str]:
    alternatives = "|".join(re.escape(x) for x in letters)
    pattern = re.compile(rf"(?<![A-Za-z0-9'])\(?({alternatives})\)?(?![A-Za-z0-9'])")
    found = pattern.findall(text)
    return found[-1] if found else None


def _last_number(text: str) -> Optional[tuple[str, Fraction]]:
    last = None
    for m in _NUMBER.finditer(text):
        value = parse_number(m.group(0))
        if value is not None:
            last = (m.group(0), value)
    return last


def _normalize_text(text: str) -> str:
    text = re.sub(r"\\boxed\{(.*)\}", r"\1", text)
    return re.sub(r"\s+", "", text.strip().strip("$").rstrip(".").lower())


def grade_answer(
    raw: str,
    gold: str,
    answer_type: str,
    options: Sequence[str] = ("A", "B", "C", "D", "E"),
) -> Grade:
    """Extract the final answer from ``raw`` and compare it with ``gold``.

    Explicit final-answer phrases ("the answer is", ``\\boxed{}``) are searched
    first; otherwise the last mention in the whole response counts.
    """
    segments = _final_segments(raw)
    if answer_type == "choice":
        letters = tuple(options) or ("A", "B", "C", "D", "E")
        found = None
        for seg in reversed(segments):
            found = _last_choice(seg, letters)
            if found:
                break
        if found is None:
            found = _last_choice(raw, letters)
        if found is None:
            return Grade(None, False, True)
        return Grade(found, found == gold.strip("() .").upper())
    if answer_type == "numeric":
        hit = None
        for seg in reversed(segments):
            hit = _last_number(seg)
            if hit:
                break
        if hit is None:
            hit = _last_number(raw)
        gold_value = parse_number(gold)
        if hit is None:
            return Grade(None, False, True)
        return Grade(hit[0], gold_value is not None and hit[1] == gold_value)
    if answer_type == "text":
        if segments:
            extracted = segments[-1].strip().rstrip("}")
        else:
            lines = [ln for ln in raw.strip().splitlines() if ln.strip()]
            extracted = lines[-1].strip() if lines else ""
        if not extracted:
            return Grade(None, False, True)
        return Grade(extracted, _normalize_text(extracted) == _normalize_text(gold))
    raise ValueError(f"unknown answer type {answer_type!r}")


# --------------------------------------------------------------------------
# Stages


@dataclass(frozen=True)
class StageFailure:
    problem_id: str
    error: str


def run_captions(
    problems: Sequence[ProblemRecord],
    captioner: ModelSpec,
    gateway: Gateway,
    max_in_flight: int = 4,
    decoding: Optional[Decoding] = None,
) -> tuple[list[CaptionRecord], list[StageFailure]]:
    """Caption every problem that has a figure, once per (problem, captioner)."""
    decoding = decoding or gateway.decoding
    with_images = [p for p in problems if p.image is not None]
    reqs = [build_caption_prompt(p, captioner, decoding, gateway.store) for p in with_images]
    responses = gateway.batch_complete(reqs, max_in_flight)
    captions, failures = [], []
    for p, req, resp in zip(with_images, reqs, responses):
        if not resp.ok or not resp.text.strip():
            failures.append(StageFailure(p.id, resp.error or "empty caption"))
            continue
        captions.append(CaptionRecord(p.id, captioner.id, resp.text, cache_key(req)))
    return sorted(captions, key=lambda c: c.problem_id), failures


def run_reasoning(
    problems: Sequence[ProblemRecord],
    reasoner: ModelSpec,
    mode: Mode | str,
    gateway: Gateway,
    captions: Optional[Mapping[str, CaptionRecord]] = None,
    max_in_flight: int = 4,
    decoding: Optional[Decoding] = None,
) -> list[ReasoningRecord]:
    """Reason over every problem in one mode and grade the answers.

    Problems lacking what the mode needs (caption, or image for a vision mode)
    are skipped with a warning; text-only reasoners are never sent images.
    """
    mode = Mode(mode)
    decoding = decoding or gateway.decoding
    if mode.uses_image and not reasoner.vision:
        logger.warning("%s is text-only; skipping %s", reasoner.id, mode.value)
        return []
    captions = captions or {}
    todo, reqs = [], []
    for p in problems:
        caption = captions.get(p.id) if mode.uses_caption else None
        if mode.uses_caption and caption is None:
            logger.warning("no caption for %s; skipped", p.id)
            continue
        if mode.uses_image and p.image is None:
            logger.warning("no image for %s; skipped", p.id)
            continue
        todo.append((p, caption))
        reqs.append(build_reasoning_prompt(p, caption, mode.uses_image, reasoner, decoding, gateway.store))
    responses = gateway.batch_complete(reqs, max_in_flight)
    records = []
    for (p, caption), req, resp in zip(todo, reqs, responses):
        if resp.ok:
            grade = grade_answer(resp.text, p.gold, p.answer_type, p.options or ("A", "B", "C", "D", "E"))
        else:
            grade = Grade(None, False, True)
        records.append(ReasoningRecord(
            problem_id=p.id,
            reasoner=reasoner.id,
            mode=mode.value,
            raw_response=resp.text,
            extracted=grade.extracted,
            correct=grade.correct,
            captioner=caption.captioner if caption is not None else None,
            benchmark=p.benchmark,
            variant=p.variant,
            extraction_failed=grade.extraction_failed,
            fingerprint=cache_key(req),
            error=resp.error,
        ))
    return sorted(records, key=lambda r: r.problem_id)


def regrade(records: Iterable[ReasoningRecord], problems: Mapping[str, ProblemRecord]) -> list[ReasoningRecord]:
    out = []
    for r in records:
        p = problems[r.problem_id]
        grade = grade_answer(r.raw_response, p.gold, p.answer_type, p.options or ("A", "B", "C", "D", "E"))
        if r.error:
            grade = Grade(None, False, True)
        out.append(ReasoningRecord(**{
            **r.to_dict(),
            "extracted": grade.extracted,
            "correct": grade.correct,
            "extraction_failed": grade.extraction_failed,
        }))
    return out


# --------------------------------------------------------------------------
# Manifest


@dataclass(frozen=True)
class RunManifest:
    """Everything needed to re-derive the request fingerprints of a run."""

    dataset_digest: str
    models: dict
    mode: str
    decoding: dict
    sample: Optional[dict] = None
    templates: dict = field(default_factory=dict)
    toolkit_version: str = __version__
    started_at: Optional[str] = None
    finished_at: Optional[str] = None

    @property
    def run_id(self) -> str:
        # timestamps excluded so a rerun of the same configuration keeps its id
        core = {k: v for k, v in asdict(self).items() if k not in ("started_at", "finished_at")}
        return hashlib.sha256(canonical_json(core)).hexdigest()[:16]

    def to_dict(self) -> dict:
        return {"run_id": self.run_id, **asdict(self)}

    @classmethod
    def from_dict(cls, d: Mapping) -> "RunManifest":
        d = {k: v for k, v in d.items() if k != "run_id"}
        return cls(**d)

    @staticmethod
    def template_digests(names: Iterable[str] = ("caption", "reasoning")) -> dict:
        return {n: hashlib.sha256(load_template(n).encode("utf-8")).hexdigest()[:16] for n in names}

    def write(self, path: PathLike) -> Path:
        path = Path(path)
        path.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
        return path
