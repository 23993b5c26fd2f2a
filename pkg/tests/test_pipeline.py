import json
import shutil

import pytest

from capgeo.fixtures import problems_path, synthetic_dir
from capgeo.gateway import ContentStore, Gateway, MockProvider, ModelSpec
from capgeo.pipeline import (
    CaptionRecord,
    IngestError,
    MissingCaptionError,
    Mode,
    PipelineError,
    ReasoningRecord,
    RunManifest,
    build_reasoning_prompt,
    grade_answer,
    ingest_benchmark,
    load_problems,
    mode_of,
    parse_number,
    regrade,
    run_captions,
    run_reasoning,
    sample_subset,
)

VISION = ModelSpec("mock", "vision")
TEXT_ONLY = ModelSpec("mock", "text", vision=False)


@pytest.fixture
def bench_file(tmp_path):
    shutil.copy(synthetic_dir() / "images" / "p00.png", tmp_path / "fig.png")
    rows = [
        {"id": "a", "benchmark": "mathverse", "variant": "vision-only", "question": "q1", "gold": "B",
         "answer_type": "choice", "options": ["A", "B", "C", "D"], "image_path": "fig.png"},
        {"id": "b", "benchmark": "geoqa", "question": "q2", "gold": "3/2", "answer_type": "numeric",
         "image_path": "fig.png"},
        {"id": "c", "benchmark": "mathvista-geometry", "question": "q3", "gold": "(C)", "answer_type": "choice",
         "options": {"A": "1", "B": "2", "C": "3"}},
        {"id": "d", "benchmark": "geoqa", "question": "q4", "gold": "E", "answer_type": "choice",
         "options": ["A", "B", "C", "D"]},
        {"id": "a", "benchmark": "geoqa", "question": "dup", "gold": "1", "answer_type": "numeric"},
        {"id": "f", "benchmark": "geoqa", "question": "q6", "gold": "sqrt 2", "answer_type": "numeric"},
        {"id": "g", "benchmark": "geoqa", "question": "q7", "gold": "1", "answer_type": "numeric",
         "image_path": "missing.png"},
    ]
    path = tmp_path / "bench.jsonl"
    path.write_text("\n".join(json.dumps(r) for r in rows) + "\n{not json\n")
    return path


def test_ingest_validates_rows(bench_file, tmp_path):
    store = ContentStore(tmp_path / "store")
    result = ingest_benchmark(bench_file, store=store)
    assert [r.id for r in result.records] == ["a", "b", "c"]
    reasons = {rej.row: rej.reason for rej in result.rejects}
    assert set(reasons) == {4, 5, 6, 7, 8}
    assert "not among options" in reasons[4]
    assert "duplicate" in reasons[5]
    assert "rational" in reasons[6]
    assert "image not found" in reasons[7]
    a, b, c = result.records
    assert a.image in store and a.image == b.image  # identical bytes share one entry
    assert c.gold == "C" and c.option_texts == ("1", "2", "3")


def test_ingest_strict_and_format_tag(bench_file):
    with pytest.raises(IngestError, match="row 4"):
        ingest_benchmark(bench_file, strict=True)
    with pytest.raises(IngestError):
        ingest_benchmark(bench_file, format_tag="csv")


def test_sample_subset_is_seeded():
    records = list(range(100))
    one = sample_subset(records, 50, seed=1)
    assert one == sample_subset(records, 50, seed=1)
    assert one == sorted(one) and len(set(one)) == 50
    assert len(set(one) & set(sample_subset(records, 50, seed=2))) == 26
    with pytest.raises(ValueError):
        sample_subset(records, 101, seed=1)


@pytest.fixture
def problems(tmp_path):
    store = ContentStore(tmp_path / "store")
    return ingest_benchmark(problems_path(), store=store).records, store


def test_mode_contracts(problems):
    recs, store = problems
    p = recs[0]
    cap = CaptionRecord(p.id, "mock:c", "AB = AC, angle A = 30 degrees", "fp")
    direct = build_reasoning_prompt(p, None, True, VISION, store=store)
    with_img = build_reasoning_prompt(p, cap, True, VISION, store=store)
    without = build_reasoning_prompt(p, cap, False, VISION, store=store)
    assert direct.images == [p.image] and "Figure description" not in direct.messages[0].text
    assert with_img.images == [p.image] and cap.text in with_img.messages[0].text
    assert without.images == [] and cap.text in without.messages[0].text
    assert [mode_of(None, True), mode_of(cap, True), mode_of(cap, False)] == list(Mode)
    with pytest.raises(MissingCaptionError):
        build_reasoning_prompt(p, None, False, VISION)
    with pytest.raises(PipelineError):
        build_reasoning_prompt(p, cap, True, TEXT_ONLY, store=store)
    with pytest.raises(PipelineError):
        build_reasoning_prompt(recs[1], cap, False, VISION)
    build_reasoning_prompt(p, cap, False, TEXT_ONLY)  # text-only reasoners get captions alone


def test_direct_vision_records_have_no_captioner():
    with pytest.raises(PipelineError):
        ReasoningRecord("x", "mock:r", "direct-vision", "", None, False, captioner="mock:c")


def test_text_only_reasoner_skips_image_modes(problems):
    recs, store = problems
    gw = Gateway({"mock": MockProvider()}, store=store)
    captions, _ = run_captions(recs, VISION, gw)
    by_id = {c.problem_id: c for c in captions}
    assert run_reasoning(recs, TEXT_ONLY, Mode.DIRECT_VISION, gw) == []
    assert run_reasoning(recs, TEXT_ONLY, Mode.CAPTION_WITH_IMAGE, gw, by_id) == []
    out = run_reasoning(recs, TEXT_ONLY, Mode.CAPTION_WITHOUT_IMAGE, gw, by_id)
    assert len(out) == len(recs) and all(r.captioner == "mock:vision" for r in out)


def test_provider_failure_recorded_not_raised(problems):
    from capgeo.gateway import ProviderRejection

    recs, store = problems
    gw = Gateway({"mock": MockProvider(failures=[ProviderRejection("blocked")])}, store=store)
    out = run_reasoning(recs[:3], VISION, Mode.DIRECT_VISION, gw, max_in_flight=1)
    assert out[0].error and not out[0].correct and out[0].extraction_failed
    assert all(r.error is None for r in out[1:])


@pytest.mark.parametrize("raw, gold, kind, extracted, correct", [
    ("The answer is (B).", "B", "choice", "B", True),
    ("So the answer is B", "B", "choice", "B", True),
    ("Answer: C", "B", "choice", "C", False),
    ("Option A looks wrong; B fits. The answer is (D)", "D", "choice", "D", True),
    ("I pick \\boxed{A}", "A", "choice", "A", True),
    ("Between A and B I choose C", "C", "choice", "C", True),
    ("Considering triangle ABC ... answer is (B)", "B", "choice", "B", True),
    ("no idea", "B", "choice", None, False),
    ("The answer is 12", "12", "numeric", "12", True),
    ("The answer is 1.5", "3/2", "numeric", "1.5", True),
    ("The answer is \\frac{3}{2}", "1.5", "numeric", "\\frac{3}{2}", True),
    ("AB = 5 so the answer is 7/2", "3.5", "numeric", "7/2", True),
    ("Step 1 gives 10, then 20. The answer is 30", "30", "numeric", "30", True),
    ("first 4 then 6", "6", "numeric", "6", True),
    ("answer is -2", "-2", "numeric", "-2", True),
    ("The answer is 0.33", "1/3", "numeric", "0.33", False),
    ("nothing numeric here", "3", "numeric", None, False),
    ("The answer is $\\boxed{x+1}$", "x + 1", "text", "$\\boxed{x+1}$", True),
    ("last line\nx^2", "X^2", "text", "x^2", True),
    ("The answer is 45 degrees", "45", "numeric", "45", True),
])
def test_grading_fixture(raw, gold, kind, extracted, correct):
    g = grade_answer(raw, gold, kind, ("A", "B", "C", "D"))
    assert (g.extracted, g.correct) == (extracted, correct)
    assert g.extraction_failed == (extracted is None)


def test_parse_number():
    assert parse_number("7/2") == parse_number("3.5") == parse_number("\\frac{7}{2}")
    assert parse_number("1/0") is None
    assert parse_number("sqrt 2") is None


def test_regrade_matches_original_grades(problems, tmp_path):
    recs, store = problems
    gw = Gateway({"mock": MockProvider()}, store=store)
    out = run_reasoning(recs, VISION, Mode.DIRECT_VISION, gw)
    assert regrade(out, {p.id: p for p in recs}) == out


def test_manifest_run_id_ignores_timestamps(tmp_path):
    m1 = RunManifest("d", {"reasoner": "mock:r"}, "direct-vision", {"temperature": 0.0}, started_at="t1")
    m2 = RunManifest("d", {"reasoner": "mock:r"}, "direct-vision", {"temperature": 0.0}, started_at="t2")
    m3 = RunManifest("d", {"reasoner": "mock:r2"}, "direct-vision", {"temperature": 0.0})
    assert m1.run_id == m2.run_id != m3.run_id
    path = m1.write(tmp_path / "m.json")
    assert RunManifest.from_dict(json.loads(path.read_text())) == m1


def test_load_problems_round_trip(tmp_path, problems):
    from capgeo.jsonl import write_jsonl

    recs, _ = problems
    write_jsonl(tmp_path / "p.jsonl", (r.to_dict() for r in recs))
    assert load_problems(tmp_path / "p.jsonl") == recs
