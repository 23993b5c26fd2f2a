"""The eight acceptance criteria, each timed and reported as one PASS/FAIL line."""

import random
import time
from fractions import Fraction

import pytest

import capgeo.cli as cli
from capgeo import analysis, bench
from capgeo.fixtures import bench_pairs_path, hand_built_pair, problems_path
from capgeo.gateway import Gateway, MockProvider
from capgeo.keypoints import (
    RELATIONS,
    Dimension,
    Keypoint,
    KeypointSet,
    SpatialK,
    canonicalize,
    parse_keypoint_document,
    serialize_keypoints,
)
from capgeo.matching import (
    CLASS_TAGS,
    DIFFICULTY_TAGS,
    DimensionScores,
    aggregate_scores,
    dimension_scores,
    match_all,
    oracle_match,
)

import generators as gen
from oracles import brute_force_tp, pearson_reference


class Clock:
    def __enter__(self):
        self.start = time.perf_counter()
        return self

    def __exit__(self, *exc):
        self.seconds = time.perf_counter() - self.start


# 1 ---------------------------------------------------------------------------

PUBLISHED_OVERALL = [
    ((63.4, 56.1, 26.0), 48.5),
    ((54.1, 30.3, 13.3), 32.6),
    ((57.1, 34.1, 11.7), 34.3),
    ((51.8, 23.3, 8.2), 27.8),
]


def test_criterion_1_avg_column(verdict):
    with Clock() as clock:
        got = []
        for triple, _ in PUBLISHED_OVERALL:
            scores = DimensionScores(*(v / 100.0 for v in triple))
            got.append(aggregate_scores([(scores, "PG", "T1")]).avg)
    want = [avg for _, avg in PUBLISHED_OVERALL]
    ok = all(abs(g - w) <= 0.05 for g, w in zip(got, want)) and clock.seconds < 1.0
    verdict(1, ok, f"Avg {got} vs {want} in {clock.seconds:.3f}s")
    assert ok


# 2 ---------------------------------------------------------------------------


def test_criterion_2_matching_equals_brute_force(verdict):
    rng = random.Random(20241)
    disagreements = 0
    with Clock() as clock:
        for _ in range(1000):
            response, gt = gen.overlapping_pair(rng, max_per_dim=6)
            for dim in Dimension:
                want = brute_force_tp(gt.sorted_items(dim), response.sorted_items(dim))
                if oracle_match(response, gt, dim).tp_count != want:
                    disagreements += 1
    ok = disagreements == 0 and clock.seconds < 30.0
    verdict(2, ok, f"{disagreements} disagreements over 1000 pairs in {clock.seconds:.2f}s")
    assert ok


# 3 ---------------------------------------------------------------------------


def test_criterion_3_recall_bounds(verdict):
    rng = random.Random(303)
    failures = 0
    with Clock() as clock:
        for _ in range(1000):
            ks = gen.keypoint_set(rng, letters=gen.LEFT)
            other = gen.keypoint_set(rng, letters=gen.RIGHT)
            own = dimension_scores(match_all(ks, ks))
            disjoint = dimension_scores(match_all(other, ks))
            cross = dimension_scores(match_all(gen.keypoint_set(rng), ks))
            if any(s is not None and s != 1.0 for s in own.as_tuple()):
                failures += 1
            if any(s is not None and s != 0.0 for s in disjoint.as_tuple()):
                failures += 1
            if any(s is not None and not 0.0 <= s <= 1.0 for s in cross.as_tuple()):
                failures += 1
    ok = failures == 0 and clock.seconds < 10.0
    verdict(3, ok, f"{failures} violations over 1000 sets in {clock.seconds:.2f}s")
    assert ok


# 4 ---------------------------------------------------------------------------


def _swapped(kp: Keypoint) -> Keypoint:
    p = kp.payload
    return Keypoint.of(SpatialK(RELATIONS[p.relation.name], tuple(reversed(p.subjects))))


def test_criterion_4_canonicalization(verdict):
    rng = random.Random(404)
    failures = 0
    with Clock() as clock:
        for _ in range(10_000):
            kp = gen.keypoint(rng)
            once = canonicalize(kp)
            if canonicalize(once) != once or once != kp:
                failures += 1
        symmetric = [r for r in RELATIONS.values() if r.symmetric]
        for _ in range(10_000):
            rel = rng.choice(symmetric)
            kp = Keypoint.of(SpatialK(rel, (gen.entity(rng), gen.entity(rng))))
            if canonicalize(_swapped(kp)) != canonicalize(kp):
                failures += 1
        for _ in range(1000):
            ks = gen.keypoint_set(rng)
            text = serialize_keypoints(ks)
            if parse_keypoint_document(text) != ks or serialize_keypoints(parse_keypoint_document(text)) != text:
                failures += 1
    ok = failures == 0 and clock.seconds < 10.0
    verdict(4, ok, f"{failures} failures (10k idempotence, 10k swaps, 1k round trips) in {clock.seconds:.2f}s")
    assert ok


# 5 ---------------------------------------------------------------------------


def _offline_run(out, cache, gateways):
    src = str(problems_path())
    steps = [
        ["ingest", "--benchmark", src, "--out", f"{out}/ws"],
        ["caption", "--benchmark", f"{out}/ws/problems.jsonl", "--captioner", "mock:cap-a",
         "--out", f"{out}/cap.jsonl"],
    ]
    for mode in ("direct-vision", "caption-with-image", "caption-without-image"):
        steps.append(["reason", "--benchmark", f"{out}/ws/problems.jsonl", "--reasoner", "mock:reasoner-a",
                      "--mode", mode, "--captions", f"{out}/cap.jsonl", "--out", f"{out}/raw-{mode}.jsonl"])
    graded = []
    for mode in ("direct-vision", "caption-with-image", "caption-without-image"):
        steps.append(["grade", "--benchmark", f"{out}/ws/problems.jsonl", "--results",
                      f"{out}/raw-{mode}.jsonl", "--out", f"{out}/{mode}.jsonl"])
        graded.append(f"{out}/{mode}.jsonl")
    steps.append(["tabulate", "--layout", "mathverse", "--results", *graded, "--out", f"{out}/report"])
    steps.append(["tabulate", "--layout", "mathvista-geoqa", "--results", *graded, "--out", f"{out}/report2"])
    for argv in steps:
        assert cli.main(["--cache-dir", str(cache), *argv]) == 0, argv
    calls = sum(g.provider_calls for g in gateways)
    gateways.clear()
    return [(out / "report" / "report.md").read_bytes(), (out / "report2" / "report.md").read_bytes()], calls


def test_criterion_5_offline_pipeline(tmp_path, monkeypatch, verdict):
    gateways = []
    real = cli.build_gateway

    def tracking(*a, **kw):
        gw = real(*a, **kw)
        gateways.append(gw)
        return gw

    monkeypatch.setattr(cli, "build_gateway", tracking)
    cache = tmp_path / "cache"
    with Clock() as clock:
        first, cold_calls = _offline_run(tmp_path / "run1", cache, gateways)
        second, warm_calls = _offline_run(tmp_path / "run2", cache, gateways)
    ok = first == second and cold_calls > 0 and warm_calls == 0 and clock.seconds < 30.0
    verdict(5, ok, f"reports identical={first == second}, provider calls cold={cold_calls} "
                   f"warm={warm_calls}, {clock.seconds:.2f}s")
    assert ok


# 6 ---------------------------------------------------------------------------


def test_criterion_6_bench_offline(verdict):
    with Clock() as clock:
        pairs, rejects = bench.ingest_pairs(bench_pairs_path())
        report = bench.run_bench(pairs, bench.OracleJudge())
        table = report.table
        grid = {(p.class_tag, p.difficulty) for p in pairs}
        filled = all(
            table.cells[dim][col] is not None
            for dim in table.cells
            for col in CLASS_TAGS + DIFFICULTY_TAGS
        )
        gt_text, resp_text = hand_built_pair()
        gt, resp = parse_keypoint_document(gt_text), parse_keypoint_document(resp_text)
        brute = tuple(
            brute_force_tp(gt.sorted_items(d), resp.sorted_items(d)) / len(gt.items(d)) for d in Dimension
        )
        trace = next(t for t in report.traces if t.record_id == "bench-PG-T2")
        got = trace.scores.as_tuple()
    close = all(abs(a - b) <= 1e-9 for a, b in zip(got, brute))
    expected = all(abs(a - b) <= 1e-9 for a, b in zip(brute, (0.75, 2 / 3, 0.5)))
    ok = (
        not rejects and len(pairs) >= 12 and len(grid) == 12 and filled
        and report.coverage["failed"] == 0 and close and expected and clock.seconds < 10.0
    )
    verdict(6, ok, f"grid {len(grid)}/12 filled={filled}, fixture pair {tuple(round(x, 4) for x in got)} "
                   f"vs brute force {tuple(round(x, 4) for x in brute)}, {clock.seconds:.2f}s")
    assert ok


# 7 ---------------------------------------------------------------------------


def test_criterion_7_pearson(verdict):
    rng = random.Random(707)
    problems = []
    with Clock() as clock:
        if analysis.pearson([(1, 3), (2, 5), (3, 7), (4, 9)]) != 1.0:
            problems.append("collinear")
        if analysis.pearson([(-2, 4), (-1, 1), (0, 0), (1, 1), (2, 4)]) != 0.0:
            problems.append("symmetric")
        worst_ref = worst_affine = 0.0
        for _ in range(1000):
            n = rng.randint(3, 40)
            pts = [(rng.uniform(-100, 100), rng.uniform(-100, 100)) for _ in range(n)]
            r = analysis.pearson(pts)
            worst_ref = max(worst_ref, abs(r - pearson_reference(pts)))
            a, b = rng.uniform(0.5, 4.0), rng.uniform(-50, 50)
            c, d = rng.uniform(0.5, 4.0), rng.uniform(-50, 50)
            moved = analysis.pearson([(a * x + b, c * y + d) for x, y in pts])
            worst_affine = max(worst_affine, abs(moved - r))
        if worst_ref > 1e-9:
            problems.append(f"reference gap {worst_ref:.2e}")
        if worst_affine > 1e-12:
            problems.append(f"affine gap {worst_affine:.2e}")
    ok = not problems and clock.seconds < 5.0
    verdict(7, ok, f"max |r - ref| {worst_ref:.1e}, max affine drift {worst_affine:.1e}, "
                   f"{clock.seconds:.2f}s {problems or ''}".rstrip())
    assert ok


# 8 ---------------------------------------------------------------------------


def _adversarial_script(rng: random.Random, gt: KeypointSet, response: KeypointSet) -> str:
    lines = []
    for ks in (gt, response, gen.keypoint_set(rng, letters=gen.RIGHT)):
        for kp in ks.keypoints():
            lines += [str(kp)] * rng.randint(1, 4)  # duplicates
    lines += ["e:  " + str(kp.payload) for kp in gt.keypoints() if kp.dimension is Dimension.ELEMENT]
    rng.shuffle(lines)
    return "\n".join(lines) or "# none"


def test_criterion_8_hallucinated_claims(verdict):
    rng = random.Random(808)
    violations = rejected_total = 0
    with Clock() as clock:
        for i in range(200):
            gt = gen.keypoint_set(rng)
            if not len(gt):
                gt = gen.keypoint_set(rng, max_per_dim=3) or KeypointSet.from_keypoints([gen.keypoint(rng)])
            response = gen.keypoint_set(rng)
            gt_text, resp_text = serialize_keypoints(gt) or "# none", serialize_keypoints(response) or "# none"
            script = _adversarial_script(rng, gt, response)

            def reply(request, gt_text=gt_text, resp_text=resp_text, script=script):
                prompt = request.messages[-1].text
                if prompt.startswith("You compare"):
                    return script
                return gt_text if "ground-truth" in prompt.split("\n", 1)[0] else resp_text

            gw = Gateway({"mock": MockProvider(reply)})
            judge = bench.LLMJudge(gw, gw.model("mock:judge"))
            pair = bench.CaptionPair(f"adv-{i}", "gt caption", "PG", "T1", response_caption="response caption")
            trace = bench.evaluate_caption(pair, judge)
            assert trace.evaluated, trace.error
            rejected_total += len(trace.rejected)
            for m in trace.matches:
                if m.tp_count > m.gt_count or m.tp_count > len(gt.items(m.dimension)):
                    violations += 1
    ok = violations == 0 and rejected_total > 0 and clock.seconds < 10.0
    verdict(8, ok, f"{violations} tp>|gt| violations over 200 scripts "
                   f"({rejected_total} hallucinated claims rejected), {clock.seconds:.2f}s")
    assert ok


if __name__ == "__main__":
    raise SystemExit(pytest.main([__file__, "-q", "-s"]))
