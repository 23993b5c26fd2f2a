"""Command-line entry point: ``capgeo <subcommand> ...``.

Exit codes: 0 success, 1 usage error, 2 data error, 3 provider error.
"""

from __future__ import annotations

import argparse
import datetime as _dt
import hashlib
import json
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

from . import analysis, bench, pipeline
from .gateway import ConfigError, Gateway, GatewayError, build_gateway, load_config
from .jsonl import read_jsonl, write_jsonl
from .keypoints import KeypointError, parse_keypoint_document
from .matching import BenchTable, match_all, dimension_scores

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_PROVIDER = 0, 1, 2, 3

log = logging.getLogger("capgeo")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _global_flags(parser: argparse.ArgumentParser, suppress: bool) -> None:
    default = argparse.SUPPRESS if suppress else None
    parser.add_argument("--config", default=default, help="JSON provider/model configuration")
    parser.add_argument("--cache-dir", default=default, help="response cache directory")
    parser.add_argument("--out", default=default, help="output file or directory")
    parser.add_argument("--seed", type=int, default=argparse.SUPPRESS if suppress else 0)
    parser.add_argument("--max-in-flight", type=int, default=argparse.SUPPRESS if suppress else 4)


def _now() -> str:
    return _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")


def _need(args, name: str):
    value = getattr(args, name, None)
    if value in (None, []):
        raise UsageError(f"--{name.replace('_', '-')} is required")
    return value


def _gateway(args, store_dir: Optional[Path]) -> Gateway:
    config = load_config(args.config)
    cache_dir = args.cache_dir or ".capgeo-cache"
    return build_gateway(config, cache_dir=cache_dir, store_dir=store_dir)


def _store_for(problems_path: Path, args) -> Path:
    return Path(getattr(args, "store", None) or problems_path.parent / "images")


def _digest_files(paths: Sequence[Path]) -> str:
    h = hashlib.sha256()
    for p in sorted(paths, key=str):
        h.update(Path(p).read_bytes())
    return h.hexdigest()[:16]


# --------------------------------------------------------------------------
# Subcommands


def cmd_ingest(args) -> int:
    out = Path(_need(args, "out"))
    source = Path(_need(args, "benchmark"))
    store = pipeline.ContentStore(getattr(args, "store", None) or out / "images")
    result = pipeline.ingest_benchmark(source, args.format, store)
    records = result.records
    if args.sample_n is not None:
        records = pipeline.sample_subset(records, args.sample_n, args.seed)
    write_jsonl(out / "problems.jsonl", (r.to_dict() for r in records))
    write_jsonl(out / "rejects.jsonl", (r.__dict__ for r in result.rejects))
    print(f"ingested {len(records)} records, {len(result.rejects)} rejects -> {out}")
    return EXIT_OK


def _load_problem_subset(args) -> tuple[Path, list[pipeline.ProblemRecord], Optional[dict]]:
    path = Path(_need(args, "benchmark"))
    problems = pipeline.load_problems(path)
    sample = None
    if getattr(args, "sample_n", None) is not None:
        problems = pipeline.sample_subset(problems, args.sample_n, args.seed)
        sample = {"n": args.sample_n, "seed": args.seed}
    return path, problems, sample


def cmd_caption(args) -> int:
    path, problems, sample = _load_problem_subset(args)
    gw = _gateway(args, _store_for(path, args))
    captioner = gw.model(_need(args, "captioner"))
    captions, failures = pipeline.run_captions(problems, captioner, gw, args.max_in_flight)
    out = Path(_need(args, "out"))
    write_jsonl(out, (c.to_dict() for c in captions))
    manifest = pipeline.RunManifest(
        dataset_digest=pipeline.dataset_digest(problems),
        models={"captioner": captioner.id},
        mode="caption",
        decoding=gw.decoding.__dict__,
        sample=sample,
        templates=pipeline.RunManifest.template_digests(("caption",)),
        started_at=_now(),
    )
    manifest.write(out.with_suffix(".manifest.json"))
    for f in failures:
        log.warning("caption failed for %s: %s", f.problem_id, f.error)
    print(f"{len(captions)} captions, {len(failures)} failures -> {out}")
    return EXIT_PROVIDER if failures and not captions else EXIT_OK


def cmd_reason(args) -> int:
    path, problems, sample = _load_problem_subset(args)
    gw = _gateway(args, _store_for(path, args))
    reasoner = gw.model(_need(args, "reasoner"))
    mode = pipeline.Mode(_need(args, "mode"))
    captions = {}
    models = {"reasoner": reasoner.id}
    if mode.uses_caption:
        rows = read_jsonl(_need(args, "captions"))
        captions = {r["problem_id"]: pipeline.CaptionRecord(**r) for r in rows}
        caps = sorted({c.captioner for c in captions.values()})
        models["captioner"] = caps[0] if len(caps) == 1 else caps
    records = pipeline.run_reasoning(problems, reasoner, mode, gw, captions, args.max_in_flight)
    out = Path(_need(args, "out"))
    write_jsonl(out, (r.to_dict() for r in records))
    manifest = pipeline.RunManifest(
        dataset_digest=pipeline.dataset_digest(problems),
        models=models,
        mode=mode.value,
        decoding=gw.decoding.__dict__,
        sample=sample,
        templates=pipeline.RunManifest.template_digests(("reasoning",)),
        started_at=_now(),
    )
    manifest.write(out.with_suffix(".manifest.json"))
    errors = sum(r.error is not None for r in records)
    correct = sum(r.correct for r in records)
    print(f"{len(records)} answers, {correct} correct, {errors} provider errors -> {out}")
    return EXIT_PROVIDER if records and errors == len(records) else EXIT_OK


def _load_results(paths) -> list[pipeline.ReasoningRecord]:
    records = []
    for p in paths:
        records += [pipeline.ReasoningRecord.from_dict(r) for r in read_jsonl(p)]
    return records


def cmd_grade(args) -> int:
    problems = {p.id: p for p in pipeline.load_problems(_need(args, "benchmark"))}
    records = _load_results(_need(args, "results"))
    graded = pipeline.regrade(records, problems)
    write_jsonl(_need(args, "out"), (r.to_dict() for r in graded))
    print(f"graded {len(graded)} answers, {sum(r.correct for r in graded)} correct")
    return EXIT_OK


def _judge(args, gw: Optional[Gateway]):
    spec = getattr(args, "judge", None) or "oracle"
    if spec == "oracle":
        return bench.OracleJudge()
    return bench.LLMJudge(gw, gw.model(spec), oracle_matching=args.oracle_match)


def cmd_bench_eval(args) -> int:
    out = Path(_need(args, "out"))
    pairs_path = Path(_need(args, "pairs"))
    store_dir = Path(getattr(args, "store", None) or out / "images")
    gw = _gateway(args, store_dir)
    store = gw.store
    pairs, rejects = bench.ingest_pairs(pairs_path, store)
    for row, reason in rejects:
        log.warning("pair row %d rejected: %s", row, reason)
    captioner = gw.model(args.captioner) if args.captioner else None
    judge = _judge(args, gw)
    report = bench.run_bench(pairs, judge, captioner, gw, args.max_in_flight)
    label = args.label or (captioner.id if captioner else "provided")
    manifest = pipeline.RunManifest(
        dataset_digest=_digest_files([pairs_path]),
        models={"captioner": label, "judge": judge.name},
        mode="bench-eval",
        decoding=gw.decoding.__dict__,
        templates=pipeline.RunManifest.template_digests(("caption", "extract_gt", "extract_response", "match")),
        started_at=_now(),
    )
    run_id = manifest.run_id
    out.mkdir(parents=True, exist_ok=True)
    manifest.write(out / "manifest.json")
    bench.write_traces(report.traces, out / "traces", run_id)
    write_jsonl(out / "scores.jsonl", bench.score_rows(report.traces))
    (out / "bench.json").write_text(json.dumps({
        "run_id": run_id,
        "captioner": label,
        "judge": judge.name,
        "coverage": report.coverage,
        "table": report.table.to_dict(),
    }, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    table = analysis.tabulate({label: report.table}, "bench")
    analysis.emit_report([table], [], "markdown", out, run_id)
    cov = report.coverage
    print(f"evaluated {cov['evaluated']}/{cov['total']} pairs (avg {report.table.avg}) -> {out}")
    return EXIT_OK


def cmd_score(args) -> int:
    gt = parse_keypoint_document(Path(_need(args, "gt")).read_text(encoding="utf-8"))
    resp = parse_keypoint_document(Path(_need(args, "response")).read_text(encoding="utf-8"))
    matches = match_all(resp, gt)
    s = dimension_scores(matches)
    print(json.dumps({
        "s_element": s.s_element, "s_spatial": s.s_spatial, "s_numerical": s.s_numerical,
        "mean": s.mean,
        "tp": {m.dimension.value: m.tp_count for m in matches},
        "gt": {m.dimension.value: m.gt_count for m in matches},
    }, indent=2))
    return EXIT_OK


def _load_bench(paths) -> dict[str, BenchTable]:
    tables = {}
    for p in paths or []:
        d = json.loads(Path(p).read_text(encoding="utf-8"))
        tables[d["captioner"]] = BenchTable.from_dict(d["table"])
    return tables


def _tables(args) -> list[analysis.Table]:
    records = _load_results(args.results or [])
    reasoners = args.reasoner_order.split(",") if args.reasoner_order else None
    captioners = args.captioner_order.split(",") if args.captioner_order else None
    tables = []
    layouts = [args.layout] if getattr(args, "layout", None) else list(analysis.LAYOUTS)
    for layout in layouts:
        if layout == "bench":
            benches = _load_bench(args.bench)
            if benches or args.layout == "bench":
                tables.append(analysis.tabulate(benches, "bench", captioners=captioners))
        else:
            tables.append(analysis.tabulate(records, layout, reasoners, captioners))
    return tables


def _correlations(args) -> list[analysis.CorrelationResult]:
    if not getattr(args, "pair_reasoner", None):
        return []
    benches = _load_bench(args.bench)
    x = {k: t.avg for k, t in benches.items() if t.avg is not None}
    y = analysis.captioner_accuracies(
        _load_results(args.results or []), args.pair_reasoner, args.pair_mode, args.pair_benchmark, args.pair_variant,
    )
    name = f"caption score vs {args.pair_reasoner} ({args.pair_mode})"
    return [analysis.correlate(x, y, name, "caption avg score", "reasoning accuracy")]


def _inputs_run_id(args) -> str:
    files = [Path(p) for p in (args.results or []) + (args.bench or [])]
    return _digest_files(files) if files else "empty"


def cmd_tabulate(args) -> int:
    _need(args, "layout")
    tables = _tables(args)
    out = Path(_need(args, "out"))
    fmt = {".csv": "csv", ".jsonl": "jsonl"}.get(out.suffix, "markdown")
    target = out.parent if out.suffix else out
    written = analysis.emit_report(tables, [], fmt, target, _inputs_run_id(args))
    print("\n".join(str(p) for p in written))
    return EXIT_OK


def cmd_correlate(args) -> int:
    _need(args, "pair_reasoner")
    results = _correlations(args)
    for c in results:
        r = "undefined" if c.r is None else f"{c.r:.6f}"
        print(f"{c.name}: r = {r} over {len(c.points)} captioners")
    if args.out:
        analysis.emit_report([], results, "csv", args.out, _inputs_run_id(args))
    return EXIT_OK


def cmd_report(args) -> int:
    tables = _tables(args)
    written = analysis.emit_report(tables, _correlations(args), args.format, _need(args, "out"), _inputs_run_id(args))
    print("\n".join(str(p) for p in written))
    return EXIT_OK


def cmd_export_traces(args) -> int:
    traces = bench.read_traces(_need(args, "traces"))
    path = bench.export_for_review(traces, _need(args, "out"))
    print(f"{len(traces)} traces -> {path}")
    return EXIT_OK


# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="capgeo", description=__doc__.splitlines()[0])
    _global_flags(parser, suppress=False)
    parser.add_argument("-v", "--verbose", action="store_true")
    common = _Parser(add_help=False)
    _global_flags(common, suppress=True)
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    def add(name, func, help):
        p = sub.add_parser(name, parents=[common], help=help)
        p.set_defaults(func=func)
        return p

    p = add("ingest", cmd_ingest, "validate a benchmark file and build the content store")
    p.add_argument("--benchmark", help="line-delimited benchmark records")
    p.add_argument("--format", default="jsonl", help="record format tag")
    p.add_argument("--store", help="content store directory (default <out>/images)")
    p.add_argument("--sample-n", type=int)

    for name, func, help in (
        ("caption", cmd_caption, "generate captions for ingested problems"),
        ("reason", cmd_reason, "answer ingested problems in one mode and grade"),
    ):
        p = add(name, func, help)
        p.add_argument("--benchmark", help="problems.jsonl written by ingest")
        p.add_argument("--store")
        p.add_argument("--sample-n", type=int)
        if name == "caption":
            p.add_argument("--captioner", help="provider:model")
        else:
            p.add_argument("--reasoner", help="provider:model")
            p.add_argument("--captioner", help="unused; captions carry their captioner id")
            p.add_argument("--mode", choices=[m.value for m in pipeline.Mode])
            p.add_argument("--captions", help="captions.jsonl from the caption step")

    p = add("grade", cmd_grade, "regrade stored responses")
    p.add_argument("--benchmark")
    p.add_argument("--results", nargs="+")

    p = add("bench-eval", cmd_bench_eval, "keypoint evaluation of captions")
    p.add_argument("--pairs", help="CapGeo-Bench pair records")
    p.add_argument("--judge", default="oracle", help="'oracle' or provider:model")
    p.add_argument("--oracle-match", action="store_true", help="LLM extraction, deterministic matching")
    p.add_argument("--captioner", help="provider:model; omit to use response_caption fields")
    p.add_argument("--label", help="captioner label in reports")
    p.add_argument("--store")

    p = add("score", cmd_score, "score one response notation file against ground truth")
    p.add_argument("--gt")
    p.add_argument("--response")

    for name, func, help in (
        ("tabulate", cmd_tabulate, "render one result table"),
        ("correlate", cmd_correlate, "correlate caption scores with reasoning accuracy"),
        ("report", cmd_report, "write all tables and correlations"),
    ):
        p = add(name, func, help)
        p.add_argument("--results", nargs="+", default=[])
        p.add_argument("--bench", nargs="+", default=[], help="bench.json files from bench-eval")
        p.add_argument("--reasoner-order")
        p.add_argument("--captioner-order")
        if name == "tabulate":
            p.add_argument("--layout", choices=analysis.LAYOUTS)
        else:
            p.add_argument("--pair-reasoner", help="reasoner whose accuracy pairs with caption scores")
            p.add_argument("--pair-mode", default=pipeline.Mode.CAPTION_WITH_IMAGE.value)
            p.add_argument("--pair-benchmark")
            p.add_argument("--pair-variant")
        if name == "report":
            p.add_argument("--format", choices=analysis.FORMATS, default="markdown")

    p = add("export-traces", cmd_export_traces, "markdown digest of traces for human review")
    p.add_argument("--traces", help="traces/<run-id> directory")
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    if not getattr(args, "func", None):
        parser.print_help(sys.stderr)
        return EXIT_USAGE
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"capgeo: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ConfigError, GatewayError) as exc:
        print(f"capgeo: provider error: {exc}", file=sys.stderr)
        return EXIT_PROVIDER
    except (pipeline.PipelineError, KeypointError, ValueError, KeyError, OSError) as exc:
        print(f"capgeo: data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
