"""Caption, reason in all three modes and tabulate, fully offline.

The mock provider answers deterministically, so the accuracies are
meaningless; the point is the plumbing and the warm-cache rerun.
Run: python3 demos/03_offline_pipeline.py
"""

import tempfile
from pathlib import Path

from capgeo import analysis
from capgeo.fixtures import problems_path
from capgeo.gateway import ContentStore, Gateway, MockProvider, ResponseCache
from capgeo.pipeline import Mode, ingest_benchmark, run_captions, run_reasoning


def run(workdir: Path):
    store = ContentStore(workdir / "images")
    gw = Gateway({"mock": MockProvider()}, cache=ResponseCache(workdir / "cache"), store=store)
    problems = ingest_benchmark(problems_path(), store=store).records
    captioner, reasoner = gw.model("mock:captioner"), gw.model("mock:reasoner")
    captions, _ = run_captions(problems, captioner, gw)
    by_id = {c.problem_id: c for c in captions}
    records = []
    for mode in Mode:
        records += run_reasoning(problems, reasoner, mode, gw, by_id)
    tables = [analysis.tabulate(records, "mathverse"), analysis.tabulate(records, "mathvista-geoqa")]
    return tables, gw.provider_calls


with tempfile.TemporaryDirectory() as tmp:
    tables, cold = run(Path(tmp))
    _, warm = run(Path(tmp))
    for t in tables:
        print(f"## {t.name}\n{t.to_markdown()}\n")
    print(f"provider calls: first run {cold}, rerun {warm}")
