"""Score a model caption against a reference caption, keypoint by keypoint.

Uses the deterministic oracle judge, so both captions are given in notation.
Run: python3 demos/02_caption_scoring.py
"""

from capgeo import bench
from capgeo.fixtures import bench_pairs_path, hand_built_pair

gt, response = hand_built_pair()
pair = bench.CaptionPair("demo", gt, "PG", "T2", response_caption=response)
trace = bench.evaluate_caption(pair, bench.OracleJudge())

for m in trace.matches:
    gt_items = trace.gt_set.sorted_items(m.dimension)
    covered = {g for g, _ in m.pairs}
    print(f"{m.dimension.name.lower()}: {m.tp_count}/{m.gt_count}")
    for i, item in enumerate(gt_items):
        print(f"  [{'x' if i in covered else ' '}] {item}")

s = trace.scores
print(f"\nS_e={s.s_element:.3f}  S_s={s.s_spatial:.3f}  S_n={s.s_numerical:.3f}  mean={s.mean:.3f}")

# the whole fixture benchmark, grouped by class and difficulty
pairs, _ = bench.ingest_pairs(bench_pairs_path())
table = bench.run_bench(pairs, bench.OracleJudge()).table
print("\n            " + "  ".join(f"{c:>7s}" for c in ("AG", "PG", "SG", "T1", "T2", "T3", "T4", "Overall")))
for dim in table.cells:
    print(f"{dim:10s}  " + "  ".join(f"{v:7.1f}" for v in table.row(dim)))
print("Avg", table.avg)
