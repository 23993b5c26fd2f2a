"""Regenerate the synthetic fixture data shipped in ``capgeo/data/synthetic``.

Figures are small line drawings; everything is seeded so reruns are stable.
"""

import json
import random
from pathlib import Path

from PIL import Image, ImageDraw

OUT = Path(__file__).resolve().parents[1] / "src" / "capgeo" / "data" / "synthetic"


def draw(path: Path, seed: int, kind: str, labels: str) -> None:
    rng = random.Random(seed)
    img = Image.new("L", (160, 160), 255)
    d = ImageDraw.Draw(img)
    if kind == "circle":
        r = rng.randint(35, 55)
        d.ellipse((80 - r, 80 - r, 80 + r, 80 + r), outline=0, width=2)
        d.text((78, 76), labels[0], fill=0)
    else:
        n = {"triangle": 3, "quad": 4}[kind]
        pts = []
        for i in range(n):
            pts.append((rng.randint(20 + 60 * (i % 2), 80 + 60 * (i % 2)), rng.randint(20 + 50 * (i // 2), 70 + 60 * (i // 2))))
        d.polygon(pts, outline=0)
        for (x, y), lab in zip(pts, labels):
            d.text((x + 3, y + 3), lab, fill=0)
    img.save(path, format="PNG", optimize=False)


def problems() -> list[dict]:
    rows = []
    specs = [
        ("mathverse", "vision-only"), ("mathverse", "vision-intensive"),
        ("mathvista-geometry", "n/a"), ("geoqa", "n/a"),
    ]
    kinds = ["triangle", "quad", "circle"]
    for b, (bench, variant) in enumerate(specs):
        for k in range(6):
            idx = b * 6 + k
            kind = kinds[idx % 3]
            labels = {"triangle": "ABC", "quad": "ABCD", "circle": "O"}[kind]
            image = f"images/p{idx:02d}.png"
            draw(OUT / image, 1000 + idx, kind, labels)
            row = {
                "id": f"{bench}-{idx:02d}",
                "benchmark": bench,
                "variant": variant,
                "image_path": image,
                "class": "PG",
                "difficulty": (idx % 4) + 1,
            }
            if idx % 3 == 2:
                row.update(
                    question=f"As shown in the figure, the radius of circle O is {idx + 2}. Find the diameter.",
                    answer_type="numeric",
                    gold=str(2 * (idx + 2)),
                )
            else:
                angle = 30 + 5 * idx
                row.update(
                    question=(
                        f"As shown in the figure, angle A = {angle} degrees and AB = AC. "
                        "Find angle B. Choices: A: {0} B: {1} C: {2} D: {3}".format(
                            angle, (180 - angle) / 2, 90 - angle / 4, 180 - angle
                        )
                    ),
                    answer_type="choice",
                    options=["A", "B", "C", "D"],
                    gold="B",
                )
            rows.append(row)
    return rows


# Ground-truth / response keypoint documents for the bench fixture.
# PG-T2 is the hand-built pair: gt has 4 E, 3 R, 2 N; the response covers 3, 2, 1.
HAND_BUILT_GT = """\
E: triangle ABC
E: point M
E: segment AB
E: segment CM
R: midpoint(point M; segment AB)
R: median(segment CM; triangle ABC)
R: perpendicular(segment CM; segment AB)
N: length(segment AB) = 6 cm
N: angle-measure(angle ACB) = 90 degree"""

HAND_BUILT_RESPONSE = """\
E: triangle ABC
E: point M
E: segment AB
E: point D
R: midpoint(point M; segment BA)
R: median(segment MC; triangle CAB)
R: parallel(segment CM; segment AB)
N: length(segment AB) = 6
N: angle-measure(angle ACB) = 60 degree"""


def bench_pairs() -> list[dict]:
    rows = []
    rng = random.Random(7)
    templates = [
        (
            "triangle",
            ["E: triangle ABC", "E: point D", "E: segment AD", "E: segment BC",
             "R: altitude(segment AD; triangle ABC)", "R: foot-of-perpendicular(point D; segment BC)",
             "N: length(segment BC) = 8", "N: angle-measure(angle ABC) = 45 degree"],
        ),
        (
            "circle",
            ["E: circle O", "E: point A", "E: point B", "E: segment AB", "E: line l",
             "R: chord(segment AB; circle O)", "R: tangent(line l; circle O; point A)",
             "N: radius(circle O) = 5", "N: length(segment AB) = 6"],
        ),
        (
            "quad",
            ["E: parallelogram ABCD", "E: segment AC", "E: segment BD", "E: point O",
             "R: diagonal(segment AC; parallelogram ABCD)", "R: intersection-point(point O; segment AC; segment BD)",
             "R: parallel(segment AB; segment CD)", "N: length(segment AB) = 7/2", "N: ratio(segment AO; segment OC) = 1"],
        ),
    ]
    for cls in ("AG", "PG", "SG"):
        for diff in (1, 2, 3, 4):
            rid = f"bench-{cls}-T{diff}"
            if cls == "PG" and diff == 2:
                gt, resp, kind = HAND_BUILT_GT, HAND_BUILT_RESPONSE, "triangle"
            else:
                kind, lines = templates[(len(rows)) % 3]
                if cls == "AG":
                    lines = lines + ["E: axis x", "E: axis y", "N: coordinate(point A) = expr: (0, 4)"]
                if cls == "SG":
                    lines = lines + ["E: region S", "N: area(region S) = 12 cm²"]
                gt = "\n".join(lines)
                # drop more keypoints as difficulty grows
                keep = [ln for ln in lines if rng.random() > 0.15 * diff]
                resp = "\n".join(keep or lines[:1])
            image = f"images/b-{cls}-T{diff}.png"
            draw(OUT / image, 3000 + len(rows), kind, "ABC" if kind != "circle" else "O")
            rows.append({
                "id": rid,
                "image_path": image,
                "gt_caption": gt,
                "response_caption": resp,
                "class": cls,
                "difficulty": diff,
                "language": "en",
            })
    return rows


def main() -> None:
    (OUT / "images").mkdir(parents=True, exist_ok=True)
    with open(OUT / "problems.jsonl", "w", encoding="utf-8") as fh:
        for row in problems():
            fh.write(json.dumps(row, sort_keys=True) + "\n")
    with open(OUT / "bench_pairs.jsonl", "w", encoding="utf-8") as fh:
        for row in bench_pairs():
            fh.write(json.dumps(row, sort_keys=True, ensure_ascii=False) + "\n")
    (OUT / "hand_built_gt.txt").write_text(HAND_BUILT_GT + "\n", encoding="utf-8")
    (OUT / "hand_built_response.txt").write_text(HAND_BUILT_RESPONSE + "\n", encoding="utf-8")


if __name__ == "__main__":
    main()
