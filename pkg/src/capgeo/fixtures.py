"""Paths to the synthetic fixture data shipped with the package."""

from __future__ import annotations

from importlib import resources
from pathlib import Path


def synthetic_dir() -> Path:
    return Path(str(resources.files("capgeo").joinpath("data", "synthetic")))


def problems_path() -> Path:
    return synthetic_dir() / "problems.jsonl"


def bench_pairs_path() -> Path:
    return synthetic_dir() / "bench_pairs.jsonl"


def hand_built_pair() -> tuple[str, str]:
    """(ground truth, response) notation documents scoring (3/4, 2/3, 1/2)."""
    d = synthetic_dir()
    return (
        (d / "hand_built_gt.txt").read_text(encoding="utf-8"),
        (d / "hand_built_response.txt").read_text(encoding="utf-8"),
    )
