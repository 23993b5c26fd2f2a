"""Shipped prompt templates and their rendering."""

from __future__ import annotations

from functools import lru_cache
from importlib import resources
from string import Template

from .keypoints import _TAXONOMY

TEMPLATE_NAMES = ("caption", "reasoning", "extract_gt", "extract_response", "match")


@lru_cache(maxsize=None)
def load_template(name: str) -> str:
    if name not in TEMPLATE_NAMES:
        raise KeyError(f"unknown template {name!r}")
    return resources.files("capgeo").joinpath("templates", f"{name}.txt").read_text(encoding="utf-8")


def relation_catalog() -> str:
    families: dict[str, list[str]] = {}
    for name, (family, *_rest) in _TAXONOMY.items():
        families.setdefault(family.value, []).append(name)
    return "\n".join(f"  {family}: {', '.join(names)}" for family, names in families.items())


def render(name: str, template: str | None = None, **fields: str) -> str:
    """Fill ``$placeholders``; pass ``template`` to override the shipped text."""
    text = template if template is not None else load_template(name)
    if name.startswith("extract"):
        fields.setdefault("relations", relation_catalog())
    return Template(text).substitute(fields).rstrip() + "\n"
