"""Pseudo-label distillation from image metadata.

A text-generation backend answers, per image, the question of which
architectural feature the image shows, given the image's filename, caption,
and wiki categories. Raw answers are then normalized: lowercased, discarded
when the generator expresses uncertainty, and stripped of leading compass
qualifiers so that e.g. "Southern facade" and "facade" collapse to one label.
"""

from __future__ import annotations

import json
from collections import Counter
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Protocol

from .core_data import ImageMetadata, SceneManifest

PROMPT_TEMPLATE = (
    'What architectural feature of {building} is described in the following '
    'image? Write "unknown" if it is not specified.'
)

# Generator outputs that mean "no usable answer"; matched against the first
# token only, so e.g. "unique portal" survives.
UNCERTAINTY_WORDS = frozenset(
    {"unknown", "undefined", "undetermined", "unspecified", "unclear"}
)

_BASE_DIRECTIONS = ("north", "south", "east", "west")
_COMPOUNDS = ("northeast", "northwest", "southeast", "southwest")

# Leading location qualifiers to strip. Stripping is word-by-word and
# repeated, so two-word compounds such as "north eastern" also vanish.
DIRECTION_WORDS = frozenset(
    _BASE_DIRECTIONS
    + _COMPOUNDS
    + tuple(w + "ern" for w in _BASE_DIRECTIONS + _COMPOUNDS)
)

STATUS_VALID = "valid"
STATUS_FILTERED_UNKNOWN = "filtered_unknown"
STATUS_FILTERED_EMPTY = "filtered_empty"


class TextGenBackend(Protocol):
    """Deterministic generator: same prompt and seed give the same output."""

    beam_width: int

    def generate(self, prompt: str) -> str: ...


class GenerationError(Exception):
    """Backend failure; carries the image id for retry bookkeeping."""

    def __init__(self, image_id: str, cause: Exception):
        super().__init__(f"generation failed for {image_id}: {cause}")
        self.image_id = image_id
        self.cause = cause


@dataclass(frozen=True)
class PseudoLabel:
    image_id: str
    raw: str
    cleaned: str
    status: str

    @property
    def valid(self) -> bool:
        return self.status == STATUS_VALID


def build_prompt(meta: ImageMetadata, building_name: str) -> str:
    """Instruction plus the image's metadata fields joined by "; "."""
    if not building_name:
        raise ValueError("building_name must be nonempty")
    parts = [meta.filename, meta.caption, *meta.wiki_categories]
    description = "; ".join(p for p in parts if p)
    question = PROMPT_TEMPLATE.format(building=building_name)
    return f"{question}\n{description}"


def generate_pseudolabel(prompt: str, backend: TextGenBackend, image_id: str = "") -> str:
    """Backend output verbatim; cleanup is a separate step."""
    try:
        return backend.generate(prompt)
    except Exception as exc:
        raise GenerationError(image_id or "<unknown image>", exc) from exc


def clean_pseudolabel(
    raw: str, image_id: str = "", direction_words: frozenset = DIRECTION_WORDS
) -> PseudoLabel:
    """Lowercase, drop uncertain answers, strip leading direction words.

    Uncertainty is re-checked after direction stripping so cleanup is
    idempotent ("west unknown" filters rather than surviving one pass).
    """
    words = raw.lower().split()
    while True:
        if words and words[0].strip(".,!?\"'") in UNCERTAINTY_WORDS:
            return PseudoLabel(image_id, raw, "", STATUS_FILTERED_UNKNOWN)
        if words and words[0] in direction_words:
            words = words[1:]
            continue
        break
    if not words:
        return PseudoLabel(image_id, raw, "", STATUS_FILTERED_EMPTY)
    return PseudoLabel(image_id, raw, " ".join(words), STATUS_VALID)


def distill_scene(
    manifest: SceneManifest, backend: TextGenBackend
) -> list[PseudoLabel]:
    """One PseudoLabel per image (filtered ones included), ordered by id."""
    out = []
    for rec in sorted(manifest.images, key=lambda r: r.id):
        prompt = build_prompt(rec.metadata, manifest.landmark_name)
        raw = generate_pseudolabel(prompt, backend, rec.id)
        out.append(replace(clean_pseudolabel(raw), image_id=rec.id))
    return out


def write_pseudolabels(labels: list[PseudoLabel], path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = [
        json.dumps(
            {
                "image_id": pl.image_id,
                "raw": pl.raw,
                "cleaned": pl.cleaned,
                "status": pl.status,
            },
            sort_keys=True,
        )
        for pl in labels
    ]
    path.write_text("\n".join(lines) + ("\n" if lines else ""))


def read_pseudolabels(path) -> list[PseudoLabel]:
    labels = []
    for line in Path(path).read_text().splitlines():
        if not line.strip():
            continue
        obj = json.loads(line)
        labels.append(
            PseudoLabel(obj["image_id"], obj["raw"], obj["cleaned"], obj["status"])
        )
    return labels


def common_labels(labels: list[PseudoLabel], top_n: int = 20) -> list[str]:
    """Top-n most frequent valid labels; count ties break lexicographically."""
    counts = Counter(pl.cleaned for pl in labels if pl.valid)
    ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
    return [label for label, _ in ranked[:top_n]]
