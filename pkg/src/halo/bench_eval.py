"""Benchmark construction and scoring.

Ground-truth masks are propagated from manually annotated seed images to
new views through pair homographies, gated by an inlier-count threshold and
a skew filter, and merged by per-pixel majority vote. Predictions are
scored with average precision (threshold-free), aggregated per category
into mAP, and retrieval rankings are scored with recall@k.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .core_data import BinaryMask, ProbMap
from .mining import MatchResult, warp_mask

log = logging.getLogger(__name__)

PROPAGATION_MIN_INLIERS = 100
DEFAULT_KAPPA_MAX = 10.0
RECALL_KS = (1, 5, 10, 16, 32, 64)

ORIGIN_MANUAL = "manual_seed"
ORIGIN_PROPAGATED = "propagated"


class NoPositivesError(Exception):
    """AP is undefined without positive labels; the cell is excluded."""


@dataclass
class SeedAnnotation:
    image_id: str
    category: str
    mask: BinaryMask
    origin: str = ORIGIN_MANUAL
    sources: list = field(default_factory=list)

    def __post_init__(self):
        if self.origin not in (ORIGIN_MANUAL, ORIGIN_PROPAGATED):
            raise ValueError(f"bad origin {self.origin!r}")
        if self.origin == ORIGIN_PROPAGATED and not self.sources:
            raise ValueError("propagated annotation must list its source seeds")


@dataclass
class EvalTable:
    cells: dict  # (landmark, category) -> AP
    category_means: dict  # category -> mean AP over landmarks with a cell
    map_score: float

    def to_json(self) -> dict:
        return {
            "cells": {f"{lm}/{cat}": ap for (lm, cat), ap in sorted(self.cells.items())},
            "category_means": dict(sorted(self.category_means.items())),
            "map": self.map_score,
        }


def homography_skew_filter(H: np.ndarray, kappa_max: float = DEFAULT_KAPPA_MAX) -> bool:
    """Accept H iff the 2-norm condition number of its first two columns is
    at most kappa_max; rank-deficient columns always reject."""
    H = np.asarray(H, dtype=np.float64)
    cols = H[:, :2]
    s = np.linalg.svd(cols, compute_uv=False)
    if s[-1] <= 1e-12 * max(1.0, s[0]):
        return False
    return bool(s[0] / s[-1] <= kappa_max)


def propagate_masks(
    seeds: list,
    matches: list,
    target_shapes: dict,
    kappa_max: float = DEFAULT_KAPPA_MAX,
    min_inliers: int = PROPAGATION_MIN_INLIERS,
) -> tuple:
    """Warp seed masks to target images and merge by per-pixel majority.

    A match is usable only with >= min_inliers inliers and a homography
    passing the skew filter; matches are accepted in either direction (the
    homography is inverted when the seed is the pair's second image).
    Pixels where no accepted warp is valid stay negative; ties among valid
    votes resolve positive. Targets with zero accepted warps are skipped.
    Returns (propagated annotations, review manifest entries).
    """
    seeds_by_id = {}
    for seed in seeds:
        seeds_by_id.setdefault(seed.image_id, []).append(seed)

    warps = {}  # (target_id, category) -> list of (source_id, ProbMap, valid)
    for match in matches:
        id_a, id_b = match.pair
        for seed_id, target_id, H in (
            (id_a, id_b, match.H),
            (id_b, id_a, np.linalg.inv(match.H) if abs(np.linalg.det(match.H)) > 1e-12 else None),
        ):
            if H is None or seed_id not in seeds_by_id or target_id not in target_shapes:
                continue
            if target_id in seeds_by_id and any(
                s.origin == ORIGIN_MANUAL for s in seeds_by_id[target_id]
            ):
                continue  # never overwrite a manual annotation
            if match.inlier_count < min_inliers:
                log.debug("skip %s->%s: %d inliers", seed_id, target_id, match.inlier_count)
                continue
            Hn = H / H[2, 2] if abs(H[2, 2]) > 1e-12 else H
            if not homography_skew_filter(Hn, kappa_max):
                log.debug("skip %s->%s: skew filter", seed_id, target_id)
                continue
            for seed in seeds_by_id[seed_id]:
                warped, valid, _ = warp_mask(
                    ProbMap(seed.mask.bits.astype(np.float32)),
                    Hn,
                    target_shapes[target_id],
                )
                warps.setdefault((target_id, seed.category), []).append(
                    (seed_id, warped, valid)
                )

    propagated = []
    review = []
    for (target_id, category), entries in sorted(warps.items()):
        pos = np.zeros(target_shapes[target_id], dtype=np.int32)
        votes = np.zeros(target_shapes[target_id], dtype=np.int32)
        for _, warped, valid in entries:
            v = valid.bits
            pos += ((warped.values >= 0.5) & v).astype(np.int32)
            votes += v.astype(np.int32)
        bits = (votes > 0) & (2 * pos >= votes)
        tie_pixels = int(((votes > 0) & (2 * pos == votes)).sum())
        annotation = SeedAnnotation(
            image_id=target_id,
            category=category,
            mask=BinaryMask(bits, threshold=0.5),
            origin=ORIGIN_PROPAGATED,
            sources=sorted({sid for sid, _, _ in entries}),
        )
        propagated.append(annotation)
        review.append(
            {
                "image_id": target_id,
                "category": category,
                "sources": annotation.sources,
                "num_warps": len(entries),
                "tie_pixels": tie_pixels,
                "positive_fraction": float(bits.mean()),
            }
        )
    return propagated, review


def write_review_manifest(review: list, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = [json.dumps(entry, sort_keys=True) for entry in review]
    path.write_text("\n".join(lines) + ("\n" if lines else ""))


def average_precision(scores, labels) -> float:
    """Area under the precision-recall curve: sum over positives, in
    descending-score order (ties keep input order), of precision-at-rank
    times the recall step."""
    s = np.asarray(getattr(scores, "values", scores), dtype=np.float64).ravel()
    y = np.asarray(getattr(labels, "bits", labels)).ravel().astype(bool)
    if s.shape != y.shape:
        raise ValueError("scores and labels must have equal length")
    n_pos = int(y.sum())
    if n_pos == 0:
        raise NoPositivesError("no positive labels in this cell")
    order = np.argsort(-s, kind="stable")
    hits = y[order]
    cum = np.cumsum(hits)
    ranks = np.nonzero(hits)[0] + 1
    precisions = cum[ranks - 1] / ranks
    return float(np.sum(precisions) / n_pos)


def aggregate_map(cells: dict) -> EvalTable:
    """Per-category means over available landmarks, then the mean of those
    means. Missing cells are simply absent, never counted as zero."""
    if not cells:
        raise ValueError("no cells to aggregate")
    per_category = {}
    for (landmark, category), ap in cells.items():
        per_category.setdefault(category, []).append((landmark, ap))
    category_means = {
        cat: float(np.mean([ap for _, ap in sorted(vals)]))
        for cat, vals in per_category.items()
    }
    map_score = float(np.mean([category_means[c] for c in sorted(category_means)]))
    return EvalTable(cells=dict(cells), category_means=category_means, map_score=map_score)


def recall_at_k(rankings: dict, gold: dict, ks=RECALL_KS) -> tuple:
    """Fraction of images whose gold term is in the top k of their ranking.

    Images whose gold term does not appear anywhere in their ranked
    vocabulary are excluded and counted; returns ({k: recall}, excluded).
    """
    ranks = []
    excluded = 0
    for image_id, ranking in rankings.items():
        term = gold.get(image_id)
        if term is None or term not in ranking:
            excluded += 1
            continue
        ranks.append(ranking.index(term) + 1)
    if not ranks:
        raise ValueError("no scorable images (gold labels missing from vocab)")
    out = {k: float(np.mean([r <= k for r in ranks])) for k in ks}
    return out, excluded


def pooled_cell_ap(preds: list, gts: list) -> float:
    """AP over the pooled pixels of aligned prediction/GT map pairs."""
    if len(preds) != len(gts) or not preds:
        raise ValueError("need equal nonempty prediction and GT lists")
    scores = np.concatenate([np.asarray(p.values, np.float64).ravel() for p in preds])
    labels = np.concatenate([np.asarray(g.bits).ravel() for g in gts])
    return average_precision(scores, labels)
