"""Geometry-grounded training-sample mining.

Two kinds of samples are mined from a photo collection:

* zoom pairs: image I1 is a close-up of a region visible in image I2; the
  segmentation of I1 for a label P, projected through the pair's homography,
  supervises I2 inside the projected quad Q.
* crop samples: a random crop C of an image whose similarity profile says it
  shows P more clearly than the full image does; the segmentation of C
  supervises the crop region.

All keypoint coordinates are relative, (x, y) in [0, 1] x [0, 1], so the
geometry is resolution independent. Homographies map image-1 relative
coordinates to image-2 and are normalized to H[2][2] = 1.
"""

from __future__ import annotations

import hashlib
import json
import logging
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Protocol

import numpy as np

from .core_data import (
    BinaryMask,
    ImageRecord,
    ProbMap,
    Rect,
    SceneManifest,
    binarize,
    write_probmap,
)

log = logging.getLogger(__name__)

MIN_PUTATIVE_PAIRS = 8
MIN_INLIERS = 50
MIN_LOG_DISPERSION_RATIO = 0.1
MIN_SIM_ZOOMED_IN = 0.2
MAX_SIM_ZOOMED_OUT = 0.3
REGION_BINARIZE_THRESHOLD = 0.3
MIN_INLIERS_IN_REGION = 3
MAX_FACADE_AREA_RATIO = 0.5

MIN_CROP_SIM = 0.2
CENTER_ACTIVATION_MIN = 0.1
# Central-region test: the segmenter works at 352x352 and the rule is stated
# for its central 280x280, i.e. a margin of 36/352 per side; applied
# proportionally at whatever resolution the map has.
CENTER_MARGIN_FRACTION = 36.0 / 352.0
CROP_SIDE_RANGE = (0.2, 0.6)

# Labels that name the building or a viewpoint rather than a localizable part.
NON_LOCALIZABLE_LABELS = frozenset(
    {"mosque", "front", "gothic", "cathedral", "side", "view"}
)


class FacadeNotFoundError(Exception):
    """facade_area_ratio is undefined when the building map sums to zero."""


class MatchBackend(Protocol):
    """Putative correspondence source (feature matcher contract)."""

    def putative_matches(self, rec1: ImageRecord, rec2: ImageRecord) -> np.ndarray:
        """(N, 4) array of [x1, y1, x2, y2] in relative coordinates."""
        ...


class SegBackend(Protocol):
    """Text-conditioned segmenter contract used by mining filters."""

    def segment(self, rec: ImageRecord, text: str, rect: Rect | None = None) -> ProbMap: ...


class SimBackend(Protocol):
    """Image/region-to-text similarity contract (cosine score in [-1, 1])."""

    def sim(self, rec: ImageRecord, text: str, rect: Rect | None = None) -> float: ...


@dataclass
class MatchResult:
    pair: tuple
    keypoints: np.ndarray  # (N, 4): x1, y1, x2, y2 relative
    inlier_flags: np.ndarray  # (N,) bool
    H: np.ndarray  # 3x3, maps image-1 relative coords to image-2

    def __post_init__(self):
        self.keypoints = np.asarray(self.keypoints, dtype=np.float64)
        self.inlier_flags = np.asarray(self.inlier_flags, dtype=bool)
        if len(self.inlier_flags) != len(self.keypoints):
            raise ValueError("inlier_flags length mismatch")
        self.H = np.asarray(self.H, dtype=np.float64)
        if self.H.shape != (3, 3):
            raise ValueError("H must be 3x3")

    @property
    def inlier_count(self) -> int:
        return int(self.inlier_flags.sum())

    def inliers(self) -> np.ndarray:
        return self.keypoints[self.inlier_flags]


@dataclass
class ZoomPairSample:
    zoomed_in_id: str
    zoomed_out_id: str
    label: str
    quad: np.ndarray  # (4, 2) relative coords in the zoomed-out image
    target: ProbMap  # over the zoomed-out image, defined where valid
    valid: BinaryMask

    def __post_init__(self):
        self.quad = np.asarray(self.quad, dtype=np.float64)
        if self.quad.shape != (4, 2):
            raise ValueError("quad must be 4 points")
        if not np.all(np.isfinite(self.quad)):
            raise ValueError("quad vertices must be finite")


@dataclass
class CropSample:
    image_id: str
    label: str
    crop_rect: Rect
    target: ProbMap  # segmentation of the crop, at crop resolution


@dataclass
class MiningReport:
    zoom_pairs: list = field(default_factory=list)
    crops: list = field(default_factory=list)
    reject_counters: Counter = field(default_factory=Counter)


def _homogenize(pts: np.ndarray) -> np.ndarray:
    return np.hstack([pts, np.ones((len(pts), 1))])


def _normalize_points(pts: np.ndarray):
    """Hartley conditioning: centroid at origin, mean distance sqrt(2)."""
    centroid = pts.mean(axis=0)
    d = np.sqrt(((pts - centroid) ** 2).sum(axis=1)).mean()
    scale = np.sqrt(2.0) / d if d > 0 else 1.0
    T = np.array(
        [
            [scale, 0.0, -scale * centroid[0]],
            [0.0, scale, -scale * centroid[1]],
            [0.0, 0.0, 1.0],
        ]
    )
    return (_homogenize(pts) @ T.T)[:, :2], T


def fit_homography(src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    """Least-squares homography (DLT) mapping src -> dst, H[2][2] = 1."""
    src = np.asarray(src, dtype=np.float64)
    dst = np.asarray(dst, dtype=np.float64)
    if len(src) < 4:
        raise ValueError("homography needs >= 4 correspondences")
    sn, Ts = _normalize_points(src)
    dn, Td = _normalize_points(dst)
    n = len(sn)
    A = np.zeros((2 * n, 9))
    x, y = sn[:, 0], sn[:, 1]
    u, v = dn[:, 0], dn[:, 1]
    A[0::2, 0] = -x
    A[0::2, 1] = -y
    A[0::2, 2] = -1.0
    A[0::2, 6] = u * x
    A[0::2, 7] = u * y
    A[0::2, 8] = u
    A[1::2, 3] = -x
    A[1::2, 4] = -y
    A[1::2, 5] = -1.0
    A[1::2, 6] = v * x
    A[1::2, 7] = v * y
    A[1::2, 8] = v
    _, _, vt = np.linalg.svd(A)
    Hn = vt[-1].reshape(3, 3)
    H = np.linalg.inv(Td) @ Hn @ Ts
    if abs(H[2, 2]) > 1e-12:
        H = H / H[2, 2]
    return H


def apply_homography(H: np.ndarray, pts: np.ndarray) -> np.ndarray:
    ph = _homogenize(np.asarray(pts, dtype=np.float64)) @ H.T
    return ph[:, :2] / ph[:, 2:3]


def homography_transfer_error(H: np.ndarray, src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    return np.sqrt(((apply_homography(H, src) - dst) ** 2).sum(axis=1))


def fit_fundamental(src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    """Normalized 8-point fundamental matrix with rank-2 projection."""
    sn, Ts = _normalize_points(src)
    dn, Td = _normalize_points(dst)
    x, y = sn[:, 0], sn[:, 1]
    u, v = dn[:, 0], dn[:, 1]
    A = np.stack([u * x, u * y, u, v * x, v * y, v, x, y, np.ones_like(x)], axis=1)
    _, _, vt = np.linalg.svd(A)
    F = vt[-1].reshape(3, 3)
    uf, sf, vtf = np.linalg.svd(F)
    F = uf @ np.diag([sf[0], sf[1], 0.0]) @ vtf
    return Td.T @ F @ Ts


def sampson_distance(F: np.ndarray, src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    x1 = _homogenize(src)
    x2 = _homogenize(dst)
    Fx1 = x1 @ F.T
    Ftx2 = x2 @ F
    num = (x2 * Fx1).sum(axis=1) ** 2
    den = Fx1[:, 0] ** 2 + Fx1[:, 1] ** 2 + Ftx2[:, 0] ** 2 + Ftx2[:, 1] ** 2
    den = np.maximum(den, 1e-300)
    return num / den


def _is_degenerate(pts: np.ndarray, tol: float = 1e-9) -> bool:
    """True when points are (near-)collinear, so a plane fit is ambiguous."""
    centered = pts - pts.mean(axis=0)
    s = np.linalg.svd(centered, compute_uv=False)
    return len(s) < 2 or s[1] <= tol * max(1.0, s[0])


def _pair_rng(seed: int, id1: str, id2: str) -> np.random.Generator:
    digest = hashlib.sha256(f"{seed}|{id1}|{id2}".encode()).digest()
    return np.random.default_rng(np.random.SeedSequence(int.from_bytes(digest[:8], "big")))


def robust_match(
    rec1: ImageRecord,
    rec2: ImageRecord,
    matcher: MatchBackend,
    seed: int = 0,
    ransac_iters: int = 500,
    inlier_threshold: float = 2e-3,
) -> MatchResult | None:
    """Classify putative matches via robust fundamental-matrix fitting,
    then fit the pair homography on inliers. None = pair rejected.

    Inlier residual is the Sampson distance (squared, in relative units);
    the threshold is compared against its square root.
    """
    putative = np.asarray(matcher.putative_matches(rec1, rec2), dtype=np.float64)
    if len(putative) < MIN_PUTATIVE_PAIRS:
        return None
    src, dst = putative[:, :2], putative[:, 2:]
    rng = _pair_rng(seed, rec1.id, rec2.id)

    best_inliers = None
    best_count = -1
    sq_thresh = inlier_threshold**2
    for _ in range(ransac_iters):
        idx = rng.choice(len(src), size=8, replace=False)
        if _is_degenerate(src[idx]) or _is_degenerate(dst[idx]):
            continue
        try:
            F = fit_fundamental(src[idx], dst[idx])
        except np.linalg.LinAlgError:
            continue
        inl = sampson_distance(F, src, dst) < sq_thresh
        count = int(inl.sum())
        if count > best_count:
            best_count = count
            best_inliers = inl
    if best_inliers is None or best_count < MIN_PUTATIVE_PAIRS:
        return None
    if _is_degenerate(src[best_inliers]) or _is_degenerate(dst[best_inliers]):
        return None

    # An outlier pair can sit near an epipolar line by accident, so the
    # homography is fit robustly within the fundamental-matrix inliers.
    s_in, d_in = src[best_inliers], dst[best_inliers]
    h_consensus = None
    h_best = -1
    for _ in range(max(50, ransac_iters // 5)):
        idx = rng.choice(len(s_in), size=4, replace=False)
        if _is_degenerate(s_in[idx]) or _is_degenerate(d_in[idx]):
            continue
        try:
            Hc = fit_homography(s_in[idx], d_in[idx])
        except (ValueError, np.linalg.LinAlgError):
            continue
        ok = homography_transfer_error(Hc, s_in, d_in) < inlier_threshold
        if int(ok.sum()) > h_best:
            h_best = int(ok.sum())
            h_consensus = ok
    if h_consensus is None or h_consensus.sum() < 4:
        return None
    H = fit_homography(s_in[h_consensus], d_in[h_consensus])
    return MatchResult(
        pair=(rec1.id, rec2.id), keypoints=putative, inlier_flags=best_inliers, H=H
    )


def dispersion(points) -> float:
    """Mean squared distance of points from their centroid."""
    pts = np.asarray(points, dtype=np.float64)
    if pts.size == 0:
        raise ValueError("dispersion of an empty point set")
    pts = pts.reshape(len(pts), -1)
    centroid = pts.mean(axis=0)
    return float(((pts - centroid) ** 2).sum(axis=1).mean())


def points_in_polygon(px: np.ndarray, py: np.ndarray, poly: np.ndarray) -> np.ndarray:
    """Even-odd ray-casting point-in-polygon test, vectorized over points."""
    poly = np.asarray(poly, dtype=np.float64)
    inside = np.zeros(px.shape, dtype=bool)
    k = len(poly)
    for i in range(k):
        x1, y1 = poly[i]
        x2, y2 = poly[(i + 1) % k]
        crosses = (y1 > py) != (y2 > py)
        with np.errstate(divide="ignore", invalid="ignore"):
            x_at = (x2 - x1) * (py - y1) / (y2 - y1) + x1
        inside ^= crosses & (px < x_at)
    return inside


def facade_area_ratio(M: ProbMap, quad: np.ndarray) -> float:
    """Fraction of the map's mass whose pixel centers fall inside the quad."""
    vals = M.values.astype(np.float64)
    total = vals.sum()
    if total <= 0:
        raise FacadeNotFoundError("building segmentation map sums to zero")
    h, w = vals.shape
    cx = (np.arange(w) + 0.5) / w
    cy = (np.arange(h) + 0.5) / h
    px, py = np.meshgrid(cx, cy)
    inside = points_in_polygon(px, py, quad)
    return float(vals[inside].sum() / total)


def project_frame(H: np.ndarray) -> np.ndarray:
    """Forward projection of the unit-square frame corners through H."""
    corners = np.array([[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]])
    return apply_homography(H, corners)


def warp_mask(pmap: ProbMap, H: np.ndarray, out_shape: tuple) -> tuple:
    """Inverse-warp a map through H (source frame -> output frame).

    Returns (warped ProbMap, validity BinaryMask, quad). Output pixels whose
    preimage falls outside the source frame are invalid and set to 0; the
    quad is the forward projection of the source frame corners.
    """
    H = np.asarray(H, dtype=np.float64)
    if abs(np.linalg.det(H)) < 1e-12:
        raise ValueError("homography is not invertible")
    Hinv = np.linalg.inv(H)
    out_h, out_w = out_shape
    cx = (np.arange(out_w) + 0.5) / out_w
    cy = (np.arange(out_h) + 0.5) / out_h
    gx, gy = np.meshgrid(cx, cy)
    pts = np.stack([gx.ravel(), gy.ravel()], axis=1)
    src_pts = apply_homography(Hinv, pts)
    sx = src_pts[:, 0].reshape(out_h, out_w)
    sy = src_pts[:, 1].reshape(out_h, out_w)
    valid = (sx >= 0.0) & (sx <= 1.0) & (sy >= 0.0) & (sy <= 1.0)

    src = pmap.values.astype(np.float64)
    sh, sw = src.shape
    u = np.clip(sx * sw - 0.5, 0.0, sw - 1.0)
    v = np.clip(sy * sh - 0.5, 0.0, sh - 1.0)
    u0 = np.floor(u).astype(int)
    v0 = np.floor(v).astype(int)
    u1 = np.minimum(u0 + 1, sw - 1)
    v1 = np.minimum(v0 + 1, sh - 1)
    fu = u - u0
    fv = v - v0
    warped = (
        src[v0, u0] * (1 - fu) * (1 - fv)
        + src[v0, u1] * fu * (1 - fv)
        + src[v1, u0] * (1 - fu) * fv
        + src[v1, u1] * fu * fv
    )
    warped = np.where(valid, warped, 0.0)
    return (
        ProbMap(np.clip(warped, 0.0, 1.0).astype(np.float32)),
        BinaryMask(valid),
        project_frame(H),
    )


def accept_zoom_pair(
    rec1: ImageRecord,
    rec2: ImageRecord,
    label: str,
    match: MatchResult,
    seg: SegBackend,
    sim: SimBackend,
    building_prompt: str,
    counters: Counter | None = None,
) -> ZoomPairSample | None:
    """Apply the five zoom-pair filters; emit a sample only if all pass.

    rec1 is the candidate zoomed-in view, rec2 the zoomed-out view. The
    filters, in order: enough inliers; keypoint dispersion shrinks from
    zoomed-in to zoomed-out; the close-up matches the label while the wide
    view does not match it too strongly; enough inliers land inside the
    label's region in the close-up; the projected quad covers less than
    half of the building's segmentation mass in the wide view.
    """
    counters = counters if counters is not None else Counter()

    if match.inlier_count < MIN_INLIERS:
        counters["inlier_count"] += 1
        return None

    inl = match.inliers()
    d1 = dispersion(inl[:, :2])
    d2 = dispersion(inl[:, 2:])
    if d1 <= 0 or d2 <= 0 or np.log(d1 / d2) < MIN_LOG_DISPERSION_RATIO:
        counters["dispersion_ratio"] += 1
        return None

    if sim.sim(rec1, label) < MIN_SIM_ZOOMED_IN:
        counters["sim_zoomed_in"] += 1
        return None
    if sim.sim(rec2, label) > MAX_SIM_ZOOMED_OUT:
        counters["sim_zoomed_out"] += 1
        return None

    seg1 = seg.segment(rec1, label)
    region = binarize(seg1, REGION_BINARIZE_THRESHOLD)
    h1, w1 = region.bits.shape
    cols = np.clip((inl[:, 0] * w1).astype(int), 0, w1 - 1)
    rows = np.clip((inl[:, 1] * h1).astype(int), 0, h1 - 1)
    if int(region.bits[rows, cols].sum()) < MIN_INLIERS_IN_REGION:
        counters["inliers_in_region"] += 1
        return None

    quad = project_frame(match.H)
    facade = seg.segment(rec2, building_prompt)
    try:
        ratio = facade_area_ratio(facade, quad)
    except FacadeNotFoundError:
        counters["facade_not_found"] += 1
        return None
    if not ratio < MAX_FACADE_AREA_RATIO:
        counters["facade_area_ratio"] += 1
        return None

    target, valid, _ = warp_mask(seg1, match.H, (rec2.height, rec2.width))
    counters["accepted"] += 1
    return ZoomPairSample(
        zoomed_in_id=rec1.id,
        zoomed_out_id=rec2.id,
        label=label,
        quad=quad,
        target=target,
        valid=valid,
    )


def sample_crop_rect(width: int, height: int, rng: np.random.Generator) -> Rect:
    """Square crop, side uniform in [0.2, 0.6] x min dim, position uniform."""
    lo, hi = CROP_SIDE_RANGE
    side = max(1, int(round(rng.uniform(lo, hi) * min(width, height))))
    side = min(side, width, height)
    x0 = int(rng.integers(0, width - side + 1))
    y0 = int(rng.integers(0, height - side + 1))
    return Rect(x0, y0, x0 + side, y0 + side)


def central_region_max(pmap: ProbMap) -> float:
    """Max activation in the central area (proportional 36/352 margins)."""
    h, w = pmap.values.shape
    my = int(round(CENTER_MARGIN_FRACTION * h))
    mx = int(round(CENTER_MARGIN_FRACTION * w))
    core = pmap.values[my : h - my or None, mx : w - mx or None]
    if core.size == 0:
        core = pmap.values
    return float(core.max()) if core.size else 0.0


def mine_crop_sample(
    rec: ImageRecord,
    label: str,
    seg: SegBackend,
    sim: SimBackend,
    rng: np.random.Generator,
    common_vocab: list,
    counters: Counter | None = None,
) -> CropSample | None:
    """Sample one random crop and keep it only if all four conditions hold:
    the crop matches the label strongly enough, more strongly than the full
    image does, more strongly than any of the most common labels, and the
    segmenter actually fires in the crop's central area.
    """
    counters = counters if counters is not None else Counter()
    crop = sample_crop_rect(rec.width, rec.height, rng)

    s_crop = sim.sim(rec, label, crop)
    if s_crop < MIN_CROP_SIM:
        counters["crop_sim_low"] += 1
        return None
    if not s_crop > sim.sim(rec, label):
        counters["crop_not_better_than_image"] += 1
        return None
    for other in common_vocab:
        if other == label:
            continue
        if not s_crop > sim.sim(rec, other, crop):
            counters["crop_common_label_wins"] += 1
            return None

    target = seg.segment(rec, label, crop)
    if central_region_max(target) < CENTER_ACTIVATION_MIN:
        counters["crop_center_inactive"] += 1
        return None

    counters["crop_accepted"] += 1
    return CropSample(image_id=rec.id, label=label, crop_rect=crop, target=target)


def two_crop_pick(
    rec: ImageRecord, label: str, sim: SimBackend, rng: np.random.Generator
) -> Rect:
    """Of two sampled crops, the one more similar to the label; ties keep
    the first."""
    a = sample_crop_rect(rec.width, rec.height, rng)
    b = sample_crop_rect(rec.width, rec.height, rng)
    return b if sim.sim(rec, label, b) > sim.sim(rec, label, a) else a


def singularize(word: str) -> str:
    """Heuristic English singular form, good enough for short noun labels."""
    if word.endswith("ies") and len(word) > 3:
        return word[:-3] + "y"
    if word.endswith("es") and len(word) > 2 and word[:-2].endswith(("s", "x", "z", "ch", "sh")):
        return word[:-2]
    if word.endswith("s") and not word.endswith("ss"):
        return word[:-1]
    return word


def refine_label(
    label: str,
    stop_list: frozenset = NON_LOCALIZABLE_LABELS,
    direction_words: frozenset | None = None,
) -> str | None:
    """Pre-mining label cleanup: singularize, strip digits and direction
    words, and drop terms that cannot be localized. None = skip this label."""
    from .distill import DIRECTION_WORDS

    directions = DIRECTION_WORDS if direction_words is None else direction_words
    words = []
    for w in label.lower().split():
        w = "".join(ch for ch in w if not ch.isdigit()).strip()
        if not w or w in directions:
            continue
        words.append(singularize(w))
    if not words:
        return None
    refined = " ".join(words)
    return None if refined in stop_list else refined


@dataclass
class MiningConfig:
    pair_budget: int = 50
    crop_attempts_per_image: int = 8
    seed: int = 0
    top_common_labels: int = 20
    ransac_iters: int = 500
    inlier_threshold: float = 2e-3


def mine_scene(
    manifest: SceneManifest,
    pseudolabels: list,
    matcher: MatchBackend,
    seg: SegBackend,
    sim: SimBackend,
    config: MiningConfig | None = None,
) -> MiningReport:
    """Run zoom-pair and crop mining over a scene.

    Iteration order is sorted by image id and all per-pair randomness is
    keyed by (seed, id1, id2), so output is independent of traversal or
    worker scheduling.
    """
    from .distill import common_labels

    cfg = config or MiningConfig()
    report = MiningReport()
    building = manifest.facade_prompt()

    label_by_id = {}
    for pl in pseudolabels:
        if not pl.valid:
            continue
        refined = refine_label(pl.cleaned)
        if refined is not None:
            label_by_id[pl.image_id] = refined
    vocab = common_labels(pseudolabels, cfg.top_common_labels)
    refined_vocab = []
    for term in vocab:
        r = refine_label(term)
        if r is not None and r not in refined_vocab:
            refined_vocab.append(r)

    records = sorted(manifest.images, key=lambda r: r.id)
    candidates = [r for r in records if r.id in label_by_id][: cfg.pair_budget]
    for rec1 in candidates:
        label = label_by_id[rec1.id]
        for rec2 in records:
            if rec2.id == rec1.id:
                continue
            match = robust_match(
                rec1,
                rec2,
                matcher,
                seed=cfg.seed,
                ransac_iters=cfg.ransac_iters,
                inlier_threshold=cfg.inlier_threshold,
            )
            if match is None:
                report.reject_counters["no_match"] += 1
                continue
            sample = accept_zoom_pair(
                rec1, rec2, label, match, seg, sim, building, report.reject_counters
            )
            if sample is not None:
                report.zoom_pairs.append(sample)

    for rec in records:
        label = label_by_id.get(rec.id)
        if label is None:
            continue
        rng = _pair_rng(cfg.seed, rec.id, "crops")
        for _ in range(cfg.crop_attempts_per_image):
            crop = mine_crop_sample(
                rec, label, seg, sim, rng, refined_vocab, report.reject_counters
            )
            if crop is not None:
                report.crops.append(crop)

    return report


def write_mining_report(report: MiningReport, root) -> dict:
    """Write mined/zoom_pairs.jsonl, mined/crops.jsonl and target maps."""
    root = Path(root)
    mined = root / "mined"
    targets = mined / "targets"
    targets.mkdir(parents=True, exist_ok=True)

    zoom_lines = []
    for k, zp in enumerate(report.zoom_pairs):
        target_ref = f"targets/zoom_{k:05d}.png"
        valid_ref = f"targets/zoom_{k:05d}_valid.png"
        write_probmap(zp.target, mined / target_ref)
        write_probmap(ProbMap(zp.valid.bits.astype(np.float32)), mined / valid_ref)
        zoom_lines.append(
            json.dumps(
                {
                    "zoomed_in_id": zp.zoomed_in_id,
                    "zoomed_out_id": zp.zoomed_out_id,
                    "label": zp.label,
                    "quad": [[float(x), float(y)] for x, y in zp.quad],
                    "target": target_ref,
                    "valid": valid_ref,
                },
                sort_keys=True,
            )
        )
    crop_lines = []
    for k, cs in enumerate(report.crops):
        target_ref = f"targets/crop_{k:05d}.png"
        write_probmap(cs.target, mined / target_ref)
        r = cs.crop_rect
        crop_lines.append(
            json.dumps(
                {
                    "image_id": cs.image_id,
                    "label": cs.label,
                    "rect": [r.x0, r.y0, r.x1, r.y1],
                    "target": target_ref,
                },
                sort_keys=True,
            )
        )
    (mined / "zoom_pairs.jsonl").write_text("\n".join(zoom_lines) + ("\n" if zoom_lines else ""))
    (mined / "crops.jsonl").write_text("\n".join(crop_lines) + ("\n" if crop_lines else ""))
    counters_path = mined / "counters.json"
    counters_path.write_text(json.dumps(dict(report.reject_counters), sort_keys=True) + "\n")
    return {
        "zoom_pairs": str(mined / "zoom_pairs.jsonl"),
        "crops": str(mined / "crops.jsonl"),
        "counters": str(counters_path),
    }
