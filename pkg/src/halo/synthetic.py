"""Synthetic landmark scenes with analytic ground truth.

The stand-in landmark is a textured planar facade at z = 0 (world y points
down, cameras sit at negative z looking forward). Colored rectangles on the
facade play the role of architectural features, a ring of distant cameras
plays the tourist crowd, and per-feature close-up cameras play the zoomed-in
photos. Because the geometry is a single plane, every view pair is linked by
an exactly computable homography and every ground-truth mask is analytic,
which is what the geometry and propagation tests lean on.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .core_data import (
    CameraModel,
    ImageMetadata,
    ImageRecord,
    SceneManifest,
    save_scene,
)

BACKGROUND = np.array([0.0, 0.0, 0.0])
FACADE_BASE = np.array([0.82, 0.78, 0.70])
CHECKER_AMPLITUDE = 0.04
CHECKER_CELL = 0.125

CATEGORY_COLORS = {
    "window": (0.15, 0.30, 0.85),
    "portal": (0.55, 0.30, 0.12),
    "dome": (0.85, 0.70, 0.20),
}

# Plane rectangles (x0, y0, x1, y1) in facade coordinates; x right, y down.
DEFAULT_CATEGORIES = {
    "window": (-0.80, -0.50, -0.30, -0.05),
    "portal": (-0.25, 0.15, 0.25, 0.72),
    "dome": (0.35, -0.65, 0.85, -0.20),
}


@dataclass
class SyntheticSceneSpec:
    landmark_name: str = "Toy Basilica"
    building_kind: str = "cathedral"
    image_width: int = 96
    image_height: int = 72
    n_ring_views: int = 20
    closeups_per_category: int = 2
    illumination_jitter: float = 0.05
    seg_noise: float = 0.2
    seed: int = 0
    categories: dict = field(default_factory=lambda: dict(DEFAULT_CATEGORIES))
    facade_half_width: float = 1.0
    facade_half_height: float = 0.75
    ring_distance: float = 2.5
    split: str = "train"

    def to_dict(self) -> dict:
        d = dict(self.__dict__)
        d["categories"] = {k: list(v) for k, v in self.categories.items()}
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticSceneSpec":
        d = dict(d)
        d["categories"] = {k: tuple(v) for k, v in d.get("categories", {}).items()}
        return cls(**d)


def look_at_camera(
    center, target, width: int, height: int, focal_px: float
) -> CameraModel:
    """Pinhole camera at ``center`` aimed at ``target``; x right, y down,
    z forward; principal point at the image center."""
    center = np.asarray(center, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    fwd = target - center
    fwd = fwd / np.linalg.norm(fwd)
    down = np.array([0.0, 1.0, 0.0])
    right = np.cross(down, fwd)
    nr = np.linalg.norm(right)
    if nr < 1e-9:
        right = np.array([1.0, 0.0, 0.0])
    else:
        right = right / nr
    dcam = np.cross(fwd, right)
    R = np.column_stack([right, dcam, fwd])
    K = np.array(
        [[focal_px, 0.0, width / 2.0], [0.0, focal_px, height / 2.0], [0.0, 0.0, 1.0]]
    )
    pose = np.column_stack([R, center])
    return CameraModel.from_arrays(K, pose)


def _plane_hits(camera: CameraModel, width: int, height: int) -> tuple:
    """Intersect all pixel rays with the z=0 plane.

    Returns (hx, hy, valid) arrays of shape (height, width): facade-plane
    coordinates of each pixel's hit and whether the ray hits in front."""
    K = camera.k
    R = camera.rotation
    C = camera.center
    xs = (np.arange(width) + 0.5 - K[0, 2]) / K[0, 0]
    ys = (np.arange(height) + 0.5 - K[1, 2]) / K[1, 1]
    gx, gy = np.meshgrid(xs, ys)
    dirs = np.stack([gx, gy, np.ones_like(gx)], axis=-1) @ R.T
    dz = dirs[..., 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        t = -C[2] / dz
    valid = (dz > 1e-9) & (t > 0)
    hx = C[0] + t * dirs[..., 0]
    hy = C[1] + t * dirs[..., 1]
    return hx, hy, valid


def facade_texture(hx: np.ndarray, hy: np.ndarray, spec: SyntheticSceneSpec) -> np.ndarray:
    """RGB texture of the facade at plane coordinates (vectorized)."""
    checker = ((np.floor(hx / CHECKER_CELL) + np.floor(hy / CHECKER_CELL)) % 2) * 2 - 1
    rgb = FACADE_BASE[None, None, :] + (checker * CHECKER_AMPLITUDE)[..., None]
    for name, rect in spec.categories.items():
        x0, y0, x1, y1 = rect
        inside = (hx >= x0) & (hx < x1) & (hy >= y0) & (hy < y1)
        rgb = np.where(
            inside[..., None], np.asarray(CATEGORY_COLORS[name])[None, None, :], rgb
        )
    return rgb


def render_synthetic_view(
    camera: CameraModel, spec: SyntheticSceneSpec, illumination: float = 1.0
) -> np.ndarray:
    hx, hy, valid = _plane_hits(camera, spec.image_width, spec.image_height)
    on_facade = (
        valid
        & (np.abs(hx) <= spec.facade_half_width)
        & (np.abs(hy) <= spec.facade_half_height)
    )
    rgb = facade_texture(hx, hy, spec) * illumination
    rgb = np.where(on_facade[..., None], rgb, BACKGROUND[None, None, :])
    return np.clip(rgb, 0.0, 1.0)


def gt_mask(camera: CameraModel, spec: SyntheticSceneSpec, category: str) -> np.ndarray:
    """Analytic 0/1 ground-truth mask for a category (or "facade")."""
    hx, hy, valid = _plane_hits(camera, spec.image_width, spec.image_height)
    on_facade = (
        valid
        & (np.abs(hx) <= spec.facade_half_width)
        & (np.abs(hy) <= spec.facade_half_height)
    )
    if category == "facade":
        return on_facade
    x0, y0, x1, y1 = spec.categories[category]
    return on_facade & (hx >= x0) & (hx < x1) & (hy >= y0) & (hy < y1)


def _ring_cameras(spec: SyntheticSceneSpec, rng: np.random.Generator) -> list:
    cams = []
    focal = 1.05 * spec.image_width
    for i in range(spec.n_ring_views):
        frac = i / max(1, spec.n_ring_views - 1)
        angle = np.deg2rad(-40.0 + 80.0 * frac)
        dist = spec.ring_distance * (1.0 + 0.1 * rng.uniform(-1, 1))
        center = (
            np.sin(angle) * dist,
            0.25 * rng.uniform(-1, 1),
            -np.cos(angle) * dist,
        )
        cams.append(
            look_at_camera(
                center, (0.0, 0.0, 0.0), spec.image_width, spec.image_height, focal
            )
        )
    return cams


def _closeup_camera(
    spec: SyntheticSceneSpec, category: str, k: int, rng: np.random.Generator
) -> CameraModel:
    x0, y0, x1, y1 = spec.categories[category]
    cx, cy = (x0 + x1) / 2.0, (y0 + y1) / 2.0
    extent = max((x1 - x0) / 2.0, (y1 - y0) / 2.0)
    dist = 2.6 * extent * (1.0 + 0.15 * rng.uniform(-1, 1))
    center = (
        cx + 0.3 * extent * rng.uniform(-1, 1),
        cy + 0.3 * extent * rng.uniform(-1, 1),
        -dist,
    )
    return look_at_camera(
        center, (cx, cy, 0.0), spec.image_width, spec.image_height,
        1.05 * spec.image_width,
    )


def _direction_word(camera: CameraModel) -> str:
    return "west" if camera.center[0] < 0 else "east"


def make_synthetic_scene(spec: SyntheticSceneSpec, out_root) -> SceneManifest:
    """Write a complete scene directory: images, manifest with poses,
    analytic GT masks for every category (plus "facade"), and metadata
    captions that embed the category names behind direction words."""
    root = Path(out_root)
    if root.exists() and any(root.iterdir()):
        raise FileExistsError(f"{root} exists and is not empty")
    (root / "images").mkdir(parents=True, exist_ok=True)

    rng = np.random.default_rng(spec.seed)
    views = []  # (id, camera, caption)
    for i, cam in enumerate(_ring_cameras(spec, rng)):
        views.append(
            (
                f"ring_{i:02d}.png",
                cam,
                f"General view of the {spec.landmark_name} from the plaza",
            )
        )
    for category in sorted(spec.categories):
        for k in range(spec.closeups_per_category):
            cam = _closeup_camera(spec, category, k, rng)
            caption = (
                f"The {_direction_word(cam)} {category} of the {spec.landmark_name}"
            )
            views.append((f"closeup_{category}_{k:02d}.png", cam, caption))

    records = []
    for image_id, cam, caption in views:
        illum = 1.0 + spec.illumination_jitter * rng.uniform(-1, 1)
        rgb = render_synthetic_view(cam, spec, illum)
        img = Image.fromarray(np.round(rgb * 255.0).astype(np.uint8), mode="RGB")
        img.save(root / "images" / image_id)

        for category in sorted(spec.categories) + ["facade"]:
            mask = gt_mask(cam, spec, category)
            out = root / "gt" / category / f"{image_id}.png"
            out.parent.mkdir(parents=True, exist_ok=True)
            Image.fromarray((mask * 255).astype(np.uint8), mode="L").save(out)

        records.append(
            ImageRecord(
                id=image_id,
                width=spec.image_width,
                height=spec.image_height,
                pixel_ref=str(root / "images" / image_id),
                metadata=ImageMetadata(
                    filename=image_id,
                    caption=caption,
                    wiki_categories=(spec.landmark_name,),
                ),
                camera=cam,
            )
        )

    manifest = SceneManifest(
        landmark_name=spec.landmark_name,
        building_kind=spec.building_kind,
        images=records,
        split=spec.split,
    )
    save_scene(manifest, root)
    (root / "scene_spec.json").write_text(
        json.dumps(spec.to_dict(), sort_keys=True, indent=2) + "\n"
    )
    return manifest


def scene_color_segmenter(spec: SyntheticSceneSpec, **kwargs):
    """Color-threshold segmenter wired to this scene's planted palette."""
    from .backends import ColorSegmenter

    return ColorSegmenter(
        {k: CATEGORY_COLORS[k] for k in spec.categories},
        building_prompts=(spec.building_kind, "facade"),
        **kwargs,
    )
