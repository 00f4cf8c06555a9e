"""Deterministic backend implementations.

Every heavyweight pretrained model sits behind a small contract (text
generation, segmentation, similarity, matching, retrieval embedding), and
this module supplies deterministic stand-ins for each: ground-truth-reading
oracles, fixed lookup tables, color-threshold segmenters that also work on
re-rendered pixels, an exact-homography matcher for synthetic scenes, and
tiny trainable torch models. Tests and the synthetic pipeline run entirely
on these; wrapping real models is a deployment concern, not a code change.
"""

from __future__ import annotations

import hashlib
import subprocess
from functools import lru_cache
from pathlib import Path

import numpy as np
import torch

from .core_data import (
    ImageRecord,
    ProbMap,
    Rect,
    SceneManifest,
    load_image,
    read_probmap,
)
from .mining import apply_homography, singularize
from .vlm_adapt import RetrievalEncoder, SegModel

ARCH_TERMS = (
    "window",
    "portal",
    "dome",
    "tower",
    "facade",
    "archway",
    "arch",
    "spire",
    "minaret",
    "view",
)


def _hash_rng(*parts) -> np.random.Generator:
    digest = hashlib.sha256("|".join(str(p) for p in parts).encode()).digest()
    return np.random.default_rng(
        np.random.SeedSequence(int.from_bytes(digest[:8], "big"))
    )


def _hash_unit_vector(text: str, dim: int) -> np.ndarray:
    v = _hash_rng("text-embed", text).normal(size=dim)
    return v / np.linalg.norm(v)


class MockTextGen:
    """Rule-based generator: quotes the first known term found in the
    prompt's description line, keeping an immediately preceding direction
    word so the cleanup rules have work to do; otherwise "unknown"."""

    def __init__(self, vocab=ARCH_TERMS, seed: int = 0):
        self.vocab = tuple(vocab)
        self.beam_width = 4
        self.seed = seed

    def generate(self, prompt: str) -> str:
        description = prompt.split("\n", 1)[1] if "\n" in prompt else ""
        words = description.replace(";", " ").replace(",", " ").split()
        lowered = [w.lower().strip(".!?") for w in words]
        for i, w in enumerate(lowered):
            if singularize(w) in self.vocab:
                from .distill import DIRECTION_WORDS

                if i > 0 and lowered[i - 1] in DIRECTION_WORDS:
                    return f"{words[i - 1]} {words[i]}".strip(".!?")
                return words[i].strip(".!?")
        return "unknown"


class TableTextGen:
    """Fixed prompt-substring lookup; first matching key in sorted order."""

    def __init__(self, table: dict, default: str = "unknown"):
        self.table = dict(table)
        self.default = default
        self.beam_width = 4

    def generate(self, prompt: str) -> str:
        for key in sorted(self.table):
            if key in prompt:
                return self.table[key]
        return self.default


class CmdTextGen:
    """Adapter for an external generator: prompt on stdin, answer on stdout."""

    def __init__(self, command: str, seed: int = 0):
        self.command = command
        self.seed = seed
        self.beam_width = 4

    def generate(self, prompt: str) -> str:
        proc = subprocess.run(
            [self.command, "--seed", str(self.seed)],
            input=prompt.encode(),
            capture_output=True,
            check=True,
        )
        return proc.stdout.decode().strip()


def _normalize_prompt(text: str) -> str:
    return " ".join(singularize(w) for w in text.lower().split())


class GtSegmenter:
    """Oracle segmenter that reads the scene's ground-truth masks.

    The building prompt maps to the "facade" category; other prompts map to
    the category of the same (singularized) name. Unknown prompts give an
    all-zero map.
    """

    def __init__(self, scene_root, manifest: SceneManifest):
        self.root = Path(scene_root)
        self.building_prompt = _normalize_prompt(manifest.facade_prompt())

    def _category(self, text: str) -> str:
        norm = _normalize_prompt(text)
        return "facade" if norm == self.building_prompt else norm

    @lru_cache(maxsize=256)
    def _load(self, category: str, image_id: str) -> np.ndarray | None:
        path = self.root / "gt" / category / f"{image_id}.png"
        if not path.is_file():
            return None
        return read_probmap(path).values

    def segment(self, rec: ImageRecord, text: str, rect: Rect | None = None) -> ProbMap:
        vals = self._load(self._category(text), rec.id)
        if vals is None:
            vals = np.zeros((rec.height, rec.width), dtype=np.float32)
        if rect is not None:
            vals = vals[rect.y0 : rect.y1, rect.x0 : rect.x1]
        return ProbMap(vals)


class NoisySegmenter:
    """Salt-and-pepper corruption of a base segmenter: a fixed fraction of
    pixels is replaced by random 0/1 values, deterministically per
    (seed, image, prompt)."""

    def __init__(self, base, noise: float = 0.2, seed: int = 0):
        if not 0.0 <= noise <= 1.0:
            raise ValueError("noise fraction must be in [0, 1]")
        self.base = base
        self.noise = noise
        self.seed = seed

    def segment(self, rec: ImageRecord, text: str, rect: Rect | None = None) -> ProbMap:
        clean = self.base.segment(rec, text, rect)
        vals = clean.values.copy()
        rng = _hash_rng("salt-pepper", self.seed, rec.id, text)
        mask = rng.random(vals.shape) < self.noise
        vals[mask] = (rng.random(int(mask.sum())) < 0.5).astype(np.float32)
        return ProbMap(vals)


class TableSegmenter:
    """Fixed (image_id, prompt) -> map lookup with a constant default."""

    def __init__(self, table: dict, default: float = 0.0, shape: tuple = (64, 64)):
        self.table = {k: np.asarray(v, dtype=np.float32) for k, v in table.items()}
        self.default = default
        self.shape = shape

    def segment(self, rec: ImageRecord, text: str, rect: Rect | None = None) -> ProbMap:
        vals = self.table.get((rec.id, text))
        if vals is None:
            vals = np.full(self.shape, self.default, dtype=np.float32)
        if rect is not None:
            vals = vals[rect.y0 : rect.y1, rect.x0 : rect.x1]
        return ProbMap(vals)


class TableSim:
    """Fixed similarity lookup: tries (id, text, rect), then (id, text),
    then the default. Rects are keyed as (x0, y0, x1, y1) tuples."""

    def __init__(self, table: dict, default: float = 0.0):
        self.table = dict(table)
        self.default = default

    def sim(self, rec: ImageRecord, text: str, rect: Rect | None = None) -> float:
        if rect is not None:
            key = (rec.id, text, (rect.x0, rect.y0, rect.x1, rect.y1))
            if key in self.table:
                return float(self.table[key])
        return float(self.table.get((rec.id, text), self.default))


class GtSim:
    """Similarity oracle, linear in the prompt's ground-truth coverage of
    the queried region. Strictly monotone in coverage, so a crop that
    concentrates on the concept always outscores the whole image."""

    def __init__(self, segmenter: GtSegmenter, base: float = 0.1, span: float = 0.4):
        self.segmenter = segmenter
        self.base = base
        self.span = span

    def sim(self, rec: ImageRecord, text: str, rect: Rect | None = None) -> float:
        vals = self.segmenter.segment(rec, text, rect).values
        coverage = float(vals.mean()) if vals.size else 0.0
        return self.base + self.span * coverage


class ColorSegmenter:
    """Color-threshold segmenter that works on raw pixels, so it can score
    the field's re-renders as well as dataset images.

    Category prompts match their planted texture color within a tolerance;
    building prompts match any non-background (non-dark) pixel.
    """

    def __init__(
        self,
        category_colors: dict,
        building_prompts: tuple = (),
        tol: float = 0.18,
        dark_threshold: float = 0.08,
    ):
        self.category_colors = {
            _normalize_prompt(k): np.asarray(v, dtype=np.float32)
            for k, v in category_colors.items()
        }
        self.building_prompts = {_normalize_prompt(p) for p in building_prompts}
        self.tol = tol
        self.dark_threshold = dark_threshold

    def segment_pixels(self, pixels: np.ndarray, text: str) -> ProbMap:
        norm = _normalize_prompt(text)
        lum = pixels.mean(axis=2)
        if norm in self.building_prompts or norm == "facade":
            vals = (lum > self.dark_threshold).astype(np.float32)
        elif norm in self.category_colors:
            dist = np.linalg.norm(
                pixels - self.category_colors[norm][None, None, :], axis=2
            )
            vals = np.clip(1.0 - dist / self.tol, 0.0, 1.0).astype(np.float32)
            vals[lum <= self.dark_threshold] = 0.0
        else:
            vals = np.zeros(lum.shape, dtype=np.float32)
        return ProbMap(vals)

    def segment(self, rec: ImageRecord, text: str, rect: Rect | None = None) -> ProbMap:
        pixels = _cached_pixels(rec.pixel_ref)
        if rect is not None:
            pixels = pixels[rect.y0 : rect.y1, rect.x0 : rect.x1]
        return self.segment_pixels(pixels, text)


@lru_cache(maxsize=256)
def _cached_pixels(pixel_ref: str) -> np.ndarray:
    return load_image(pixel_ref)


def plane_to_image_matrix(rec: ImageRecord) -> np.ndarray:
    """Exact plane-to-image homography for a camera viewing the z=0 plane,
    in relative image coordinates: (u, v) on the plane -> (x, y) in [0,1]^2."""
    cam = rec.camera
    K = cam.k
    R = cam.rotation
    C = cam.center
    Rt = R.T
    M = K @ np.column_stack([Rt[:, 0], Rt[:, 1], -Rt @ C])
    S = np.diag([1.0 / rec.width, 1.0 / rec.height, 1.0])
    return S @ M


def true_pair_homography(rec1: ImageRecord, rec2: ImageRecord) -> np.ndarray:
    """Exact image-1 -> image-2 homography through the shared z=0 plane."""
    M1 = plane_to_image_matrix(rec1)
    M2 = plane_to_image_matrix(rec2)
    H = M2 @ np.linalg.inv(M1)
    return H / H[2, 2]


class SyntheticMatcher:
    """Exact correspondences for planar synthetic scenes.

    Keypoints are sampled in the first image, mapped through the true pair
    homography, and kept when they land inside both frames; optional outlier
    pairs are appended. Pairs with too little shared coverage yield too few
    points and are rejected downstream.
    """

    def __init__(
        self,
        n_points: int = 150,
        n_outliers: int = 0,
        seed: int = 0,
        per_pair_points: dict | None = None,
    ):
        self.n_points = n_points
        self.n_outliers = n_outliers
        self.seed = seed
        self.per_pair_points = per_pair_points or {}

    def putative_matches(self, rec1: ImageRecord, rec2: ImageRecord) -> np.ndarray:
        if rec1.camera is None or rec2.camera is None:
            return np.zeros((0, 4))
        H = true_pair_homography(rec1, rec2)
        rng = _hash_rng("matcher", self.seed, rec1.id, rec2.id)
        want = self.per_pair_points.get((rec1.id, rec2.id), self.n_points)
        pts1 = rng.uniform(0.02, 0.98, size=(want * 4, 2))
        pts2 = apply_homography(H, pts1)
        keep = (
            (pts2[:, 0] >= 0.0)
            & (pts2[:, 0] <= 1.0)
            & (pts2[:, 1] >= 0.0)
            & (pts2[:, 1] <= 1.0)
        )
        pairs = np.hstack([pts1[keep], pts2[keep]])[:want]
        if self.n_outliers:
            junk = rng.uniform(0.0, 1.0, size=(self.n_outliers, 4))
            pairs = np.vstack([pairs, junk]) if len(pairs) else junk
        return pairs


class MockSegModel(SegModel):
    """Tiny segmenter: a per-pixel affine decoder over fixed features.

    Features per pixel are [1, r, g, b, tr, tg, tb, rgb.t] where t is the
    (frozen) encoded text color; the decoder is a single linear map through
    a sigmoid. Small enough for finite-difference gradient checks, yet
    text-conditioned and trainable like the real thing.
    """

    def __init__(self, seed: int = 0, constant: float | None = None):
        super().__init__()
        gen = torch.Generator().manual_seed(seed)
        self._text_encoder = torch.nn.Linear(3, 3)
        with torch.no_grad():
            self._text_encoder.weight.copy_(
                torch.eye(3) + 0.01 * torch.randn(3, 3, generator=gen)
            )
            self._text_encoder.bias.zero_()
        for p in self._text_encoder.parameters():
            p.requires_grad_(False)
        self._decoder = torch.nn.Linear(8, 1)
        with torch.no_grad():
            self._decoder.weight.copy_(0.1 * torch.randn(1, 8, generator=gen))
            self._decoder.bias.zero_()
        self.constant = constant

    @property
    def encoders(self) -> torch.nn.Module:
        return self._text_encoder

    @property
    def decoder(self) -> torch.nn.Module:
        return self._decoder

    def _text_vector(self, text: str) -> torch.Tensor:
        raw = torch.tensor(
            _hash_rng("segmodel-text", text).random(3), dtype=torch.float32
        )
        return self._text_encoder(raw.to(self._text_encoder.weight.dtype))

    def forward(self, image: torch.Tensor, text: str) -> torch.Tensor:
        if self.constant is not None:
            h, w = image.shape[1], image.shape[2]
            return torch.full((h, w), self.constant, dtype=image.dtype)
        dtype = self._decoder.weight.dtype
        img = image.to(dtype)
        t = self._text_vector(text)
        _, h, w = img.shape
        rgb = img.permute(1, 2, 0)
        feats = torch.cat(
            [
                torch.ones(h, w, 1, dtype=dtype),
                rgb,
                t.expand(h, w, 3),
                (rgb * t).sum(dim=-1, keepdim=True),
            ],
            dim=-1,
        )
        return torch.sigmoid(self._decoder(feats).squeeze(-1))


class TinyRetrievalEncoder(RetrievalEncoder):
    """Small trainable embedder: average-pooled image patches through one
    linear map, hashed text vectors through another, both L2-normalized."""

    POOL = 4

    def __init__(self, dim: int = 16, text_dim: int = 32, seed: int = 0):
        super().__init__()
        torch.manual_seed(seed)
        self.image_proj = torch.nn.Linear(3 * self.POOL * self.POOL, dim)
        self.text_proj = torch.nn.Linear(text_dim, dim)
        self.text_dim = text_dim

    def _pool(self, image: np.ndarray) -> torch.Tensor:
        t = torch.from_numpy(np.ascontiguousarray(image, np.float32)).permute(2, 0, 1)
        pooled = torch.nn.functional.adaptive_avg_pool2d(t[None], self.POOL)[0]
        return pooled.reshape(-1)

    def embed_image(self, image: np.ndarray) -> torch.Tensor:
        v = self.image_proj(self._pool(image))
        return v / v.norm().clamp_min(1e-12)

    def embed_text(self, text: str) -> torch.Tensor:
        raw = torch.tensor(_hash_unit_vector(text, self.text_dim), dtype=torch.float32)
        v = self.text_proj(raw)
        return v / v.norm().clamp_min(1e-12)


class SegModelBackend:
    """Adapts a 352x352 SegModel to the mining contract via tiled inference."""

    def __init__(self, model: SegModel):
        self.model = model

    def segment(self, rec: ImageRecord, text: str, rect: Rect | None = None) -> ProbMap:
        from .vlm_adapt import tiled_segment

        pixels = _cached_pixels(rec.pixel_ref)
        if rect is not None:
            pixels = pixels[rect.y0 : rect.y1, rect.x0 : rect.x1]
        return tiled_segment(pixels, text, self.model)


def make_text_backend(name: str, seed: int = 0):
    """CLI backend selector: "mock" or "cmd:<path>"."""
    if name == "mock":
        return MockTextGen(seed=seed)
    if name.startswith("cmd:"):
        return CmdTextGen(name[4:], seed=seed)
    raise ValueError(f"unknown text backend {name!r} (use mock or cmd:<path>)")
