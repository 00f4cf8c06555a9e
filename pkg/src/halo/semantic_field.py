"""Volumetric scene model with a per-prompt semantic head.

A compact radiance field (density + appearance-conditioned color, one
learned appearance embedding per training image) is fit to the posed photo
collection. It is then frozen, and for each text prompt a small MLP head is
trained on top of the field's features to predict, per 3D sample, the
probability that the sample belongs to the queried concept. Rendering the
head along camera rays with the field's own transmittance weights yields
view-consistent 2D probability maps, which denoise the per-view 2D inputs
by fusing them in 3D.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, replace

import numpy as np
import torch
from scipy import ndimage

from .core_data import (
    BinaryMask,
    CameraModel,
    ImageRecord,
    ProbMap,
    binarize,
)

log = logging.getLogger(__name__)

CE_EPS = 1e-7
FIELD_TARGET_THRESHOLD = 0.2
COVERAGE_LOW = 0.1
COVERAGE_HIGH = 0.9
DEFAULT_VIEW_COUNT = 150


@dataclass
class FieldConfig:
    """Radiance-field and semantic-head hyperparameters.

    Defaults are the full-scale settings; :func:`desk_config` shrinks them
    to something a commodity CPU finishes in minutes.
    """

    pos_bands: int = 10
    dir_bands: int = 4
    trunk_width: int = 256
    trunk_depth: int = 8
    app_dim: int = 8
    samples_per_ray: int = 64
    near: float = 0.5
    far: float = 6.0
    rgb_lr: float = 5e-4
    rgb_iters: int = 250_000
    ray_batch: int = 8192
    head_lr: float = 5e-5
    head_iters: int = 12_500
    seed: int = 0

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def desk_config(**overrides) -> FieldConfig:
    """Small preset: same algorithm, sized for single-CPU test runs."""
    cfg = FieldConfig(
        trunk_width=64,
        trunk_depth=3,
        samples_per_ray=24,
        rgb_iters=2000,
        ray_batch=512,
        head_iters=500,
    )
    return replace(cfg, **overrides)


@dataclass
class RayBatch:
    origins: torch.Tensor  # (B, 3)
    directions: torch.Tensor  # (B, 3), unit norm
    near: float
    far: float
    image_index: torch.Tensor | None = None  # (B,) long, appearance lookup

    def __post_init__(self):
        norms = self.directions.norm(dim=-1)
        if not bool(torch.all((norms - 1.0).abs() < 1e-6)):
            raise ValueError("ray directions must be unit norm")
        if not self.near < self.far:
            raise ValueError("near must be < far")

    def __len__(self) -> int:
        return self.origins.shape[0]


@dataclass
class ViewScore:
    image_id: str
    m: float  # margin of the largest component from the image border
    c: float  # overlap of the re-rendered component with the image's
    x: int  # 1 when facade coverage is extreme (<10% or >90%)

    @property
    def s(self) -> float:
        return self.m + self.c - self.x


def positional_encoding(x: torch.Tensor, bands: int) -> torch.Tensor:
    """[x, sin(2^k x), cos(2^k x)] for k < bands, concatenated."""
    outs = [x]
    for k in range(bands):
        freq = 2.0**k
        outs.append(torch.sin(freq * x))
        outs.append(torch.cos(freq * x))
    return torch.cat(outs, dim=-1)


def _enc_dim(bands: int) -> int:
    return 3 * (1 + 2 * bands)


class RadianceBackbone(torch.nn.Module):
    """Density + appearance-conditioned color field.

    Color depends on position features, encoded view direction, and a
    per-image appearance embedding, so photos with differing illumination
    can be reconstructed jointly. The trunk's final hidden feature is the
    shared representation the semantic head consumes.
    """

    def __init__(self, num_images: int, config: FieldConfig):
        super().__init__()
        self.config = config
        w = config.trunk_width
        layers = [torch.nn.Linear(_enc_dim(config.pos_bands), w), torch.nn.ReLU()]
        for _ in range(config.trunk_depth - 1):
            layers += [torch.nn.Linear(w, w), torch.nn.ReLU()]
        self.trunk = torch.nn.Sequential(*layers)
        self.sigma_out = torch.nn.Linear(w, 1)
        self.color_net = torch.nn.Sequential(
            torch.nn.Linear(w + _enc_dim(config.dir_bands) + config.app_dim, w // 2),
            torch.nn.ReLU(),
            torch.nn.Linear(w // 2, 3),
        )
        self.appearance = torch.nn.Embedding(num_images, config.app_dim)
        torch.nn.init.normal_(self.appearance.weight, std=0.01)

    @property
    def feature_dim(self) -> int:
        return self.config.trunk_width

    def features_and_density(self, pts: torch.Tensor) -> tuple:
        feat = self.trunk(positional_encoding(pts, self.config.pos_bands))
        sigma = torch.nn.functional.softplus(self.sigma_out(feat).squeeze(-1) - 1.0)
        return feat, sigma

    def colors(self, feat: torch.Tensor, dirs: torch.Tensor, app: torch.Tensor) -> torch.Tensor:
        d = positional_encoding(dirs, self.config.dir_bands)
        return torch.sigmoid(self.color_net(torch.cat([feat, d, app], dim=-1)))


class SemanticHead(torch.nn.Module):
    """Three hidden layers (256, 256, 128) with rectifier activations and a
    2-logit softmax output; the positive-class probability is the field's
    per-sample concept probability."""

    HIDDEN = (256, 256, 128)

    def __init__(self, feature_dim: int):
        super().__init__()
        dims = (feature_dim,) + self.HIDDEN
        layers = []
        for din, dout in zip(dims[:-1], dims[1:]):
            layers += [torch.nn.Linear(din, dout), torch.nn.ReLU()]
        layers.append(torch.nn.Linear(dims[-1], 2))
        self.net = torch.nn.Sequential(*layers)
        self.feature_dim = feature_dim

    def forward(self, feat: torch.Tensor) -> torch.Tensor:
        """Positive-class probability per sample (softmax over 2 logits)."""
        return torch.softmax(self.net(feat), dim=-1)[..., 1]

    def probability_pair(self, feat: torch.Tensor) -> torch.Tensor:
        return torch.softmax(self.net(feat), dim=-1)


def sample_along_rays(
    rays: RayBatch, n_samples: int, jitter: torch.Generator | None = None
) -> torch.Tensor:
    """Sample distances per ray: stratified when a generator is given,
    bin midpoints otherwise."""
    b = len(rays)
    edges = torch.linspace(0.0, 1.0, n_samples + 1)
    if jitter is not None:
        u = torch.rand((b, n_samples), generator=jitter)
    else:
        u = torch.full((b, n_samples), 0.5)
    frac = edges[:-1] + u * (edges[1:] - edges[:-1])
    return rays.near + frac * (rays.far - rays.near)


def volume_weights(sigma: torch.Tensor, tvals: torch.Tensor) -> torch.Tensor:
    """Transmittance-based sample weights; sums to <= 1 per ray."""
    deltas = tvals[..., 1:] - tvals[..., :-1]
    deltas = torch.cat([deltas, torch.full_like(deltas[..., :1], 1e10)], dim=-1)
    alpha = 1.0 - torch.exp(-sigma * deltas)
    trans = torch.cumprod(1.0 - alpha + 1e-10, dim=-1)
    trans = torch.cat([torch.ones_like(trans[..., :1]), trans[..., :-1]], dim=-1)
    return alpha * trans


def render_rays(
    backbone: RadianceBackbone,
    rays: RayBatch,
    head: SemanticHead | None = None,
    appearance: torch.Tensor | None = None,
    jitter: torch.Generator | None = None,
    detach_field: bool = False,
) -> dict:
    """Volume-render a ray batch.

    Returns rgb (B,3), acc (B,), and semantic (B,) when a head is given:
    S(r) = sum_i w_i s_i, which stays in [0, 1] because weights sum to at
    most 1 and empty space contributes 0.
    """
    cfg = backbone.config
    tvals = sample_along_rays(rays, cfg.samples_per_ray, jitter)
    pts = rays.origins[:, None, :] + rays.directions[:, None, :] * tvals[..., None]
    flat = pts.reshape(-1, 3)
    feat, sigma = backbone.features_and_density(flat)
    if detach_field:
        feat = feat.detach()
        sigma = sigma.detach()
    sigma = sigma.reshape(tvals.shape)
    weights = volume_weights(sigma, tvals)

    if appearance is None:
        if rays.image_index is None:
            app = torch.zeros(len(rays), cfg.app_dim)
        else:
            app = backbone.appearance(rays.image_index)
    else:
        app = appearance.expand(len(rays), cfg.app_dim)
    app_flat = app[:, None, :].expand(-1, cfg.samples_per_ray, -1).reshape(-1, cfg.app_dim)
    dirs_flat = (
        rays.directions[:, None, :].expand(-1, cfg.samples_per_ray, -1).reshape(-1, 3)
    )
    rgb = backbone.colors(feat, dirs_flat, app_flat).reshape(len(rays), -1, 3)

    out = {
        "rgb": (weights[..., None] * rgb).sum(dim=1),
        "acc": weights.sum(dim=1),
        "weights": weights,
        "tvals": tvals,
    }
    if head is not None:
        s = head(feat).reshape(tvals.shape)
        out["semantic"] = (weights.detach() if detach_field else weights).mul(s).sum(dim=1)
    return out


def camera_rays(camera: CameraModel, width: int, height: int) -> tuple:
    """Per-pixel world-space rays through pixel centers; returns
    (origins (H*W,3), directions (H*W,3)) as float32 tensors."""
    K = camera.k
    R = camera.rotation
    C = camera.center
    xs = (np.arange(width) + 0.5 - K[0, 2]) / K[0, 0]
    ys = (np.arange(height) + 0.5 - K[1, 2]) / K[1, 1]
    gx, gy = np.meshgrid(xs, ys)
    dirs_cam = np.stack([gx, gy, np.ones_like(gx)], axis=-1).reshape(-1, 3)
    dirs_world = dirs_cam @ R.T
    dirs_world /= np.linalg.norm(dirs_world, axis=-1, keepdims=True)
    origins = np.broadcast_to(C, dirs_world.shape).copy()
    return (
        torch.from_numpy(origins.astype(np.float32)),
        torch.from_numpy(dirs_world.astype(np.float32)),
    )


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    mse = float(np.mean((np.asarray(a, np.float64) - np.asarray(b, np.float64)) ** 2))
    if mse == 0:
        return float("inf")
    return -10.0 * math.log10(mse)


def _posed_records(records: list) -> list:
    return [r for r in records if r.camera is not None]


def train_rgb_field(
    records: list, images: dict, config: FieldConfig | None = None
) -> RadianceBackbone:
    """Fit the radiance field to all posed views by photometric MSE.

    ``images`` maps image_id to [H,W,3] float pixels. Appearance embeddings
    are learned jointly, one per training image, indexed by the sorted
    position of the image id.
    """
    cfg = config or FieldConfig()
    posed = sorted(_posed_records(records), key=lambda r: r.id)
    if not posed:
        raise ValueError("no posed images to train on")
    torch.manual_seed(cfg.seed)
    backbone = RadianceBackbone(len(posed), cfg)

    all_o, all_d, all_rgb, all_idx = [], [], [], []
    for idx, rec in enumerate(posed):
        o, d = camera_rays(rec.camera, rec.width, rec.height)
        all_o.append(o)
        all_d.append(d)
        all_rgb.append(
            torch.from_numpy(images[rec.id].reshape(-1, 3).astype(np.float32))
        )
        all_idx.append(torch.full((len(o),), idx, dtype=torch.long))
    origins = torch.cat(all_o)
    dirs = torch.cat(all_d)
    colors = torch.cat(all_rgb)
    index = torch.cat(all_idx)

    gen = torch.Generator().manual_seed(cfg.seed)
    opt = torch.optim.Adam(backbone.parameters(), lr=cfg.rgb_lr)
    for it in range(cfg.rgb_iters):
        pick = torch.randint(0, len(origins), (cfg.ray_batch,), generator=gen)
        rays = RayBatch(
            origins[pick], dirs[pick], cfg.near, cfg.far, image_index=index[pick]
        )
        out = render_rays(backbone, rays, jitter=gen)
        loss = torch.mean((out["rgb"] - colors[pick]) ** 2)
        if not math.isfinite(float(loss.detach())):
            raise RuntimeError("field training diverged: non-finite loss")
        opt.zero_grad()
        loss.backward()
        opt.step()
        if it % 500 == 0:
            log.info("rgb field iter %d loss %.5f", it, float(loss.detach()))
    return backbone


def appearance_for(backbone: RadianceBackbone, index: int | None) -> torch.Tensor:
    """Appearance vector for rendering: a train image's embedding, or the
    neutral zero vector when index is None."""
    if index is None:
        return torch.zeros(1, backbone.config.app_dim)
    return backbone.appearance.weight[index : index + 1].detach()


def render_view(
    backbone: RadianceBackbone,
    camera: CameraModel,
    width: int,
    height: int,
    head: SemanticHead | None = None,
    appearance: torch.Tensor | None = None,
    chunk: int = 8192,
) -> tuple:
    """Render (RGB image, semantic ProbMap or None) for a full camera view."""
    cfg = backbone.config
    origins, dirs = camera_rays(camera, width, height)
    app = appearance if appearance is not None else torch.zeros(1, cfg.app_dim)
    rgbs, sems = [], []
    with torch.no_grad():
        for start in range(0, len(origins), chunk):
            rays = RayBatch(
                origins[start : start + chunk],
                dirs[start : start + chunk],
                cfg.near,
                cfg.far,
            )
            out = render_rays(backbone, rays, head=head, appearance=app)
            rgbs.append(out["rgb"])
            if head is not None:
                sems.append(out["semantic"])
    rgb = torch.cat(rgbs).reshape(height, width, 3).numpy()
    rgb = np.clip(rgb, 0.0, 1.0)
    if head is None:
        return rgb, None
    sem = torch.cat(sems).reshape(height, width).numpy()
    return rgb, ProbMap(np.clip(sem, 0.0, 1.0).astype(np.float32))


def largest_component(mask: BinaryMask) -> np.ndarray:
    """Boolean array of the largest 4-connected component (empty if none)."""
    labels, count = ndimage.label(mask.bits)
    if count == 0:
        return np.zeros_like(mask.bits)
    sizes = ndimage.sum_labels(np.ones_like(labels), labels, index=np.arange(1, count + 1))
    return labels == (1 + int(np.argmax(sizes)))


def component_margin(component: np.ndarray) -> float:
    """Minimum relative margin between the component's bbox and the border."""
    rows, cols = np.nonzero(component)
    if len(rows) == 0:
        return 0.0
    h, w = component.shape
    return float(
        min(
            cols.min() / w,
            (w - 1 - cols.max()) / w,
            rows.min() / h,
            (h - 1 - rows.max()) / h,
        )
    )


def score_view(
    image_id: str, seg_map: ProbMap, rerender_map: ProbMap | None
) -> ViewScore:
    """s = m + c - x for one view, from its segmentation and the
    segmentation of the RGB re-render."""
    mask = binarize(seg_map, 0.5)
    comp = largest_component(mask)
    m = component_margin(comp)
    coverage = float(mask.bits.mean())
    x = 1 if (coverage < COVERAGE_LOW or coverage > COVERAGE_HIGH) else 0
    c = 0.0
    if rerender_map is not None:
        comp2 = largest_component(binarize(rerender_map, 0.5))
        denom = comp2.sum()
        if denom > 0:
            c = float((comp & comp2).sum() / denom)
    return ViewScore(image_id=image_id, m=m, c=c, x=x)


def select_views(
    records: list,
    prompt: str,
    seg_view,
    backbone: RadianceBackbone | None = None,
    seg_pixels=None,
    n: int = DEFAULT_VIEW_COUNT,
    rerenders: dict | None = None,
) -> tuple:
    """Rank views by s = m + c - x and keep the top n (ties by id).

    ``seg_view(record) -> ProbMap`` segments a dataset view. The overlap
    term c compares it against the segmentation of the RGB field's
    re-render, which needs both a backbone and a ``seg_pixels(pixels,
    prompt) -> ProbMap`` callable that accepts raw rendered arrays; without
    them c is 0 for every view, which leaves the ranking well-defined.
    ``rerenders`` (image_id -> rgb array) caches renders across prompts;
    a dict passed in is filled with any renders this call produces.
    """
    posed = sorted(_posed_records(records), key=lambda r: r.id)
    scores = []
    for idx, rec in enumerate(posed):
        seg_map = seg_view(rec)
        rerender_map = None
        if backbone is not None and seg_pixels is not None:
            rgb = rerenders.get(rec.id) if rerenders is not None else None
            if rgb is None:
                rgb, _ = render_view(
                    backbone,
                    rec.camera,
                    rec.width,
                    rec.height,
                    appearance=appearance_for(backbone, idx),
                )
                if rerenders is not None:
                    rerenders[rec.id] = rgb
            rerender_map = seg_pixels(rgb, prompt)
        scores.append(score_view(rec.id, seg_map, rerender_map))
    ranked = sorted(scores, key=lambda v: (-v.s, v.image_id))
    return [v.image_id for v in ranked[:n]], scores


def train_semantic_head(
    backbone: RadianceBackbone,
    records: list,
    masks: dict,
    config: FieldConfig | None = None,
) -> SemanticHead:
    """Fit the semantic head to binarized per-view probability maps.

    Targets are mask values at each pixel, binarized at 0.2. The backbone
    is frozen: its parameters do not receive gradients and are bitwise
    identical afterwards.
    """
    cfg = config or backbone.config
    posed = sorted(_posed_records(records), key=lambda r: r.id)
    use = [r for r in posed if r.id in masks]
    if not use:
        raise ValueError("no masks supplied for any posed view")
    torch.manual_seed(cfg.seed + 1)
    head = SemanticHead(backbone.feature_dim)

    frozen = [p.requires_grad for p in backbone.parameters()]
    for p in backbone.parameters():
        p.requires_grad_(False)

    all_o, all_d, all_t = [], [], []
    for rec in use:
        o, d = camera_rays(rec.camera, rec.width, rec.height)
        target = binarize(masks[rec.id], FIELD_TARGET_THRESHOLD).bits
        all_o.append(o)
        all_d.append(d)
        all_t.append(torch.from_numpy(target.reshape(-1).astype(np.float32)))
    origins = torch.cat(all_o)
    dirs = torch.cat(all_d)
    targets = torch.cat(all_t)

    gen = torch.Generator().manual_seed(cfg.seed + 1)
    opt = torch.optim.Adam(head.parameters(), lr=cfg.head_lr)
    for it in range(cfg.head_iters):
        pick = torch.randint(0, len(origins), (cfg.ray_batch,), generator=gen)
        rays = RayBatch(origins[pick], dirs[pick], cfg.near, cfg.far)
        out = render_rays(backbone, rays, head=head, jitter=gen, detach_field=True)
        s = out["semantic"].clamp(CE_EPS, 1.0 - CE_EPS)
        t = targets[pick]
        loss = -(t * torch.log(s) + (1.0 - t) * torch.log(1.0 - s)).mean()
        if not math.isfinite(float(loss.detach())):
            raise RuntimeError("head training diverged: non-finite loss")
        opt.zero_grad()
        loss.backward()
        opt.step()
        if it % 250 == 0:
            log.info("semantic head iter %d loss %.5f", it, float(loss.detach()))

    for p, flag in zip(backbone.parameters(), frozen):
        p.requires_grad_(flag)
    return head


@dataclass
class LocalizeResult:
    semantic_maps: dict  # image_id -> ProbMap (rendered)
    overlap_ranking: list  # image ids, most covered first
    head: SemanticHead
    selected_views: list


def localize(
    backbone: RadianceBackbone,
    records: list,
    prompt: str,
    seg_view,
    seg_pixels=None,
    config: FieldConfig | None = None,
    n_views: int = DEFAULT_VIEW_COUNT,
    rerenders: dict | None = None,
) -> LocalizeResult:
    """Per-prompt driver: select views, segment them, train the head on the
    binarized maps, render every posed view, and rank views by how much of
    the frame the rendered concept covers."""
    cfg = config or backbone.config
    posed = sorted(_posed_records(records), key=lambda r: r.id)
    selected, _ = select_views(
        records,
        prompt,
        seg_view,
        backbone=backbone,
        seg_pixels=seg_pixels,
        n=n_views,
        rerenders=rerenders,
    )
    chosen = set(selected)
    masks = {rec.id: seg_view(rec) for rec in posed if rec.id in chosen}
    head = train_semantic_head(backbone, posed, masks, cfg)

    semantic_maps = {}
    coverage = {}
    for idx, rec in enumerate(posed):
        _, sem = render_view(
            backbone,
            rec.camera,
            rec.width,
            rec.height,
            head=head,
            appearance=appearance_for(backbone, idx),
        )
        semantic_maps[rec.id] = sem
        coverage[rec.id] = float(sem.values.mean())
    ranking = sorted(coverage, key=lambda k: (-coverage[k], k))
    return LocalizeResult(
        semantic_maps=semantic_maps,
        overlap_ranking=ranking,
        head=head,
        selected_views=selected,
    )


def save_backbone(path, backbone: RadianceBackbone, num_images: int) -> None:
    from .checkpoints import save_checkpoint, state_dict_arrays

    save_checkpoint(
        path,
        "radiance_backbone",
        state_dict_arrays(backbone),
        {"config": backbone.config.to_dict(), "num_images": num_images},
    )


def load_backbone(path) -> RadianceBackbone:
    from .checkpoints import load_checkpoint, load_state_dict_arrays

    ckpt = load_checkpoint(path, expect_kind="radiance_backbone")
    cfg = FieldConfig(**ckpt.config["config"])
    backbone = RadianceBackbone(ckpt.config["num_images"], cfg)
    load_state_dict_arrays(backbone, ckpt.arrays)
    return backbone


def save_head(path, head: SemanticHead, prompt: str) -> None:
    from .checkpoints import save_checkpoint, state_dict_arrays

    save_checkpoint(
        path,
        "semantic_head",
        state_dict_arrays(head),
        {"feature_dim": head.feature_dim, "prompt": prompt},
    )


def load_head(path) -> SemanticHead:
    from .checkpoints import load_checkpoint, load_state_dict_arrays

    ckpt = load_checkpoint(path, expect_kind="semantic_head")
    head = SemanticHead(ckpt.config["feature_dim"])
    load_state_dict_arrays(head, ckpt.arrays)
    return head
