"""Adaptation of the text-conditioned segmenter and the retrieval encoder.

The segmenter is fine-tuned on mined samples with four equally weighted
losses: cross-entropy against warped zoom-pair targets, cross-entropy
against crop targets, a multi-resolution consistency loss against the
frozen pre-training model, and a binary-entropy regularizer that pushes
outputs toward confident values. Only the decoder trains; encoders stay
frozen. The retrieval encoder is fine-tuned with an in-batch-negatives
ranking loss over (image, label) pairs.

Losses are computed in float64 so reference values hold to tight
tolerances regardless of the model's working precision.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Protocol

import numpy as np
import torch

from .core_data import ImageRecord, ProbMap, Rect
from .mining import SegBackend, SimBackend, sample_crop_rect, two_crop_pick

log = logging.getLogger(__name__)

INPUT_SIZE = 352
TILE_STRIDE = 25
MAX_INFERENCE_DIM = 500
BBOX_MARGIN = 0.1
BBOX_THRESHOLD = 0.5
CE_EPS = 1e-7
# Entropy clamp is tighter than the cross-entropy one so exactly binary
# maps score as (numerically) zero entropy.
ENTROPY_EPS = 1e-12


class EmptyMaskError(Exception):
    """Raised when a loss is requested over an empty validity mask."""


class SegModel(torch.nn.Module):
    """Text-conditioned segmenter contract.

    forward(image [3,S,S], text) returns probabilities [S,S] in [0,1],
    differentiable w.r.t. decoder parameters. ``encoders`` and ``decoder``
    partition the parameters; fine-tuning touches only the decoder.
    """

    INPUT_SIZE = INPUT_SIZE

    @property
    def encoders(self) -> torch.nn.Module:
        raise NotImplementedError

    @property
    def decoder(self) -> torch.nn.Module:
        raise NotImplementedError

    def forward(self, image: torch.Tensor, text: str) -> torch.Tensor:
        raise NotImplementedError


class RetrievalEncoder(torch.nn.Module):
    """Image/text embedding contract; embeddings are L2-normalized."""

    def embed_image(self, image: np.ndarray) -> torch.Tensor:
        raise NotImplementedError

    def embed_text(self, text: str) -> torch.Tensor:
        raise NotImplementedError


@dataclass(frozen=True)
class LossReport:
    l_corresp: float
    l_crop: float
    l_consistency: float
    l_reg: float

    @property
    def total(self) -> float:
        return self.l_corresp + self.l_crop + self.l_consistency + self.l_reg


def _as_double(x) -> torch.Tensor:
    if isinstance(x, ProbMap):
        x = x.values
    if isinstance(x, torch.Tensor):
        return x.double()
    return torch.as_tensor(np.asarray(x), dtype=torch.float64)


def _as_bool(x) -> torch.Tensor:
    bits = getattr(x, "bits", x)
    if isinstance(bits, torch.Tensor):
        return bits.bool()
    return torch.as_tensor(np.asarray(bits)).bool()


def masked_cross_entropy(pred, target, valid) -> torch.Tensor:
    """Mean over valid pixels of -[t ln p + (1-t) ln(1-p)], p clamped to
    [eps, 1-eps] with eps = 1e-7."""
    p = _as_double(pred)
    t = _as_double(target)
    m = _as_bool(valid)
    if p.shape != t.shape or p.shape != m.shape:
        raise ValueError("pred, target and valid must share a shape")
    if not bool(m.any()):
        raise EmptyMaskError("no valid pixels to supervise")
    p = p.clamp(CE_EPS, 1.0 - CE_EPS)
    ce = -(t * torch.log(p) + (1.0 - t) * torch.log(1.0 - p))
    return ce[m].mean()


def entropy_reg(pred) -> torch.Tensor:
    """Mean binary entropy of the predictions; zero iff outputs are binary."""
    p = _as_double(pred).clamp(ENTROPY_EPS, 1.0 - ENTROPY_EPS)
    ent = -(p * torch.log(p) + (1.0 - p) * torch.log(1.0 - p))
    return ent.mean()


def resize_map(values: torch.Tensor, out_h: int, out_w: int) -> torch.Tensor:
    """Bilinear resize of a [H,W] map (differentiable)."""
    if values.shape == (out_h, out_w):
        return values
    out = torch.nn.functional.interpolate(
        values[None, None], size=(out_h, out_w), mode="bilinear", align_corners=False
    )
    return out[0, 0]


def resize_image(image: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resize of an [H,W,3] float image."""
    if image.shape[:2] == (out_h, out_w):
        return image
    t = torch.from_numpy(np.ascontiguousarray(image, dtype=np.float32)).permute(2, 0, 1)
    out = torch.nn.functional.interpolate(
        t[None], size=(out_h, out_w), mode="bilinear", align_corners=False
    )
    return out[0].permute(1, 2, 0).numpy()


def image_to_tensor(image: np.ndarray, dtype=torch.float32) -> torch.Tensor:
    return torch.from_numpy(np.ascontiguousarray(image)).to(dtype).permute(2, 0, 1)


def _rect_to_grid(rect: Rect, width: int, height: int, grid: int) -> tuple:
    """Map an image-space rect to map-grid indices, at least 1 px each way."""
    sx = grid / width
    sy = grid / height
    x0 = int(math.floor(rect.x0 * sx))
    y0 = int(math.floor(rect.y0 * sy))
    x1 = max(x0 + 1, int(math.ceil(rect.x1 * sx)))
    y1 = max(y0 + 1, int(math.ceil(rect.y1 * sy)))
    return x0, y0, min(x1, grid), min(y1, grid)


def consistency_loss(
    model: SegModel,
    image: np.ndarray,
    text: str,
    crop_rect: Rect,
    frozen_oracle: SegModel,
) -> torch.Tensor:
    """Cross-entropy between the model's prediction restricted to a crop
    and the frozen pre-training model applied inside that crop."""
    h, w = image.shape[:2]
    if not Rect(0, 0, w, h).contains(crop_rect):
        raise ValueError(f"crop {crop_rect} outside image {w}x{h}")
    size = model.INPUT_SIZE

    full = image_to_tensor(resize_image(image, size, size))
    pred = model(full, text)
    x0, y0, x1, y1 = _rect_to_grid(crop_rect, w, h, size)
    pred_crop = resize_map(pred[y0:y1, x0:x1], size, size)

    crop_pixels = image[crop_rect.y0 : crop_rect.y1, crop_rect.x0 : crop_rect.x1]
    with torch.no_grad():
        target = frozen_oracle(
            image_to_tensor(resize_image(crop_pixels, size, size)), text
        )
    return masked_cross_entropy(pred_crop, target, torch.ones(size, size, dtype=torch.bool))


def pluralize(label: str) -> str:
    """Heuristic English plural of a label's last word."""
    words = label.split()
    if not words:
        return label
    w = words[-1]
    if w.endswith("y") and len(w) > 1 and w[-2] not in "aeiou":
        w = w[:-1] + "ies"
    elif w.endswith(("s", "x", "z", "ch", "sh")):
        w = w + "es"
    else:
        w = w + "s"
    return " ".join(words[:-1] + [w])


@dataclass
class CorrespItem:
    """A zoom-pair training unit: supervise the zoomed-out image inside the
    projected quad."""

    record: ImageRecord
    image: np.ndarray  # zoomed-out pixels, [H,W,3] float in [0,1]
    label: str
    target: np.ndarray  # [H,W] float
    valid: np.ndarray  # [H,W] bool


@dataclass
class CropItem:
    record: ImageRecord
    image: np.ndarray  # full-image pixels
    rect: Rect
    label: str
    target: np.ndarray  # [h,w] float, crop resolution


@dataclass
class SegSchedule:
    epochs: int = 10
    lr: float = 1e-4
    corresp_per_step: int = 1
    crops_per_step: int = 4
    plural_p: float = 0.5
    seed: int = 0


@dataclass
class FinetuneResult:
    model: SegModel
    reports: list = field(default_factory=list)
    skipped_empty: int = 0


def _maybe_plural(label: str, p: float, rng: np.random.Generator) -> str:
    return pluralize(label) if p > 0 and rng.random() < p else label


def _corresp_tensors(item: CorrespItem, size: int) -> tuple:
    img = image_to_tensor(resize_image(item.image, size, size))
    target = resize_map(_as_double(item.target).float(), size, size)
    valid = (
        torch.nn.functional.interpolate(
            torch.as_tensor(item.valid, dtype=torch.float32)[None, None],
            size=(size, size),
            mode="nearest",
        )[0, 0]
        > 0.5
    )
    return img, target.double(), valid


def _crop_tensors(item: CropItem, size: int) -> tuple:
    r = item.rect
    crop = item.image[r.y0 : r.y1, r.x0 : r.x1]
    img = image_to_tensor(resize_image(crop, size, size))
    target = resize_map(_as_double(item.target).float(), size, size)
    return img, target.double()


def step_losses(
    model: SegModel,
    corresp: CorrespItem,
    crops: list,
    frozen_oracle: SegModel,
    sim: SimBackend,
    rng: np.random.Generator,
    plural_p: float = 0.0,
) -> tuple:
    """Total loss tensor plus its LossReport for one training step."""
    size = model.INPUT_SIZE

    label = _maybe_plural(corresp.label, plural_p, rng)
    img, target, valid = _corresp_tensors(corresp, size)
    pred = model(img, label)
    l_corresp = masked_cross_entropy(pred, target, valid)
    l_reg = entropy_reg(pred)

    crop_losses = []
    for item in crops:
        clabel = _maybe_plural(item.label, plural_p, rng)
        cimg, ctarget = _crop_tensors(item, size)
        cpred = model(cimg, clabel)
        crop_losses.append(
            masked_cross_entropy(cpred, ctarget, torch.ones(size, size, dtype=torch.bool))
        )
    l_crop = torch.stack(crop_losses).mean() if crop_losses else torch.zeros((), dtype=torch.float64)

    cons_rect = two_crop_pick(corresp.record, corresp.label, sim, rng)
    l_consistency = consistency_loss(model, corresp.image, label, cons_rect, frozen_oracle)

    total = l_corresp + l_crop + l_consistency + l_reg
    report = LossReport(
        float(l_corresp.detach()),
        float(l_crop.detach()),
        float(l_consistency.detach()),
        float(l_reg.detach()),
    )
    return total, report


def finetune_segmenter(
    model: SegModel,
    corresp_items: list,
    crop_items: list,
    frozen_oracle: SegModel,
    sim: SimBackend,
    schedule: SegSchedule | None = None,
) -> FinetuneResult:
    """Train the decoder on mined samples; encoders never change.

    One step consumes one zoom-pair item and a minibatch of crop items;
    the four losses are summed with equal weights and optimized with
    plain SGD at the configured rate.
    """
    sched = schedule or SegSchedule()
    if not corresp_items:
        raise ValueError("no correspondence training items")
    rng = np.random.default_rng(sched.seed)
    for p in model.encoders.parameters():
        p.requires_grad_(False)
    opt = torch.optim.SGD(model.decoder.parameters(), lr=sched.lr)

    result = FinetuneResult(model=model)
    crop_cycle = 0
    for _ in range(sched.epochs):
        order = rng.permutation(len(corresp_items))
        for idx in order:
            batch = []
            if crop_items:
                for _ in range(sched.crops_per_step):
                    batch.append(crop_items[crop_cycle % len(crop_items)])
                    crop_cycle += 1
            try:
                total, report = step_losses(
                    model,
                    corresp_items[idx],
                    batch,
                    frozen_oracle,
                    sim,
                    rng,
                    sched.plural_p,
                )
            except EmptyMaskError:
                result.skipped_empty += 1
                continue
            if not math.isfinite(float(total.detach())):
                raise RuntimeError("training diverged: non-finite total loss")
            opt.zero_grad()
            total.backward()
            opt.step()
            result.reports.append(report)
    return result


def building_bbox(rec: ImageRecord, building_prompt: str, seg: SegBackend) -> Rect:
    """Smallest box containing all pixels with probability above 0.5, grown
    by 10% of each side's length and clipped; full image when nothing
    clears the threshold."""
    pmap = seg.segment(rec, building_prompt)
    h, w = pmap.values.shape
    rows, cols = np.nonzero(pmap.values > BBOX_THRESHOLD)
    if len(rows) == 0:
        return Rect(0, 0, w, h)
    y0, y1 = int(rows.min()), int(rows.max()) + 1
    x0, x1 = int(cols.min()), int(cols.max()) + 1
    my = int(round(BBOX_MARGIN * (y1 - y0)))
    mx = int(round(BBOX_MARGIN * (x1 - x0)))
    return Rect(x0 - mx, y0 - my, x1 + mx, y1 + my).clipped(w, h)


def _window_offsets(length: int, size: int, stride: int) -> list:
    if length <= size:
        return [0]
    offsets = [i * stride for i in range(math.ceil((length - size) / stride))]
    if offsets[-1] != length - size:
        offsets.append(length - size)
    return offsets


def _replicate_pad(image: np.ndarray, pad_before: int, pad_after: int, axis: int) -> np.ndarray:
    widths = [(0, 0)] * image.ndim
    widths[axis] = (pad_before, pad_after)
    return np.pad(image, widths, mode="edge")


def tiled_segment(image: np.ndarray, text: str, model: SegModel) -> ProbMap:
    """Full-resolution segmentation via overlapping sliding windows.

    The image is resized so its larger dimension is at most 500, the short
    axis is replicate-padded to the model's input size, windows slide along
    the long axis at stride 25 (plus a final window flushed to the edge),
    overlapping predictions are averaged, and the result is un-padded and
    resized back to the original resolution.
    """
    size = model.INPUT_SIZE
    h0, w0 = image.shape[:2]
    if max(h0, w0) > MAX_INFERENCE_DIM:
        scale = MAX_INFERENCE_DIM / max(h0, w0)
        h1 = max(1, int(round(h0 * scale)))
        w1 = max(1, int(round(w0 * scale)))
        work = resize_image(image, h1, w1)
    else:
        h1, w1 = h0, w0
        work = image.astype(np.float32, copy=False)

    pads = [0, 0, 0, 0]  # top, bottom, left, right
    if h1 < size:
        pads[0] = (size - h1) // 2
        pads[1] = size - h1 - pads[0]
        work = _replicate_pad(work, pads[0], pads[1], axis=0)
    if w1 < size:
        pads[2] = (size - w1) // 2
        pads[3] = size - w1 - pads[2]
        work = _replicate_pad(work, pads[2], pads[3], axis=1)

    ph, pw = work.shape[:2]
    acc = np.zeros((ph, pw), dtype=np.float64)
    cnt = np.zeros((ph, pw), dtype=np.float64)
    horizontal = pw >= ph
    offsets = _window_offsets(pw if horizontal else ph, size, TILE_STRIDE)
    with torch.no_grad():
        for off in offsets:
            if horizontal:
                window = work[:, off : off + size]
            else:
                window = work[off : off + size, :]
            pred = model(image_to_tensor(window), text).detach().cpu().numpy()
            if horizontal:
                acc[:, off : off + size] += pred
                cnt[:, off : off + size] += 1.0
            else:
                acc[off : off + size, :] += pred
                cnt[off : off + size, :] += 1.0
    merged = acc / np.maximum(cnt, 1.0)
    merged = merged[pads[0] : ph - pads[1] or None, pads[2] : pw - pads[3] or None]

    if (h1, w1) != (h0, w0):
        out = resize_map(torch.as_tensor(merged, dtype=torch.float32), h0, w0).numpy()
    else:
        out = merged
    return ProbMap(np.clip(out, 0.0, 1.0).astype(np.float32))


@dataclass
class RetrievalSchedule:
    epochs: int = 5
    lr: float = 1e-6
    batch_size: int = 128
    scale: float = 20.0
    seed: int = 0


def ranking_loss(
    encoder: RetrievalEncoder, images: list, labels: list, scale: float
) -> torch.Tensor:
    """In-batch-negatives contrastive loss: each image should score its own
    label above every other label in the batch."""
    if len(images) < 2:
        raise ValueError("ranking loss needs a batch of at least 2 pairs")
    img_emb = torch.stack([encoder.embed_image(im) for im in images])
    txt_emb = torch.stack([encoder.embed_text(t) for t in labels])
    logits = scale * img_emb @ txt_emb.T
    return torch.nn.functional.cross_entropy(
        logits, torch.arange(len(images), dtype=torch.long)
    )


def train_retrieval(
    encoder: RetrievalEncoder, pairs: list, schedule: RetrievalSchedule | None = None
) -> RetrievalEncoder:
    """Fine-tune the retrieval encoder on (image, label) pairs.

    Pairs are expected to be pre-filtered (uncertain pseudo-labels removed,
    leading direction words stripped) before they arrive here.
    """
    sched = schedule or RetrievalSchedule()
    if len(pairs) < 2:
        raise ValueError("retrieval training needs at least 2 pairs")
    rng = np.random.default_rng(sched.seed)
    opt = torch.optim.SGD(encoder.parameters(), lr=sched.lr)
    for _ in range(sched.epochs):
        order = rng.permutation(len(pairs))
        for start in range(0, len(order), sched.batch_size):
            chunk = order[start : start + sched.batch_size]
            if len(chunk) < 2:
                continue  # a singleton has no negatives; fold into no-op
            images = [pairs[i][0] for i in chunk]
            labels = [pairs[i][1] for i in chunk]
            loss = ranking_loss(encoder, images, labels, sched.scale)
            opt.zero_grad()
            loss.backward()
            opt.step()
    return encoder


def retrieve_terms(
    image: np.ndarray, vocab: list, k: int, encoder: RetrievalEncoder
) -> list:
    """Top-k vocabulary terms by similarity; ties break lexicographically."""
    if not vocab:
        raise ValueError("empty vocabulary")
    if k < 1:
        raise ValueError("k must be >= 1")
    if k > len(vocab):
        log.warning("k=%d exceeds vocabulary size %d; returning all", k, len(vocab))
        k = len(vocab)
    with torch.no_grad():
        img = encoder.embed_image(image)
        sims = {term: float(img @ encoder.embed_text(term)) for term in vocab}
    ranked = sorted(sims.items(), key=lambda kv: (-kv[1], kv[0]))
    return [term for term, _ in ranked[:k]]


__all__ = [
    "SegModel",
    "RetrievalEncoder",
    "LossReport",
    "EmptyMaskError",
    "masked_cross_entropy",
    "entropy_reg",
    "consistency_loss",
    "pluralize",
    "CorrespItem",
    "CropItem",
    "SegSchedule",
    "FinetuneResult",
    "step_losses",
    "finetune_segmenter",
    "building_bbox",
    "tiled_segment",
    "RetrievalSchedule",
    "ranking_loss",
    "train_retrieval",
    "retrieve_terms",
    "resize_image",
    "resize_map",
    "image_to_tensor",
    "sample_crop_rect",
    "INPUT_SIZE",
]
