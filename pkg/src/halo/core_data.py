"""Data model, on-disk scene format, and probability-map codec.

A scene lives in a directory:

    <root>/manifest.jsonl            one image record per line
    <root>/images/*.{jpg,png}        8-bit RGB pixels
    <root>/masks/<category>/<image_id>.png   predicted probability maps
    <root>/gt/<category>/<image_id>.png      binary ground truth (0/255)

Probability maps are stored as single-channel 8-bit PNGs, value v encoded
as round(v * 255), so a decode differs from the original by at most 1/510
per pixel.
"""

from __future__ import annotations

import io
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

log = logging.getLogger(__name__)

KNOWN_BUILDING_KINDS = ("cathedral", "mosque", "synagogue")


class SceneFormatError(Exception):
    """Raised when a scene directory or manifest record is malformed."""


class CodecError(Exception):
    """Raised when probability-map bytes are not a single-channel 8-bit PNG."""


@dataclass(frozen=True)
class Rect:
    """Half-open pixel rectangle [x0, x1) x [y0, y1)."""

    x0: int
    y0: int
    x1: int
    y1: int

    def __post_init__(self):
        if self.x1 <= self.x0 or self.y1 <= self.y0:
            raise ValueError(f"empty rect {self}")

    @property
    def width(self) -> int:
        return self.x1 - self.x0

    @property
    def height(self) -> int:
        return self.y1 - self.y0

    def clipped(self, width: int, height: int) -> "Rect":
        return Rect(
            max(0, self.x0), max(0, self.y0), min(width, self.x1), min(height, self.y1)
        )

    def contains(self, other: "Rect") -> bool:
        return (
            self.x0 <= other.x0
            and self.y0 <= other.y0
            and other.x1 <= self.x1
            and other.y1 <= self.y1
        )


@dataclass(frozen=True)
class CameraModel:
    """Pinhole camera: 3x3 intrinsics and a world-from-camera 3x4 pose."""

    intrinsics: tuple  # 3x3, row tuples
    pose: tuple  # 3x4, row tuples; X_world = R @ X_cam + t

    def __post_init__(self):
        K = np.asarray(self.intrinsics, dtype=np.float64)
        P = np.asarray(self.pose, dtype=np.float64)
        if K.shape != (3, 3):
            raise ValueError("intrinsics must be 3x3")
        if P.shape != (3, 4):
            raise ValueError("pose must be 3x4")
        if not (np.all(np.isfinite(K)) and np.all(np.isfinite(P))):
            raise ValueError("camera matrices must be finite")
        if K[0, 0] <= 0 or K[1, 1] <= 0:
            raise ValueError("focal entries must be positive")

    @property
    def k(self) -> np.ndarray:
        return np.asarray(self.intrinsics, dtype=np.float64)

    @property
    def rotation(self) -> np.ndarray:
        return np.asarray(self.pose, dtype=np.float64)[:, :3]

    @property
    def center(self) -> np.ndarray:
        return np.asarray(self.pose, dtype=np.float64)[:, 3]

    @staticmethod
    def from_arrays(intrinsics, pose) -> "CameraModel":
        K = np.asarray(intrinsics, dtype=float)
        P = np.asarray(pose, dtype=float)
        return CameraModel(
            tuple(tuple(row) for row in K.tolist()),
            tuple(tuple(row) for row in P.tolist()),
        )


@dataclass(frozen=True)
class ImageMetadata:
    filename: str = ""
    caption: str = ""
    wiki_categories: tuple = ()


@dataclass(frozen=True)
class ImageRecord:
    """One image of a scene; ``id`` is the source filename and is unique."""

    id: str
    width: int
    height: int
    pixel_ref: str
    metadata: ImageMetadata = field(default_factory=ImageMetadata)
    camera: CameraModel | None = None

    def __post_init__(self):
        if not self.id:
            raise ValueError("image id must be nonempty")
        if self.width < 1 or self.height < 1:
            raise ValueError(f"{self.id}: width and height must be >= 1")


@dataclass
class SceneManifest:
    """A named collection of images plus the metadata that drives prompts."""

    landmark_name: str
    building_kind: str
    images: list
    split: str = "train"
    dedup_dropped: int = 0

    def __post_init__(self):
        if not self.images:
            raise SceneFormatError("manifest has no images")
        if self.split not in ("train", "test"):
            raise SceneFormatError(f"bad split {self.split!r}")
        ids = [rec.id for rec in self.images]
        if len(ids) != len(set(ids)):
            raise SceneFormatError("duplicate image ids in manifest")

    def facade_prompt(self) -> str:
        """Zero-shot building prompt; known kinds map to themselves."""
        kind = self.building_kind.lower()
        return kind if kind in KNOWN_BUILDING_KINDS else self.building_kind

    def record(self, image_id: str) -> ImageRecord:
        for rec in self.images:
            if rec.id == image_id:
                return rec
        raise KeyError(image_id)


@dataclass
class ProbMap:
    """H x W map of per-pixel probabilities in [0, 1], row major."""

    values: np.ndarray

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=np.float32)
        if vals.ndim != 2:
            raise ValueError("ProbMap values must be 2-D")
        if vals.size and (vals.min() < 0.0 or vals.max() > 1.0):
            raise ValueError("ProbMap values must lie in [0, 1]")
        self.values = vals

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @property
    def height(self) -> int:
        return self.values.shape[0]


@dataclass
class BinaryMask:
    """Boolean mask; carries the threshold that produced it."""

    bits: np.ndarray
    threshold: float | None = None

    def __post_init__(self):
        bits = np.asarray(self.bits)
        if bits.ndim != 2:
            raise ValueError("BinaryMask bits must be 2-D")
        self.bits = bits.astype(bool)

    @property
    def width(self) -> int:
        return self.bits.shape[1]

    @property
    def height(self) -> int:
        return self.bits.shape[0]


def binarize(pmap: ProbMap, threshold: float) -> BinaryMask:
    """Threshold a probability map; a pixel is set when value >= threshold."""
    if not 0.0 < threshold < 1.0:
        raise ValueError(f"threshold must be in (0, 1), got {threshold}")
    return BinaryMask(pmap.values >= threshold, threshold=threshold)


def encode_probmap(pmap: ProbMap) -> bytes:
    """Serialize to a single-channel 8-bit PNG, v stored as round(v*255)."""
    quantized = np.round(pmap.values.astype(np.float64) * 255.0).astype(np.uint8)
    buf = io.BytesIO()
    Image.fromarray(quantized, mode="L").save(buf, format="PNG")
    return buf.getvalue()


def decode_probmap(data: bytes) -> ProbMap:
    """Inverse of :func:`encode_probmap`; stored byte b decodes to b/255."""
    try:
        img = Image.open(io.BytesIO(data))
        img.load()
    except Exception as exc:
        raise CodecError(f"not a decodable PNG: {exc}") from exc
    if img.format != "PNG":
        raise CodecError(f"expected PNG, got {img.format}")
    if img.mode != "L":
        raise CodecError(f"expected single-channel 8-bit PNG, got mode {img.mode}")
    arr = np.asarray(img, dtype=np.float32) / 255.0
    return ProbMap(arr)


def write_probmap(pmap: ProbMap, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(encode_probmap(pmap))
    tmp.replace(path)


def read_probmap(path) -> ProbMap:
    return decode_probmap(Path(path).read_bytes())


def write_binary_mask(mask: BinaryMask, path) -> None:
    """Binary masks are stored as 0/255 single-channel PNGs."""
    write_probmap(ProbMap(mask.bits.astype(np.float32)), path)


def read_binary_mask(path, threshold: float = 0.5) -> BinaryMask:
    return binarize(read_probmap(path), threshold)


def load_image(record_or_path) -> np.ndarray:
    """Load 8-bit RGB pixels as float32 in [0, 1], shape (H, W, 3)."""
    path = getattr(record_or_path, "pixel_ref", record_or_path)
    img = Image.open(path).convert("RGB")
    return np.asarray(img, dtype=np.float32) / 255.0


def _parse_record(obj: dict, root: Path, lineno: int) -> ImageRecord:
    try:
        meta = obj.get("metadata", {})
        camera = None
        if obj.get("camera") is not None:
            camera = CameraModel.from_arrays(
                obj["camera"]["intrinsics"], obj["camera"]["pose"]
            )
        pixel_ref = root / "images" / obj["file"] if "file" in obj else root / "images" / obj["id"]
        return ImageRecord(
            id=obj["id"],
            width=int(obj["width"]),
            height=int(obj["height"]),
            pixel_ref=str(pixel_ref),
            metadata=ImageMetadata(
                filename=meta.get("filename", obj["id"]),
                caption=meta.get("caption", ""),
                wiki_categories=tuple(meta.get("wiki_categories", ())),
            ),
            camera=camera,
        )
    except SceneFormatError:
        raise
    except Exception as exc:
        raise SceneFormatError(f"manifest.jsonl line {lineno}: bad record ({exc})") from exc


def load_scene(root_path) -> SceneManifest:
    """Load and validate a scene directory.

    Duplicate filenames collapse to their first occurrence; the number of
    dropped records is reported on the manifest and as a warning.
    """
    root = Path(root_path)
    manifest_path = root / "manifest.jsonl"
    if not manifest_path.is_file():
        raise SceneFormatError(f"missing manifest file {manifest_path}")

    landmark_name = ""
    building_kind = "other"
    split = "train"
    records: list[ImageRecord] = []
    seen: set[str] = set()
    dropped = 0

    for lineno, line in enumerate(manifest_path.read_text().splitlines(), start=1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            raise SceneFormatError(f"manifest.jsonl line {lineno}: invalid JSON ({exc})") from exc
        if "scene" in obj:
            scene = obj["scene"]
            landmark_name = scene.get("landmark_name", landmark_name)
            building_kind = scene.get("building_kind", building_kind)
            split = scene.get("split", split)
            continue
        rec = _parse_record(obj, root, lineno)
        if rec.id in seen:
            dropped += 1
            continue
        seen.add(rec.id)
        if not Path(rec.pixel_ref).is_file():
            raise SceneFormatError(
                f"manifest.jsonl line {lineno}: referenced image file "
                f"{Path(rec.pixel_ref).name} not found"
            )
        records.append(rec)

    if dropped:
        log.warning("scene %s: dropped %d duplicate filename(s)", root, dropped)
    manifest = SceneManifest(
        landmark_name=landmark_name,
        building_kind=building_kind,
        images=records,
        split=split,
        dedup_dropped=dropped,
    )
    return manifest


def record_to_json(rec: ImageRecord) -> dict:
    obj = {
        "id": rec.id,
        "width": rec.width,
        "height": rec.height,
        "metadata": {
            "filename": rec.metadata.filename,
            "caption": rec.metadata.caption,
            "wiki_categories": list(rec.metadata.wiki_categories),
        },
    }
    if rec.camera is not None:
        obj["camera"] = {
            "intrinsics": [list(r) for r in rec.camera.intrinsics],
            "pose": [list(r) for r in rec.camera.pose],
        }
    return obj


def save_scene(manifest: SceneManifest, root_path) -> None:
    """Write manifest.jsonl for records whose pixel files already exist."""
    root = Path(root_path)
    root.mkdir(parents=True, exist_ok=True)
    lines = [
        json.dumps(
            {
                "scene": {
                    "landmark_name": manifest.landmark_name,
                    "building_kind": manifest.building_kind,
                    "split": manifest.split,
                }
            },
            sort_keys=True,
        )
    ]
    lines += [json.dumps(record_to_json(r), sort_keys=True) for r in manifest.images]
    (root / "manifest.jsonl").write_text("\n".join(lines) + "\n")
