"""Pipeline configuration and cache keying.

A PipelineConfig is a flat set of typed keys covering backend selections
and every stage hyperparameter. It serializes to a canonical text form
(sorted key=value lines, including the package version and backend
identities) whose hash keys the artifact cache. Each stage hashes only the
keys it actually reads, chained with its prerequisite stages' hashes, so
changing one hyperparameter invalidates exactly the stages downstream of it.
"""

from __future__ import annotations

import dataclasses
import hashlib
from dataclasses import dataclass
from pathlib import Path

from . import __version__


class ConfigError(Exception):
    """Unknown key, bad value, or an unusable combination."""


@dataclass
class PipelineConfig:
    scene: str = ""
    cache_dir: str = ""  # empty: <scene>/cache
    seed: int = 0

    # backend selections
    text_backend: str = "mock"  # mock | cmd:<path>
    seg_backend: str = "gt"  # gt | noisy-gt | color
    sim_backend: str = "gt"
    matcher_backend: str = "synthetic"
    seg_model: str = "mock"
    encoder_backend: str = "tiny"
    seg_noise: float = 0.2  # noisy-gt corruption fraction

    # mining
    matcher_points: int = 150
    matcher_outliers: int = 0
    pair_budget: int = 50
    crop_attempts: int = 8
    ransac_iters: int = 500
    inlier_threshold: float = 2e-3

    # segmenter fine-tuning
    seg_epochs: int = 10
    seg_lr: float = 1e-4
    crops_per_step: int = 4
    plural_p: float = 0.5

    # retrieval fine-tuning
    clip_epochs: int = 5
    clip_lr: float = 1e-6
    clip_batch: int = 128
    vocab_min_count: int = 1
    retrieve_k: int = 8

    # radiance field (desk-scale defaults; full-scale values are the
    # FieldConfig defaults)
    field_width: int = 64
    field_depth: int = 3
    field_samples: int = 24
    pos_bands: int = 10
    dir_bands: int = 4
    app_dim: int = 8
    near: float = 0.5
    far: float = 6.0
    rgb_lr: float = 5e-4
    rgb_iters: int = 2000
    ray_batch: int = 512

    # localization
    head_lr: float = 5e-5
    head_iters: int = 500
    n_views: int = 150
    localize_prompts: str = ""  # comma list; empty = every GT category

    # benchmark propagation
    kappa_max: float = 10.0
    min_prop_inliers: int = 100
    propagate_category: str = ""
    propagate_seeds: str = ""  # comma list of seed image ids

    def canonical_text(self) -> str:
        lines = [f"package_version={__version__}"]
        for f in sorted(dataclasses.fields(self), key=lambda f: f.name):
            lines.append(f"{f.name}={getattr(self, f.name)!r}")
        return "\n".join(lines) + "\n"

    def hash(self) -> str:
        return hashlib.sha256(self.canonical_text().encode()).hexdigest()

    def subset_text(self, keys: tuple) -> str:
        lines = [f"package_version={__version__}"]
        for name in sorted(keys):
            lines.append(f"{name}={getattr(self, name)!r}")
        return "\n".join(lines) + "\n"

    def resolved_cache_dir(self) -> Path:
        return Path(self.cache_dir) if self.cache_dir else Path(self.scene) / "cache"


_COMMON_KEYS = ("scene", "seed")
_SEG_ORACLE_KEYS = ("seg_backend", "sim_backend", "seg_noise")
_MATCHER_KEYS = ("matcher_backend", "matcher_points", "matcher_outliers")

STAGE_KEYS = {
    "distill": _COMMON_KEYS + ("text_backend",),
    "mine": _COMMON_KEYS
    + _SEG_ORACLE_KEYS
    + _MATCHER_KEYS
    + ("pair_budget", "crop_attempts", "ransac_iters", "inlier_threshold"),
    "finetune-seg": _COMMON_KEYS
    + _SEG_ORACLE_KEYS
    + ("seg_model", "seg_epochs", "seg_lr", "crops_per_step", "plural_p"),
    "finetune-clip": _COMMON_KEYS
    + (
        "encoder_backend",
        "clip_epochs",
        "clip_lr",
        "clip_batch",
        "vocab_min_count",
        "retrieve_k",
    ),
    "train-field": _COMMON_KEYS
    + (
        "field_width",
        "field_depth",
        "field_samples",
        "pos_bands",
        "dir_bands",
        "app_dim",
        "near",
        "far",
        "rgb_lr",
        "rgb_iters",
        "ray_batch",
    ),
    "localize": _COMMON_KEYS
    + _SEG_ORACLE_KEYS
    + ("head_lr", "head_iters", "n_views", "localize_prompts"),
    "propagate-gt": _COMMON_KEYS
    + _MATCHER_KEYS
    + ("kappa_max", "min_prop_inliers", "propagate_category", "propagate_seeds"),
    "eval": _COMMON_KEYS,
}

STAGE_PREREQS = {
    "distill": (),
    "mine": ("distill",),
    "finetune-seg": ("mine",),
    "finetune-clip": ("distill",),
    "train-field": (),
    "localize": ("train-field",),
    "propagate-gt": (),
    "eval": ("localize", "finetune-clip"),
}

STAGES = tuple(STAGE_KEYS)


def stage_hash(config: PipelineConfig, stage: str) -> str:
    """Cache key for a stage: its own keys plus its prerequisites' hashes."""
    if stage not in STAGE_KEYS:
        raise ConfigError(f"unknown stage {stage!r}")
    text = config.subset_text(STAGE_KEYS[stage])
    for parent in STAGE_PREREQS[stage]:
        text += f"prereq:{parent}={stage_hash(config, parent)}\n"
    return hashlib.sha256(text.encode()).hexdigest()


def _parse_value(name: str, raw: str, ftype: type):
    try:
        if ftype is bool:
            if raw.lower() in ("true", "1", "yes"):
                return True
            if raw.lower() in ("false", "0", "no"):
                return False
            raise ValueError(raw)
        return ftype(raw)
    except ValueError as exc:
        raise ConfigError(f"bad value for {name}: {raw!r} ({ftype.__name__})") from exc


def load_config_file(path, base: PipelineConfig | None = None) -> PipelineConfig:
    """Parse a key=value config document; unknown keys are errors."""
    cfg = dataclasses.replace(base) if base else PipelineConfig()
    fields = {f.name: f.type for f in dataclasses.fields(PipelineConfig)}
    types = {name: type(getattr(cfg, name)) for name in fields}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise ConfigError(f"{path} line {lineno}: expected key=value")
        key, _, raw = stripped.partition("=")
        key = key.strip()
        raw = raw.strip()
        if key not in types:
            raise ConfigError(f"{path} line {lineno}: unknown key {key!r}")
        setattr(cfg, key, _parse_value(key, raw, types[key]))
    return cfg


def field_config_from(config: PipelineConfig):
    from .semantic_field import FieldConfig

    return FieldConfig(
        pos_bands=config.pos_bands,
        dir_bands=config.dir_bands,
        trunk_width=config.field_width,
        trunk_depth=config.field_depth,
        app_dim=config.app_dim,
        samples_per_ray=config.field_samples,
        near=config.near,
        far=config.far,
        rgb_lr=config.rgb_lr,
        rgb_iters=config.rgb_iters,
        ray_batch=config.ray_batch,
        head_lr=config.head_lr,
        head_iters=config.head_iters,
        seed=config.seed,
    )
