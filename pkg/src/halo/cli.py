"""Command-line pipeline driver with a content-addressed stage cache.

Each stage writes its artifacts under ``<cache_dir>/<stage>/<hash>/`` where
the hash covers the stage's own configuration keys plus the hashes of its
prerequisite stages. A completed stage directory holds ``config.txt`` (the
exact hashed text) and ``done.json`` (the artifact paths); reruns with the
same configuration return the cached paths without recomputing. Key outputs
are mirrored to canonical locations under the scene root so downstream
consumers have stable paths.
"""

from __future__ import annotations

import dataclasses
import json
import logging
import os
import shutil
from pathlib import Path

import click
import numpy as np

from . import __version__
from .config import (
    STAGE_KEYS,
    STAGE_PREREQS,
    STAGES,
    ConfigError,
    PipelineConfig,
    field_config_from,
    load_config_file,
    stage_hash,
)
from .core_data import (
    BinaryMask,
    ProbMap,
    Rect,
    binarize,
    load_image,
    load_scene,
    read_probmap,
    write_probmap,
)

log = logging.getLogger(__name__)


class StageError(Exception):
    """Missing prerequisite, integrity mismatch, or a held lock."""


# ---------------------------------------------------------------------------
# backend factories


def _make_gt_segmenter(config: PipelineConfig, manifest):
    from .backends import GtSegmenter

    return GtSegmenter(config.scene, manifest)


def make_seg_backend(config: PipelineConfig, manifest):
    from .backends import NoisySegmenter

    if config.seg_backend == "gt":
        return _make_gt_segmenter(config, manifest)
    if config.seg_backend == "noisy-gt":
        return NoisySegmenter(
            _make_gt_segmenter(config, manifest), config.seg_noise, config.seed
        )
    if config.seg_backend == "color":
        return _scene_segmenter(config)
    raise ConfigError(f"unknown seg backend {config.seg_backend!r}")


def _scene_segmenter(config: PipelineConfig):
    from .synthetic import SyntheticSceneSpec, scene_color_segmenter

    spec_path = Path(config.scene) / "scene_spec.json"
    if not spec_path.is_file():
        raise ConfigError("seg_backend 'color' needs scene_spec.json in the scene")
    spec = SyntheticSceneSpec.from_dict(json.loads(spec_path.read_text()))
    return scene_color_segmenter(spec)


def make_sim_backend(config: PipelineConfig, manifest):
    from .backends import GtSim

    if config.sim_backend == "gt":
        return GtSim(_make_gt_segmenter(config, manifest))
    raise ConfigError(f"unknown sim backend {config.sim_backend!r}")


def make_matcher(config: PipelineConfig):
    from .backends import SyntheticMatcher

    if config.matcher_backend == "synthetic":
        return SyntheticMatcher(
            n_points=config.matcher_points,
            n_outliers=config.matcher_outliers,
            seed=config.seed,
        )
    raise ConfigError(f"unknown matcher backend {config.matcher_backend!r}")


def make_seg_model(config: PipelineConfig):
    from .backends import MockSegModel

    if config.seg_model == "mock":
        return MockSegModel(seed=config.seed)
    raise ConfigError(f"unknown seg model {config.seg_model!r}")


def make_encoder(config: PipelineConfig):
    from .backends import TinyRetrievalEncoder

    if config.encoder_backend == "tiny":
        return TinyRetrievalEncoder(seed=config.seed)
    raise ConfigError(f"unknown encoder backend {config.encoder_backend!r}")


# ---------------------------------------------------------------------------
# cache machinery


def _stage_text(config: PipelineConfig, stage: str) -> str:
    text = config.subset_text(STAGE_KEYS[stage])
    for parent in STAGE_PREREQS[stage]:
        text += f"prereq:{parent}={stage_hash(config, parent)}\n"
    return text


def stage_dir(config: PipelineConfig, stage: str) -> Path:
    return config.resolved_cache_dir() / stage / stage_hash(config, stage)


def run_stage(config: PipelineConfig, stage: str, force: bool = False) -> dict:
    """Execute a stage (or return its cached artifacts). Returns a dict of
    artifact paths. Raises StageError when a prerequisite stage has not
    completed or a cached directory fails its integrity check."""
    if stage not in STAGES:
        raise ConfigError(f"unknown stage {stage!r}")
    if not config.scene:
        raise ConfigError("no scene configured (set scene= or pass --scene)")
    sdir = stage_dir(config, stage)
    done_path = sdir / "done.json"
    expected = _stage_text(config, stage)

    if done_path.is_file():
        recorded = (sdir / "config.txt").read_text() if (sdir / "config.txt").is_file() else None
        if recorded != expected:
            if not force:
                raise StageError(
                    f"stage {stage!r}: cached config.txt does not match this "
                    f"configuration (cache dir {sdir}); pass --force to recompute"
                )
        else:
            log.info("stage %s: cache hit at %s", stage, sdir)
            return json.loads(done_path.read_text())["artifacts"]

    for parent in STAGE_PREREQS[stage]:
        if not (stage_dir(config, parent) / "done.json").is_file():
            raise StageError(
                f"stage {stage!r} requires completed stage {parent!r}; "
                f"run `halo {parent}` first"
            )

    sdir.mkdir(parents=True, exist_ok=True)
    lock = sdir / "lock"
    if lock.exists() and not force:
        raise StageError(
            f"stage {stage!r} is locked ({lock}); another run may be active, "
            f"pass --force to steal the lock"
        )
    lock.write_text(f"{os.getpid()}\n")
    try:
        artifacts = _STAGE_IMPLS[stage](config, sdir)
        (sdir / "config.txt").write_text(expected)
        done_path.write_text(
            json.dumps(
                {"stage": stage, "version": __version__, "artifacts": artifacts},
                sort_keys=True,
                indent=2,
            )
            + "\n"
        )
    finally:
        lock.unlink(missing_ok=True)
    return artifacts


def _mirror_file(src, dst) -> str:
    dst = Path(dst)
    dst.parent.mkdir(parents=True, exist_ok=True)
    shutil.copyfile(src, dst)
    return str(dst)


def _mirror_tree(src, dst) -> str:
    dst = Path(dst)
    if dst.exists():
        shutil.rmtree(dst)
    shutil.copytree(src, dst)
    return str(dst)


# ---------------------------------------------------------------------------
# stage implementations


def _stage_distill(config: PipelineConfig, sdir: Path) -> dict:
    from .backends import make_text_backend
    from .distill import distill_scene, write_pseudolabels

    manifest = load_scene(config.scene)
    backend = make_text_backend(config.text_backend, seed=config.seed)
    labels = distill_scene(manifest, backend)
    out = sdir / "pseudolabels.jsonl"
    write_pseudolabels(labels, out)
    n_valid = sum(1 for pl in labels if pl.valid)
    log.info("distilled %d labels (%d valid)", len(labels), n_valid)
    mirror = _mirror_file(out, Path(config.scene) / "pseudolabels.jsonl")
    return {"pseudolabels": str(out), "mirror": mirror, "valid": n_valid}


def _stage_mine(config: PipelineConfig, sdir: Path) -> dict:
    from .distill import read_pseudolabels
    from .mining import MiningConfig, mine_scene, write_mining_report

    manifest = load_scene(config.scene)
    labels = read_pseudolabels(run_stage(config, "distill")["pseudolabels"])
    report = mine_scene(
        manifest,
        labels,
        make_matcher(config),
        make_seg_backend(config, manifest),
        make_sim_backend(config, manifest),
        MiningConfig(
            pair_budget=config.pair_budget,
            crop_attempts_per_image=config.crop_attempts,
            seed=config.seed,
            ransac_iters=config.ransac_iters,
            inlier_threshold=config.inlier_threshold,
        ),
    )
    paths = write_mining_report(report, sdir)
    log.info(
        "mined %d zoom pairs, %d crops", len(report.zoom_pairs), len(report.crops)
    )
    mirror = _mirror_tree(sdir / "mined", Path(config.scene) / "mined")
    paths["mirror"] = mirror
    paths["n_zoom_pairs"] = len(report.zoom_pairs)
    paths["n_crops"] = len(report.crops)
    return paths


def _read_mined_items(config: PipelineConfig, manifest, mined_paths: dict):
    from .vlm_adapt import CorrespItem, CropItem

    mined_root = Path(mined_paths["zoom_pairs"]).parent
    corresp = []
    for line in Path(mined_paths["zoom_pairs"]).read_text().splitlines():
        if not line.strip():
            continue
        obj = json.loads(line)
        rec = manifest.record(obj["zoomed_out_id"])
        corresp.append(
            CorrespItem(
                record=rec,
                image=load_image(rec),
                label=obj["label"],
                target=read_probmap(mined_root / obj["target"]).values,
                valid=read_probmap(mined_root / obj["valid"]).values >= 0.5,
            )
        )
    crops = []
    for line in Path(mined_paths["crops"]).read_text().splitlines():
        if not line.strip():
            continue
        obj = json.loads(line)
        rec = manifest.record(obj["image_id"])
        x0, y0, x1, y1 = obj["rect"]
        crops.append(
            CropItem(
                record=rec,
                image=load_image(rec),
                rect=Rect(x0, y0, x1, y1),
                label=obj["label"],
                target=read_probmap(mined_root / obj["target"]).values,
            )
        )
    return corresp, crops


def _stage_finetune_seg(config: PipelineConfig, sdir: Path) -> dict:
    from .checkpoints import save_checkpoint, state_dict_arrays
    from .vlm_adapt import SegSchedule, finetune_segmenter

    manifest = load_scene(config.scene)
    corresp, crops = _read_mined_items(config, manifest, run_stage(config, "mine"))
    if not corresp:
        raise StageError(
            "mining produced no zoom pairs; nothing to fine-tune the segmenter on"
        )
    model = make_seg_model(config)
    frozen_oracle = make_seg_model(config)  # same seed = the pre-training state
    result = finetune_segmenter(
        model,
        corresp,
        crops,
        frozen_oracle,
        make_sim_backend(config, manifest),
        SegSchedule(
            epochs=config.seg_epochs,
            lr=config.seg_lr,
            crops_per_step=config.crops_per_step,
            plural_p=config.plural_p,
            seed=config.seed,
        ),
    )
    ckpt = sdir / "seg_model.ckpt"
    save_checkpoint(
        ckpt,
        "seg_model",
        state_dict_arrays(result.model),
        {"seg_model": config.seg_model, "seed": config.seed},
    )
    losses = sdir / "losses.jsonl"
    losses.write_text(
        "\n".join(
            json.dumps(
                {
                    "corresp": r.l_corresp,
                    "crop": r.l_crop,
                    "consistency": r.l_consistency,
                    "reg": r.l_reg,
                },
                sort_keys=True,
            )
            for r in result.reports
        )
        + ("\n" if result.reports else "")
    )
    mirror = _mirror_file(ckpt, Path(config.scene) / "checkpoints" / "seg_model.ckpt")
    return {
        "checkpoint": str(ckpt),
        "losses": str(losses),
        "mirror": mirror,
        "steps": len(result.reports),
        "skipped_empty": result.skipped_empty,
    }


def _retrieval_pairs(config: PipelineConfig, manifest, labels):
    from .mining import refine_label

    pairs = []
    gold = {}
    for pl in labels:
        if not pl.valid:
            continue
        refined = refine_label(pl.cleaned)
        if refined is None:
            continue
        rec = manifest.record(pl.image_id)
        pairs.append((load_image(rec), refined))
        gold[pl.image_id] = refined
    return pairs, gold


def _stage_finetune_clip(config: PipelineConfig, sdir: Path) -> dict:
    from collections import Counter

    from .checkpoints import save_checkpoint, state_dict_arrays
    from .distill import read_pseudolabels
    from .vlm_adapt import RetrievalSchedule, retrieve_terms, train_retrieval

    manifest = load_scene(config.scene)
    labels = read_pseudolabels(run_stage(config, "distill")["pseudolabels"])
    pairs, gold = _retrieval_pairs(config, manifest, labels)
    if len(pairs) < 2:
        raise StageError("fewer than 2 usable (image, label) pairs for retrieval")
    counts = Counter(term for _, term in pairs)
    vocab = sorted(t for t, c in counts.items() if c >= config.vocab_min_count)
    encoder = train_retrieval(
        make_encoder(config),
        pairs,
        RetrievalSchedule(
            epochs=config.clip_epochs,
            lr=config.clip_lr,
            batch_size=config.clip_batch,
            seed=config.seed,
        ),
    )
    ckpt = sdir / "retrieval.ckpt"
    save_checkpoint(
        ckpt,
        "retrieval",
        state_dict_arrays(encoder),
        {"encoder": config.encoder_backend, "seed": config.seed, "vocab": vocab},
    )
    k = min(max(config.retrieve_k, 1), len(vocab))
    rankings = {}
    for rec in sorted(manifest.images, key=lambda r: r.id):
        if rec.id in gold:
            rankings[rec.id] = retrieve_terms(load_image(rec), vocab, k, encoder)
    rank_path = sdir / "rankings.json"
    rank_path.write_text(
        json.dumps({"vocab": vocab, "gold": gold, "rankings": rankings}, sort_keys=True, indent=2)
        + "\n"
    )
    mirror = _mirror_file(ckpt, Path(config.scene) / "checkpoints" / "retrieval.ckpt")
    return {
        "checkpoint": str(ckpt),
        "rankings": str(rank_path),
        "mirror": mirror,
        "vocab_size": len(vocab),
    }


def _stage_train_field(config: PipelineConfig, sdir: Path) -> dict:
    from .semantic_field import (
        appearance_for,
        psnr,
        render_view,
        save_backbone,
        train_rgb_field,
    )

    manifest = load_scene(config.scene)
    posed = sorted(
        (r for r in manifest.images if r.camera is not None), key=lambda r: r.id
    )
    if not posed:
        raise StageError("scene has no posed images; cannot train the field")
    images = {rec.id: load_image(rec) for rec in posed}
    backbone = train_rgb_field(posed, images, field_config_from(config))
    ckpt = sdir / "field.ckpt"
    save_backbone(ckpt, backbone, num_images=len(posed))

    per_view = {}
    for idx, rec in enumerate(posed):
        rgb, _ = render_view(
            backbone,
            rec.camera,
            rec.width,
            rec.height,
            appearance=appearance_for(backbone, idx),
        )
        per_view[rec.id] = psnr(rgb, images[rec.id])
    metrics = {
        "mean_psnr": float(np.mean(list(per_view.values()))),
        "per_view_psnr": per_view,
    }
    metrics_path = sdir / "metrics.json"
    metrics_path.write_text(json.dumps(metrics, sort_keys=True, indent=2) + "\n")
    mirror = _mirror_file(ckpt, Path(config.scene) / "checkpoints" / "field.ckpt")
    return {
        "checkpoint": str(ckpt),
        "metrics": str(metrics_path),
        "mirror": mirror,
        "mean_psnr": metrics["mean_psnr"],
    }


def _prompt_list(config: PipelineConfig) -> list:
    if config.localize_prompts.strip():
        return [p.strip() for p in config.localize_prompts.split(",") if p.strip()]
    gt_root = Path(config.scene) / "gt"
    if not gt_root.is_dir():
        raise ConfigError(
            "no localize_prompts configured and the scene has no gt/ directory "
            "to discover categories from"
        )
    prompts = sorted(d.name for d in gt_root.iterdir() if d.is_dir() and d.name != "facade")
    if not prompts:
        raise ConfigError("no localization prompts found under gt/")
    return prompts


def _slug(prompt: str) -> str:
    return "".join(c if c.isalnum() else "_" for c in prompt.strip().lower())


def _stage_localize(config: PipelineConfig, sdir: Path) -> dict:
    from .semantic_field import load_backbone, localize, save_head

    manifest = load_scene(config.scene)
    backbone = load_backbone(run_stage(config, "train-field")["checkpoint"])
    seg = make_seg_backend(config, manifest)
    seg_pixels = getattr(seg, "segment_pixels", None)
    prompts = _prompt_list(config)
    fcfg = field_config_from(config)

    entries = {}
    rerenders: dict = {}  # rgb renders are prompt-independent; share them
    for prompt in prompts:
        result = localize(
            backbone,
            manifest.images,
            prompt,
            seg_view=lambda rec, p=prompt: seg.segment(rec, p),
            seg_pixels=seg_pixels,
            config=fcfg,
            n_views=config.n_views,
            rerenders=rerenders,
        )
        pdir = sdir / _slug(prompt)
        maps_dir = pdir / "maps"
        maps_dir.mkdir(parents=True, exist_ok=True)
        for image_id, pmap in result.semantic_maps.items():
            write_probmap(pmap, maps_dir / f"{image_id}.png")
        save_head(pdir / "head.ckpt", result.head, prompt)
        (pdir / "ranking.json").write_text(
            json.dumps(
                {
                    "prompt": prompt,
                    "overlap_ranking": result.overlap_ranking,
                    "selected_views": result.selected_views,
                },
                sort_keys=True,
                indent=2,
            )
            + "\n"
        )
        entries[prompt] = str(pdir)
        log.info("localized %r over %d views", prompt, len(result.semantic_maps))
    mirror = _mirror_tree(sdir, Path(config.scene) / "localization")
    return {"root": str(sdir), "prompts": prompts, "dirs": entries, "mirror": mirror}


def _gt_mask_for(config: PipelineConfig, category: str, image_id: str):
    path = Path(config.scene) / "gt" / category / f"{image_id}.png"
    if not path.is_file():
        return None
    return binarize(read_probmap(path), 0.5)


def _stage_propagate_gt(config: PipelineConfig, sdir: Path) -> dict:
    from .bench_eval import SeedAnnotation, propagate_masks, write_review_manifest
    from .core_data import write_binary_mask
    from .mining import robust_match

    if not config.propagate_category:
        raise ConfigError("propagate_category is required for propagate-gt")
    category = config.propagate_category
    manifest = load_scene(config.scene)
    seed_ids = [s.strip() for s in config.propagate_seeds.split(",") if s.strip()]
    if not seed_ids:
        raise ConfigError("propagate_seeds is required for propagate-gt")

    seeds = []
    for sid in seed_ids:
        mask = _gt_mask_for(config, category, sid)
        if mask is None:
            raise StageError(f"no {category!r} ground truth for seed image {sid!r}")
        seeds.append(SeedAnnotation(image_id=sid, category=category, mask=mask))

    matcher = make_matcher(config)
    matches = []
    targets = {}
    records = sorted(manifest.images, key=lambda r: r.id)
    for rec in records:
        if rec.id not in seed_ids:
            targets[rec.id] = (rec.height, rec.width)
    for sid in seed_ids:
        seed_rec = manifest.record(sid)
        for rec in records:
            if rec.id == sid:
                continue
            m = robust_match(
                seed_rec,
                rec,
                matcher,
                seed=config.seed,
                ransac_iters=config.ransac_iters,
                inlier_threshold=config.inlier_threshold,
            )
            if m is not None:
                matches.append(m)

    propagated, review = propagate_masks(
        seeds,
        matches,
        targets,
        kappa_max=config.kappa_max,
        min_inliers=config.min_prop_inliers,
    )
    out_dir = sdir / "propagated" / category
    out_dir.mkdir(parents=True, exist_ok=True)
    for ann in propagated:
        write_binary_mask(ann.mask, out_dir / f"{ann.image_id}.png")
    review_path = sdir / "review.jsonl"
    write_review_manifest(review, review_path)
    summary = {
        "category": category,
        "seeds": seed_ids,
        "propagated": sorted(a.image_id for a in propagated),
    }
    (sdir / "summary.json").write_text(json.dumps(summary, sort_keys=True, indent=2) + "\n")
    mirror = _mirror_tree(sdir / "propagated", Path(config.scene) / "propagated")
    return {
        "propagated": str(sdir / "propagated"),
        "review": str(review_path),
        "summary": str(sdir / "summary.json"),
        "mirror": mirror,
        "n_propagated": len(propagated),
    }


def _stage_eval(config: PipelineConfig, sdir: Path) -> dict:
    from .bench_eval import (
        NoPositivesError,
        aggregate_map,
        pooled_cell_ap,
        recall_at_k,
    )

    manifest = load_scene(config.scene)
    loc = run_stage(config, "localize")
    clip = run_stage(config, "finetune-clip")

    cells = {}
    skipped = []
    for prompt in loc["prompts"]:
        maps_dir = Path(loc["dirs"][prompt]) / "maps"
        preds, gts = [], []
        for rec in sorted(manifest.images, key=lambda r: r.id):
            map_path = maps_dir / f"{rec.id}.png"
            gt = _gt_mask_for(config, _slug(prompt), rec.id)
            if not map_path.is_file() or gt is None:
                continue
            preds.append(read_probmap(map_path))
            gts.append(gt)
        if not preds:
            skipped.append(prompt)
            continue
        try:
            cells[(manifest.landmark_name, prompt)] = pooled_cell_ap(preds, gts)
        except NoPositivesError:
            skipped.append(prompt)
    if not cells:
        raise StageError("no evaluable (landmark, category) cells")
    table = aggregate_map(cells)

    rank_doc = json.loads(Path(clip["rankings"]).read_text())
    recalls, excluded = recall_at_k(rank_doc["rankings"], rank_doc["gold"])

    doc = {
        "landmark": manifest.landmark_name,
        "segmentation": table.to_json(),
        "skipped_categories": sorted(skipped),
        "retrieval": {
            "recall_at_k": {str(k): v for k, v in recalls.items()},
            "excluded": excluded,
        },
    }
    out = sdir / "eval.json"
    out.write_text(json.dumps(doc, sort_keys=True, indent=2) + "\n")
    mirror = _mirror_file(out, Path(config.scene) / "eval.json")
    return {"eval": str(out), "mirror": mirror, "map": table.map_score}


_STAGE_IMPLS = {
    "distill": _stage_distill,
    "mine": _stage_mine,
    "finetune-seg": _stage_finetune_seg,
    "finetune-clip": _stage_finetune_clip,
    "train-field": _stage_train_field,
    "localize": _stage_localize,
    "propagate-gt": _stage_propagate_gt,
    "eval": _stage_eval,
}


# ---------------------------------------------------------------------------
# click commands


def _build_config(ctx) -> PipelineConfig:
    params = ctx.obj
    cfg = PipelineConfig()
    if params["config"]:
        cfg = load_config_file(params["config"], cfg)
    for key in ("scene", "cache_dir", "seed"):
        if params.get(key) is not None:
            setattr(cfg, key, params[key])
    return cfg


@click.group()
@click.option("--config", type=click.Path(exists=True, dir_okay=False), default=None, help="Key=value configuration file.")
@click.option("--scene", type=click.Path(file_okay=False), default=None, help="Scene root directory.")
@click.option("--cache-dir", type=click.Path(file_okay=False), default=None, help="Stage cache root (default: <scene>/cache).")
@click.option("--seed", type=int, default=None, help="Global pipeline seed.")
@click.option("--force", is_flag=True, help="Recompute despite cache integrity mismatches or locks.")
@click.option("-v", "--verbose", is_flag=True, help="Info-level logging.")
@click.version_option(version=__version__, prog_name="halo")
@click.pass_context
def main(ctx, config, scene, cache_dir, seed, force, verbose):
    """Scene pipeline: pseudo-label distillation, sample mining, model
    adaptation, 3D localization, benchmark propagation, and evaluation."""
    logging.basicConfig(
        level=logging.INFO if verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    ctx.obj = {
        "config": config,
        "scene": scene,
        "cache_dir": cache_dir,
        "seed": seed,
        "force": force,
    }


def _run(ctx, stage: str, **overrides):
    cfg = _build_config(ctx)
    for key, value in overrides.items():
        if value is not None:
            setattr(cfg, key, value)
    try:
        artifacts = run_stage(cfg, stage, force=ctx.obj["force"])
    except (ConfigError, StageError, FileNotFoundError) as exc:
        raise click.ClickException(str(exc)) from exc
    click.echo(f"[{stage}] done")
    for key in sorted(artifacts):
        click.echo(f"  {key}: {artifacts[key]}")
    return artifacts


@main.command("make-scene")
@click.argument("out_root", type=click.Path(file_okay=False))
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--ring-views", type=int, default=20, show_default=True)
@click.option("--closeups", type=int, default=2, show_default=True, help="Close-up views per category.")
@click.option("--width", type=int, default=96, show_default=True)
@click.option("--height", type=int, default=72, show_default=True)
def make_scene_cmd(out_root, seed, ring_views, closeups, width, height):
    """Generate a synthetic planar-facade scene with ground truth."""
    from .synthetic import SyntheticSceneSpec, make_synthetic_scene

    spec = SyntheticSceneSpec(
        seed=seed,
        n_ring_views=ring_views,
        closeups_per_category=closeups,
        image_width=width,
        image_height=height,
    )
    try:
        manifest = make_synthetic_scene(spec, out_root)
    except FileExistsError as exc:
        raise click.ClickException(str(exc)) from exc
    click.echo(f"wrote {len(manifest.images)} views to {out_root}")


@main.command("show-config")
@click.pass_context
def show_config_cmd(ctx):
    """Print the resolved configuration and each stage's cache key."""
    cfg = _build_config(ctx)
    click.echo(cfg.canonical_text(), nl=False)
    for stage in STAGES:
        click.echo(f"stage_hash[{stage}]={stage_hash(cfg, stage)}")


@main.command("distill")
@click.pass_context
def distill_cmd(ctx):
    """Generate and clean pseudo-labels for every image."""
    _run(ctx, "distill")


@main.command("mine")
@click.pass_context
def mine_cmd(ctx):
    """Mine zoom-pair correspondences and informative crops."""
    _run(ctx, "mine")


@main.command("finetune-seg")
@click.pass_context
def finetune_seg_cmd(ctx):
    """Fine-tune the segmenter decoder on mined samples."""
    _run(ctx, "finetune-seg")


@main.command("finetune-clip")
@click.pass_context
def finetune_clip_cmd(ctx):
    """Fine-tune the retrieval encoder on (image, pseudo-label) pairs."""
    _run(ctx, "finetune-clip")


@main.command("train-field")
@click.pass_context
def train_field_cmd(ctx):
    """Fit the volumetric RGB field to all posed views."""
    _run(ctx, "train-field")


@main.command("localize")
@click.option("--prompts", default=None, help="Comma-separated prompt list (default: scene GT categories).")
@click.pass_context
def localize_cmd(ctx, prompts):
    """Train semantic heads and render 3D localization maps per prompt."""
    _run(ctx, "localize", localize_prompts=prompts)


@main.command("propagate-gt")
@click.option("--category", default=None, help="Benchmark category to propagate.")
@click.option("--seeds", default=None, help="Comma-separated seed image ids.")
@click.pass_context
def propagate_gt_cmd(ctx, category, seeds):
    """Propagate seed masks to connected images via verified homographies."""
    _run(ctx, "propagate-gt", propagate_category=category, propagate_seeds=seeds)


@main.command("eval")
@click.pass_context
def eval_cmd(ctx):
    """Score localization maps against ground truth; write eval.json."""
    _run(ctx, "eval")


@main.command("run-all")
@click.pass_context
def run_all_cmd(ctx):
    """Run every stage in dependency order (except propagate-gt)."""
    for stage in ("distill", "mine", "finetune-seg", "finetune-clip", "train-field", "localize", "eval"):
        _run(ctx, stage)


if __name__ == "__main__":
    main()
