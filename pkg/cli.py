#!/usr/bin/env python3
"""
pandense command line
synth | prepare | pretrain | train | eval | export | verify
"""

import argparse
import glob
import logging
import math
import os
import sys
from multiprocessing.pool import ThreadPool
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from threadpoolctl import threadpool_limits

from config import RunConfig, env_log_level, resolve_config
from datapipe import (
    Manifest,
    balance_clusters,
    cluster_density_levels,
    crop_patch_pixels,
    extract_patches,
    level_sizes,
    load_manifest,
    resize_annotation,
    save_manifest,
)
from geometry import PointAnnotation, generate_density_map, sum_pool_downsample
from metrics import evaluate, infer_density_map
from padnet_model import build_model
from storage import (
    MANIFEST_NAME,
    load_annotation,
    load_checkpoint,
    load_raster,
    read_dmap,
    resize_raster,
    save_annotation,
    save_checkpoint,
    save_heatmap,
    save_raster,
    to_network_input,
    write_dmap,
)
from synthgen import generate_dataset
from training import PatchSet, ResumePoint, TrainLog, joint_train, pretrain_subnetworks

logger = logging.getLogger(__name__)

IMAGE_EXTENSIONS = (".png", ".pgm", ".jpg", ".jpeg")
SCENE_INDEX = "scenes.csv"
GT_DIR = "gt"
TRAIN_LOG = "train_log.jsonl"


# ---------------------------------------------------------------------------
# Dataset helpers
# ---------------------------------------------------------------------------

def find_image(data_dir: str, name: str) -> str:
    for ext in IMAGE_EXTENSIONS:
        path = os.path.join(data_dir, "images", name + ext)
        if os.path.exists(path):
            return path
    raise FileNotFoundError(f"no image for {name!r} under {os.path.join(data_dir, 'images')}")


def load_annotations(data_dir: str) -> List[PointAnnotation]:
    paths = sorted(glob.glob(os.path.join(data_dir, "annotations", "*.json")))
    if not paths:
        raise ValueError(f"no annotation files found in {os.path.join(data_dir, 'annotations')}")
    annotations = []
    for path in paths:
        ann = load_annotation(path)
        ann.image = ann.image or os.path.splitext(os.path.basename(path))[0]
        annotations.append(ann)
    return annotations


def load_labels(data_dir: str, names: Sequence[str]) -> Optional[List[str]]:
    path = os.path.join(data_dir, SCENE_INDEX)
    if not os.path.exists(path):
        return None
    index = pd.read_csv(path, dtype={"name": str, "label": str}).set_index("name")["label"]
    if not set(names) <= set(index.index):
        logger.warning(f"⚠️ {path} does not label every image; skipping the per-label breakdown")
        return None
    return [index[name] for name in names]


def patch_ground_truth(args: Tuple) -> np.ndarray:
    record, kernel, downsample = args
    density = generate_density_map(record.annotation(), kernel)
    return sum_pool_downsample(density, downsample).values.astype(np.float32)


def gt_path(manifest_path: str, index: int) -> str:
    return os.path.join(os.path.dirname(os.path.abspath(manifest_path)), GT_DIR, f"{index:06d}.dmap")


def load_patch_set(manifest_path: str, data_dir: str, cfg: RunConfig) -> Tuple[PatchSet, Manifest]:
    """
    Cut every manifest patch out of its resized source image and pair it with its ground truth.

    Ground truth comes from the DMAP files written by prepare, or is rebuilt
    when they are missing.
    """
    manifest = load_manifest(manifest_path)
    unassigned = [i for i, r in enumerate(manifest.records) if r.level < 0]
    if unassigned:
        raise ValueError(f"{manifest_path}: patches {unassigned[:5]} have no density level")
    if manifest.clustering.N != cfg.model.N:
        raise ValueError(f"{manifest_path} has {manifest.clustering.N} density levels but model.N is {cfg.model.N}")

    channels = cfg.model.input_channels
    downsample = cfg.model.downsample
    sources: Dict[str, np.ndarray] = {}
    images, maps = [], []
    for index, record in enumerate(manifest.records):
        if record.source_image not in sources:
            pixels = load_raster(find_image(data_dir, record.source_image), channels)
            sources[record.source_image] = resize_raster(pixels, manifest.resize_to)
        images.append(to_network_input(crop_patch_pixels(sources[record.source_image], record)))
        path = gt_path(manifest_path, index)
        gt = read_dmap(path) if os.path.exists(path) else patch_ground_truth((record, cfg.kernel, downsample))
        maps.append(gt)
    # flipped twins and balance duplicates share a source crop
    groups, _ = pd.factorize([f"{r.source_image}:{r.crop}" for r in manifest.records])
    data = PatchSet(np.stack(images).astype(np.float32), np.stack(maps)[:, None].astype(np.float32),
                    np.array([r.level for r in manifest.records]), groups)
    if data.gt.shape[2] * downsample != data.images.shape[2]:
        raise ValueError(
            f"ground truth {data.gt.shape[2:]} does not match patches {data.images.shape[2:]} "
            f"at downsampling {downsample}; rerun prepare with the same model.fen"
        )
    logger.info(f"Loaded {len(data)} patches, level sizes {level_sizes(manifest.records, manifest.clustering.N)}")
    return data, manifest


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def cmd_synth(args, cfg: RunConfig) -> int:
    out_dir = args.out
    os.makedirs(os.path.join(out_dir, "images"), exist_ok=True)
    os.makedirs(os.path.join(out_dir, "annotations"), exist_ok=True)
    scenes = generate_dataset(args.profile, args.M, seed=cfg.seed, size=cfg.data.image_size)
    rows = []
    for scene in scenes:
        name = scene.annotation.image
        save_raster(os.path.join(out_dir, "images", f"{name}.png"), scene.image)
        save_annotation(os.path.join(out_dir, "annotations", f"{name}.json"), scene.annotation)
        rows.append({"name": name, "label": scene.label, "count": scene.annotation.count,
                     "width": scene.annotation.width, "height": scene.annotation.height})
    pd.DataFrame(rows).to_csv(os.path.join(out_dir, SCENE_INDEX), index=False)
    cfg.save(out_dir)
    print(f"✅ Wrote {len(scenes)} {args.profile} scenes to {out_dir}")
    return 0


def cmd_prepare(args, cfg: RunConfig) -> int:
    data_dir = args.data or cfg.data.data_dir
    out_manifest = args.out or os.path.join(data_dir, "manifest.json")
    resize_to, Q, N = cfg.data.resize_to, cfg.data.Q, cfg.model.N

    records, sources = [], {}
    for index, ann in enumerate(load_annotations(data_dir)):
        pixels = load_raster(find_image(data_dir, ann.image), cfg.model.input_channels)
        records.extend(extract_patches(pixels, ann, resize_to=resize_to, Q=Q, seed=cfg.seed + index,
                                       n_random=cfg.data.n_random))
        sources[ann.image] = resize_annotation(ann, resize_to)

    clustering = cluster_density_levels([r.D for r in records], N, seed=cfg.seed)
    for record, level in zip(records, clustering.assignments):
        record.level = level
    if N > 1:
        records = balance_clusters(records, clustering, sources, seed=cfg.seed, Q=Q,
                                   patch_size=resize_to // 2, budget_factor=cfg.data.budget_factor)
    clustering.assignments = [r.level for r in records]

    os.makedirs(os.path.dirname(os.path.abspath(out_manifest)), exist_ok=True)
    save_manifest(records, clustering, out_manifest, resize_to, Q)
    os.makedirs(os.path.dirname(gt_path(out_manifest, 0)), exist_ok=True)
    jobs = [(record, cfg.kernel, cfg.model.downsample) for record in records]
    with ThreadPool(processes=cfg.threads) as pool:
        maps = pool.map(patch_ground_truth, jobs)
    for index, values in enumerate(maps):
        write_dmap(gt_path(out_manifest, index), values)
    cfg.save(os.path.dirname(os.path.abspath(out_manifest)))
    print(f"✅ Manifest {out_manifest}: {len(records)} patches, levels {level_sizes(records, N)}")
    return 0


def _resume_point(directory: str, phase: str, cfg: RunConfig):
    last_dir = os.path.join(directory, "last")
    if not os.path.exists(os.path.join(last_dir, MANIFEST_NAME)):
        logger.warning(f"⚠️ Nothing to resume in {last_dir}; starting fresh")
        return None, None
    model, extra = load_checkpoint(last_dir, expected_spec=cfg.model)
    if extra.get("phase") != phase:
        raise ValueError(f"{last_dir} holds a {extra.get('phase')!r} run, not {phase!r}")
    best_state = None
    best_dir = os.path.join(directory, "best")
    if extra.get("best_mae") is not None and os.path.exists(os.path.join(best_dir, MANIFEST_NAME)):
        best_model, best_extra = load_checkpoint(best_dir, expected_spec=cfg.model)
        if best_extra.get("level") == extra.get("level"):
            best_state = best_model.state_dict()
    point = ResumePoint(
        level=extra.get("level"),
        epoch=int(extra["epoch"]) + 1,
        best_mae=math.inf if best_state is None else float(extra["best_mae"]),
        best_state=best_state,
    )
    logger.info(f"Resuming {phase} at level {point.level}, epoch {point.epoch}")
    return model, point


def _progress_saver(model, directory: str):
    def on_epoch_end(phase, level, epoch, best_mae, improved):
        extra = {"phase": phase, "level": level, "epoch": epoch,
                 "best_mae": None if math.isinf(best_mae) else best_mae}
        save_checkpoint(model, os.path.join(directory, "last"), extra)
        if improved:
            save_checkpoint(model, os.path.join(directory, "best"), extra)
    return on_epoch_end


def cmd_pretrain(args, cfg: RunConfig) -> int:
    data, _ = load_patch_set(args.manifest, args.data or cfg.data.data_dir, cfg)
    out_dir = args.out
    os.makedirs(out_dir, exist_ok=True)
    cfg.save(out_dir)

    model, resume = (None, None)
    if args.resume:
        model, resume = _resume_point(out_dir, "pretrain", cfg)
    if model is None:
        model = build_model(cfg.model, seed=cfg.seed)

    def on_level_end(level: int) -> None:
        save_checkpoint(model, os.path.join(out_dir, f"level_{level}"), {"phase": "pretrain", "level": level})

    log = TrainLog(os.path.join(out_dir, TRAIN_LOG))
    pretrain_subnetworks(model, data.by_level(cfg.model.N), cfg.train, log, resume=resume,
                         on_epoch_end=_progress_saver(model, out_dir), on_level_end=on_level_end)
    save_checkpoint(model, os.path.join(out_dir, "pretrained"), {"phase": "pretrained"})
    for key, best in sorted(log.best.items()):
        print(f"  {key}: best validation MAE {best['val_mae']:.4f} at epoch {best['epoch']}")
    print(f"✅ Pretrained {cfg.model.N} subnetworks into {out_dir}")
    return 0


def cmd_train(args, cfg: RunConfig) -> int:
    if args.pretrained is None and not args.no_pretrain:
        raise ValueError("train needs --pretrained DIR, or --no-pretrain to skip subnetwork pretraining")
    data, _ = load_patch_set(args.manifest, args.data or cfg.data.data_dir, cfg)
    out_dir = args.out
    os.makedirs(out_dir, exist_ok=True)
    cfg.save(out_dir)

    model, resume = (None, None)
    if args.resume:
        model, resume = _resume_point(out_dir, "joint", cfg)
    if model is None and args.pretrained:
        source = os.path.join(args.pretrained, "pretrained")
        if not os.path.exists(os.path.join(source, MANIFEST_NAME)):
            source = args.pretrained
        model, _ = load_checkpoint(source, expected_spec=cfg.model)
    if model is None:
        model = build_model(cfg.model, seed=cfg.seed)

    log = TrainLog(os.path.join(out_dir, TRAIN_LOG))
    joint_train(model, data, cfg.train, log, resume=resume, on_epoch_end=_progress_saver(model, out_dir))
    best = log.best.get("joint", {})
    save_checkpoint(model, os.path.join(out_dir, "model"),
                    {"phase": "joint", **best, "level_accuracy": log.level_accuracy})
    print(f"✅ Trained PaDNet-{cfg.model.N}: best validation MAE {best.get('val_mae', float('nan')):.4f}, "
          f"checkpoint {os.path.join(out_dir, 'model')}")
    return 0


def cmd_eval(args, cfg: RunConfig) -> int:
    model, _ = load_checkpoint(args.checkpoint)
    data_dir = args.data or cfg.data.data_dir
    annotations = load_annotations(data_dir)
    images = [to_network_input(load_raster(find_image(data_dir, ann.image), model.spec.input_channels))
              for ann in annotations]
    with ThreadPool(processes=cfg.threads) as pool:
        gts = pool.map(lambda ann: generate_density_map(ann, cfg.kernel), annotations)
    n_values = args.n_values or cfg.data.n_values
    labels = load_labels(data_dir, [ann.image for ann in annotations])
    report = evaluate(model, images, gts, n_values=n_values, labels=labels, progress=cfg.train.progress)

    out = args.out or os.path.join(args.checkpoint, "report.json")
    report.save(out, args.csv)
    print(report.table().to_string(index=False))
    print(f"✅ MAE {report.mae:.4f}  RMSE {report.rmse:.4f}  over {report.M} images; report {out}")
    return 0


def cmd_export(args, cfg: RunConfig) -> int:
    model, _ = load_checkpoint(args.checkpoint)
    pixels = load_raster(args.image, model.spec.input_channels)
    density = infer_density_map(model, to_network_input(pixels))
    write_dmap(args.out, density.values)
    if args.heatmap:
        save_heatmap(args.heatmap, density.values, upscale=model.downsample)
    print(f"✅ Estimated count {density.count:.2f}; density map {args.out}")
    return 0


def cmd_verify(args, cfg: RunConfig) -> int:
    from verify import run_checks

    return 0 if run_checks(seed=cfg.seed) else 1


# ---------------------------------------------------------------------------
# Argument parsing
# ---------------------------------------------------------------------------

def _n_values(text: str) -> List[int]:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"--n-values must be comma-separated integers, got {text!r}")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON file with model/train/kernel/data sections")
    common.add_argument("--preset", default="desk", help="desk (default) or full")
    common.add_argument("--seed", type=int, help="run seed")
    common.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                        help="override, e.g. --set train.lam=0.5")
    common.add_argument("--freeze-fen", action="store_true", help="keep the front-end fixed while training")
    common.add_argument("--ablate-fel", action="store_true", help="uniform weights instead of the FEL")
    common.add_argument("--ablate-skip", action="store_true", help="drop the raw-map skip connection")

    parser = argparse.ArgumentParser(prog="pandense", description="Pan-density crowd counting")
    sub = parser.add_subparsers(dest="command")

    p = sub.add_parser("synth", parents=[common], help="generate synthetic crowd scenes")
    p.add_argument("--profile", default="mixed", choices=["sparse", "dense", "mixed", "pan"])
    p.add_argument("--M", type=int, default=40, help="number of images")
    p.add_argument("--size", type=int, help="image side in pixels")
    p.add_argument("--out", required=True)
    p.set_defaults(handler=cmd_synth)

    p = sub.add_parser("prepare", parents=[common], help="extract, cluster and balance patches")
    p.add_argument("--data", help="dataset directory with images/ and annotations/")
    p.add_argument("--N", type=int, help="number of density levels")
    p.add_argument("--Q", type=int, help="neighbours for the dense degree")
    p.add_argument("--out", help="manifest path (default DATA/manifest.json)")
    p.set_defaults(handler=cmd_prepare)

    for name, handler, help_text in (("pretrain", cmd_pretrain, "phase 1: pretrain each subnetwork"),
                                     ("train", cmd_train, "phase 2: joint training")):
        p = sub.add_parser(name, parents=[common], help=help_text)
        p.add_argument("--manifest", required=True)
        p.add_argument("--data", help="dataset directory the manifest was built from")
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--resume", action="store_true", help="continue from OUT/last")
        if name == "train":
            p.add_argument("--pretrained", help="pretrain output directory")
            p.add_argument("--no-pretrain", action="store_true", help="train from scratch")
        p.set_defaults(handler=handler)

    p = sub.add_parser("eval", parents=[common], help="MAE/RMSE/PMAE/PRMSE on a dataset")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", help="dataset directory")
    p.add_argument("--n-values", type=_n_values, help="grid sizes, e.g. 1,4,9,16")
    p.add_argument("--out", help="report JSON path")
    p.add_argument("--csv", help="optional n/PMAE/PRMSE table")
    p.set_defaults(handler=cmd_eval)

    p = sub.add_parser("export", parents=[common], help="density map of one image")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--out", required=True, help="DMAP output path")
    p.add_argument("--heatmap", help="optional PNG heatmap path")
    p.set_defaults(handler=cmd_export)

    p = sub.add_parser("verify", parents=[common], help="numerical self-checks")
    p.set_defaults(handler=cmd_verify)
    return parser


def flags_layer(args) -> Dict:
    layer: Dict = {}
    if args.seed is not None:
        layer["seed"] = args.seed
    if args.freeze_fen:
        layer.setdefault("train", {})["freeze_fen"] = True
    if args.ablate_fel:
        layer.setdefault("model", {})["ablate_fel"] = True
    if args.ablate_skip:
        layer.setdefault("model", {})["ablate_skip"] = True
    if getattr(args, "N", None) is not None:
        layer.setdefault("model", {})["N"] = args.N
    if getattr(args, "Q", None) is not None:
        layer.setdefault("data", {})["Q"] = args.Q
    if getattr(args, "size", None) is not None:
        layer.setdefault("data", {})["image_size"] = args.size
    return layer


def main(argv: Optional[Sequence[str]] = None) -> int:
    logging.basicConfig(level=env_log_level(), format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    if not getattr(args, "handler", None):
        parser.print_help()
        return 2
    try:
        cfg = resolve_config(args.preset, args.config, args.overrides, flags_layer(args))
        with threadpool_limits(limits=cfg.threads):
            return args.handler(args, cfg)
    except (ValueError, OSError) as e:
        logger.error(f"{args.command} failed: {e}")
        print(f"❌ {e}")
        return 2


if __name__ == "__main__":
    sys.exit(main())
