"""End-to-end pipeline steps shared by the CLI: dataset generation, the full
boosted training run, ensemble selection, fused inference, and report output.

Dataset layout (written by write_dataset):

    out_dir/
      manifest.json          one document: spec, seeds, splits, noise ledgers
      train/ img_*.pgm       8-bit grayscale scenes
      val/   img_*.pgm
      test/  img_*.pgm

Run layout (written by train_run):

    run_dir/
      run.json               config + dataset path + config digest
      iter_NN/               params.bdet, weights.json, detections.json, metrics.json
      summary.json           per-iteration metrics table + clean iteration

Split seeds derive from the run seed as 3*seed + {0: train, 1: val, 2: test};
the same derived seed drives that split's noise model.
"""
from __future__ import annotations

import json
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import boosting, ensemble, metrics, net, synth, train
from .config import RunConfig, config_digest, config_to_dict
from .geometry import (
    Detection,
    GroundTruthObject,
    annotations_from_records,
    annotations_to_records,
    load_detections,
    save_detections,
)

SPLITS = ("train", "val", "test")


def _split_seed(seed: int, split: str) -> int:
    return 3 * seed + SPLITS.index(split)


def write_dataset(cfg: RunConfig, out_dir) -> Path:
    """Generate all three splits, inject noise where configured, write to disk."""
    out_dir = Path(out_dir)
    digest = config_digest(cfg)
    spec = cfg.data.scene_spec()
    counts = {
        "train": cfg.data.train_images,
        "val": cfg.data.val_images,
        "test": cfg.data.test_images,
    }
    manifest: dict = {
        "schema_version": 1,
        "seed": cfg.seed,
        "config_digest": digest,
        "spec": config_to_dict(cfg)["data"],
        "splits": {},
    }
    next_index = 1
    split_data = {}
    for split in SPLITS:
        split_seed = _split_seed(cfg.seed, split)
        images, clean, next_index = synth.generate_dataset(
            spec, counts[split], split_seed, id_prefix=split, first_object_index=next_index
        )
        split_data[split] = (split_seed, images, clean)
    for split in SPLITS:
        split_seed, images, clean = split_data[split]
        if split in cfg.data.noisy_splits:
            noisy, ledger = synth.inject_noise(
                clean, cfg.data.noise_model(split_seed), spec, first_spurious_index=next_index
            )
            next_index += sum(1 for e in ledger if e["kind"] == "spurious")
        else:
            noisy, ledger = clean, []
        sub = out_dir / split
        sub.mkdir(parents=True, exist_ok=True)
        paths = {}
        for image_id in sorted(images):
            rel = f"{split}/{image_id}.pgm"
            synth.write_pgm(out_dir / rel, images[image_id], comment=f"config_digest={digest}")
            paths[image_id] = rel
        manifest["splits"][split] = {
            "seed": split_seed,
            "images": paths,
            "annotations": annotations_to_records(noisy),
            "clean_annotations": annotations_to_records(clean),
            "noise_ledger": ledger,
        }
    with open(out_dir / "manifest.json", "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, sort_keys=True)
    return out_dir / "manifest.json"


class DatasetBundle:
    """In-memory view of a dataset directory."""

    def __init__(self, root: Path, manifest: dict):
        self.root = root
        self.manifest = manifest
        self.images: dict[str, dict[str, np.ndarray]] = {}
        self.inputs: dict[str, dict[str, np.ndarray]] = {}
        self.annotations: dict[str, dict[str, list[GroundTruthObject]]] = {}
        self.clean_annotations: dict[str, dict[str, list[GroundTruthObject]]] = {}
        for split, body in manifest["splits"].items():
            imgs = {
                image_id: synth.read_pgm(root / rel) for image_id, rel in body["images"].items()
            }
            self.images[split] = imgs
            self.inputs[split] = {k: synth.image_to_input(v) for k, v in imgs.items()}
            self.annotations[split] = annotations_from_records(body["annotations"])
            self.clean_annotations[split] = annotations_from_records(body["clean_annotations"])
            for image_id in imgs:
                self.annotations[split].setdefault(image_id, [])
                self.clean_annotations[split].setdefault(image_id, [])


def load_dataset(path) -> DatasetBundle:
    root = Path(path)
    if root.is_file():
        root = root.parent
    with open(root / "manifest.json", encoding="utf-8") as fh:
        manifest = json.load(fh)
    return DatasetBundle(root, manifest)


def _iteration_seed(seed: int, iteration: int) -> int:
    return seed * 100003 + iteration


def train_run(cfg: RunConfig, dataset_dir, run_dir, resume: bool = False) -> list[boosting.DetectorRecord]:
    """Full boosted training; resumable from the last completed iteration."""
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    data = load_dataset(dataset_dir)
    digest = config_digest(cfg)
    with open(run_dir / "run.json", "w", encoding="utf-8") as fh:
        json.dump(
            {
                "config": config_to_dict(cfg),
                "config_digest": digest,
                "dataset": str(Path(dataset_dir).resolve()),
            },
            fh,
            sort_keys=True,
        )

    classes = list(range(1, cfg.data.num_classes + 1))
    net_cfg = cfg.net.net_config(cfg.data.image_size, cfg.data.num_classes)
    loss_cfg = cfg.loss.loss_config(cfg.data.num_classes)
    train_cfg = cfg.train.train_config()
    boost_cfg = cfg.boost.boost_config(cfg.data.num_classes, cfg.seed)

    train_inputs = data.inputs["train"]
    train_gts = data.annotations["train"]
    val_inputs = data.inputs["val"]
    val_gts = data.annotations["val"]

    targets = {
        image_id: train.build_targets(net_cfg, train_gts.get(image_id, []), train_cfg.match_iou)
        for image_id in train_inputs
    }

    def trainer(w, warm_start, iteration, stage):
        return train.train_detector(
            train_inputs,
            train_gts,
            boosting.sample_weight_map(w),
            net_cfg,
            loss_cfg,
            train_cfg,
            seed=_iteration_seed(cfg.seed, iteration),
            warm_start=warm_start,
            targets=targets,
        )

    def detect_fn(params):
        return train.run_detector(
            params, train_inputs, boost_cfg.det_score_thr, boost_cfg.det_nms_thr
        )

    def val_map_fn(params):
        # validation ranking wants the full score range, independent of the
        # confident operating point used for miss indicators
        dets = train.run_detector(
            params, val_inputs, cfg.ensemble.score_thr, cfg.ensemble.nms_thr
        )
        _, val_map = metrics.evaluate_map(dets, val_gts, classes, cfg.eval.iou_thr)
        return val_map

    records = boosting.run_boosting(
        train_gts, boost_cfg, trainer, detect_fn, val_map_fn, run_dir=run_dir, resume=resume
    )
    has_denoise = any(r.stage == boosting.STAGE_DENOISE for r in records)
    clean = boosting.select_clean(records, boost_cfg.clean_selection) if has_denoise else None
    summary = {
        "config_digest": digest,
        "clean_iteration": clean.iteration if clean else None,
        "iterations": [
            {
                "iteration": r.iteration,
                "stage": r.stage,
                "error_rate": r.error_rate,
                "alpha": r.alpha,
                "val_map": r.val_map,
            }
            for r in records
        ],
    }
    with open(run_dir / "summary.json", "w", encoding="utf-8") as fh:
        json.dump(summary, fh, sort_keys=True, indent=1)
    return records


def load_run(run_dir) -> tuple[RunConfig, Path, list[boosting.DetectorRecord]]:
    """Rebuild the config, dataset path, and per-iteration records of a run."""
    from .config import config_from_dict

    run_dir = Path(run_dir)
    with open(run_dir / "run.json", encoding="utf-8") as fh:
        meta = json.load(fh)
    cfg = config_from_dict(meta["config"])
    records = []
    iteration = 1
    while True:
        loaded = boosting._load_iteration(run_dir, iteration)
        if loaded is None:
            break
        records.append(loaded[0])
        iteration += 1
    return cfg, Path(meta["dataset"]), records


def select_run(run_dir, out_path=None) -> Path:
    """Pick the diverse ensemble from a finished run; writes the manifest."""
    run_dir = Path(run_dir)
    cfg, dataset_path, records = load_run(run_dir)
    candidates = [r for r in records if r.stage == boosting.STAGE_HARDMINE]
    if not candidates:
        raise ValueError(f"{run_dir}: no hard-mining iterations to select from")
    data = load_dataset(dataset_path)
    classes = list(range(1, cfg.data.num_classes + 1))
    val_inputs = data.inputs["val"]
    val_gts = data.annotations["val"]
    val_dets = [
        train.run_detector(r.params, val_inputs, cfg.ensemble.score_thr, cfg.ensemble.nms_thr)
        for r in candidates
    ]
    max_size = cfg.ensemble.max_size or len(candidates)
    ens = ensemble.greedy_select(
        candidates,
        val_dets,
        val_gts,
        classes,
        max_size=max_size,
        theta=cfg.boost.iou_theta,
        nms_thr=cfg.ensemble.nms_thr,
        iou_thr=cfg.eval.iou_thr,
        literal_argmax_q=cfg.ensemble.literal_argmax_q,
    )
    snapshot_paths = [f"iter_{r.iteration:02d}/params.bdet" for r in ens.members]
    out_path = Path(out_path) if out_path else run_dir / "ensemble.json"
    ensemble.save_ensemble_manifest(
        out_path,
        ens,
        snapshot_paths,
        extra={
            "config_digest": config_digest(cfg),
            "run_dir": str(run_dir.resolve()),
            "score_thr": cfg.ensemble.score_thr,
            "nms_thr": cfg.ensemble.nms_thr,
        },
    )
    return out_path


def _load_images_dir(images_dir) -> dict[str, np.ndarray]:
    images_dir = Path(images_dir)
    out = {}
    for p in sorted(images_dir.glob("*.pgm")):
        out[p.stem] = synth.image_to_input(synth.read_pgm(p))
    return out


def infer_run(manifest_path, images_dir, out_path) -> Path:
    """Fused inference of a selected ensemble over a directory of PGM images."""
    manifest_path = Path(manifest_path)
    doc = ensemble.load_ensemble_manifest(manifest_path)
    run_dir = Path(doc["run_dir"])
    lam = doc["lambda"]
    members = [net.load_params(run_dir / m["snapshot"]) for m in doc["members"]]
    inputs = _load_images_dir(images_dir)
    per_member = [
        train.run_detector(p, inputs, doc["score_thr"], doc["nms_thr"]) for p in members
    ]
    fused = ensemble.fuse_detections(per_member, lam, doc["nms_thr"]) if inputs else {}
    save_detections(out_path, fused)
    return Path(out_path)


def eval_run(detections_path, annotations_path, report_dir,
             cfg: Optional[RunConfig] = None, classes: Optional[Sequence[int]] = None) -> dict:
    """Score a detections file against annotations; emit metrics + CSV/SVG reports."""
    report_dir = Path(report_dir)
    report_dir.mkdir(parents=True, exist_ok=True)
    eval_cfg = cfg.eval if cfg else None
    iou_thr = eval_cfg.iou_thr if eval_cfg else 0.5
    fp_thr = eval_cfg.fp_score_thr if eval_cfg else 0.5
    monotonize = eval_cfg.monotonize_ap if eval_cfg else True
    digest = config_digest(cfg) if cfg else None

    with open(annotations_path, encoding="utf-8") as fh:
        gts = annotations_from_records(json.load(fh))
    dets = load_detections(detections_path)
    if classes is None:
        classes = sorted({g.cls for objs in gts.values() for g in objs})

    per_class, mean = metrics.evaluate_map(dets, gts, classes, iou_thr, monotonize)
    fp_records = metrics.categorize_false_positives(dets, gts, iou_thr)
    fp_counts = metrics.fp_category_counts(fp_records, fp_thr)
    curves = {}
    pr_series = {}
    for c in classes:
        curve = metrics.pr_curve(dets, gts, c, iou_thr)
        curves[c] = curve
        metrics.write_pr_csv(report_dir / f"pr_{c}.csv", curve, digest)
        pr_series[f"class {c}"] = list(zip(curve.recall, curve.precision))
    metrics.svg_line_plot(report_dir / "pr_curves.svg", pr_series,
                          title="precision vs recall", digest=digest)
    binning = metrics.size_breakdown(dets, gts, classes, iou_thr) if any(
        g for objs in gts.values() for g in objs
    ) else None
    if binning is not None:
        metrics.write_sizebins_csv(report_dir / "sizebins.csv", binning, digest)
    metrics.write_fp_csv(report_dir / "fp_taxonomy.csv", fp_records, digest)

    doc = {
        "map": mean,
        "per_class_ap": {str(c): per_class[c] for c in classes},
        "fp_counts": fp_counts,
        "fp_score_thr": fp_thr,
        "iou_thr": iou_thr,
        "num_detections": sum(len(v) for v in dets.values()),
        "num_objects": sum(len(v) for v in gts.values()),
    }
    if binning is not None:
        doc["size_bins"] = {
            "edges": list(binning.edges),
            "map": binning.per_bin_map,
            "counts": binning.bin_counts,
        }
    if digest:
        doc["config_digest"] = digest
    with open(report_dir / "metrics.json", "w", encoding="utf-8") as fh:
        json.dump(doc, fh, sort_keys=True, indent=1)
    return doc
