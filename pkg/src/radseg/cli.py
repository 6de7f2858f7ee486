"""Command-line orchestration: simulate, train, evaluate, prune, report.

Every command reads one JSON run config (plus dotted-path overrides), writes
its artifacts under an output directory next to a resolved config snapshot,
and is fully determined by config + seeds. Exit codes: 0 success, 1 runtime
failure, 2 usage or config error.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from concurrent.futures import ProcessPoolExecutor

import numpy as np

from . import nn
from .config import load_config, save_config
from .dataset import DatasetManifest, save_frame
from .detector import (
    DetectorTrainConfig,
    load_detector,
    load_split_tensors,
    train_detector,
)
from .errors import ConfigError, ContractViolation, FormatError, GradientError, RadsegError
from .evaluation import MetricsReport
from .geometry import RadarGeometry
from .pipeline import (
    PipelineConfig,
    evaluate_pipeline,
    load_eval_frames,
    sweep_d_thresh,
    write_mask_ppm,
)
from .pruning import (
    PruneSpec,
    fine_tune,
    prune_report,
    rebuild_pruned,
    select_channels,
)
from .region_growing import GrowConfig, seed_cells
from .simulate import CLASS_NAMES, generate_world, render_frame
from .sparse_seg import (
    SegTrainConfig,
    build_frame_points,
    load_segmenter,
    train_segmenter,
    voxelize,
)

STRIDE = 4


def _geometry_from(config):
    return RadarGeometry(**config["geometry"])


def _render_job(args):
    scene, geometry, noise_seed = args
    return render_frame(scene, geometry, noise_seed)


def cmd_simulate(config, out_dir, jobs=1):
    geometry = _geometry_from(config)
    if geometry.range_bins % STRIDE or geometry.angle_bins % STRIDE:
        raise ConfigError(
            f"range/angle bins must be divisible by the output stride {STRIDE}"
        )
    sim = config["simulation"]
    worlds, fpw = int(sim["worlds"]), int(sim["frames_per_world"])
    units = {k: float(v) for k, v in sim["split_worlds"].items()}
    if abs(sum(units.values()) - worlds) > 1e-9:
        raise ConfigError(
            f"split_worlds must sum to worlds={worlds}, got {sum(units.values())}"
        )
    seed = int(config["seed"])
    os.makedirs(out_dir, exist_ok=True)
    save_config(config, os.path.join(out_dir, "config.json"))

    scenes = [
        generate_world(seed + 1000 * w, int(sim["objects"]), geometry, snr_db=sim["snr_db"])
        for w in range(worlds)
    ]
    job_args = [
        (scenes[w], geometry, seed + 5_000_000 + w * fpw + f)
        for w in range(worlds)
        for f in range(fpw)
    ]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            rendered = list(pool.map(_render_job, job_args))
    else:
        rendered = [_render_job(a) for a in job_args]

    # contiguous frame ranges per split, in declared split order
    bounds = np.cumsum([units[k] * fpw for k in units]).round().astype(int)
    splits = {k: [] for k in units}
    class_counts = dict.fromkeys(CLASS_NAMES, 0)
    for idx, (cube, labels) in enumerate(rendered):
        w, f = divmod(idx, fpw)
        split = list(units)[int(np.searchsorted(bounds, idx, side="right"))]
        fid = f"{split}/w{w}_f{f:03d}"
        save_frame(fid, cube, labels, out_dir)
        splits[split].append(fid)
        for obj in labels.objects:
            class_counts[obj.class_name] += 1
    manifest = DatasetManifest(
        out_dir,
        geometry.fingerprint(),
        splits,
        seeds={"base": seed, "snr_db": sim["snr_db"]},
    )
    manifest.save()
    total = sum(len(v) for v in splits.values())
    print(f"wrote {total} frames under {out_dir}")
    for k, v in splits.items():
        print(f"  split {k}: {len(v)} frames")
    print("  object counts: " + ", ".join(f"{k}={v}" for k, v in class_counts.items()))
    return manifest


def _last_logged_step(log_path):
    step = 0
    if os.path.exists(log_path):
        with open(log_path, "r", encoding="utf-8") as fh:
            for line in fh:
                try:
                    step = max(step, int(json.loads(line).get("step", 0)))
                except (json.JSONDecodeError, TypeError, ValueError):
                    continue
    return step


def cmd_train_detect(config, dataset_dir, out_dir, resume=False):
    manifest = DatasetManifest.load(dataset_dir)
    det = config["detect"]
    cfg = DetectorTrainConfig(
        epochs=int(det["epochs"]),
        lr=det["lr"],
        lr_decay=det["lr_decay"],
        decay_every_epochs=int(det["decay_every_epochs"]),
        batch_size=int(det["batch_size"]),
        seed=int(config["seed"]),
        lambda_offset=det["lambda_offset"],
        lambda_doppler=det["lambda_doppler"],
        lambda_sparsity=det["lambda_sparsity"],
        tau_peak=det["tau_peak"],
        k_max=int(det["k_max"]),
        val_every_epochs=int(det["val_every_epochs"]),
        channels=tuple(det["channels"]),
        distance_thresholds=tuple(config["eval"]["distance_thresholds"]),
    )
    os.makedirs(out_dir, exist_ok=True)
    save_config(config, os.path.join(out_dir, "config.json"))
    ckpt = os.path.join(out_dir, "detector.ckpt")
    log = os.path.join(out_dir, "train_detect.jsonl")
    model, step_start = None, 0
    if resume:
        model = load_detector(ckpt)
        step_start = _last_logged_step(log)
    try:
        model, best = train_detector(
            manifest, cfg, ckpt, log_path=log, model=model,
            step_start=step_start, log_mode="a" if resume else "w",
        )
    except GradientError as exc:
        print(f"training diverged: {exc}; last checkpoint at {ckpt}", file=sys.stderr)
        raise
    print(f"detector checkpoint: {ckpt}")
    print(f"best val mAP: {best if best is not None else 'n/a'}")
    return model


def _seg_frames(manifest, split, grow_cfg, detector, pipe_cfg):
    """(grid, point labels, frame labels, geometry) tuples for one split."""
    from .detector import decode_peaks, log_transform

    out = []
    for fid in manifest.splits[split]:
        cube, labels = manifest.load_frame(fid)
        seeds = None
        if detector is not None:
            y, o, d = detector.forward_cube(log_transform(cube))
            dets = decode_peaks(y, o, d, pipe_cfg.tau_peak, pipe_cfg.k_max, cube.geometry)
            seeds = seed_cells(dets, cube.geometry)
        pts = build_frame_points(cube, labels, grow_cfg, seeds=seeds)
        out.append((voxelize(pts), pts.labels, labels, cube.geometry))
    return out


def cmd_train_seg(config, dataset_dir, out_dir, detector_ckpt=None, resume=False):
    manifest = DatasetManifest.load(dataset_dir)
    seg = config["seg"]
    grow = config["grow"]
    cfg = SegTrainConfig(
        epochs=int(seg["epochs"]),
        lr=seg["lr"],
        seed=int(config["seed"]),
        d_thresh=int(grow["d_thresh"]),
        intensity_fraction=grow["intensity_fraction"],
        val_every_epochs=int(seg["val_every_epochs"]),
        channels=tuple(seg["channels"]),
        use_class_weights=bool(seg["use_class_weights"]),
    )
    detector = load_detector(detector_ckpt) if detector_ckpt else None
    if detector is not None and detector.geometry.fingerprint() != manifest.geometry_sha:
        raise ConfigError("detector checkpoint geometry does not match the dataset")
    pipe_cfg = PipelineConfig(
        tau_peak=config["eval"]["tau_peak"], k_max=int(config["eval"]["k_max"]),
        d_thresh=cfg.d_thresh, intensity_fraction=cfg.intensity_fraction,
    )
    grow_cfg = GrowConfig(d_thresh=cfg.d_thresh, intensity_fraction=cfg.intensity_fraction)
    frames = _seg_frames(manifest, "train", grow_cfg, detector, pipe_cfg)
    val = (
        _seg_frames(manifest, "val", grow_cfg, detector, pipe_cfg)
        if "val" in manifest.splits
        else []
    )
    os.makedirs(out_dir, exist_ok=True)
    save_config(config, os.path.join(out_dir, "config.json"))
    ckpt = os.path.join(out_dir, "segmenter.ckpt")
    log = os.path.join(out_dir, "train_seg.jsonl")
    model, step_start = None, 0
    if resume:
        model = load_segmenter(ckpt)
        step_start = _last_logged_step(log)
    try:
        model, best = train_segmenter(
            manifest, cfg, ckpt, log_path=log, frames=frames, val_frames=val,
            model=model, step_start=step_start, log_mode="a" if resume else "w",
        )
    except GradientError as exc:
        print(f"training diverged: {exc}; last checkpoint at {ckpt}", file=sys.stderr)
        raise
    print(f"segmenter checkpoint: {ckpt}")
    print(f"best val mIoU: {best if best is not None else 'n/a'}")
    return model


def cmd_eval(config, dataset_dir, detector_ckpt, segmenter_ckpt, split, out_dir,
             masks_dir=None, sweep=None, baseline=False):
    manifest = DatasetManifest.load(dataset_dir)
    detector = load_detector(detector_ckpt)
    segmenter = load_segmenter(segmenter_ckpt)
    if detector.geometry.fingerprint() != manifest.geometry_sha:
        raise ConfigError("detector checkpoint geometry does not match the dataset")
    cfg = PipelineConfig(
        tau_peak=config["eval"]["tau_peak"],
        k_max=int(config["eval"]["k_max"]),
        d_thresh=int(config["grow"]["d_thresh"]),
        intensity_fraction=config["grow"]["intensity_fraction"],
        distance_thresholds=tuple(config["eval"]["distance_thresholds"]),
    )
    frames = load_eval_frames(manifest, split)
    report = evaluate_pipeline(detector, segmenter, frames, cfg, baseline=baseline)
    if sweep:
        report.region_growing["sweep"] = sweep_d_thresh(
            frames, sweep, intensity_fraction=cfg.intensity_fraction
        )
    report.validate()
    os.makedirs(out_dir, exist_ok=True)
    save_config(config, os.path.join(out_dir, "config.json"))
    report_path = os.path.join(out_dir, "report.json")
    with open(report_path, "w", encoding="utf-8") as fh:
        fh.write(report.to_json() + "\n")
    if masks_dir:
        from .pipeline import run_frame

        os.makedirs(masks_dir, exist_ok=True)
        for fid, (cube, _) in zip(manifest.splits[split], frames):
            res = run_frame(detector, segmenter, cube, cfg)
            stem = fid.replace("/", "_")
            write_mask_ppm(os.path.join(masks_dir, f"{stem}_ra.ppm"), res.masks.ra_mask)
            write_mask_ppm(os.path.join(masks_dir, f"{stem}_rd.ppm"), res.masks.rd_mask)
    print(report.to_json())
    print(f"report written to {report_path}")
    return report


def cmd_prune(config, detector_ckpt, out_dir, dataset_dir=None, do_fine_tune=False):
    spec = PruneSpec(
        lambda_s=config["prune"]["lambda_s"],
        prune_fraction=config["prune"]["fraction"],
        fine_tune_epochs=int(config["prune"]["fine_tune_epochs"]),
    )
    model = load_detector(detector_ckpt)
    masks = select_channels(model, spec.prune_fraction)
    pruned = rebuild_pruned(model, masks)
    os.makedirs(out_dir, exist_ok=True)
    save_config(config, os.path.join(out_dir, "config.json"))
    ckpt = os.path.join(out_dir, "detector_pruned.ckpt")
    nn.save_checkpoint(ckpt, pruned.named_state(), pruned.arch())
    report = prune_report(model, pruned, masks)
    if dataset_dir is not None:
        manifest = DatasetManifest.load(dataset_dir)
        det = config["detect"]
        cfg = DetectorTrainConfig(
            epochs=spec.fine_tune_epochs,
            lr=det["lr"],
            seed=int(config["seed"]),
            batch_size=int(det["batch_size"]),
            tau_peak=det["tau_peak"],
            k_max=int(det["k_max"]),
            channels=pruned.channels,
            distance_thresholds=tuple(config["eval"]["distance_thresholds"]),
        )
        from .detector import evaluate_detection_map

        split = "val" if "val" in manifest.splits else "train"
        frames, geometry = load_split_tensors(manifest, split)
        report["mAP_before"], _ = evaluate_detection_map(model, frames, geometry, cfg)
        report["mAP_pruned"], _ = evaluate_detection_map(pruned, frames, geometry, cfg)
        if do_fine_tune:
            pruned, _ = fine_tune(pruned, manifest, cfg, ckpt,
                                  log_path=os.path.join(out_dir, "fine_tune.jsonl"))
            report["mAP_fine_tuned"], _ = evaluate_detection_map(
                pruned, frames, geometry, cfg
            )
    report_path = os.path.join(out_dir, "prune_report.json")
    with open(report_path, "w", encoding="utf-8") as fh:
        json.dump(report, fh, indent=1, sort_keys=True)
        fh.write("\n")
    print(json.dumps(report, indent=1, sort_keys=True))
    print(f"pruned checkpoint: {ckpt} "
          f"({report['params_after']}/{report['params_before']} parameters)")
    return pruned, report


def cmd_report(report_path):
    with open(report_path, "r", encoding="utf-8") as fh:
        data = json.load(fh)
    report = MetricsReport(**data)
    report.validate()
    det = report.detection
    print("detection:")
    for k, v in sorted(det.get("ap", {}).items(), key=lambda kv: float(kv[0])):
        print(f"  AP@{k}: {v if v is not None else 'n/a'}")
    print(f"  mAP:   {det.get('mAP')}")
    seg = report.segmentation
    for view in ("ra", "rd"):
        print(f"segmentation {view.upper()}: mIoU {seg.get(view, {}).get('mIoU')}")
    print(f"view consistency: {seg.get('view_consistency')}")
    for k, v in sorted(report.region_growing.items()):
        print(f"region growing {k}: {v}")
    return report


def build_parser():
    parser = argparse.ArgumentParser(
        prog="radseg", description="Radar detect-then-segment pipeline"
    )
    parser.add_argument("--config", help="JSON run config (defaults used if omitted)")
    parser.add_argument(
        "--set", action="append", default=[], metavar="KEY=VALUE",
        help="override a config value by dotted path (repeatable)",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="generate a dataset")
    p.add_argument("--out", required=True, help="dataset output directory")
    p.add_argument("--jobs", type=int, default=1)

    p = sub.add_parser("train-detect", help="train the center-point detector")
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", required=True, help="run directory for checkpoint + logs")
    p.add_argument("--resume", action="store_true")

    p = sub.add_parser("train-seg", help="train the sparse segmenter")
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--detector", help="seed from this detector instead of ground truth")
    p.add_argument("--resume", action="store_true")

    p = sub.add_parser("eval", help="run the full pipeline and report metrics")
    p.add_argument("--dataset", required=True)
    p.add_argument("--detector", required=True)
    p.add_argument("--segmenter", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--out", required=True)
    p.add_argument("--masks", help="also write RA/RD class masks as PPM images here")
    p.add_argument("--sweep-dthresh", type=int, nargs="+", dest="sweep",
                   help="report ROI recall for these growth budgets")
    p.add_argument("--baseline", action="store_true",
                   help="seed-class-fill ablation instead of per-point classification")

    p = sub.add_parser("prune", help="channel-prune a detector checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--dataset", help="evaluate mAP before/after on this dataset")
    p.add_argument("--fine-tune", action="store_true", dest="fine_tune")

    p = sub.add_parser("report", help="pretty-print a metrics report")
    p.add_argument("path")
    return parser


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 2 if exc.code not in (0, None) else 0
    try:
        if args.command == "report":
            cmd_report(args.path)
            return 0
        config = load_config(args.config, args.set)
        if args.command == "simulate":
            cmd_simulate(config, args.out, jobs=args.jobs)
        elif args.command == "train-detect":
            if not os.path.isdir(args.dataset):
                raise ConfigError(f"dataset directory not found: {args.dataset}")
            cmd_train_detect(config, args.dataset, args.out, resume=args.resume)
        elif args.command == "train-seg":
            if not os.path.isdir(args.dataset):
                raise ConfigError(f"dataset directory not found: {args.dataset}")
            cmd_train_seg(config, args.dataset, args.out,
                          detector_ckpt=args.detector, resume=args.resume)
        elif args.command == "eval":
            cmd_eval(config, args.dataset, args.detector, args.segmenter,
                     args.split, args.out, masks_dir=args.masks,
                     sweep=args.sweep, baseline=args.baseline)
        elif args.command == "prune":
            cmd_prune(config, args.checkpoint, args.out,
                      dataset_dir=args.dataset, do_fine_tune=args.fine_tune)
        return 0
    except (ConfigError, ContractViolation, FormatError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except RadsegError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
