"""Command-line entry point: ``depthcomp <command> [options]``.

Commands
--------
train      train a network, writing checkpoints/, losses.csv and losses.png
eval       score a checkpoint or a directory of predicted PNGs (metrics.csv, metrics.png)
predict    write clipped 16-bit PNG depth predictions
subsample  write scan-line or uniformly subsampled sparse depth plus a new manifest
powerlaw   fit rmse = c * n^p to (n_samples, rmse) points (powerlaw.csv, powerlaw.png)
synth      render a small synthetic dataset in the KITTI layout
pose       dump matched correspondences and RANSAC inliers for one frame pair
"""
from __future__ import annotations

import argparse
import csv
import logging
import os
import sys
from typing import List, Optional

import numpy as np

from . import plotting
from .config import ConfigError, build_train_config, dump_train_config, parse_overrides, read_config_file
from .data import (Dataset, bottom_crop_box, depth_to_raw, load_calibration, load_depth_png, save_depth_png,
                   save_depth_raw, subsample_scanlines, subsample_uniform)
from .metrics import evaluate_many, power_law_fit, read_points_csv, write_metrics_csv, write_power_law_csv
from .network import NetworkState, predict, to_gray
from .pose import estimate_pose
from .synthetic import write_synthetic_dataset
from .trainer import latest_checkpoint, read_loss_csv, train

log = logging.getLogger("depthcomp")


class CliError(Exception):
    def __init__(self, message: str, code: int = 1):
        super().__init__(message)
        self.code = code


def frame_id(sample_or_record) -> str:
    seq = sample_or_record.sequence_id or "frame"
    return f"{seq}_{sample_or_record.frame_index:010d}"


def _require_file(path: Optional[str], what: str) -> str:
    if not path or not os.path.exists(path):
        raise CliError(f"{what} not found: {path!r}")
    return path


def _load_state(args) -> NetworkState:
    path = args.checkpoint or (latest_checkpoint(args.run_dir) if args.run_dir else None)
    _require_file(path, "checkpoint")
    return NetworkState.load(path)


def _auto_crop(dataset: Dataset, factor: int, crop) -> Dataset:
    if crop:
        dataset.crop = tuple(crop)
        return dataset
    first = load_depth_png(dataset.records[0].sparse)
    h, w = first.shape
    dataset.crop = (h - h % factor, w - w % factor)
    return dataset


# -- commands ------------------------------------------------------------------

def cmd_train(args) -> int:
    kv = read_config_file(_require_file(args.config, "config file")) if args.config else {}
    kv.update(parse_overrides(args.set or []))
    for flag, key in (("seed", "seed"), ("mode", "mode"), ("modality", "modality"), ("manifest", "train_manifest")):
        value = getattr(args, flag)
        if value is not None:
            kv[key] = str(value)
    cfg = build_train_config(kv)
    _require_file(cfg.train_manifest, "training manifest")
    os.makedirs(args.run_dir, exist_ok=True)
    with open(os.path.join(args.run_dir, "config_used.txt"), "w") as fh:
        fh.write(dump_train_config(cfg))
    train(cfg, args.run_dir)
    plotting.plot_losses(read_loss_csv(os.path.join(args.run_dir, "losses.csv")),
                         os.path.join(args.run_dir, "losses.png"))
    print(f"trained {cfg.epochs} epochs; checkpoints in {os.path.join(args.run_dir, 'checkpoints')}")
    return 0


def _predictions_from_state(state: NetworkState, dataset: Dataset):
    for i in range(len(dataset)):
        s = dataset[i]
        rgb = s.rgb if state.config.has_image else None
        yield s, predict(state, rgb, s.d_sparse)[0, 0]


def cmd_eval(args) -> int:
    dataset = Dataset.from_manifest(_require_file(args.manifest, "manifest"))
    ids, preds, gts = [], [], []
    if args.predictions:
        pred_dir = _require_file(args.predictions, "prediction directory")
        for rec in dataset.records:
            if rec.annotation is None:
                continue
            fid = frame_id(rec)
            pred = load_depth_png(_require_file(os.path.join(pred_dir, fid + ".png"), "prediction"))
            gt = load_depth_png(rec.annotation)
            top, left = bottom_crop_box(*gt.shape, *pred.shape)
            ids.append(fid)
            preds.append(pred)
            gts.append(gt[top:top + pred.shape[0], left:left + pred.shape[1]])
        out_dir = args.out or os.path.dirname(os.path.abspath(pred_dir))
    else:
        state = _load_state(args)
        _auto_crop(dataset, state.config.downsample_factor, args.crop)
        for s, pred in _predictions_from_state(state, dataset):
            if s.annotation is None:
                continue
            ids.append(frame_id(s))
            preds.append(pred)
            gts.append(s.annotation[0, 0])
        out_dir = args.out or args.run_dir or "."
    if not ids:
        raise CliError("no frames with ground truth to evaluate")
    per_frame, pooled, mean = evaluate_many(preds, gts)
    os.makedirs(out_dir, exist_ok=True)
    path = os.path.join(out_dir, "metrics.csv")
    write_metrics_csv(path, ids, per_frame, pooled, mean)
    plotting.plot_metrics(ids, {k: [getattr(r, k) for r in per_frame] for k in ("rmse_mm", "irmse_per_km")},
                          os.path.join(out_dir, "metrics.png"))
    print(f"rmse {pooled.rmse_mm:.2f} mm  mae {pooled.mae_mm:.2f} mm  irmse {pooled.irmse_per_km:.3f} 1/km  "
          f"imae {pooled.imae_per_km:.3f} 1/km  ({len(ids)} frames) -> {path}")
    return 0


def cmd_predict(args) -> int:
    dataset = Dataset.from_manifest(_require_file(args.manifest, "manifest"))
    state = _load_state(args)
    _auto_crop(dataset, state.config.downsample_factor, args.crop)
    out_dir = args.out or os.path.join(args.run_dir or ".", "predictions")
    os.makedirs(out_dir, exist_ok=True)
    tau = state.config.clip_tau_m
    for s, pred in _predictions_from_state(state, dataset):
        # the floor is applied in raw units so the decoded value is never below tau
        save_depth_png(os.path.join(out_dir, frame_id(s) + ".png"), pred, min_depth=tau)
    print(f"wrote {len(dataset)} predictions to {out_dir}")
    return 0


def cmd_subsample(args) -> int:
    if (args.lines is None) == (args.samples is None):
        raise CliError("give exactly one of --lines or --samples", code=2)
    manifest = _require_file(args.manifest, "manifest")
    dataset = Dataset.from_manifest(manifest)
    os.makedirs(args.out, exist_ok=True)
    src_root = os.path.dirname(os.path.abspath(manifest))
    lines = []
    for k, rec in enumerate(dataset.records):
        d = load_depth_png(rec.sparse)
        if args.lines is not None:
            sub = subsample_scanlines(d, args.lines, load_calibration(rec.calib))
        else:
            sub = subsample_uniform(d, args.samples, seed=args.seed + k)
        rel = os.path.relpath(rec.sparse, src_root)
        dst = os.path.join(args.out, rel)
        os.makedirs(os.path.dirname(dst), exist_ok=True)
        save_depth_raw(dst, depth_to_raw(sub))
        rel_out = lambda p: os.path.relpath(p, args.out) if p else "-"  # noqa: E731
        lines.append(" ".join([rel_out(rec.rgb), rel, rel_out(rec.annotation), rel_out(rec.calib)]))
    with open(os.path.join(args.out, "manifest.txt"), "w") as fh:
        fh.write("\n".join(lines) + "\n")
    print(f"wrote {len(lines)} subsampled maps and manifest.txt to {args.out}")
    return 0


def cmd_powerlaw(args) -> int:
    points = read_points_csv(_require_file(args.points, "points file"))
    fit = power_law_fit(points)
    os.makedirs(args.out, exist_ok=True)
    write_power_law_csv(os.path.join(args.out, "powerlaw.csv"), points, fit)
    plotting.plot_power_law(points, fit, os.path.join(args.out, "powerlaw.png"))
    print(f"c = {fit.c:.6g}  p = {fit.p:.6g}  r2 = {fit.r_squared:.6f}")
    return 0


def cmd_synth(args) -> int:
    path = write_synthetic_dataset(args.out, args.sequences, args.frames, args.height, args.width,
                                   args.focal, args.seed)
    print(f"manifest: {path}")
    return 0


def cmd_pose(args) -> int:
    dataset = Dataset.from_manifest(_require_file(args.manifest, "manifest"))
    if not 0 <= args.index < len(dataset):
        raise CliError(f"--index {args.index} outside 0..{len(dataset) - 1}", code=2)
    nbr = args.neighbor
    if nbr is None:
        cands = dataset.neighbor_candidates(args.index)
        if not cands:
            raise CliError("frame has no neighbour in its sequence")
        nbr = cands[0]
    s1, s2 = dataset[args.index], dataset[nbr]
    result, corr = estimate_pose(to_gray(s1.rgb)[0, 0], s1.d_sparse[0, 0], to_gray(s2.rgb)[0, 0],
                                 s1.intrinsics, seed=args.seed, return_matches=True)
    inl = set(np.asarray(result.inliers).tolist())
    with open(args.out, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["u1", "v1", "depth1", "u2", "v2", "inlier"])
        for i, c in enumerate(corr):
            w.writerow([repr(c.pixel1[0]), repr(c.pixel1[1]), repr(c.depth1), repr(c.pixel2[0]),
                        repr(c.pixel2[1]), int(i in inl)])
    if result.failed:
        print(f"pose failed ({len(corr)} correspondences); dump in {args.out}")
    else:
        t = result.pose.translation
        print(f"pose ok: {result.inlier_count}/{len(corr)} inliers, rotation "
              f"{np.rad2deg(result.pose.rotation_angle()):.3f} deg, t = ({t[0]:.4f}, {t[1]:.4f}, {t[2]:.4f})")
    return 0


# -- parser --------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="depthcomp", description="Sparse-to-dense depth completion toolkit.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train a network")
    t.add_argument("--config", help="key = value config file")
    t.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key (repeatable)")
    t.add_argument("--seed", type=int)
    t.add_argument("--mode", choices=("supervised", "self_supervised", "photometric_only"))
    t.add_argument("--modality", choices=("d", "gray+d", "rgb+d"))
    t.add_argument("--manifest", help="training manifest (overrides train_manifest)")
    t.add_argument("--run-dir", default="run")
    t.set_defaults(func=cmd_train)

    for name, func, helptext in (("eval", cmd_eval, "compute error metrics"),
                                 ("predict", cmd_predict, "write predicted depth PNGs")):
        e = sub.add_parser(name, help=helptext)
        e.add_argument("--manifest", required=True)
        e.add_argument("--checkpoint", help="checkpoint directory")
        e.add_argument("--run-dir", help="use the latest checkpoint of this run")
        e.add_argument("--crop", type=int, nargs=2, metavar=("H", "W"), help="bottom crop size")
        e.add_argument("--out", help="output directory")
        if name == "eval":
            e.add_argument("--predictions", help="directory of predicted PNGs instead of a checkpoint")
        e.set_defaults(func=func)

    s = sub.add_parser("subsample", help="reduce sparse-depth density")
    s.add_argument("--manifest", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--lines", type=int, help="keep N of 64 scan lines")
    s.add_argument("--samples", type=int, help="keep N uniformly chosen measurements")
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_subsample)

    w = sub.add_parser("powerlaw", help="fit error vs. number of samples")
    w.add_argument("--points", required=True, help="CSV with header and columns n_samples, rmse")
    w.add_argument("--out", default=".")
    w.set_defaults(func=cmd_powerlaw)

    y = sub.add_parser("synth", help="render a synthetic dataset")
    y.add_argument("--out", required=True)
    y.add_argument("--sequences", type=int, default=2)
    y.add_argument("--frames", type=int, default=8)
    y.add_argument("--height", type=int, default=64)
    y.add_argument("--width", type=int, default=128)
    y.add_argument("--focal", type=float, default=120.0)
    y.add_argument("--seed", type=int, default=0)
    y.set_defaults(func=cmd_synth)

    q = sub.add_parser("pose", help="debug dump of pose estimation for one frame pair")
    q.add_argument("--manifest", required=True)
    q.add_argument("--index", type=int, default=0)
    q.add_argument("--neighbor", type=int)
    q.add_argument("--seed", type=int, default=0)
    q.add_argument("--out", default="correspondences.csv")
    q.set_defaults(func=cmd_pose)
    return p


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"depthcomp: error: {exc}", file=sys.stderr)
        return 2
    except CliError as exc:
        print(f"depthcomp: error: {exc}", file=sys.stderr)
        return exc.code
    except (FileNotFoundError, ValueError) as exc:
        print(f"depthcomp: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
