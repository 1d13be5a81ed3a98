"""Supervised and self-supervised training loops.

A self-supervised step runs the whole pipeline for each (current, neighbour)
pair: dilate the sparse depth, match corners, RANSAC-PnP for the relative pose,
predict depth, inverse-warp the neighbour image, and minimise
depth + beta1 * photometric + beta2 * smoothness. When pose estimation fails
(or there is no neighbour) the pose becomes the identity and the neighbour
image is replaced by the current image, which makes the photometric term
exactly zero for that sample.
"""
from __future__ import annotations

import csv
import logging
import os
from dataclasses import dataclass, field, replace
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from .autograd import Tensor
from .data import Dataset, FrameSample, select_neighbor
from .geometry import PoseSE3, inverse_warp
from .losses import LossWeights, ScaleSet, combine, loss_components, supervised_loss
from .network import WEIGHT_DECAY, NetworkConfig, NetworkState, build, forward, to_gray
from .optim import AdamState, adam_update, lr_schedule
from .pose import PoseResult, estimate_pose

log = logging.getLogger(__name__)

MODES = ("supervised", "self_supervised", "photometric_only")
LOSS_COLUMNS = ("epoch", "step", "lr", "total", "depth_loss", "photo_loss", "smooth_loss", "pose_ok", "inliers",
                "skipped")
PHOTO_TARGETS = ("rgb1", "rgb2")


@dataclass
class TrainConfig:
    mode: str = "self_supervised"
    batch_size: Optional[int] = None  # None: 8 with an image branch, 16 for depth only
    lr0: float = 1e-5
    lr_halve_every: int = 5
    epochs: int = 12
    seed: int = 0
    beta1: float = 0.1
    beta2: float = 0.1
    scales: tuple = (1, 2, 4, 8)
    supervised_kind: str = "l2"
    photo_target: str = "rgb1"  # image the warped neighbour is compared with
    network: NetworkConfig = field(default_factory=NetworkConfig)
    train_manifest: str = ""
    val_manifest: str = ""
    crop_h: int = 0
    crop_w: int = 0
    steps_per_epoch: int = 0  # 0: one pass over the data

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.photo_target not in PHOTO_TARGETS:
            raise ValueError(f"photo_target must be one of {PHOTO_TARGETS}, got {self.photo_target!r}")
        if self.batch_size is None:
            self.batch_size = 8 if self.network.has_image else 16
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if not self.lr0 > 0:
            raise ValueError(f"lr0 must be positive, got {self.lr0}")
        self.scales = ScaleSet(tuple(self.scales)).scales

    @property
    def weights(self) -> LossWeights:
        return LossWeights(self.beta1, self.beta2)

    @property
    def crop(self) -> Optional[Tuple[int, int]]:
        return (self.crop_h, self.crop_w) if self.crop_h and self.crop_w else None


@dataclass
class StepReport:
    loss: float
    depth: float
    photo: float
    smooth: float
    pose_ok: List[bool]
    inliers: List[int]
    updated: bool


def make_optimizer(state: NetworkState) -> AdamState:
    wd = WEIGHT_DECAY if state.config.dropout_and_weight_decay else 0.0
    return AdamState.for_params(state.parameters(), weight_decay=wd)


def _stack(arrays: Sequence[np.ndarray]) -> np.ndarray:
    return np.concatenate([np.asarray(a, dtype=np.float32) for a in arrays], axis=0)


def _gray(sample: FrameSample) -> np.ndarray:
    return to_gray(sample.rgb)[0, 0]


def estimate_sample_pose(s1: FrameSample, s2: FrameSample, seed: int = 0) -> PoseResult:
    return estimate_pose(_gray(s1), s1.d_sparse[0, 0], _gray(s2), s1.intrinsics, seed=seed)


PoseProvider = Callable[[FrameSample, FrameSample], PoseResult]


class PoseCache:
    """Memoises pose results per (sequence, frame, neighbour frame)."""

    def __init__(self, provider: Optional[PoseProvider] = None, seed: int = 0):
        self.provider = provider or (lambda a, b: estimate_sample_pose(a, b, seed))
        self.store: Dict[tuple, PoseResult] = {}

    def __call__(self, s1: FrameSample, s2: FrameSample) -> PoseResult:
        key = (s1.sequence_id, s1.frame_index, s2.sequence_id, s2.frame_index)
        if key not in self.store:
            self.store[key] = self.provider(s1, s2)
        return self.store[key]


def _apply_update(state: NetworkState, opt: AdamState, loss: Tensor, lr: float) -> bool:
    state.zero_grad()
    loss.backward()
    return adam_update(state.parameters(), opt, lr)


def train_step_supervised(state: NetworkState, samples: Sequence[FrameSample], opt: AdamState,
                          cfg: TrainConfig, lr: float) -> StepReport:
    """One update on the masked error against each sample's annotation."""
    rgb = _stack([s.rgb for s in samples]) if state.config.has_image else None
    d = _stack([s.d_sparse for s in samples])
    if any(s.annotation is None for s in samples):
        raise ValueError("supervised training needs an annotation for every sample")
    ann = _stack([s.annotation for s in samples])
    pred = forward(state, rgb, d, training=True)
    loss = supervised_loss(pred, ann, cfg.supervised_kind)
    ok = _apply_update(state, opt, loss, lr)
    return StepReport(loss.item(), loss.item(), 0.0, 0.0, [], [], ok)


def train_step_self_supervised(state: NetworkState, sample1, sample2, opt: AdamState, cfg: TrainConfig,
                               lr: float, pose_provider: Optional[PoseProvider] = None) -> StepReport:
    """One update from current frames ``sample1`` and neighbours ``sample2``.

    Both arguments may be single samples or equal-length lists. A neighbour of
    None, or a failed pose, engages the identity-pose fallback.
    """
    s1 = [sample1] if isinstance(sample1, FrameSample) else list(sample1)
    s2 = [sample2] if isinstance(sample2, FrameSample) or sample2 is None else list(sample2)
    if len(s1) != len(s2):
        raise ValueError(f"{len(s1)} current frames but {len(s2)} neighbours")
    provider = pose_provider or (lambda a, b: estimate_sample_pose(a, b, cfg.seed))

    poses, neighbors, pose_ok, inliers = [], [], [], []
    for a, b in zip(s1, s2):
        result = provider(a, b) if b is not None else None
        if result is None or result.failed:
            poses.append(PoseSE3.identity())
            neighbors.append(a.rgb)
            pose_ok.append(False)
            inliers.append(0 if result is None else result.inlier_count)
        else:
            poses.append(result.pose)
            neighbors.append(b.rgb)
            pose_ok.append(True)
            inliers.append(result.inlier_count)

    rgb1 = _stack([a.rgb for a in s1])
    d1 = _stack([a.d_sparse for a in s1])
    pred = forward(state, rgb1 if state.config.has_image else None, d1, training=True)
    rgb2 = _stack(neighbors)
    warped, valid = inverse_warp(Tensor(rgb2), pred, [a.intrinsics for a in s1], poses)
    target = rgb1 if cfg.photo_target == "rgb1" else rgb2
    comps = loss_components(pred, d1, warped, target, valid, cfg.scales)
    depth_weight = 0.0 if cfg.mode == "photometric_only" else 1.0
    loss = combine(comps, cfg.weights, depth_weight)
    ok = _apply_update(state, opt, loss, lr)
    return StepReport(loss.item(), comps["depth"].item(), comps["photo"].item(), comps["smooth"].item(),
                      pose_ok, inliers, ok)


# -- full training run ---------------------------------------------------------

def _batches(order: np.ndarray, size: int) -> List[np.ndarray]:
    return [order[i:i + size] for i in range(0, len(order), size)]


def train(cfg: TrainConfig, run_dir: str, dataset: Optional[Dataset] = None,
          pose_provider: Optional[PoseProvider] = None) -> NetworkState:
    """Train from scratch, writing ``losses.csv`` and ``checkpoints/epoch_NNN`` under run_dir."""
    if dataset is None:
        if not cfg.train_manifest or not os.path.isfile(cfg.train_manifest):
            raise FileNotFoundError(f"training manifest not found: {cfg.train_manifest!r}")
        dataset = Dataset.from_manifest(cfg.train_manifest, cfg.crop)
    os.makedirs(os.path.join(run_dir, "checkpoints"), exist_ok=True)
    rng = np.random.default_rng(cfg.seed)
    state = build(cfg.network, cfg.seed)
    opt = make_optimizer(state)
    cache = PoseCache(pose_provider, cfg.seed)
    loss_path = os.path.join(run_dir, "losses.csv")
    step = 0
    with open(loss_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(LOSS_COLUMNS)
        for epoch in range(cfg.epochs):
            lr = lr_schedule(epoch, cfg.lr0, cfg.lr_halve_every)
            batches = _batches(rng.permutation(len(dataset)), cfg.batch_size)
            if cfg.steps_per_epoch:
                batches = [batches[i % len(batches)] for i in range(cfg.steps_per_epoch)]
            for idx in batches:
                samples = [dataset[int(i)] for i in idx]
                if cfg.mode == "supervised":
                    rep = train_step_supervised(state, samples, opt, cfg, lr)
                else:
                    nbr_idx = [select_neighbor(dataset, int(i), rng) for i in idx]
                    nbrs = [None if j is None else dataset[j] for j in nbr_idx]
                    rep = train_step_self_supervised(state, samples, nbrs, opt, cfg, lr, cache)
                writer.writerow([epoch, step, repr(lr), repr(rep.loss), repr(rep.depth), repr(rep.photo),
                                 repr(rep.smooth), sum(rep.pose_ok), sum(rep.inliers), int(not rep.updated)])
                step += 1
            fh.flush()
            state.save(os.path.join(run_dir, "checkpoints", f"epoch_{epoch:03d}"))
            log.info("epoch %d done: lr=%g last loss=%.6g skipped=%d", epoch, lr, rep.loss, opt.skipped_steps)
    return state


def latest_checkpoint(run_dir: str) -> str:
    ckdir = os.path.join(run_dir, "checkpoints")
    names = sorted(n for n in os.listdir(ckdir) if n.startswith("epoch_")) if os.path.isdir(ckdir) else []
    if not names:
        raise FileNotFoundError(f"no checkpoints under {ckdir}")
    return os.path.join(ckdir, names[-1])


def read_loss_csv(path: str) -> Dict[str, np.ndarray]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return {k: np.array([float(r[k]) for r in rows]) for k in LOSS_COLUMNS}


def with_mode(cfg: TrainConfig, mode: str) -> TrainConfig:
    return replace(cfg, mode=mode)
