"""KITTI-style depth-completion data: PNG depth I/O, calibration, manifests,
temporal neighbour selection and the two sparsity-reduction patterns.

A manifest is a text file with one frame per line::

    <rgb> <sparse depth> <annotation or -> <calibration>

Paths are relative to the manifest's directory. The sequence id of a frame is
the first component of its colour-image path (the drive folder in the KITTI
layout), and the frame index is the last run of digits in the image file name
(``0000000042.png`` -> 42).
"""
from __future__ import annotations

import os
import re
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from PIL import Image

from .geometry import Intrinsics

DEPTH_SCALE = 256.0
N_SCAN_BINS = 64
MAX_NEIGHBORS = 6


# -- PNG depth -----------------------------------------------------------------

def load_depth_raw(path: str) -> np.ndarray:
    """Raw uint16 values of a 16-bit single-channel PNG."""
    with Image.open(path) as im:
        if im.mode not in ("I;16", "I;16B", "I;16L", "I"):
            bands = len(im.getbands())
            raise ValueError(f"{path}: expected a 16-bit single-channel PNG, got mode {im.mode!r} "
                             f"({bands} channel{'s' if bands != 1 else ''})")
        raw = np.array(im)
    if raw.ndim != 2:
        raise ValueError(f"{path}: expected one channel, got array of shape {raw.shape}")
    if raw.dtype != np.uint16:
        if raw.min() < 0 or raw.max() > 65535:
            raise ValueError(f"{path}: values outside the 16-bit range")
        raw = raw.astype(np.uint16)
    return raw


def load_depth_png(path: str) -> np.ndarray:
    """Depth in meters (float32, H x W); 0 marks a missing measurement."""
    return (load_depth_raw(path).astype(np.float32) / DEPTH_SCALE).astype(np.float32)


def save_depth_raw(path: str, raw: np.ndarray) -> None:
    raw = np.asarray(raw)
    if raw.ndim != 2 or raw.dtype != np.uint16:
        raise ValueError(f"raw depth must be a 2-D uint16 array, got {raw.dtype} {raw.shape}")
    Image.fromarray(raw).save(path)


def depth_to_raw(depth_m: np.ndarray, min_depth: Optional[float] = None) -> np.ndarray:
    """Meters to raw uint16 (round to nearest 1/256 m). Missing (<= 0) stays 0.

    With ``min_depth`` every pixel is floored so the *stored* value is at least
    ``min_depth`` after the /256 decode.
    """
    d = np.asarray(depth_m, dtype=np.float64)
    raw = np.rint(np.clip(d, 0.0, 65535 / DEPTH_SCALE) * DEPTH_SCALE)
    if min_depth is not None:
        raw = np.maximum(raw, np.ceil(min_depth * DEPTH_SCALE))
    return raw.astype(np.uint16)


def save_depth_png(path: str, depth_m: np.ndarray, min_depth: Optional[float] = None) -> None:
    save_depth_raw(path, depth_to_raw(depth_m, min_depth))


# -- colour and calibration ----------------------------------------------------

def load_rgb(path: str) -> np.ndarray:
    """(3, H, W) float32 in [0, 1] from an 8-bit PNG/PPM (gray is replicated)."""
    with Image.open(path) as im:
        if im.mode not in ("RGB", "RGBA", "L", "P"):
            raise ValueError(f"{path}: expected an 8-bit colour or gray image, got mode {im.mode!r}")
        arr = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
    return np.ascontiguousarray(arr.transpose(2, 0, 1))


def save_rgb(path: str, rgb: np.ndarray) -> None:
    arr = np.clip(np.rint(np.asarray(rgb).transpose(1, 2, 0) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr).save(path)


def load_calibration(path: str, camera: str = "02") -> Intrinsics:
    """Read intrinsics.

    Accepted forms: a line of four numbers ``fx fy cx cy``; a ``K:`` line with
    nine numbers; or a KITTI ``P_rect_<camera>:`` / ``P2:`` line with twelve.
    """
    with open(path) as fh:
        lines = [ln.strip() for ln in fh if ln.strip() and not ln.lstrip().startswith("#")]
    keyed = {}
    for ln in lines:
        if ":" in ln:
            key, _, rest = ln.partition(":")
            keyed[key.strip()] = rest.split()
    for key in (f"P_rect_{camera}", f"P{int(camera)}"):
        if key in keyed:
            vals = [float(x) for x in keyed[key]]
            if len(vals) != 12:
                raise ValueError(f"{path}: {key} needs 12 values, got {len(vals)}")
            return Intrinsics(vals[0], vals[5], vals[2], vals[6])
    if "K" in keyed:
        vals = [float(x) for x in keyed["K"]]
        if len(vals) != 9:
            raise ValueError(f"{path}: K needs 9 values, got {len(vals)}")
        return Intrinsics(vals[0], vals[4], vals[2], vals[5])
    for ln in lines:
        parts = ln.split()
        if len(parts) == 4 and ":" not in ln:
            return Intrinsics(*(float(x) for x in parts))
    raise ValueError(f"{path}: no intrinsics found (expected 'fx fy cx cy', 'K:' or 'P_rect_{camera}:')")


def save_calibration(path: str, K: Intrinsics) -> None:
    with open(path, "w") as fh:
        fh.write(f"{K.fx!r} {K.fy!r} {K.cx!r} {K.cy!r}\n")


# -- frames and manifests ------------------------------------------------------

@dataclass
class FrameSample:
    rgb: np.ndarray                   # (1, 3, H, W) in [0, 1]
    d_sparse: np.ndarray              # (1, 1, H, W) meters, 0 = missing
    annotation: Optional[np.ndarray]  # (1, 1, H, W) or None
    intrinsics: Intrinsics
    sequence_id: str
    frame_index: int

    def __post_init__(self):
        hw = self.rgb.shape[2:]
        if self.d_sparse.shape[2:] != hw or (self.annotation is not None and self.annotation.shape[2:] != hw):
            raise ValueError("rgb, sparse depth and annotation must share H and W")


@dataclass(frozen=True)
class FrameRecord:
    rgb: str
    sparse: str
    annotation: Optional[str]
    calib: str
    sequence_id: str
    frame_index: int


def frame_index_from_name(path: str) -> int:
    digits = re.findall(r"\d+", os.path.splitext(os.path.basename(path))[0])
    if not digits:
        raise ValueError(f"cannot read a frame index from {path!r}")
    return int(digits[-1])


def sequence_id_from_path(rel_path: str) -> str:
    parts = [p for p in re.split(r"[\\/]+", rel_path) if p not in ("", ".")]
    return parts[0] if len(parts) > 1 else ""


def bottom_crop_box(h: int, w: int, out_h: int, out_w: int) -> Tuple[int, int]:
    """(top, left) of a crop keeping the bottom rows, horizontally centred."""
    if out_h > h or out_w > w:
        raise ValueError(f"crop {out_h}x{out_w} larger than image {h}x{w}")
    return h - out_h, (w - out_w) // 2


class Dataset:
    """Frames listed by a manifest, grouped into sequences."""

    def __init__(self, records: Sequence[FrameRecord], crop: Optional[Tuple[int, int]] = None):
        self.records = list(records)
        self.crop = crop
        self._by_seq: Dict[str, List[int]] = {}
        for i, r in enumerate(self.records):
            self._by_seq.setdefault(r.sequence_id, []).append(i)
        for idx in self._by_seq.values():
            idx.sort(key=lambda i: self.records[i].frame_index)

    @classmethod
    def from_manifest(cls, path: str, crop: Optional[Tuple[int, int]] = None) -> "Dataset":
        if not os.path.isfile(path):
            raise FileNotFoundError(f"manifest not found: {path}")
        root = os.path.dirname(os.path.abspath(path))
        records = []
        with open(path) as fh:
            for lineno, line in enumerate(fh, 1):
                line = line.strip()
                if not line or line.startswith("#"):
                    continue
                parts = line.split()
                if len(parts) != 4:
                    raise ValueError(f"{path}:{lineno}: expected 4 fields (rgb sparse annotation calib), "
                                     f"got {len(parts)}")
                rgb, sparse, ann, calib = (os.path.join(root, p) for p in parts)
                ann = None if parts[2] == "-" else ann
                seq = sequence_id_from_path(parts[0])
                records.append(FrameRecord(rgb, sparse, ann, calib, seq, frame_index_from_name(rgb)))
        if not records:
            raise ValueError(f"{path}: manifest lists no frames")
        return cls(records, crop)

    def __len__(self) -> int:
        return len(self.records)

    def sequences(self) -> Dict[str, List[int]]:
        return {k: list(v) for k, v in self._by_seq.items()}

    def __getitem__(self, i: int) -> FrameSample:
        r = self.records[i]
        rgb = load_rgb(r.rgb)
        sparse = load_depth_png(r.sparse)
        ann = load_depth_png(r.annotation) if r.annotation else None
        K = load_calibration(r.calib)
        if sparse.shape != rgb.shape[1:] or (ann is not None and ann.shape != sparse.shape):
            raise ValueError(f"frame {r.rgb}: image and depth sizes differ")
        if self.crop is not None:
            top, left = bottom_crop_box(*sparse.shape, *self.crop)
            oh, ow = self.crop
            rgb = rgb[:, top:top + oh, left:left + ow]
            sparse = sparse[top:top + oh, left:left + ow]
            ann = None if ann is None else ann[top:top + oh, left:left + ow]
            K = K.cropped(top, left)
        return FrameSample(rgb[None].copy(), sparse[None, None].copy(),
                           None if ann is None else ann[None, None].copy(), K, r.sequence_id, r.frame_index)

    def neighbor_candidates(self, i: int) -> List[int]:
        """Dataset indices of the up-to-6 temporally nearest frames of the same sequence."""
        r = self.records[i]
        by_frame = {self.records[j].frame_index: j for j in self._by_seq[r.sequence_id] if j != i}
        return [by_frame[f] for f in neighbor_candidates(list(by_frame), r.frame_index)]


def neighbor_candidates(frame_indices: Sequence[int], current: int, k: int = MAX_NEIGHBORS) -> List[int]:
    """The k frame indices nearest in time to ``current``, never ``current`` itself.

    Ties in distance are broken toward the earlier frame.
    """
    others = sorted({f for f in frame_indices if f != current}, key=lambda f: (abs(f - current), f))
    return sorted(others[:k])


def select_neighbor(dataset: Dataset, current: int, rng: np.random.Generator) -> Optional[int]:
    """Uniformly pick one of the nearest frames of ``current``; None for a singleton sequence."""
    cands = dataset.neighbor_candidates(current)
    if not cands:
        return None
    return cands[int(rng.integers(len(cands)))]


# -- sparsity reduction --------------------------------------------------------

def elevation_bins(d: np.ndarray, K: Intrinsics, n_bins: int = N_SCAN_BINS) -> np.ndarray:
    """Elevation bin (0..n_bins-1) of every pixel; -1 where there is no measurement.

    Elevation is recovered from the row as atan((cy - v) / fy) and bucketed
    uniformly between the lowest and highest measured elevation.
    """
    d = np.asarray(d)
    h = d.shape[-2]
    theta_rows = np.arctan((K.cy - np.arange(h)) / K.fy)
    mask = d > 0
    theta = np.broadcast_to(theta_rows[:, None], d.shape[-2:])
    theta = np.broadcast_to(theta, d.shape)
    bins = np.full(d.shape, -1, dtype=np.int64)
    if not mask.any():
        return bins
    lo, hi = theta[mask].min(), theta[mask].max()
    span = hi - lo
    rel = (theta - lo) / span if span > 0 else np.zeros_like(theta)
    bins[mask] = np.rint(rel[mask] * (n_bins - 1)).astype(np.int64)
    return bins


def kept_bins(n_lines: int, n_bins: int = N_SCAN_BINS) -> np.ndarray:
    """n_lines evenly spaced bin ids, floor(i * n_bins / n_lines)."""
    return (np.arange(n_lines) * n_bins) // n_lines


def subsample_scanlines(d: np.ndarray, n_lines: int, K: Intrinsics) -> np.ndarray:
    """Keep measurements of ``n_lines`` evenly spaced elevation bins of a 64-line scan."""
    if not 1 <= n_lines <= N_SCAN_BINS:
        raise ValueError(f"n_lines must be in [1, {N_SCAN_BINS}], got {n_lines}")
    d = np.asarray(d)
    if n_lines == N_SCAN_BINS:
        return d.copy()
    bins = elevation_bins(d, K)
    keep = np.isin(bins, kept_bins(n_lines))
    return np.where(keep, d, 0).astype(d.dtype)


def subsample_uniform(d: np.ndarray, n_samples: int, seed: int = 0) -> np.ndarray:
    """Keep min(n_samples, available) measurements chosen uniformly without replacement."""
    if n_samples < 0:
        raise ValueError(f"n_samples must be >= 0, got {n_samples}")
    d = np.asarray(d)
    flat = d.reshape(-1)
    idx = np.flatnonzero(flat > 0)
    if n_samples >= idx.size:
        return d.copy()
    chosen = np.random.default_rng(seed).choice(idx, size=n_samples, replace=False)
    out = np.zeros_like(flat)
    out[chosen] = flat[chosen]
    return out.reshape(d.shape)
