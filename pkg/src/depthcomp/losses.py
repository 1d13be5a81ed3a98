"""Training losses: sparse-depth L2, masked multi-scale photometric L1,
second-order smoothness, and their weighted combination.

All masked losses reduce with a mean over the valid pixels and return an
exact (graph-connected) zero when nothing is valid.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence, Union

import numpy as np

from .autograd import Tensor, ShapeError, ops


@dataclass(frozen=True)
class LossWeights:
    beta1: float = 0.1  # photometric
    beta2: float = 0.1  # smoothness

    def __post_init__(self):
        if self.beta1 < 0 or self.beta2 < 0:
            raise ValueError(f"loss weights must be non-negative, got {self.beta1}, {self.beta2}")


@dataclass(frozen=True)
class ScaleSet:
    scales: tuple = (1, 2, 4, 8)

    def __post_init__(self):
        s = tuple(int(x) for x in self.scales)
        if not s or 1 not in s or any(x <= 0 for x in s) or any(b <= a for a, b in zip(s, s[1:])):
            raise ValueError(f"scales must be positive, strictly increasing and contain 1: {self.scales}")
        object.__setattr__(self, "scales", s)

    def __iter__(self):
        return iter(self.scales)


def _raw(x) -> np.ndarray:
    return x.data if isinstance(x, Tensor) else np.asarray(x)


def _zero(t: Tensor) -> Tensor:
    # keeps the graph connected so backward still populates (zero) grads
    return ops.mul(ops.sum(t), 0.0)


def _check_same(op: str, a, b) -> None:
    if tuple(a.shape) != tuple(b.shape):
        raise ShapeError(f"{op}: incompatible shapes {tuple(a.shape)} and {tuple(b.shape)}")


def depth_loss(pred: Tensor, d) -> Tensor:
    """Mean of (pred - d)^2 over pixels where d > 0."""
    _check_same("depth_loss", pred, d)
    dd = _raw(d)
    mask = dd > 0
    if not mask.any():
        return _zero(pred)
    diff = ops.masked_select(ops.sub(pred, Tensor(dd.astype(pred.dtype))), mask)
    return ops.mean(ops.square(diff))


def supervised_loss(pred: Tensor, annotation, kind: str = "l2") -> Tensor:
    """Masked L2 (default) or L1 error against a semi-dense annotation."""
    if kind == "l2":
        return depth_loss(pred, annotation)
    if kind != "l1":
        raise ValueError(f"unknown supervised loss {kind!r}")
    _check_same("supervised_loss", pred, annotation)
    ad = _raw(annotation)
    mask = ad > 0
    if not mask.any():
        return _zero(pred)
    diff = ops.masked_select(ops.sub(pred, Tensor(ad.astype(pred.dtype))), mask)
    return ops.mean(ops.abs(diff))


def _pool_np(x: np.ndarray, s: int) -> np.ndarray:
    if s == 1:
        return x
    n, c, h, w = x.shape
    ho, wo = h // s, w // s
    return x[:, :, :ho * s, :wo * s].reshape(n, c, ho, s, wo, s).mean(axis=(3, 5))


def photometric_mask(d_sparse, warp_validity) -> np.ndarray:
    """Pixels eligible for the photometric term: no depth measurement and a valid warp."""
    m = _raw(d_sparse) == 0
    if warp_validity is not None:
        m = m & (_raw(warp_validity) > 0)
    return m


def photometric_loss(warped: Tensor, target, d_sparse, warp_validity,
                     scales: Union[ScaleSet, Sequence[int]] = ScaleSet()) -> Tensor:
    """Sum over scales s of (1/s) * masked mean |warped - target| at scale s.

    The mask is applied at full resolution before average pooling, so pixels
    with a depth measurement (or an invalid warp) never influence any scale.
    Each coarse pixel is weighted by the fraction of its block that is valid.
    Channels are averaged.
    """
    target = target if isinstance(target, Tensor) else Tensor(np.asarray(target, dtype=warped.dtype))
    _check_same("photometric_loss", warped, target)
    n, c, h, w = warped.shape
    ds = _raw(d_sparse)
    if ds.shape != (n, 1, h, w):
        raise ShapeError(f"photometric_loss: incompatible shapes {warped.shape} and {ds.shape}")
    scales = tuple(int(s) for s in scales)
    if not scales or any(s <= 0 for s in scales):
        raise ValueError(f"scales must be positive integers: {scales}")

    mask = photometric_mask(ds, warp_validity).astype(warped.dtype)
    masked_diff = ops.mul(ops.sub(warped, target), mask)
    total: Optional[Tensor] = None
    for s in scales:
        weight = _pool_np(mask, s).sum() * c
        if weight <= 0:
            continue
        term = ops.mul(ops.sum(ops.abs(ops.avg_pool_resize(masked_diff, s))), float(1.0 / (weight * s)))
        total = term if total is None else ops.add(total, term)
    return total if total is not None else _zero(warped)


def _stencil(kind: str, dtype) -> Tensor:
    k = np.zeros((1, 1, 3, 3), dtype=dtype)
    if kind == "x":
        k[0, 0, 1] = (1.0, -2.0, 1.0)
    else:
        k[0, 0, :, 1] = (1.0, -2.0, 1.0)
    return Tensor(k)


def smoothness_loss(pred: Tensor) -> Tensor:
    """mean |d(u-1,v) - 2 d(u,v) + d(u+1,v)| + the vertical analogue, interior pixels."""
    if pred.ndim != 4 or pred.shape[2] < 3 or pred.shape[3] < 3:
        raise ShapeError(f"smoothness_loss: spatial dims must be >= 3, got {pred.shape}")
    total = None
    for kind in ("x", "y"):
        k = _stencil(kind, pred.dtype)
        if pred.shape[1] != 1:
            k = Tensor(np.tile(k.data, (1, pred.shape[1], 1, 1)) / pred.shape[1])
        term = ops.mean(ops.abs(ops.conv2d(pred, k)))
        total = term if total is None else ops.add(total, term)
    return total


def loss_components(pred: Tensor, d_sparse, warped: Optional[Tensor], target, warp_validity,
                    scales=ScaleSet()) -> dict:
    """Unweighted ``depth``, ``photo`` and ``smooth`` terms.

    ``warped is None`` means no usable neighbour view; the photometric term is
    then an exact zero.
    """
    depth = depth_loss(pred, d_sparse)
    if warped is None:
        photo = _zero(pred)
    else:
        photo = photometric_loss(warped, target, d_sparse, warp_validity, scales)
    return {"depth": depth, "photo": photo, "smooth": smoothness_loss(pred)}


def combine(components: dict, weights: LossWeights = LossWeights(), depth_weight: float = 1.0) -> Tensor:
    total = ops.mul(components["depth"], float(depth_weight))
    total = ops.add(total, ops.mul(components["photo"], weights.beta1))
    return ops.add(total, ops.mul(components["smooth"], weights.beta2))


def self_supervised_loss(pred: Tensor, d_sparse, warped: Optional[Tensor], target, warp_validity,
                         weights: LossWeights = LossWeights(), scales=ScaleSet(),
                         depth_weight: float = 1.0) -> Tensor:
    """depth + beta1 * photometric + beta2 * smoothness."""
    comps = loss_components(pred, d_sparse, warped, target, warp_validity, scales)
    return combine(comps, weights, depth_weight)
