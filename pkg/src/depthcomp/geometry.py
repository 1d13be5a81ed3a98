"""Pinhole camera model, rigid transforms and differentiable inverse warping."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence, Union

import numpy as np

from .autograd import Tensor, ShapeError, bilinear_sample

Z_MIN = 1e-3
# coordinate written for pixels that cannot be warped; always out of bounds
_INVALID_COORD = -1.0e4


@dataclass(frozen=True)
class Intrinsics:
    fx: float
    fy: float
    cx: float
    cy: float

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError(f"focal lengths must be positive, got fx={self.fx}, fy={self.fy}")

    @property
    def matrix(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    def scaled(self, factor: float) -> "Intrinsics":
        return Intrinsics(self.fx * factor, self.fy * factor, self.cx * factor, self.cy * factor)

    def cropped(self, top: int, left: int) -> "Intrinsics":
        return Intrinsics(self.fx, self.fy, self.cx - left, self.cy - top)


@dataclass(frozen=True)
class PoseSE3:
    """Rigid transform taking frame-1 coordinates into frame 2: x2 = R x1 + t."""
    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        r = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if not np.allclose(r.T @ r, np.eye(3), atol=1e-6) or abs(np.linalg.det(r) - 1.0) > 1e-6:
            raise ValueError("rotation is not orthonormal with det +1")
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "PoseSE3":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_matrix(cls, m: np.ndarray) -> "PoseSE3":
        return cls(m[:3, :3], m[:3, 3])

    @property
    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    def inverse(self) -> "PoseSE3":
        rt = self.rotation.T
        return PoseSE3(rt, -rt @ self.translation)

    def compose(self, other: "PoseSE3") -> "PoseSE3":
        """self after other."""
        return PoseSE3(self.rotation @ other.rotation, self.rotation @ other.translation + self.translation)

    def apply(self, points: np.ndarray) -> np.ndarray:
        """Transform (..., 3) points."""
        return np.asarray(points) @ self.rotation.T + self.translation

    def is_identity(self) -> bool:
        return bool(np.array_equal(self.rotation, np.eye(3)) and not np.any(self.translation))

    def rotation_angle(self) -> float:
        """Rotation magnitude in radians."""
        c = (np.trace(self.rotation) - 1.0) / 2.0
        return float(np.arccos(np.clip(c, -1.0, 1.0)))


def rotation_from_axis_angle(axis, angle: float) -> np.ndarray:
    axis = np.asarray(axis, dtype=np.float64)
    return rodrigues(axis / np.linalg.norm(axis) * angle)


def rodrigues(omega: np.ndarray) -> np.ndarray:
    """Rotation matrix exp([omega]x)."""
    omega = np.asarray(omega, dtype=np.float64)
    theta = np.linalg.norm(omega)
    k = skew(omega)
    if theta < 1e-12:
        return np.eye(3) + k
    k = k / theta
    return np.eye(3) + np.sin(theta) * k + (1 - np.cos(theta)) * (k @ k)


def skew(w: np.ndarray) -> np.ndarray:
    return np.array([[0.0, -w[2], w[1]], [w[2], 0.0, -w[0]], [-w[1], w[0], 0.0]])


def orthonormalize(r: np.ndarray) -> np.ndarray:
    u, _, vt = np.linalg.svd(r)
    out = u @ vt
    if np.linalg.det(out) < 0:
        u[:, -1] *= -1
        out = u @ vt
    return out


def backproject(pixel, depth: float, K: Intrinsics) -> np.ndarray:
    """3-D point (meters) seen at ``pixel`` = (u, v) with the given depth."""
    if not depth > 0:
        raise ValueError(f"backproject needs positive depth, got {depth}")
    u, v = pixel
    return np.array([(u - K.cx) / K.fx * depth, (v - K.cy) / K.fy * depth, depth])


def backproject_many(pixels: np.ndarray, depths: np.ndarray, K: Intrinsics) -> np.ndarray:
    pixels = np.asarray(pixels, dtype=np.float64).reshape(-1, 2)
    z = np.asarray(depths, dtype=np.float64).reshape(-1)
    if np.any(z <= 0):
        raise ValueError("backproject needs positive depth")
    return np.stack([(pixels[:, 0] - K.cx) / K.fx * z, (pixels[:, 1] - K.cy) / K.fy * z, z], axis=1)


def project(point, K: Intrinsics):
    """(u, v, valid) for a 3-D point; valid is False at or behind Z = z_min."""
    x, y, z = (float(c) for c in point)
    if z <= Z_MIN:
        return float("nan"), float("nan"), False
    return K.fx * x / z + K.cx, K.fy * y / z + K.cy, True


def project_many(points: np.ndarray, K: Intrinsics):
    p = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    valid = p[:, 2] > Z_MIN
    z = np.where(valid, p[:, 2], 1.0)
    uv = np.stack([K.fx * p[:, 0] / z + K.cx, K.fy * p[:, 1] / z + K.cy], axis=1)
    uv[~valid] = np.nan
    return uv, valid


def pixel_grid(h: int, w: int) -> np.ndarray:
    """(2, H, W) array of (u, v) pixel-centre coordinates."""
    v, u = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64), indexing="ij")
    return np.stack([u, v])


PerBatch = Union[Intrinsics, Sequence[Intrinsics]]
PosePerBatch = Union[PoseSE3, Sequence[PoseSE3]]


def _per_batch(value, n: int) -> list:
    if isinstance(value, (Intrinsics, PoseSE3)):
        return [value] * n
    value = list(value)
    if len(value) != n:
        raise ShapeError(f"expected {n} per-sample entries, got {len(value)}")
    return value


def warp_coordinates(depth: Tensor, K: PerBatch, T: PosePerBatch):
    """Source coordinates in frame 2 for every frame-1 pixel.

    Implements p2 = K (R z K^-1 p1 + t) with the perspective division. Returns a
    differentiable (N, 2, H, W) coordinate tensor and an (N, 1, H, W) float mask
    that is zero where depth <= 0 or the transformed point is not in front of
    the camera (Z <= z_min). Invalid pixels get an out-of-bounds coordinate and
    zero gradient.
    """
    if depth.ndim != 4 or depth.shape[1] != 1:
        raise ShapeError(f"warp_coordinates: depth must be (N,1,H,W), got {depth.shape}")
    n, _, h, w = depth.shape
    Ks, Ts = _per_batch(K, n), _per_batch(T, n)
    grid = pixel_grid(h, w)
    ones = np.ones((1, h, w))
    coords = np.empty((n, 2, h, w))
    dcoords_dz = np.zeros((n, 2, h, w))
    valid = np.zeros((n, 1, h, w), dtype=bool)
    z = depth.data[:, 0].astype(np.float64)

    for b in range(n):
        k, pose = Ks[b], Ts[b]
        zb = z[b]
        ok = zb > 0
        if pose.is_identity():
            # exact identity grid: the failure path relies on warped == image bit for bit
            coords[b] = grid
            valid[b, 0] = ok
            continue
        rays = np.concatenate([(grid[0:1] - k.cx) / k.fx, (grid[1:2] - k.cy) / k.fy, ones])
        a = np.einsum("ij,jhw->ihw", pose.rotation, rays)
        p = a * zb + pose.translation.reshape(3, 1, 1)
        ok &= p[2] > Z_MIN
        pz = np.where(ok, p[2], 1.0)
        coords[b, 0] = k.fx * p[0] / pz + k.cx
        coords[b, 1] = k.fy * p[1] / pz + k.cy
        dcoords_dz[b, 0] = k.fx * (a[0] * pz - p[0] * a[2]) / (pz * pz)
        dcoords_dz[b, 1] = k.fy * (a[1] * pz - p[1] * a[2]) / (pz * pz)
        valid[b, 0] = ok

    coords = np.where(valid, coords, _INVALID_COORD)
    dcoords_dz = np.where(valid, dcoords_dz, 0.0)
    dtype = depth.dtype

    def backward(g):
        return ((g * dcoords_dz).sum(axis=1, keepdims=True).astype(dtype),)

    coords_t = Tensor.from_op(coords.astype(dtype), (depth,), backward)
    return coords_t, valid.astype(dtype)


def inverse_warp(neighbor_image: Tensor, depth_pred: Tensor, K: PerBatch, T: PosePerBatch):
    """Synthesize frame 1 from the frame-2 image using predicted depth and pose.

    Returns ``(warped, validity_mask)``; the mask is zero for pixels with no
    depth, points behind the camera, and samples outside frame 2.
    """
    if neighbor_image.ndim != 4 or depth_pred.ndim != 4 \
            or neighbor_image.shape[0] != depth_pred.shape[0] \
            or neighbor_image.shape[2:] != depth_pred.shape[2:]:
        raise ShapeError(f"inverse_warp: incompatible shapes {neighbor_image.shape} and {depth_pred.shape}")
    coords, warp_ok = warp_coordinates(depth_pred, K, T)
    warped, in_bounds = bilinear_sample(neighbor_image, coords)
    return warped, warp_ok * in_bounds
