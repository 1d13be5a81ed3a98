"""Ray-cast renderer for small textured planar scenes.

Produces exact depth, images and relative poses for two or more views, so the
warping, pose and training code can be checked against known geometry.
"""
from __future__ import annotations

import os
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence

import numpy as np

from .geometry import Intrinsics, PoseSE3, backproject_many, pixel_grid, project_many, rotation_from_axis_angle
from .pose import Correspondence


@dataclass
class Plane:
    """Plane n . X = offset (world frame) with a texture over world points."""
    normal: np.ndarray
    offset: float
    texture: Callable[[np.ndarray], np.ndarray]


def sinusoid_texture(periods=(3.0, 2.2, 1.7), amplitude: float = 0.2, phase: float = 0.0):
    """Smooth periodic texture; ``periods`` are wavelengths in meters along x, y, z."""
    px, py, pz = periods

    def tex(points: np.ndarray) -> np.ndarray:
        x, y, z = points[..., 0], points[..., 1], points[..., 2]
        return (0.5 + amplitude * np.sin(2 * np.pi * x / px + phase) * np.sin(2 * np.pi * y / py + 0.7 * phase)
                + 0.5 * amplitude * np.sin(2 * np.pi * (x + z) / pz + 1.3 + phase))

    return tex


def fourier_texture(seed: int = 0, count: int = 24, wavelengths=(0.6, 2.5), amplitude: float = 0.4):
    """Random sum of plane waves in 3-D: band-limited, corner rich, defined everywhere."""
    rng = np.random.default_rng(seed)
    dirs = rng.standard_normal((count, 3))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    lam = rng.uniform(*wavelengths, size=count)
    k = dirs * (2 * np.pi / lam)[:, None]
    phase = rng.uniform(0, 2 * np.pi, size=count)
    amp = amplitude / np.sqrt(count) * rng.uniform(0.5, 1.0, size=count)

    def tex(points: np.ndarray) -> np.ndarray:
        return 0.5 + np.sin(points @ k.T + phase) @ amp

    return tex


def render(planes: Sequence[Plane], K: Intrinsics, world_to_cam: PoseSE3, h: int, w: int,
           channels: int = 1):
    """Render intensity (channels, H, W) and depth (H, W) for a camera.

    Pixels that hit no plane in front of the camera get depth 0 and intensity 0.
    With ``channels == 3`` each channel uses the plane texture at a shifted point,
    giving a colour image whose luma still carries the texture structure.
    """
    grid = pixel_grid(h, w)
    rays_cam = np.stack([(grid[0] - K.cx) / K.fx, (grid[1] - K.cy) / K.fy, np.ones((h, w))], axis=-1)
    r = world_to_cam.rotation
    center = -r.T @ world_to_cam.translation
    dirs = rays_cam @ r  # (H, W, 3) world directions, r.T applied row-wise
    best = np.full((h, w), np.inf)
    owner = np.full((h, w), -1)
    for i, pl in enumerate(planes):
        n = np.asarray(pl.normal, dtype=np.float64)
        denom = dirs @ n
        with np.errstate(divide="ignore", invalid="ignore"):
            lam = (pl.offset - n @ center) / denom
        hit = np.isfinite(lam) & (lam > 1e-6) & (lam < best)
        best = np.where(hit, lam, best)
        owner = np.where(hit, i, owner)
    # with unit-z camera rays, the ray parameter equals camera-frame depth
    depth = np.where(owner >= 0, best, 0.0)
    points = center + dirs * np.where(owner >= 0, best, 0.0)[..., None]
    image = np.zeros((channels, h, w))
    for i, pl in enumerate(planes):
        sel = owner == i
        if not sel.any():
            continue
        for c in range(channels):
            shift = np.array([0.37 * c, 0.21 * c, 0.0])
            image[c][sel] = pl.texture(points[sel] + shift)
    return image, depth


@dataclass
class TwoViewScene:
    image1: np.ndarray          # (C, H, W)
    image2: np.ndarray
    depth1: np.ndarray          # (H, W) meters
    depth2: np.ndarray
    K: Intrinsics
    pose: PoseSE3               # frame 1 -> frame 2
    extra_images: List[np.ndarray] = field(default_factory=list)
    extra_depths: List[np.ndarray] = field(default_factory=list)
    extra_poses: List[PoseSE3] = field(default_factory=list)


def fronto_parallel_scene(h: int = 64, w: int = 96, depth: float = 8.0, tx: float = 0.8,
                          focal: float = 200.0, channels: int = 1, texture=None) -> TwoViewScene:
    """Single plane at constant depth, second camera translated along x."""
    K = Intrinsics(focal, focal, (w - 1) / 2.0, (h - 1) / 2.0)
    tex = texture or sinusoid_texture(periods=(4.0, 3.0, 5.0), amplitude=0.15)
    planes = [Plane(np.array([0.0, 0.0, 1.0]), depth, tex)]
    pose = PoseSE3(np.eye(3), np.array([-tx, 0.0, 0.0]))
    img1, d1 = render(planes, K, PoseSE3.identity(), h, w, channels)
    img2, d2 = render(planes, K, pose, h, w, channels)
    return TwoViewScene(img1, img2, d1, d2, K, pose)


def slanted_plane_scene(h: int = 64, w: int = 128, focal: float = 150.0, channels: int = 1,
                        baseline: float = 1.5, texture=None) -> TwoViewScene:
    """One tilted plane (no depth discontinuities) under a general rigid motion.

    The texture is smooth enough that bilinear resampling is accurate to a few
    1e-4, which makes this the reference scene for warping checks.
    """
    K = Intrinsics(focal, focal, (w - 1) / 2.0, (h - 1) / 2.0)
    normal = np.array([0.0, -0.3, 1.0])
    tex = texture or fourier_texture(wavelengths=(2.0, 6.0))
    planes = [Plane(normal / np.linalg.norm(normal), 8.0, tex)]
    pose = PoseSE3(rotation_from_axis_angle([0.2, 1.0, 0.1], np.deg2rad(2.0)),
                   np.array([baseline, 0.05, -0.3]))
    img1, d1 = render(planes, K, PoseSE3.identity(), h, w, channels)
    img2, d2 = render(planes, K, pose, h, w, channels)
    return TwoViewScene(img1, img2, d1, d2, K, pose)


def street_scene_planes(texture=None) -> list:
    """Back wall, ground and a slanted side wall (y axis points down)."""
    tex = texture or fourier_texture()
    side_n = np.array([1.0, 0.0, 0.35])
    return [
        Plane(np.array([0.0, 0.0, 1.0]), 14.0, tex),
        Plane(np.array([0.0, 1.0, 0.0]), 1.6, tex),
        Plane(side_n / np.linalg.norm(side_n), -2.5, tex),
    ]


def two_view_scene(h: int = 64, w: int = 128, focal: float = 120.0, channels: int = 1,
                   pose: Optional[PoseSE3] = None, planes=None, n_extra: int = 0) -> TwoViewScene:
    """Non-planar textured scene seen from two (or more) nearby cameras.

    The default relative pose is a small forward/sideways motion with a yaw of
    one degree, similar to consecutive driving frames.
    """
    K = Intrinsics(focal, focal, (w - 1) / 2.0, (h - 1) / 2.0)
    planes = planes or street_scene_planes()
    if pose is None:
        pose = PoseSE3(rotation_from_axis_angle([0, 1, 0], np.deg2rad(1.0)), np.array([0.15, 0.02, -0.4]))
    img1, d1 = render(planes, K, PoseSE3.identity(), h, w, channels)
    img2, d2 = render(planes, K, pose, h, w, channels)
    scene = TwoViewScene(img1, img2, d1, d2, K, pose)
    for i in range(n_extra):
        extra = PoseSE3(rotation_from_axis_angle([0, 1, 0], np.deg2rad(0.5 * (i + 2))),
                        np.array([0.05 * (i + 2), 0.0, -0.4 * (i + 2)]))
        im, d = render(planes, K, extra, h, w, channels)
        scene.extra_images.append(im)
        scene.extra_depths.append(d)
        scene.extra_poses.append(extra)
    return scene


def sparse_from_dense(depth: np.ndarray, fraction: float, seed: int = 0) -> np.ndarray:
    """Keep a random ``fraction`` of the valid pixels of a dense depth map."""
    rng = np.random.default_rng(seed)
    keep = (rng.random(depth.shape) < fraction) & (depth > 0)
    return np.where(keep, depth, 0.0)


def scanline_depth(depth: np.ndarray, K: Intrinsics, n_lines: int = 64, row_start: int = 0,
                   row_step: int = 1, col_step: int = 1) -> np.ndarray:
    """Simulate a scanner: keep rows ``row_start + i * row_step`` for i < n_lines."""
    out = np.zeros_like(depth)
    rows = row_start + row_step * np.arange(n_lines)
    rows = rows[rows < depth.shape[0]]
    out[rows[:, None], np.arange(0, depth.shape[1], col_step)[None, :]] = \
        depth[rows[:, None], np.arange(0, depth.shape[1], col_step)[None, :]]
    return out


def lidar_scan(depth: np.ndarray, K: Intrinsics, n_rings: int = 64, elevation_deg=(-24.8, 2.0),
               col_step: int = 4, col_offset: int = 0) -> np.ndarray:
    """Simulated multi-ring scanner.

    Ring i sits at an elevation evenly spaced over ``elevation_deg`` and lands on
    row round(cy - fy * tan(elevation)); rings falling outside the image are
    lost. Every ``col_step``-th column of a ring row is measured.
    """
    elev = np.deg2rad(np.linspace(elevation_deg[0], elevation_deg[1], n_rings))
    rows = np.rint(K.cy - K.fy * np.tan(elev)).astype(int)
    rows = np.unique(rows[(rows >= 0) & (rows < depth.shape[0])])
    out = np.zeros_like(depth)
    cols = np.arange(col_offset % col_step, depth.shape[1], col_step)
    out[np.ix_(rows, cols)] = depth[np.ix_(rows, cols)]
    return out


def driving_poses(n: int, step: float = 0.3, yaw_deg: float = 0.3, lateral: float = 0.05) -> List[PoseSE3]:
    """World-to-camera poses of a camera moving forward with a slow turn."""
    poses = []
    for k in range(n):
        r = rotation_from_axis_angle([0, 1, 0], np.deg2rad(yaw_deg * k))
        center = np.array([lateral * k, 0.0, step * k])
        poses.append(PoseSE3(r.T, -r.T @ center))
    return poses


def write_synthetic_dataset(root: str, n_sequences: int = 2, n_frames: int = 8, h: int = 64, w: int = 128,
                            focal: float = 120.0, seed: int = 0) -> str:
    """Render driving-like sequences in the KITTI depth-completion layout.

    Writes ``<seq>/image_02/data/*.png``, ``<seq>/proj_depth/velodyne_raw/image_02/*.png``,
    ``<seq>/proj_depth/groundtruth/image_02/*.png``, ``<seq>/calib.txt`` and a
    ``manifest.txt`` at ``root``; returns the manifest path.
    """
    from .data import save_calibration, save_depth_png, save_rgb

    K = Intrinsics(focal, focal, (w - 1) / 2.0, (h - 1) / 2.0)
    lines = []
    for s in range(n_sequences):
        seq = f"seq_{s:02d}"
        dirs = {k: os.path.join(root, seq, *sub) for k, sub in (
            ("rgb", ("image_02", "data")), ("sparse", ("proj_depth", "velodyne_raw", "image_02")),
            ("gt", ("proj_depth", "groundtruth", "image_02")))}
        for d in dirs.values():
            os.makedirs(d, exist_ok=True)
        calib = os.path.join(root, seq, "calib.txt")
        save_calibration(calib, K)
        planes = street_scene_planes(fourier_texture(seed=seed + s, count=64, wavelengths=(0.3, 1.0)))
        for k, pose in enumerate(driving_poses(n_frames)):
            img, depth = render(planes, K, pose, h, w, channels=3)
            name = f"{k:010d}.png"
            save_rgb(os.path.join(dirs["rgb"], name), np.clip(img, 0, 1))
            save_depth_png(os.path.join(dirs["sparse"], name), lidar_scan(depth, K, col_offset=k))
            save_depth_png(os.path.join(dirs["gt"], name), depth)
            lines.append(" ".join(os.path.relpath(p, root) for p in (
                os.path.join(dirs["rgb"], name), os.path.join(dirs["sparse"], name),
                os.path.join(dirs["gt"], name), calib)))
    manifest = os.path.join(root, "manifest.txt")
    with open(manifest, "w") as fh:
        fh.write("\n".join(lines) + "\n")
    return manifest


def random_pose(rng: np.random.Generator, max_angle_deg: float = 5.0, t_range=(0.3, 1.5)) -> PoseSE3:
    axis = rng.standard_normal(3)
    angle = np.deg2rad(rng.uniform(0.5, max_angle_deg))
    direction = rng.standard_normal(3)
    direction /= np.linalg.norm(direction)
    return PoseSE3(rotation_from_axis_angle(axis, angle), direction * rng.uniform(*t_range))


def synthetic_correspondences(pose: PoseSE3, K: Intrinsics, h: int, w: int, n_inliers: int, n_outliers: int,
                              rng: np.random.Generator, depth_range=(4.0, 30.0), noise_px: float = 0.0):
    """Noiseless (or noisy) matches of random scene points plus uniformly random outliers.

    Returns (correspondences, is_inlier) with outliers shuffled in. Inlier
    pixels in frame 2 are inside the image; outlier frame-2 pixels are random.
    """
    pix1, depth, pix2 = [], [], []
    while len(pix1) < n_inliers:
        m = 2 * (n_inliers - len(pix1)) + 8
        uv = np.stack([rng.uniform(0, w - 1, m), rng.uniform(0, h - 1, m)], axis=1)
        z = rng.uniform(*depth_range, m)
        uv2, ok = project_many(pose.apply(backproject_many(uv, z, K)), K)
        ok &= (uv2[:, 0] >= 0) & (uv2[:, 0] <= w - 1) & (uv2[:, 1] >= 0) & (uv2[:, 1] <= h - 1)
        for i in np.flatnonzero(ok)[: n_inliers - len(pix1)]:
            pix1.append(uv[i])
            depth.append(z[i])
            pix2.append(uv2[i] + noise_px * rng.standard_normal(2))
    for _ in range(n_outliers):
        pix1.append(np.array([rng.uniform(0, w - 1), rng.uniform(0, h - 1)]))
        depth.append(rng.uniform(*depth_range))
        pix2.append(np.array([rng.uniform(0, w - 1), rng.uniform(0, h - 1)]))
    inlier = np.r_[np.ones(n_inliers, bool), np.zeros(n_outliers, bool)]
    order = rng.permutation(len(pix1))
    corr = [Correspondence(tuple(map(float, pix1[i])), float(depth[i]), tuple(map(float, pix2[i]))) for i in order]
    return corr, inlier[order]


def pose_errors(estimate: PoseSE3, truth: PoseSE3):
    """(rotation error in degrees, translation error relative to |t_true|)."""
    rot = np.rad2deg(estimate.compose(truth.inverse()).rotation_angle())
    trans = np.linalg.norm(estimate.translation - truth.translation) / np.linalg.norm(truth.translation)
    return float(rot), float(trans)
