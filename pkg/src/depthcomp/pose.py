"""Relative pose between an RGBd frame and a neighbouring RGB frame.

Pipeline: dilate the sparse depth, match Harris corners by normalized
cross-correlation, then PnP inside RANSAC. Failure is reported through
``PoseResult.failed`` rather than raised.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np
from scipy import ndimage, signal

from .autograd import Tensor
from .geometry import Intrinsics, PoseSE3, Z_MIN, backproject_many, orthonormalize, rodrigues

log = logging.getLogger(__name__)

DILATION_KERNEL = 4
HARRIS_K = 0.04
NMS_RADIUS = 5
PATCH_SIZE = 11
NCC_MIN = 0.8
SEARCH_RADIUS = 48
MIN_SAMPLE = 6
RANSAC_ITERATIONS = 200
INLIER_THRESHOLD_PX = 2.0
MIN_INLIERS = 15
GN_MAX_ITER = 50
GN_STEP_TOL = 1e-8
LM_LAMBDA0 = 1e-4


_EYE6 = np.eye(6)


class PoseEstimationError(ValueError):
    """PnP could not produce a pose (too few points, degenerate, no convergence)."""


@dataclass(frozen=True)
class Correspondence:
    pixel1: Tuple[float, float]
    depth1: float
    pixel2: Tuple[float, float]

    def __post_init__(self):
        if not self.depth1 > 0:
            raise ValueError(f"correspondence depth must be positive, got {self.depth1}")


@dataclass
class PoseResult:
    pose: Optional[PoseSE3]
    inlier_count: int
    failed: bool
    inliers: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    def __post_init__(self):
        if self.failed != (self.pose is None):
            raise ValueError("failed must be True exactly when pose is absent")


def _as_image(x) -> np.ndarray:
    a = x.data if isinstance(x, Tensor) else np.asarray(x)
    a = np.asarray(a, dtype=np.float64)
    while a.ndim > 2:
        if a.shape[0] != 1:
            raise ValueError(f"expected a single-channel image, got shape {a.shape}")
        a = a[0]
    return a


# -- sparse depth dilation ---------------------------------------------------

def dilate_sparse_depth(d, kernel: int = DILATION_KERNEL) -> np.ndarray:
    """Fill empty pixels with the largest measurement in the ``kernel`` x ``kernel``
    window whose top-left corner is the pixel. Measured pixels keep their value.

    Accepts (H, W) or (..., H, W) arrays/tensors and returns the same shape.
    """
    a = np.asarray(d.data if isinstance(d, Tensor) else d)
    h, w = a.shape[-2:]
    pad = [(0, 0)] * (a.ndim - 2) + [(0, kernel - 1), (0, kernel - 1)]
    padded = np.pad(a, pad)
    grown = np.zeros_like(a)
    for i in range(kernel):
        for j in range(kernel):
            np.maximum(grown, padded[..., i:i + h, j:j + w], out=grown)
    return np.where(a > 0, a, grown)


# -- features ------------------------------------------------------------------

def harris_response(img: np.ndarray, k: float = HARRIS_K, sigma: float = 1.0) -> np.ndarray:
    ix = ndimage.sobel(img, axis=1, mode="reflect")
    iy = ndimage.sobel(img, axis=0, mode="reflect")
    sxx = ndimage.gaussian_filter(ix * ix, sigma)
    syy = ndimage.gaussian_filter(iy * iy, sigma)
    sxy = ndimage.gaussian_filter(ix * iy, sigma)
    return sxx * syy - sxy * sxy - k * (sxx + syy) ** 2


def detect_corners(img, max_features: int = 500, nms_radius: int = NMS_RADIUS,
                   border: int = PATCH_SIZE // 2, rel_threshold: float = 0.01) -> np.ndarray:
    """(n, 2) integer (u, v) Harris corners, strongest first."""
    img = _as_image(img)
    resp = harris_response(img)
    peak = resp.max() if resp.size else 0.0
    if not peak > 1e-10:
        return np.zeros((0, 2), dtype=np.int64)
    local_max = ndimage.maximum_filter(resp, size=2 * nms_radius + 1, mode="constant", cval=-np.inf)
    keep = (resp == local_max) & (resp > rel_threshold * peak)
    keep[:border] = keep[-border:] = False
    keep[:, :border] = keep[:, -border:] = False
    v, u = np.nonzero(keep)
    order = np.lexsort((u, v, -resp[v, u]))[:max_features]
    return np.stack([u[order], v[order]], axis=1)


def _local_stats(img: np.ndarray, size: int):
    """Mean and std of every size x size window (valid positions only)."""
    win = np.lib.stride_tricks.sliding_window_view(img, (size, size))
    mean = win.mean(axis=(2, 3))
    std = win.std(axis=(2, 3))
    return mean, std


def detect_and_match(img1, img2, max_features: int = 500, patch_size: int = PATCH_SIZE,
                     search_radius: int = SEARCH_RADIUS, ncc_min: float = NCC_MIN):
    """Match Harris corners of ``img1`` into ``img2`` by normalized cross-correlation.

    Each corner's patch is compared against every patch position in img2 within
    ``search_radius`` pixels; the best score is kept if it reaches ``ncc_min``.
    Returns ``[((u1, v1), (u2, v2), score), ...]`` sorted by descending score.
    """
    a, b = _as_image(img1), _as_image(img2)
    if a.shape != b.shape:
        raise ValueError(f"detect_and_match: image shapes differ {a.shape} vs {b.shape}")
    half = patch_size // 2
    corners = detect_corners(a, max_features=max_features, border=half)
    if len(corners) == 0:
        return []
    _, std2 = _local_stats(b, patch_size)  # indexed by patch top-left
    h, w = a.shape
    n = patch_size * patch_size
    matches = []
    for u, v in corners:
        tpl = a[v - half:v + half + 1, u - half:u + half + 1]
        t_hat = tpl - tpl.mean()
        t_norm = np.sqrt((t_hat * t_hat).sum())
        if t_norm < 1e-8:
            continue
        # candidate centres in img2
        u_lo, u_hi = max(half, u - search_radius), min(w - 1 - half, u + search_radius)
        v_lo, v_hi = max(half, v - search_radius), min(h - 1 - half, v + search_radius)
        region = b[v_lo - half:v_hi + half + 1, u_lo - half:u_hi + half + 1]
        num = signal.correlate(region, t_hat, mode="valid", method="direct")
        sd = std2[v_lo - half:v_hi - half + 1, u_lo - half:u_hi - half + 1]
        with np.errstate(divide="ignore", invalid="ignore"):
            ncc = num / (t_norm * sd * np.sqrt(n))
        ncc = np.where(sd > 1e-8, ncc, -np.inf)
        best = int(np.argmax(ncc))  # first maximum in row-major order on ties
        score = float(ncc.flat[best])
        if score >= ncc_min:
            dv, du = divmod(best, ncc.shape[1])
            su, sv = _subpixel_offset(ncc, dv, du) if score < 1.0 - 1e-9 else (0.0, 0.0)
            matches.append(((int(u), int(v)), (u_lo + du + su, v_lo + dv + sv), score))
    matches.sort(key=lambda m: -m[2])
    return matches


def _subpixel_offset(score: np.ndarray, r: int, c: int):
    """Vertex of 1-D parabolas through the peak and its neighbours (0 at borders)."""
    def vertex(m1, m0, p1):
        denom = m1 - 2 * m0 + p1
        if not np.isfinite(denom) or denom >= 0:
            return 0.0
        return float(np.clip(0.5 * (m1 - p1) / denom, -0.5, 0.5))

    h, w = score.shape
    du = vertex(score[r, c - 1], score[r, c], score[r, c + 1]) if 0 < c < w - 1 else 0.0
    dv = vertex(score[r - 1, c], score[r, c], score[r + 1, c]) if 0 < r < h - 1 else 0.0
    return du, dv


def build_correspondences(matches, depth1) -> List[Correspondence]:
    """Attach (dilated) frame-1 depth to matches; matches without depth are dropped."""
    d = _as_image(depth1)
    out = []
    for (u1, v1), (u2, v2), *_ in matches:
        z = float(d[int(round(v1)), int(round(u1))])
        if z > 0:
            out.append(Correspondence((float(u1), float(v1)), z, (float(u2), float(v2))))
    return out


# -- PnP -------------------------------------------------------------------------

def _arrays(correspondences, K: Intrinsics):
    if isinstance(correspondences, tuple) and len(correspondences) == 2:
        return correspondences
    if len(correspondences) == 0:
        return np.zeros((0, 3)), np.zeros((0, 2))
    px1 = np.array([c.pixel1 for c in correspondences], dtype=np.float64)
    z1 = np.array([c.depth1 for c in correspondences], dtype=np.float64)
    px2 = np.array([c.pixel2 for c in correspondences], dtype=np.float64)
    return backproject_many(px1, z1, K), px2


def reprojection_errors(R: np.ndarray, t: np.ndarray, X: np.ndarray, uv: np.ndarray, K: Intrinsics) -> np.ndarray:
    """Pixel distance between projected points and observations (inf when behind the camera)."""
    P = X @ R.T + t
    ok = P[:, 2] > Z_MIN
    z = np.where(ok, P[:, 2], 1.0)
    pu = K.fx * P[:, 0] / z + K.cx
    pv = K.fy * P[:, 1] / z + K.cy
    err = np.hypot(pu - uv[:, 0], pv - uv[:, 1])
    return np.where(ok, err, np.inf)


def _is_degenerate(X: np.ndarray) -> bool:
    if len(X) < 3:
        return True
    centered = X - X.mean(axis=0)
    s = np.linalg.svd(centered, compute_uv=False)
    scale = max(np.abs(X).max(), 1e-12)
    return s[1] <= 1e-9 * scale * np.sqrt(len(X))


def _dlt(X: np.ndarray, uv: np.ndarray, K: Intrinsics):
    """Linear [R|t] from >= 6 points, or None if the system is rank deficient."""
    xn = (uv[:, 0] - K.cx) / K.fx
    yn = (uv[:, 1] - K.cy) / K.fy
    c = X.mean(axis=0)
    s = np.sqrt(((X - c) ** 2).sum(axis=1).mean())
    if s <= 0:
        return None
    Xh = np.hstack([(X - c) / s, np.ones((len(X), 1))])
    n = len(X)
    A = np.zeros((2 * n, 12))
    A[0::2, 0:4] = -Xh
    A[0::2, 8:12] = xn[:, None] * Xh
    A[1::2, 4:8] = -Xh
    A[1::2, 8:12] = yn[:, None] * Xh
    _, sv, vt = np.linalg.svd(A)
    if sv[-2] < 1e-9 * sv[0]:
        return None  # null space of dimension > 1 (e.g. coplanar points)
    P = vt[-1].reshape(3, 4)
    T = np.eye(4)
    T[:3, :3] /= s
    T[:3, 3] = -c / s
    P = P @ T
    M = P[:, :3]
    det = np.linalg.det(M)
    if abs(det) < 1e-300:
        return None
    scale = np.cbrt(det)
    P = P / scale
    R = orthonormalize(P[:, :3])
    t = P[:, 3]
    if np.mean((X @ R.T + t)[:, 2] > 0) < 0.5:
        return None
    return R, t


def _levenberg_marquardt(R, t, X, uv, K: Intrinsics, max_iter: int = GN_MAX_ITER,
                         tol: float = GN_STEP_TOL, lam: float = LM_LAMBDA0, strict: bool = True):
    """Minimize squared reprojection error with left-multiplied SE(3) updates."""

    def residuals(R_, t_):
        P = X @ R_.T + t_
        z = np.where(P[:, 2] > Z_MIN, P[:, 2], Z_MIN)
        r = np.stack([K.fx * P[:, 0] / z + K.cx - uv[:, 0], K.fy * P[:, 1] / z + K.cy - uv[:, 1]], axis=1)
        return P, z, r

    P, z, r = residuals(R, t)
    cost = float((r * r).sum())
    for _ in range(max_iter):
        if cost == 0.0:
            return R, t
        n = len(X)
        dpi = np.zeros((n, 2, 3))
        dpi[:, 0, 0] = K.fx / z
        dpi[:, 0, 2] = -K.fx * P[:, 0] / (z * z)
        dpi[:, 1, 1] = K.fy / z
        dpi[:, 1, 2] = -K.fy * P[:, 1] / (z * z)
        # d(exp(w) P + v)/d(w, v) at zero = [-[P]x | I]
        dP = np.zeros((n, 3, 6))
        dP[:, :, :3] = _batched_neg_skew(P)
        dP[:, :, 3:] = np.eye(3)
        J = np.einsum("nij,njk->nik", dpi, dP).reshape(2 * n, 6)
        rf = r.reshape(-1)
        H = J.T @ J
        g = J.T @ rf
        while True:
            try:
                step = np.linalg.solve(H + lam * _EYE6, -g)
            except np.linalg.LinAlgError:
                step = np.zeros(6)
            dR = rodrigues(step[:3])
            R_new = dR @ R
            t_new = dR @ t + step[3:]
            P_new, z_new, r_new = residuals(R_new, t_new)
            new_cost = float((r_new * r_new).sum())
            step_norm = float(np.linalg.norm(step))
            if new_cost < cost:
                R, t, P, z, r, cost = R_new, t_new, P_new, z_new, r_new, new_cost
                lam = max(lam / 10.0, 1e-12)
                if step_norm < tol:
                    return R, t
                break
            lam *= 10.0
            if step_norm < tol or lam > 1e16:
                return R, t  # no descent direction left at this precision
    if strict:
        raise PoseEstimationError(f"PnP did not converge in {max_iter} iterations")
    return R, t


def _batched_neg_skew(P: np.ndarray) -> np.ndarray:
    out = np.zeros((len(P), 3, 3))
    out[:, 0, 1], out[:, 0, 2] = P[:, 2], -P[:, 1]
    out[:, 1, 0], out[:, 1, 2] = -P[:, 2], P[:, 0]
    out[:, 2, 0], out[:, 2, 1] = P[:, 1], -P[:, 0]
    return out


def _solve(X: np.ndarray, uv: np.ndarray, K: Intrinsics, max_iter: int = GN_MAX_ITER,
           strict: bool = True) -> PoseSE3:
    if len(X) < MIN_SAMPLE:
        raise PoseEstimationError(f"PnP needs at least {MIN_SAMPLE} correspondences, got {len(X)}")
    if _is_degenerate(X):
        raise PoseEstimationError("degenerate correspondence geometry (coincident or collinear points)")
    candidates = [(np.eye(3), np.zeros(3))]
    lin = _dlt(X, uv, K)
    if lin is not None:
        candidates.insert(0, lin)
    # start from whichever initialization reprojects better
    costs = [np.nan_to_num(reprojection_errors(R, t, X, uv, K), posinf=1e6).sum() for R, t in candidates]
    R0, t0 = candidates[int(np.argmin(costs))]
    R, t = _levenberg_marquardt(R0, t0, X, uv, K, max_iter=max_iter, strict=strict)
    return PoseSE3(orthonormalize(R), t)


def solve_pnp(correspondences: Sequence[Correspondence], K: Intrinsics) -> PoseSE3:
    """Pose minimizing the reprojection error of frame-1 points in frame 2.

    DLT initialization (identity when the DLT is rank deficient) followed by
    damped Gauss-Newton on SE(3). Raises :class:`PoseEstimationError` for
    fewer than six correspondences, degenerate geometry or non-convergence.
    """
    X, uv = _arrays(correspondences, K)
    return _solve(X, uv, K)


def ransac_pnp(correspondences: Sequence[Correspondence], K: Intrinsics,
               iterations: int = RANSAC_ITERATIONS, inlier_threshold_px: float = INLIER_THRESHOLD_PX,
               min_inliers: int = MIN_INLIERS, seed: int = 0, confidence: float = 0.999) -> PoseResult:
    """Robust PnP: minimal-sample hypotheses scored by inlier count, then a refit.

    Sampling stops early once the current best consensus makes a better
    all-inlier sample unlikely at ``confidence``; ties keep the earliest
    hypothesis.
    """
    X, uv = _arrays(correspondences, K)
    n = len(X)
    failed = PoseResult(None, 0, True)
    if n < max(MIN_SAMPLE, min_inliers):
        return failed
    rng = np.random.default_rng(seed)
    best_count, best_inliers = 0, None
    needed = iterations
    i = 0
    while i < min(iterations, needed):
        i += 1
        idx = rng.choice(n, size=MIN_SAMPLE, replace=False)
        try:
            hyp = _solve(X[idx], uv[idx], K, max_iter=3, strict=False)
        except PoseEstimationError:
            continue
        inl = reprojection_errors(hyp.rotation, hyp.translation, X, uv, K) < inlier_threshold_px
        count = int(inl.sum())
        if count > best_count:
            best_count, best_inliers = count, inl
            ratio = count / n
            if ratio >= 1.0:
                needed = i
            elif ratio > 0:
                p_good = ratio ** MIN_SAMPLE
                if p_good > 0:
                    needed = int(np.ceil(np.log(1 - confidence) / np.log1p(-p_good))) if p_good < 1 else i
    if best_inliers is None or best_count < min_inliers:
        return failed

    inliers = best_inliers
    pose = None
    for _ in range(3):
        try:
            candidate = _solve(X[inliers], uv[inliers], K)
        except PoseEstimationError as exc:
            log.debug("RANSAC refit failed: %s", exc)
            break
        new_inl = reprojection_errors(candidate.rotation, candidate.translation, X, uv, K) < inlier_threshold_px
        if new_inl.sum() < min_inliers:
            break
        pose, stable, inliers = candidate, np.array_equal(new_inl, inliers), new_inl
        if stable:
            break
    if pose is None:
        return failed
    return PoseResult(pose, int(inliers.sum()), False, np.flatnonzero(inliers))


def estimate_pose(gray1, sparse_depth1, gray2, K: Intrinsics, seed: int = 0,
                  max_features: int = 500, return_matches: bool = False):
    """Full frame-pair pipeline: dilate, match, RANSAC-PnP."""
    dilated = dilate_sparse_depth(_as_image(sparse_depth1))
    matches = detect_and_match(gray1, gray2, max_features=max_features)
    corr = build_correspondences(matches, dilated)
    result = ransac_pnp(corr, K, seed=seed)
    if return_matches:
        return result, corr
    return result
