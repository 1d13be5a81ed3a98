"""Report figures written next to the CSV outputs (Agg backend, PNG files)."""
from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

RC = {
    "font.size": 9,
    "axes.labelsize": 9,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
}


def _figure(width=5.0, height=3.2, ncols=1):
    with plt.rc_context(RC):
        fig, ax = plt.subplots(1, ncols, figsize=(width, height))
    return fig, ax


def _save(fig, path: str) -> str:
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def plot_losses(losses: dict, path: str) -> str:
    """Total loss and its components against step, log-scaled where positive."""
    fig, ax = _figure()
    step = losses["step"]
    for key, style in (("total", "-"), ("depth_loss", "--"), ("photo_loss", ":"), ("smooth_loss", "-.")):
        y = np.asarray(losses[key], dtype=float)
        if np.any(y > 0):
            ax.plot(step, np.where(y > 0, y, np.nan), style, lw=1.2, label=key)
    ax.set_yscale("log")
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.legend(frameon=False)
    return _save(fig, path)


def plot_metrics(frame_ids, values: dict, path: str) -> str:
    """Per-frame RMSE and iRMSE bars."""
    fig, axes = _figure(width=7.0, ncols=2)
    x = np.arange(len(frame_ids))
    for ax, key, label in zip(axes, ("rmse_mm", "irmse_per_km"), ("RMSE [mm]", "iRMSE [1/km]")):
        ax.bar(x, [np.nan if v is None else v for v in values[key]], color="0.4")
        ax.set_xticks(x)
        ax.set_xticklabels(frame_ids, rotation=60, ha="right", fontsize=6)
        ax.set_ylabel(label)
    return _save(fig, path)


def plot_power_law(points, fit, path: str) -> str:
    """Error against sample count on log-log axes with the fitted c * n^p line."""
    pts = np.asarray(points, dtype=float)
    fig, ax = _figure(width=4.2)
    ax.loglog(pts[:, 0], pts[:, 1], "o", color="k", ms=4, label="measured")
    xs = np.geomspace(pts[:, 0].min(), pts[:, 0].max(), 50)
    ax.loglog(xs, fit.c * xs ** fit.p, "-", color="C3", lw=1.2,
              label=f"{fit.c:.3g} n^{fit.p:.3f}  (r2 = {fit.r_squared:.3f})")
    ax.set_xlabel("input depth samples")
    ax.set_ylabel("RMSE")
    ax.legend(frameon=False)
    return _save(fig, path)


def plot_depth(depth: np.ndarray, path: str, vmax: float = None) -> str:
    fig, ax = _figure(width=5.0, height=2.6)
    im = ax.imshow(np.where(depth > 0, depth, np.nan), cmap="magma_r", vmin=0, vmax=vmax)
    ax.set_axis_off()
    fig.colorbar(im, ax=ax, label="depth [m]", shrink=0.8)
    return _save(fig, path)
