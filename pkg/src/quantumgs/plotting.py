"""Report figures: training curves, directional response maps, ablation bars.

Everything renders off-screen (Agg) straight to files.
"""

from __future__ import annotations

import math
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "font.size": 9,
    "axes.labelsize": 9,
    "axes.titlesize": 10,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "savefig.dpi": 150,
}


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, bbox_inches="tight")
    plt.close(fig)
    return path


def plot_training_curves(runs: dict[str, list[dict]], path) -> Path:
    """Loss and PSNR against step for one or more runs (label -> metric rows)."""
    with plt.rc_context(STYLE):
        fig, (ax_l, ax_p) = plt.subplots(1, 2, figsize=(7.0, 2.6))
        for label, rows in runs.items():
            if not rows:
                continue
            step = [r["step"] for r in rows]
            ax_l.plot(step, [r["loss"] for r in rows], label=label, lw=1.2)
            ax_p.plot(step, [r["psnr"] for r in rows], label=label, lw=1.2)
        ax_l.set_yscale("log")
        ax_l.set_xlabel("iteration")
        ax_l.set_ylabel("loss")
        ax_p.set_xlabel("iteration")
        ax_p.set_ylabel("PSNR [dB]")
        ax_p.legend(frameon=False)
        fig.tight_layout()
        return _save(fig, path)


def plot_direction_response(response: dict, path, title: str = "") -> Path:
    """Equirectangular maps of the modulated color and both modulation factors."""
    h, w, _ = response["rgb"].shape
    extent = (0.0, 2.0 * math.pi, math.pi, 0.0)
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(1, 3, figsize=(9.0, 2.2))
        axes[0].imshow(np.clip(response["rgb"], 0, 1), extent=extent, aspect="auto",
                       interpolation="nearest")
        axes[0].set_title("color")
        for ax, key, name in ((axes[1], "color_factor", "mean color factor"),
                              (axes[2], "opacity_factor", "opacity factor")):
            im = ax.imshow(response[key], extent=extent, aspect="auto", cmap="coolwarm",
                           vmin=0.0, vmax=2.0, interpolation="nearest")
            ax.set_title(name)
            fig.colorbar(im, ax=ax, fraction=0.046, pad=0.03)
        for ax in axes:
            ax.set_xlabel(r"$\phi$")
        axes[0].set_ylabel(r"$\theta$")
        if title:
            fig.suptitle(title, y=1.04)
        return _save(fig, path)


def plot_ablation(rows: list[dict], path) -> Path:
    """PSNR (and SSIM if present) per modulation variant."""
    names = [r["variant"] for r in rows]
    x = np.arange(len(rows))
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(4.2, 2.6))
        psnr = [r["psnr"] for r in rows]
        bars = ax.bar(x, psnr, color="0.55", width=0.6)
        best = int(np.argmax(psnr))
        bars[best].set_color("tab:blue")
        ax.set_xticks(x, names)
        ax.set_ylabel("PSNR [dB]")
        lo = min(psnr)
        ax.set_ylim(max(0.0, lo - 3.0), max(psnr) + 1.0)
        for xi, v in zip(x, psnr):
            ax.text(xi, v + 0.1, f"{v:.2f}", ha="center", va="bottom", fontsize=7)
        fig.tight_layout()
        return _save(fig, path)
