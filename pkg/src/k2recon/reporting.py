"""Figure rendering for the report path.

All figures are written to files (Agg backend); the CLI drops them next to
the delimited metric output.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np


def magnitude_window(image: np.ndarray, reference: np.ndarray | None = None) -> float:
    """Display ceiling: 99th percentile of the reference magnitude (or own)."""
    base = np.abs(reference) if reference is not None else np.abs(image)
    v = float(np.percentile(base, 99))
    return v if v > 0 else float(np.abs(image).max() or 1.0)


def save_magnitude_png(path, image: np.ndarray, reference: np.ndarray | None = None,
                       title: str | None = None):
    vmax = magnitude_window(image, reference)
    fig, ax = plt.subplots(figsize=(4, 4))
    ax.imshow(np.abs(image), cmap="gray", vmin=0.0, vmax=vmax)
    ax.set_axis_off()
    if title:
        ax.set_title(title, fontsize=9)
    fig.savefig(path, bbox_inches="tight", dpi=120)
    plt.close(fig)


def save_residual_png(path, recon: np.ndarray, reference: np.ndarray,
                      title: str | None = None):
    """|recon - reference| on the same window as the reference."""
    vmax = magnitude_window(reference)
    fig, ax = plt.subplots(figsize=(4, 4))
    im = ax.imshow(np.abs(recon - reference), cmap="Blues", vmin=0.0, vmax=0.3 * vmax)
    ax.set_axis_off()
    fig.colorbar(im, ax=ax, fraction=0.046)
    if title:
        ax.set_title(title, fontsize=9)
    fig.savefig(path, bbox_inches="tight", dpi=120)
    plt.close(fig)


def save_psnr_vs_m_plot(path, m_values, psnr_values, acceleration: float,
                        ssim_values=None):
    """Reconstruction quality against the number of calibrated steps."""
    order = np.argsort(m_values)
    m = np.asarray(m_values)[order]
    p = np.asarray(psnr_values)[order]
    fig, ax = plt.subplots(figsize=(5.2, 3.4))
    ax.plot(m, p, "o-", color="tab:blue", label="PSNR")
    ax.set_xlabel("calibrated unrolled steps m")
    ax.set_ylabel("PSNR (dB)", color="tab:blue")
    ax.set_xticks(m)
    ax.grid(alpha=0.3)
    if ssim_values is not None:
        ax2 = ax.twinx()
        ax2.plot(m, np.asarray(ssim_values)[order], "s--", color="tab:orange",
                 label="SSIM")
        ax2.set_ylabel("SSIM", color="tab:orange")
    ax.set_title(f"calibration sweep at {acceleration:g}x")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_training_curves(path, log: list):
    epochs = [r["epoch"] for r in log]
    losses = [r["train_loss"] for r in log]
    fig, ax = plt.subplots(figsize=(5.2, 3.4))
    ax.plot(epochs, losses, "-", color="tab:blue", label="train loss")
    ax.set_xlabel("epoch")
    ax.set_ylabel("train loss", color="tab:blue")
    ax.grid(alpha=0.3)
    psnrs = [r.get("val_psnr") for r in log]
    if any(p is not None for p in psnrs):
        ax2 = ax.twinx()
        ax2.plot(epochs, [p if p is not None else np.nan for p in psnrs],
                 "-", color="tab:orange", label="val PSNR")
        ax2.set_ylabel("val PSNR (dB)", color="tab:orange")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
