"""Figure rendering for stage reports: loss traces, residual histograms,
per-frame metric bars. Figures land next to the JSON/CSV they illustrate.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402


def save_scale_figures(report: dict, out_dir):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    fig, ax = plt.subplots(figsize=(5, 3.2))
    ax.plot(report.get("trace", []), marker="o", ms=3)
    ax.set_xlabel("optimizer step")
    ax.set_ylabel("bone-length loss")
    ax.set_title(f"scale optimization (sigma = {report['sigma']:.4g})")
    fig.tight_layout()
    fig.savefig(out / "scale_loss_trace.png", dpi=140)
    plt.close(fig)

    fig, ax = plt.subplots(figsize=(5, 3.2))
    res = report.get("residuals", [])
    if res:
        ax.hist(res, bins=30, color="#4878d0", edgecolor="white")
    ax.set_xlabel("bone-length residual (scene units)")
    ax.set_ylabel("count")
    ax.set_title("per-bone residuals at the optimum")
    fig.tight_layout()
    fig.savefig(out / "scale_residual_hist.png", dpi=140)
    plt.close(fig)


def save_train_figure(log_rows: list[dict], out_dir):
    if not log_rows:
        return
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    it = [r["iteration"] for r in log_rows]
    fig, axes = plt.subplots(1, 2, figsize=(9, 3.2))
    axes[0].plot(it, [r["total"] for r in log_rows], label="total")
    axes[0].plot(it, [r["l1"] for r in log_rows], label="L1", alpha=0.7)
    axes[0].plot(it, [r["dssim"] for r in log_rows], label="D-SSIM", alpha=0.7)
    axes[0].set_xlabel("iteration")
    axes[0].set_ylabel("loss")
    axes[0].legend(fontsize=8)
    axes[1].plot(it, [r["n_gaussians"] for r in log_rows], color="#d65f5f")
    axes[1].set_xlabel("iteration")
    axes[1].set_ylabel("Gaussian count")
    fig.tight_layout()
    fig.savefig(out / "train_curves.png", dpi=140)
    plt.close(fig)


def save_eval_figure(metrics: dict, out_dir):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = metrics.get("frames", [])
    if not rows:
        return
    frames = [r["frame"] for r in rows]
    fig, ax = plt.subplots(figsize=(6, 3.2))
    ax.bar(frames, [r["psnr"] for r in rows], width=0.8, label="full image")
    hr = [(r["frame"], r["psnr_human"]) for r in rows if "psnr_human" in r]
    if hr:
        ax.plot([f for f, _ in hr], [v for _, v in hr], "o-", color="#d65f5f",
                ms=4, label="human region")
    ax.set_xlabel(f"frame ({metrics.get('split', '?')} split)")
    ax.set_ylabel("PSNR (dB)")
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(out / "eval_psnr.png", dpi=140)
    plt.close(fig)
