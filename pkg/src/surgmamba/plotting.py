"""Figures written next to the CSV reports."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "figure.dpi": 110,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "font.size": 9,
    "legend.fontsize": 8,
    "legend.frameon": False,
}


def _save(fig, path: Path) -> Path:
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
    return path


def trace_figures(out_dir, frames: np.ndarray, K: int, pair_rows, chunk_rows, H: int) -> dict[str, Path]:
    """Intensity / decay / state-change traces, plane-cosine matrix and angle bands."""
    out_dir = Path(out_dir)
    paths = {}
    with plt.rc_context(STYLE):
        t = frames[:, 0]
        lam = frames[:, 2 : 2 + K]
        p10, mean, p90 = frames[:, 2 + 2 * K], frames[:, 3 + 2 * K], frames[:, 4 + 2 * K]
        fig, ax = plt.subplots(4, 1, figsize=(8, 7), sharex=True)
        ax[0].step(t, frames[:, 1], where="post", lw=1)
        ax[0].set_ylabel("predicted phase")
        for k in range(K):
            ax[1].plot(t, lam[:, k], lw=0.6, alpha=0.6, label=f"layer {k}")
        ax[1].plot(t, lam.mean(1), color="k", lw=1.2, label="mean")
        ax[1].set_ylim(-0.02, 1.02)
        ax[1].set_ylabel("intensity")
        ax[1].legend(ncol=K + 1, loc="upper right")
        ax[2].fill_between(t, p10, p90, alpha=0.3, lw=0)
        ax[2].plot(t, mean, lw=1)
        ax[2].set_ylabel("log decay")
        ax[3].plot(t, frames[:, -1], lw=0.8)
        ax[3].set_yscale("log")
        ax[3].set_ylabel("rel. state change")
        ax[3].set_xlabel("frame")
        paths["traces_png"] = _save(fig, out_dir / "traces.png")

        if chunk_rows:
            n = len(chunk_rows)
            mat = np.full((n, n), np.nan)
            for c, prior, cos in pair_rows:
                mat[c, prior] = mat[prior, c] = cos
            fig, ax = plt.subplots(figsize=(4.5, 4))
            im = ax.imshow(mat, vmin=-1, vmax=1, cmap="RdBu_r", origin="lower")
            ax.set_xlabel("chunk")
            ax.set_ylabel("chunk")
            ax.grid(False)
            fig.colorbar(im, ax=ax, label="plane cosine")
            paths["plane_cosine_png"] = _save(fig, out_dir / "plane_cosine.png")

            chunks = np.asarray(chunk_rows, dtype=float)
            ang = chunks[:, 3:].reshape(n, H, 3)
            fig, ax = plt.subplots(figsize=(8, 3))
            for h in range(H):
                line, = ax.plot(chunks[:, 0], ang[:, h, 1], lw=1, label=f"head {h}")
                ax.plot(chunks[:, 0], ang[:, h, 0], lw=0.6, color=line.get_color(), alpha=0.5)
                ax.plot(chunks[:, 0], ang[:, h, 2], lw=0.6, ls="--", color=line.get_color(), alpha=0.5)
            ax.set_xlabel("chunk")
            ax.set_ylabel("rotation angle (deg)")
            if H <= 8:
                ax.legend(ncol=min(H, 4))
            paths["angles_png"] = _save(fig, out_dir / "angles.png")
    return paths


def training_figure(history: list[dict], path) -> Path:
    with plt.rc_context(STYLE):
        epochs = [r["epoch"] for r in history]
        fig, ax = plt.subplots(1, 2, figsize=(8, 3))
        for key in ("loss_total", "loss_ce", "loss_smooth", "loss_trans"):
            ax[0].plot(epochs, [r[key] for r in history], label=key[5:])
        ax[0].set_xlabel("epoch")
        ax[0].set_ylabel("loss")
        ax[0].legend()
        scored = [r for r in history if "acc" in r]
        for key in ("acc", "precision", "recall", "jaccard"):
            ax[1].plot([r["epoch"] for r in scored], [r[key] for r in scored], label=key)
        ax[1].set_xlabel("epoch")
        ax[1].set_ylabel("%")
        ax[1].legend()
        return _save(fig, Path(path))


def bench_figure(report, path) -> Path:
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(5, 3))
        ax.plot(report.report_points, np.asarray(report.median_latency_s) * 1e3, marker="o")
        ax.set_xscale("log")
        ax.set_ylim(bottom=0)
        ax.set_xlabel("frame index")
        ax.set_ylabel("median latency (ms)")
        return _save(fig, Path(path))
