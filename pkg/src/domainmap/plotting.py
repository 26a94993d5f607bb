"""Report figures: per-branch PSNR bars and training loss curves."""
from __future__ import annotations

import io
import os
from typing import Dict, List, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .trainer import atomic_write  # noqa: E402

STYLE = {
    "font.size": 9,
    "axes.labelsize": 9,
    "axes.titlesize": 10,
    "legend.fontsize": 7,
    "xtick.labelsize": 7,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "figure.dpi": 100,
}


def _save(fig, path: str) -> str:
    buf = io.BytesIO()
    # no Software/date metadata so reruns give identical bytes
    fig.savefig(buf, format="png", metadata={"Software": None})
    plt.close(fig)
    atomic_write(path, buf.getvalue())
    return path


def psnr_bars(reports, baselines, path: str) -> str:
    test_sets = list(dict.fromkeys(r.test_set for r in reports))
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(1, max(1, len(test_sets)), figsize=(4.5 * max(1, len(test_sets)), 3.6),
                                 squeeze=False)
        for ax, ts in zip(axes[0], test_sets):
            reps = [r for r in reports if r.test_set == ts]
            vals = [r.mean_psnr for r in reps]
            x = np.arange(len(reps))
            ax.bar(x, vals, color="0.55", edgecolor="k", linewidth=0.5)
            for b in baselines:
                if b.test_set == ts:
                    ax.axhline(b.mean_psnr, color="C3", ls="--", lw=1, label=b.branch)
            ax.set_xticks(x)
            ax.set_xticklabels([r.branch for r in reps], rotation=35, ha="right")
            finite = [v for v in vals if np.isfinite(v)]
            if finite:
                lo = min(finite + [b.mean_psnr for b in baselines if b.test_set == ts])
                ax.set_ylim(lo - 1.0, max(finite) + 0.5)
            ax.set_ylabel("PSNR (dB)")
            ax.set_title(f"test set {ts}")
            if any(b.test_set == ts for b in baselines):
                ax.legend(loc="lower right", frameon=False)
        fig.tight_layout()
        return _save(fig, path)


def loss_curves(histories: Dict[str, List[float]], path: str, window: int = 50) -> str:
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(5.5, 3.4))
        for name in sorted(histories):
            h = np.asarray(histories[name], dtype=float)
            if h.size == 0:
                continue
            w = min(window, h.size)
            smooth = np.convolve(h, np.ones(w) / w, mode="valid")
            ax.plot(np.arange(w, h.size + 1), smooth, lw=1, label=name.split("_x")[0])
        ax.set_yscale("log")
        ax.set_xlabel("iteration")
        ax.set_ylabel(f"l1 loss ({window}-iter mean)")
        ax.legend(frameon=False, ncol=2)
        fig.tight_layout()
        return _save(fig, path)


def experiment_figures(result, out_dir: str) -> Dict[str, str]:
    paths = {"psnr_figure": psnr_bars(result.reports, result.baselines, os.path.join(out_dir, "psnr_by_branch.png"))}
    if result.histories:
        paths["loss_figure"] = loss_curves(result.histories, os.path.join(out_dir, "loss_curves.png"))
    return paths
