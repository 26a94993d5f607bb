"""CSV and markdown serialization of experiment reports."""
from __future__ import annotations

import csv
import io
import math
import os
import re
from typing import Dict, List, Optional, Sequence

from .pipeline import SR_COLUMN, ExperimentResult, MetricsReport
from .trainer import atomic_write

IMAGE_FIELDS = ["branch", "test_set", "image_id", "psnr_db", "ssim", "mse"]
SUMMARY_FIELDS = ["branch", "test_set", "n_images", "psnr_mean_db", "psnr_pooled_db", "ssim_mean", "config_digest"]


def fmt(x: float) -> str:
    """Full-precision float text; infinities render as ``inf``."""
    if isinstance(x, float) and math.isinf(x):
        return "inf" if x > 0 else "-inf"
    return repr(float(x))


def image_rows_csv(reports: Sequence[MetricsReport]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(IMAGE_FIELDS)
    for rep in reports:
        for r in rep.rows:
            w.writerow([rep.branch, rep.test_set, r.image_id, fmt(r.psnr), fmt(r.ssim), fmt(r.mse)])
    return buf.getvalue()


def summary_csv(reports: Sequence[MetricsReport]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(SUMMARY_FIELDS)
    for rep in reports:
        s = rep.summary()
        w.writerow([s["branch"], s["test_set"], s["n_images"], fmt(s["psnr_mean_db"]),
                    fmt(s["psnr_pooled_db"]), fmt(s["ssim_mean"]), s["config_digest"]])
    return buf.getvalue()


def _cell(x: float, digits: int) -> str:
    return "inf" if math.isinf(x) else f"{x:.{digits}f}"


def markdown_table(columns: Sequence[str], reports: Sequence[MetricsReport], bold_best: bool = True) -> str:
    """Markdown table with one row per metric and one column per report."""
    rows = [
        ("PSNR(dB)", [r.mean_psnr for r in reports], 3),
        ("PSNR pooled(dB)", [r.pooled_psnr for r in reports], 3),
        ("SSIM", [r.mean_ssim for r in reports], 4),
    ]
    lines = ["| | " + " | ".join(columns) + " |", "|---" * (len(columns) + 1) + "|"]
    for name, vals, digits in rows:
        best = max(vals) if vals and bold_best else None
        cells = [f"**{_cell(v, digits)}**" if v == best else _cell(v, digits) for v in vals]
        lines.append(f"| {name} | " + " | ".join(cells) + " |")
    return "\n".join(lines) + "\n"


_RESTORE = re.compile(r"^(\d+)(x\d+|Mapped(\d+)(\*?))$")


def restore_order(labels: Sequence[str], blur_to: Optional[int] = None) -> List[str]:
    """Order restoration labels as 7Mapped9, 7x7, 7Mapped9*, 9x9, 11Mapped9, 11x11, ..."""

    def key(label: str):
        m = _RESTORE.match(label)
        if not m:
            return (10**6, 9, label)
        src = int(m.group(1))
        if m.group(2).startswith("x"):
            rank = 3 if blur_to is not None and src == blur_to else 1
        else:
            rank = 2 if m.group(4) else 0
        return (src, rank, label)

    return sorted(labels, key=key)


def sr_markdown(result: ExperimentResult, title: str = "x4 SR branches") -> str:
    out = [f"# {title}\n"]
    test_sets = list(dict.fromkeys(r.test_set for r in result.reports + result.baselines))
    for ts in test_sets:
        reps = [r for r in result.reports if r.test_set == ts]
        base = [r for r in result.baselines if r.test_set == ts]
        cols = [SR_COLUMN.get(r.branch, r.branch) for r in reps] + [f"baseline: {b.branch}" for b in base]
        out.append(f"## Test set {ts} ({len(reps[0].rows) if reps else 0} images)\n")
        out.append(markdown_table(cols, reps + base))
    if result.failures:
        out.append("## Failed branches\n")
        out.extend(f"- {k}: {v}" for k, v in sorted(result.failures.items()))
        out.append("")
    return "\n".join(out)


def restore_markdown(result: ExperimentResult, blur_to: int, title: str = "Blur-domain mapping") -> str:
    by_label: Dict[str, MetricsReport] = {r.branch: r for r in result.reports}
    order = restore_order(list(by_label), blur_to)
    out = [f"# {title} (intermediate domain: {blur_to}x{blur_to} blur)\n", markdown_table(order, [by_label[k] for k in order])]
    if result.baselines:
        out.append("Degraded inputs against GT:\n")
        out.append(markdown_table([b.branch for b in result.baselines], result.baselines, bold_best=False))
    if result.failures:
        out.append("## Failed branches\n")
        out.extend(f"- {k}: {v}" for k, v in sorted(result.failures.items()))
        out.append("")
    return "\n".join(out)


def write_reports(result: ExperimentResult, out_dir: str, markdown: str, figures: bool = True) -> Dict[str, str]:
    """Write per-image CSV, summary CSV, markdown and figures into ``out_dir``."""
    os.makedirs(out_dir, exist_ok=True)
    paths = {
        "images_csv": os.path.join(out_dir, "report.csv"),
        "summary_csv": os.path.join(out_dir, "summary.csv"),
        "markdown": os.path.join(out_dir, "summary.md"),
    }
    atomic_write(paths["images_csv"], image_rows_csv(result.reports + result.baselines).encode())
    atomic_write(paths["summary_csv"], summary_csv(result.reports + result.baselines).encode())
    atomic_write(paths["markdown"], markdown.encode())
    if figures:
        from . import plotting

        paths.update(plotting.experiment_figures(result, out_dir))
    return paths
