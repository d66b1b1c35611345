"""Plot suite for metrics reports: per-category boxplots, pie, FP counts, run comparison.

Figures are rendered with the Agg backend and saved without a software/date
stamp, so the same inputs give byte-identical PNG files.
"""
import csv
from pathlib import Path
from typing import Dict, Mapping

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .metrics import PFOM_SENTINEL, MetricsReport  # noqa: E402

PNG_METADATA = {"Software": None}
BOX_METRICS = ("dsc", "iou", "precision", "recall")


def _save(fig, path: Path) -> Path:
    fig.savefig(path, format="png", dpi=100, metadata=PNG_METADATA)
    plt.close(fig)
    return path


def plot_category_boxplots(report: MetricsReport, path) -> Path:
    """Per-image score distributions by %GT-area category (whiskers at 1.5 IQR)."""
    labels = report.spec.labels()
    cats = list(report.per_category)
    fig, axes = plt.subplots(1, len(BOX_METRICS) + 1, figsize=(4 * (len(BOX_METRICS) + 1), 4))
    for ax, name in zip(axes, BOX_METRICS):
        data = [[getattr(s, name) for s in report.per_category[c].image_scores] for c in cats]
        ax.boxplot(data, whis=1.5)
        ax.set_xticks(range(1, len(cats) + 1), [labels[c - 1] for c in cats], rotation=60, fontsize=7)
        ax.set_title(name.upper() if name in ("dsc", "iou") else name)
        ax.set_ylim(-0.05, 1.05)
    pf = [[v for v in report.per_category[c].pfom if v != PFOM_SENTINEL] for c in cats]
    keep = [i for i, d in enumerate(pf) if d]
    ax = axes[-1]
    if keep:
        ax.boxplot([pf[i] for i in keep], whis=1.5)
        ax.set_xticks(range(1, len(keep) + 1), [labels[cats[i] - 1] for i in keep], rotation=60, fontsize=7)
    ax.set_title("PFOM")
    ax.set_ylim(-0.05, 1.05)
    fig.tight_layout()
    return _save(fig, Path(path))


def plot_dsc_pie(report: MetricsReport, path) -> Path:
    """Category shares of the test set (empty-GT category left out), labelled with data-based DSC."""
    labels = report.spec.labels()
    dsc = report.pie_dsc()
    fig, ax = plt.subplots(figsize=(6, 6))
    if dsc:
        sizes = [len(report.per_category[c].ids) for c in dsc]
        ax.pie(sizes, labels=[f"{labels[c - 1]}%\nDSC {100 * v:.1f}" for c, v in dsc.items()],
               startangle=90, counterclock=False, textprops={"fontsize": 8})
    ax.set_title("Data-based DSC by %GT area")
    return _save(fig, Path(path))


def plot_category1_fp(report: MetricsReport, path) -> Path:
    fig, ax = plt.subplots(figsize=(3, 4))
    if report.category1_fp_counts:
        ax.boxplot([report.category1_fp_counts], whis=1.5)
    ax.set_xticks([1], ["no ulcer"])
    ax.set_ylabel("false-positive pixels")
    fig.tight_layout()
    return _save(fig, Path(path))


def plot_report(report: MetricsReport, out_dir) -> Dict[str, Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    return {
        "boxplots": plot_category_boxplots(report, out_dir / "category_boxplots.png"),
        "pie": plot_dsc_pie(report, out_dir / "dsc_pie.png"),
        "category1_fp": plot_category1_fp(report, out_dir / "category1_fp.png"),
    }


def comparison_table(reports: Mapping[str, MetricsReport]):
    """Rows of (series, category, label, data-based DSC, mean PFOM)."""
    rows = []
    for name, rep in reports.items():
        labels = rep.spec.labels()
        for cat, summary in rep.per_category.items():
            rows.append((name, cat, labels[cat - 1], summary.data_based.dsc, summary.pfom_mean))
    return rows


def plot_comparison(reports: Mapping[str, MetricsReport], out_dir) -> Dict[str, Path]:
    """Grouped per-category DSC and PFOM bars, one series per report."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rows = comparison_table(reports)
    table = out_dir / "comparison.csv"
    with open(table, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["series", "category", "label", "dsc", "pfom_mean"])
        w.writerows([r[0], r[1], r[2], repr(r[3]), repr(r[4])] for r in rows)

    cats = sorted({r[1] for r in rows})
    names = list(reports)
    width = 0.8 / len(names)
    x = np.arange(len(cats))
    first = next(iter(reports.values()))
    labels = first.spec.labels()
    fig, axes = plt.subplots(2, 1, figsize=(max(6, 1.2 * len(cats)), 7), sharex=True)
    for k, name in enumerate(names):
        by_cat = {r[1]: r for r in rows if r[0] == name}
        dsc = [by_cat[c][3] if c in by_cat else np.nan for c in cats]
        pf = [by_cat[c][4] if c in by_cat else np.nan for c in cats]
        axes[0].bar(x + k * width, dsc, width, label=name)
        axes[1].bar(x + k * width, pf, width, label=name)
    axes[0].set_ylabel("DSC")
    axes[1].set_ylabel("PFOM")
    axes[1].set_xticks(x + 0.4 - width / 2, [labels[c - 1] for c in cats], rotation=45, fontsize=8)
    axes[0].legend(fontsize=8)
    fig.tight_layout()
    chart = _save(fig, out_dir / "comparison.png")
    return {"table": table, "chart": chart}
