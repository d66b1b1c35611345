"""Segmentation metrics: data/image-based P, R, DSC, IoU, PFOM and area categories.

Data-based scores sum TP/FP/FN over the whole test set before forming each
ratio. Image-based scores form the ratio per image and average. A ratio whose
denominator is zero scores 1.0 when the image has no FP and no FN pixels and
0.0 otherwise.
"""
import csv
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, NamedTuple, Optional, Sequence

import cv2
import numpy as np
from scipy.spatial import cKDTree

from .errors import ConfigError, ShapeError

PFOM_BETA = 1.0 / 9.0
PFOM_SENTINEL = 2.0
CANNY_SIGMA = 0.1
CANNY_LOW, CANNY_HIGH = 0.1, 0.2

# Reference values of the published full-dataset runs (percent); not reproducible at desk scale.
REFERENCE_DATA_BASED = {"dsc": 92.70, "iou": 86.40, "precision": 94.40, "recall": 91.07}
REFERENCE_IMAGE_BASED = {"dsc": 86.05, "iou": 79.44, "precision": 88.29, "recall": 86.35}
REFERENCE_ENSEMBLE_CHALLENGE_DSC = 89.23


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int = 0
    fp: int = 0
    tn: int = 0
    fn: int = 0

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(self.tp + other.tp, self.fp + other.fp, self.tn + other.tn, self.fn + other.fn)

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn


class Scores(NamedTuple):
    precision: float
    recall: float
    dsc: float
    iou: float


def _as_binary(a, name):
    a = np.asarray(a)
    if a.dtype != bool:
        if not np.all((a == 0) | (a == 1)):
            raise ValueError(f"{name} must be a binary mask")
        a = a.astype(bool)
    return a


def confusion_counts(pred, gt) -> ConfusionCounts:
    pred, gt = _as_binary(pred, "pred"), _as_binary(gt, "gt")
    if pred.shape != gt.shape:
        raise ShapeError(f"prediction shape {pred.shape} != ground truth shape {gt.shape}")
    tp = int(np.count_nonzero(pred & gt))
    fp = int(np.count_nonzero(pred & ~gt))
    fn = int(np.count_nonzero(~pred & gt))
    return ConfusionCounts(tp, fp, gt.size - tp - fp - fn, fn)


def _ratio(num, den, perfect):
    if den == 0:
        return 1.0 if perfect else 0.0
    return num / den


def scores(c: ConfusionCounts) -> Scores:
    perfect = c.fp == 0 and c.fn == 0
    return Scores(
        _ratio(c.tp, c.tp + c.fp, perfect),
        _ratio(c.tp, c.tp + c.fn, perfect),
        _ratio(2 * c.tp, 2 * c.tp + c.fp + c.fn, perfect),
        _ratio(c.tp, c.tp + c.fp + c.fn, perfect),
    )


def data_based_metrics(counts: Sequence[ConfusionCounts]) -> Scores:
    if not counts:
        raise ValueError("data_based_metrics needs at least one image")
    total = ConfusionCounts()
    for c in counts:
        total = total + c
    return scores(total)


def image_based_metrics(counts: Sequence[ConfusionCounts]) -> Scores:
    if not counts:
        raise ValueError("image_based_metrics needs at least one image")
    per_image = [scores(c) for c in counts]
    return Scores(*(sum(s[i] for s in per_image) / len(per_image) for i in range(4)))


# -- boundaries and PFOM -----------------------------------------------------------

def extract_boundary(mask) -> np.ndarray:
    """Canny edge pixels of a binary mask as an (N, 2) array of (row, col).

    Gaussian pre-smoothing uses sigma 0.1; hysteresis thresholds are 0.1 and
    0.2 of the maximum Sobel gradient magnitude. Constant masks have no edges.
    """
    img = _as_binary(mask, "mask").astype(np.uint8) * 255
    img = cv2.GaussianBlur(img, (0, 0), sigmaX=CANNY_SIGMA)
    gx = cv2.Sobel(img, cv2.CV_64F, 1, 0, ksize=3)
    gy = cv2.Sobel(img, cv2.CV_64F, 0, 1, ksize=3)
    peak = float(np.hypot(gx, gy).max())
    if peak == 0:
        return np.zeros((0, 2), dtype=np.int64)
    edges = cv2.Canny(img, CANNY_LOW * peak, CANNY_HIGH * peak, apertureSize=3, L2gradient=True)
    return np.argwhere(edges > 0).astype(np.int64)


def pfom(gt_boundary, pred_boundary, beta: float = PFOM_BETA) -> float:
    """Pratt's figure of merit of predicted edge pixels against ground-truth edges.

    Sums ``1 / (1 + beta * d**2)`` over predicted edge pixels, where ``d`` is the
    Euclidean distance to the nearest ground-truth edge pixel, and divides by
    the larger of the two edge counts. Returns the sentinel 2.0 whenever either
    edge set is empty.
    """
    if beta <= 0:
        raise ConfigError(f"beta must be > 0, got {beta}")
    gt_b = np.asarray(gt_boundary, dtype=np.float64).reshape(-1, 2)
    pred_b = np.asarray(pred_boundary, dtype=np.float64).reshape(-1, 2)
    if len(gt_b) == 0 or len(pred_b) == 0:
        return PFOM_SENTINEL
    d, _ = cKDTree(gt_b).query(pred_b)
    return float(np.sum(1.0 / (1.0 + beta * d ** 2)) / max(len(gt_b), len(pred_b)))


def mask_pfom(pred, gt, beta: float = PFOM_BETA) -> float:
    return pfom(extract_boundary(gt), extract_boundary(pred), beta)


def pfom_mean(values: Sequence[float]) -> float:
    """Mean PFOM ignoring sentinel entries; NaN when every entry is a sentinel."""
    scored = [v for v in values if v != PFOM_SENTINEL]
    return float(np.mean(scored)) if scored else float("nan")


# -- categories --------------------------------------------------------------------

DEFAULT_THRESHOLDS = (0.15, 0.3, 0.6, 1.2, 2.5, 5.0, 10.0, 20.0)


@dataclass(frozen=True)
class CategorySpec:
    """Ten %GT-area categories.

    Category 1 holds empty ground truths. ``thresholds`` are the eight upper
    edges (percent, right-open) of categories 2-9; category 10 takes the rest.
    """

    thresholds: tuple = DEFAULT_THRESHOLDS

    def __post_init__(self):
        t = tuple(float(v) for v in self.thresholds)
        object.__setattr__(self, "thresholds", t)
        if len(t) != 8:
            raise ConfigError(f"CategorySpec needs 8 thresholds for 10 categories, got {len(t)}")
        if any(b <= a for a, b in zip(t, t[1:])) or t[0] <= 0 or t[-1] >= 100:
            raise ConfigError(f"category thresholds must be strictly ascending within (0, 100): {t}")

    @property
    def n_categories(self) -> int:
        return 10

    def labels(self) -> List[str]:
        t = self.thresholds
        out = ["0", f"<{t[0]:g}"]
        out += [f"{a:g}-{b:g}" for a, b in zip(t, t[1:])]
        out.append(f">={t[-1]:g}")
        return out


def gt_area_percent(gt) -> float:
    gt = _as_binary(gt, "gt")
    return 100.0 * np.count_nonzero(gt) / gt.size


def categorize(gt, spec: CategorySpec = CategorySpec()) -> int:
    gt = _as_binary(gt, "gt")
    if not gt.any():
        return 1
    area = gt_area_percent(gt)
    return 2 + int(np.searchsorted(spec.thresholds, area, side="right"))


def category1_fp_count(pred) -> int:
    return int(np.count_nonzero(_as_binary(pred, "pred")))


# -- report ------------------------------------------------------------------------

METRIC_NAMES = ("precision", "recall", "dsc", "iou")


@dataclass
class CategorySummary:
    ids: List[str] = field(default_factory=list)
    counts: List[ConfusionCounts] = field(default_factory=list)
    image_scores: List[Scores] = field(default_factory=list)
    pfom: List[float] = field(default_factory=list)

    @property
    def data_based(self) -> Scores:
        return data_based_metrics(self.counts)

    @property
    def pfom_mean(self) -> float:
        return pfom_mean(self.pfom)


@dataclass
class MetricsReport:
    ids: List[str]
    counts: List[ConfusionCounts]
    image_scores: List[Scores]
    pfom: List[float]
    categories: List[int]
    data_based: Scores
    image_based: Scores
    per_category: Dict[int, CategorySummary]
    category1_fp_counts: List[int]
    spec: CategorySpec = CategorySpec()

    @property
    def pfom_by_category(self) -> Dict[int, float]:
        return {c: s.pfom_mean for c, s in self.per_category.items()}

    def pie_dsc(self) -> Dict[int, float]:
        """Data-based DSC per category, empty-ground-truth category excluded."""
        return {c: s.data_based.dsc for c, s in self.per_category.items() if c != 1}


def build_report(preds: Sequence, gts: Sequence, spec: CategorySpec = CategorySpec(),
                 ids: Optional[Sequence[str]] = None) -> MetricsReport:
    if len(preds) != len(gts):
        raise ValueError(f"{len(preds)} predictions but {len(gts)} ground truths")
    if not preds:
        raise ValueError("cannot build a report from zero images")
    ids = list(ids) if ids is not None else [str(i) for i in range(len(preds))]
    counts, img_scores, pf, cats, fp1 = [], [], [], [], []
    per_cat: Dict[int, CategorySummary] = OrderedDict((c, CategorySummary()) for c in range(1, 11))
    for sid, p, g in zip(ids, preds, gts):
        c = confusion_counts(p, g)
        s = scores(c)
        f = mask_pfom(p, g)
        cat = categorize(g, spec)
        counts.append(c)
        img_scores.append(s)
        pf.append(f)
        cats.append(cat)
        summary = per_cat[cat]
        summary.ids.append(sid)
        summary.counts.append(c)
        summary.image_scores.append(s)
        summary.pfom.append(f)
        if cat == 1:
            fp1.append(category1_fp_count(p))
    per_cat = OrderedDict((k, v) for k, v in per_cat.items() if v.ids)
    return MetricsReport(ids, counts, img_scores, pf, cats, data_based_metrics(counts),
                         image_based_metrics(counts), per_cat, fp1, spec)


PER_IMAGE_COLUMNS = ("id", "tp", "fp", "tn", "fn", "precision", "recall", "dsc", "iou", "pfom", "category")


def write_report_csvs(report: MetricsReport, out_dir) -> Dict[str, Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    per_image = out_dir / "per_image.csv"
    with open(per_image, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(PER_IMAGE_COLUMNS)
        for sid, c, s, f, cat in zip(report.ids, report.counts, report.image_scores, report.pfom, report.categories):
            w.writerow([sid, c.tp, c.fp, c.tn, c.fn, *(repr(float(v)) for v in s), repr(f), cat])
    aggregates = out_dir / "aggregates.csv"
    labels = report.spec.labels()
    with open(aggregates, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["family", "category", "label", "n_images", *METRIC_NAMES, "pfom_mean"])
        w.writerow(["data", "all", "all", len(report.ids), *map(repr, report.data_based), repr(pfom_mean(report.pfom))])
        w.writerow(["image", "all", "all", len(report.ids), *map(repr, report.image_based), repr(pfom_mean(report.pfom))])
        for cat, summary in report.per_category.items():
            img = image_based_metrics(summary.counts)
            w.writerow(["data", cat, labels[cat - 1], len(summary.ids), *map(repr, summary.data_based), repr(summary.pfom_mean)])
            w.writerow(["image", cat, labels[cat - 1], len(summary.ids), *map(repr, img), repr(summary.pfom_mean)])
    return {"per_image": per_image, "aggregates": aggregates}


def read_per_image_csv(path) -> List[Dict]:
    """Parse a per-image metrics CSV, naming the row and column of any bad field."""
    rows = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        missing = [c for c in PER_IMAGE_COLUMNS if c not in (reader.fieldnames or [])]
        if missing:
            raise ValueError(f"{path}: missing columns {missing}")
        for n, raw in enumerate(reader, start=2):
            row = {"id": raw["id"]}
            for col in PER_IMAGE_COLUMNS[1:]:
                try:
                    row[col] = int(raw[col]) if col in ("tp", "fp", "tn", "fn", "category") else float(raw[col])
                except (TypeError, ValueError):
                    raise ValueError(f"{path}: row {n}, column {col!r}: cannot parse {raw[col]!r}") from None
            if not 1 <= row["category"] <= 10:
                raise ValueError(f"{path}: row {n}, column 'category': {row['category']} outside 1..10")
            rows.append(row)
    return rows


def report_from_rows(rows: Sequence[Dict], spec: CategorySpec = CategorySpec()) -> MetricsReport:
    """Rebuild a report from stored per-image rows (no masks needed)."""
    if not rows:
        raise ValueError("no rows to rebuild a report from")
    ids = [r["id"] for r in rows]
    counts = [ConfusionCounts(r["tp"], r["fp"], r["tn"], r["fn"]) for r in rows]
    img_scores = [scores(c) for c in counts]
    pf = [r["pfom"] for r in rows]
    cats = [r["category"] for r in rows]
    per_cat: Dict[int, CategorySummary] = OrderedDict()
    for cat in sorted(set(cats)):
        per_cat[cat] = CategorySummary()
    fp1 = []
    for sid, c, s, f, cat in zip(ids, counts, img_scores, pf, cats):
        summary = per_cat[cat]
        summary.ids.append(sid)
        summary.counts.append(c)
        summary.image_scores.append(s)
        summary.pfom.append(f)
        if cat == 1:
            fp1.append(c.fp)
    return MetricsReport(ids, counts, img_scores, pf, cats, data_based_metrics(counts),
                         image_based_metrics(counts), per_cat, fp1, spec)
