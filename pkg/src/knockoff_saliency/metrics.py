"""Image similarity and saliency-localisation metrics."""

from __future__ import annotations

import csv
import json
import math
from collections import defaultdict
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .data import BoundingBox, ground_truth_box, mask_box

C1 = 0.01 ** 2
C2 = 0.03 ** 2
# first three standard MS-SSIM weights, renormalised to sum to one
MS_WEIGHTS = tuple(np.array([0.0448, 0.2856, 0.3001]) / (0.0448 + 0.2856 + 0.3001))
AREA_FLOOR = 0.05
PROB_FLOOR = 1e-6
MIN_SCALE = 7


def _window_stats(a: np.ndarray, b: np.ndarray, window: int):
    if a.shape != b.shape:
        raise ValueError(f"ssim: shapes differ {a.shape} vs {b.shape}")
    if a.ndim != 2 or min(a.shape) < window:
        raise ValueError(f"ssim: image {a.shape} smaller than window {window}")
    wa = sliding_window_view(a, (window, window))
    wb = sliding_window_view(b, (window, window))
    mu_a = wa.mean(axis=(-1, -2))
    mu_b = wb.mean(axis=(-1, -2))
    var_a = (wa * wa).mean(axis=(-1, -2)) - mu_a ** 2
    var_b = (wb * wb).mean(axis=(-1, -2)) - mu_b ** 2
    cov = (wa * wb).mean(axis=(-1, -2)) - mu_a * mu_b
    return mu_a, mu_b, var_a, var_b, cov


def _ssim_parts(a, b, window, c1, c2):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    mu_a, mu_b, var_a, var_b, cov = _window_stats(a, b, window)
    lum = (2 * mu_a * mu_b + c1) / (mu_a ** 2 + mu_b ** 2 + c1)
    cs = (2 * cov + c2) / (var_a + var_b + c2)
    return lum, cs


def ssim(a: np.ndarray, b: np.ndarray, window: int = 8, c1: float = C1, c2: float = C2) -> float:
    """Mean SSIM over all valid ``window`` x ``window`` windows (uniform weights, dynamic range 1)."""
    lum, cs = _ssim_parts(a, b, window, c1, c2)
    return float(np.mean(lum * cs))


def downsample2(a: np.ndarray) -> np.ndarray:
    """2x2 average pooling; a trailing odd row or column is dropped."""
    h, w = a.shape[0] // 2 * 2, a.shape[1] // 2 * 2
    a = a[:h, :w]
    return 0.25 * (a[0::2, 0::2] + a[1::2, 0::2] + a[0::2, 1::2] + a[1::2, 1::2])


def ms_ssim(a: np.ndarray, b: np.ndarray, scales: int = 3, weights=None, window: int = 8) -> float:
    """Multi-scale SSIM: contrast-structure at fine scales, full SSIM at the coarsest.

    The window shrinks to the image size once the image is smaller than
    ``window``.  Negative per-scale terms are clamped to zero before the
    fractional powers.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if weights is None:
        if scales > len(MS_WEIGHTS):
            raise ValueError(f"ms_ssim: no default weights for {scales} scales")
        w = np.array(MS_WEIGHTS[:scales])
        weights = w / w.sum()
    if len(weights) != scales:
        raise ValueError("ms_ssim: one weight per scale required")
    coarsest = min(a.shape) // 2 ** (scales - 1)
    if coarsest < MIN_SCALE:
        raise ValueError(f"ms_ssim: {scales} scales need at least {MIN_SCALE}px at the coarsest scale, "
                         f"{a.shape} gives {coarsest}")
    out = 1.0
    for s in range(scales):
        win = min(window, *a.shape)
        lum, cs = _ssim_parts(a, b, win, C1, C2)
        term = np.mean(lum * cs) if s == scales - 1 else np.mean(cs)
        out *= max(float(term), 0.0) ** weights[s]
        if s < scales - 1:
            a, b = downsample2(a), downsample2(b)
    return float(out)


# ---------------------------------------------------------------------------
# boxes


def saliency_box(values: np.ndarray, threshold: float) -> BoundingBox | None:
    """Minimal box around pixels strictly above ``threshold``; None when there are none."""
    values = np.asarray(values)
    if not np.all(np.isfinite(values)):
        raise ValueError("saliency_box: map contains non-finite values")
    return mask_box(values > threshold)


def iou(a: BoundingBox, b: BoundingBox) -> float:
    r0, c0 = max(a.row_min, b.row_min), max(a.col_min, b.col_min)
    r1, c1 = min(a.row_max, b.row_max), min(a.col_max, b.col_max)
    inter = max(0, r1 - r0 + 1) * max(0, c1 - c0 + 1)
    return inter / (a.area + b.area - inter)


def wsl(pairs) -> float:
    """Percentage of (saliency box, ground-truth box) pairs with IOU > 0.5; a None box is a miss."""
    pairs = list(pairs)
    if not pairs:
        raise ValueError("wsl: no records")
    hits = sum(1 for sb, gt in pairs if sb is not None and iou(sb, gt) > 0.5)
    return 100.0 * hits / len(pairs)


# ---------------------------------------------------------------------------
# saliency metric


def _resample_axis(n_in: int, n_out: int):
    """Source indices and weights for half-pixel-centre linear resampling."""
    pos = (np.arange(n_out) + 0.5) * n_in / n_out - 0.5
    pos = np.clip(pos, 0.0, n_in - 1)
    lo = np.floor(pos).astype(int)
    hi = np.minimum(lo + 1, n_in - 1)
    return lo, hi, pos - lo


def crop_and_upscale(x: np.ndarray, box: BoundingBox, size=None, mode: str = "bilinear") -> np.ndarray:
    """Crop ``x`` to ``box`` and resize back to ``size`` (default: the input size)."""
    x = np.asarray(x, dtype=np.float32)
    size = size or x.shape
    crop = x[box.row_min: box.row_max + 1, box.col_min: box.col_max + 1]
    h, w = crop.shape
    if mode == "nearest":
        ri = np.minimum((np.arange(size[0]) * h) // size[0], h - 1)
        ci = np.minimum((np.arange(size[1]) * w) // size[1], w - 1)
        return crop[np.ix_(ri, ci)]
    if mode != "bilinear":
        raise ValueError(f"unknown interpolation {mode!r}")
    r0, r1, fr = _resample_axis(h, size[0])
    c0, c1, fc = _resample_axis(w, size[1])
    fr = fr[:, None].astype(np.float32)
    fc = fc[None, :].astype(np.float32)
    top = crop[np.ix_(r0, c0)] * (1 - fc) + crop[np.ix_(r0, c1)] * fc
    bot = crop[np.ix_(r1, c0)] * (1 - fc) + crop[np.ix_(r1, c1)] * fc
    return top * (1 - fr) + bot * fr


def sm_formula(area_ratio: float, p: float) -> float:
    return math.log(max(area_ratio, AREA_FLOOR)) - math.log(max(p, PROB_FLOOR))


def saliency_metrics(classifier, images: np.ndarray, boxes, labels, mode: str = "bilinear") -> np.ndarray:
    """SM for a batch; a None box is scored with the full image."""
    images = np.asarray(images, dtype=np.float32)
    shape = images.shape[1:]
    full = BoundingBox.full(shape)
    boxes = [b if b is not None else full for b in boxes]
    crops = np.stack([crop_and_upscale(x, b, shape, mode) for x, b in zip(images, boxes)])
    probs = classifier.predict_proba(crops)
    idx = classifier.label_indices(np.asarray(labels))
    p = probs[np.arange(len(images)), idx]
    npx = shape[0] * shape[1]
    return np.array([sm_formula(b.area / npx, float(pi)) for b, pi in zip(boxes, p)])


def saliency_metric(classifier, x: np.ndarray, box: BoundingBox | None, c: int, mode: str = "bilinear") -> float:
    return float(saliency_metrics(classifier, np.asarray(x)[None], [box], [c], mode)[0])


# ---------------------------------------------------------------------------
# records and aggregation


@dataclass
class SaliencyRecord:
    sample_id: int
    label: int
    method: str
    objective: str
    threshold: str
    sm: float
    hit: bool
    box: tuple | None
    gt_box: tuple


@dataclass
class MetricRow:
    method: str
    objective: str
    threshold: str
    sm: float
    wsl: float
    cls: str
    count: int

    def __post_init__(self):
        if self.count <= 0:
            raise ValueError("MetricRow needs at least one sample")
        if not 0.0 <= self.wsl <= 100.0:
            raise ValueError(f"WSL {self.wsl} outside [0, 100]")


METRIC_HEADER = ["method", "objective", "threshold", "class", "count", "sm", "wsl"]


def score_boxes(classifier, images, labels, boxes, gt_boxes, method, objective, threshold, sample_ids=None,
                mode: str = "bilinear") -> list[SaliencyRecord]:
    sms = saliency_metrics(classifier, images, boxes, labels, mode)
    ids = range(len(images)) if sample_ids is None else sample_ids
    out = []
    for sid, lab, b, gt, sm in zip(ids, labels, boxes, gt_boxes, sms):
        hit = b is not None and iou(b, gt) > 0.5
        out.append(SaliencyRecord(int(sid), int(lab), method, objective, str(threshold), float(sm), bool(hit),
                                  None if b is None else b.as_tuple(), gt.as_tuple()))
    return out


def baselines(classifier, images: np.ndarray, labels: np.ndarray, sample_ids=None) -> list[SaliencyRecord]:
    """MAX uses the ground-truth box as the saliency box; MIN uses the whole image."""
    gts = [ground_truth_box(x) for x in images]
    full = [BoundingBox.full(images.shape[1:])] * len(images)
    return (score_boxes(classifier, images, labels, gts, gts, "MAX", "-", "-", sample_ids)
            + score_boxes(classifier, images, labels, full, gts, "MIN", "-", "-", sample_ids))


def aggregate(records) -> list[MetricRow]:
    """Per-class and overall SM/WSL for each (method, objective, threshold) group."""
    groups: dict = defaultdict(list)
    for r in records:
        groups[(r.method, r.objective, r.threshold)].append(r)
    rows = []
    for (method, objective, thr), recs in groups.items():
        by_cls = defaultdict(list)
        for r in recs:
            by_cls[r.label].append(r)
        for cls in sorted(by_cls):
            rs = by_cls[cls]
            rows.append(MetricRow(method, objective, thr, float(np.mean([r.sm for r in rs])),
                                  100.0 * sum(r.hit for r in rs) / len(rs), str(cls), len(rs)))
        rows.append(MetricRow(method, objective, thr, float(np.mean([r.sm for r in recs])),
                              100.0 * sum(r.hit for r in recs) / len(recs), "all", len(recs)))
    return rows


def write_metric_csv(rows: list[MetricRow], path) -> None:
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(METRIC_HEADER)
        for r in rows:
            wr.writerow([r.method, r.objective, r.threshold, r.cls, r.count, f"{r.sm:.6f}", f"{r.wsl:.3f}"])


def write_report(rows: list[MetricRow], records: list[SaliencyRecord], path) -> None:
    Path(path).write_text(json.dumps({"rows": [asdict(r) for r in rows],
                                      "records": [asdict(r) for r in records]}, indent=1, sort_keys=True))
