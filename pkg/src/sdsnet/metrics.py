"""Pixel-level (IoU, nIoU, F1) and target-level (Pd, Fa) metrics.

All functions take lists of 2-D binary (or probability) numpy arrays. Counts
are kept as integers so results are exact and accumulators merge
associatively; see :class:`MetricAccumulator`.

Target matching: predicted and ground-truth masks are split into
8-connected components; a ground-truth target counts as detected when an
unused predicted component has its centroid within ``match_radius`` pixels of
the target centroid (pairs are taken nearest first). Pixels of predicted
components that match nothing are false alarms.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

EIGHT = np.ones((3, 3), dtype=bool)


@dataclass
class ComponentSet:
    labels: np.ndarray  # 0 = background, 1..n = component id
    pixels: list[np.ndarray]  # per component, [k, 2] (row, col)
    centroids: np.ndarray  # [n, 2] (row, col)

    def __len__(self):
        return len(self.pixels)

    @property
    def sizes(self):
        return np.array([len(p) for p in self.pixels], dtype=np.int64)


def label_components(mask) -> ComponentSet:
    mask = np.asarray(mask).astype(bool)
    labels, n = ndimage.label(mask, structure=EIGHT)
    pixels, cents = [], []
    if n:
        rows, cols = np.nonzero(labels)
        ids = labels[rows, cols]
        order = np.argsort(ids, kind="stable")
        rows, cols, ids = rows[order], cols[order], ids[order]
        bounds = np.searchsorted(ids, np.arange(1, n + 2))
        for a, b in zip(bounds[:-1], bounds[1:]):
            px = np.stack([rows[a:b], cols[a:b]], axis=1)
            pixels.append(px)
            cents.append(px.mean(axis=0))
    centroids = np.array(cents, dtype=float).reshape(-1, 2)
    return ComponentSet(labels, pixels, centroids)


def _binary(x, threshold=None):
    x = np.asarray(x)
    if threshold is not None:
        return x >= threshold
    return x.astype(bool)


def _pairs(preds, gts):
    if len(preds) != len(gts):
        raise ValueError(f"{len(preds)} predictions vs {len(gts)} ground truths")
    for p, g in zip(preds, gts):
        p, g = np.asarray(p), np.asarray(g)
        if p.shape != g.shape:
            raise ValueError(f"shape mismatch {p.shape} vs {g.shape}")
        yield p.astype(bool), g.astype(bool)


def pixel_counts(pred, gt):
    """(TP, T, P) for one binary pair: true positives, GT pixels, predicted pixels."""
    return int(np.count_nonzero(pred & gt)), int(np.count_nonzero(gt)), int(np.count_nonzero(pred))


def pixel_iou(preds, gts) -> float:
    """Dataset-aggregated IoU: sum TP / sum (T + P - TP). Empty union -> 1."""
    inter = union = 0
    for p, g in _pairs(preds, gts):
        tp, t, pp = pixel_counts(p, g)
        inter += tp
        union += t + pp - tp
    return 1.0 if union == 0 else inter / union


def sample_iou(pred, gt) -> float:
    tp, t, p = pixel_counts(np.asarray(pred, bool), np.asarray(gt, bool))
    union = t + p - tp
    return 1.0 if union == 0 else tp / union


def normalized_iou(preds, gts) -> float:
    """Mean of per-sample IoU; a sample with empty union scores 1."""
    vals = [sample_iou(p, g) for p, g in _pairs(preds, gts)]
    if not vals:
        raise ValueError("normalized_iou of an empty set")
    return math.fsum(vals) / len(vals)


def precision_recall(preds, gts):
    tp = fp = fn = 0
    for p, g in _pairs(preds, gts):
        a, t, pp = pixel_counts(p, g)
        tp += a
        fp += pp - a
        fn += t - a
    prec = tp / (tp + fp) if tp + fp else 0.0
    rec = tp / (tp + fn) if tp + fn else 0.0
    return prec, rec


def f1_score(preds, gts) -> float:
    prec, rec = precision_recall(preds, gts)
    return 0.0 if prec + rec == 0 else 2 * prec * rec / (prec + rec)


def match_targets(pred_cc: ComponentSet, gt_cc: ComponentSet, match_radius=3.0):
    """Greedy nearest-first one-to-one matching on centroid distance.

    Returns ``(gt_matched, pred_matched)`` boolean arrays.
    """
    gt_hit = np.zeros(len(gt_cc), bool)
    pred_hit = np.zeros(len(pred_cc), bool)
    if len(gt_cc) and len(pred_cc):
        d = np.linalg.norm(gt_cc.centroids[:, None, :] - pred_cc.centroids[None, :, :], axis=2)
        gi, pi = np.nonzero(d <= match_radius)
        order = np.lexsort((pi, gi, d[gi, pi]))
        for g, p in zip(gi[order], pi[order]):
            if not gt_hit[g] and not pred_hit[p]:
                gt_hit[g] = pred_hit[p] = True
    return gt_hit, pred_hit


@dataclass
class DetectionCounts:
    matched: int = 0  # N_pred
    targets: int = 0  # N_all
    false_pixels: int = 0  # N_false
    pixels: int = 0  # P_all

    def __add__(self, other):
        return DetectionCounts(self.matched + other.matched, self.targets + other.targets,
                               self.false_pixels + other.false_pixels, self.pixels + other.pixels)

    @property
    def pd(self):
        return None if self.targets == 0 else self.matched / self.targets

    @property
    def fa(self):
        return 0.0 if self.pixels == 0 else self.false_pixels / self.pixels


def detection_counts(pred, gt, match_radius=3.0) -> DetectionCounts:
    pred, gt = np.asarray(pred, bool), np.asarray(gt, bool)
    pcc, gcc = label_components(pred), label_components(gt)
    gt_hit, pred_hit = match_targets(pcc, gcc, match_radius)
    false_px = int(pcc.sizes[~pred_hit].sum()) if len(pcc) else 0
    return DetectionCounts(int(gt_hit.sum()), len(gcc), false_px, pred.size)


class UndefinedPd(ValueError):
    """Raised by :func:`detection_pd_fa` when the set contains no targets."""

    def __init__(self, fa):
        self.fa = fa
        super().__init__(f"no ground-truth targets: Pd undefined (Fa = {fa})")


def detection_pd_fa(preds, gts, match_radius=3.0):
    """(Pd, Fa) over a set. Fa is false-alarm pixels / all pixels.

    With no targets in the whole set Pd is undefined and :class:`UndefinedPd`
    is raised; its ``fa`` attribute still carries the false-alarm rate.
    """
    total = DetectionCounts()
    for p, g in _pairs(preds, gts):
        total = total + detection_counts(p, g, match_radius)
    if total.pd is None:
        raise UndefinedPd(total.fa)
    return total.pd, total.fa


def roc_curve(prob_maps, gts, thresholds, match_radius=3.0):
    """(fa, pd) for each threshold, thresholds strictly decreasing.

    Maps are binarized as ``prob >= threshold``. Each target is scored by the
    highest threshold at which it is matched and each pixel by the highest
    threshold at which it lies in an unmatched predicted component, so both
    curves are non-decreasing along the list. Where no component merge flips
    a match between thresholds, the rows equal :func:`detection_pd_fa` at
    each threshold.
    """
    thr = np.asarray(thresholds, dtype=float)
    if thr.ndim != 1 or len(thr) == 0:
        raise ValueError("thresholds must be a non-empty 1-D sequence")
    if np.any(np.diff(thr) >= 0):
        raise ValueError("thresholds must be strictly decreasing")
    n_t = len(thr)
    first_hit_counts = np.zeros(n_t + 1, np.int64)  # index n_t = never detected
    first_false_counts = np.zeros(n_t + 1, np.int64)
    n_targets = n_pixels = 0
    for prob, gt in zip(prob_maps, gts):
        prob, gt = np.asarray(prob, float), np.asarray(gt, bool)
        if prob.shape != gt.shape:
            raise ValueError(f"shape mismatch {prob.shape} vs {gt.shape}")
        gcc = label_components(gt)
        n_targets += len(gcc)
        n_pixels += gt.size
        first_hit = np.full(len(gcc), n_t)
        first_false = np.full(gt.shape, n_t)
        for j, t in enumerate(thr):
            pcc = label_components(prob >= t)
            gt_hit, pred_hit = match_targets(pcc, gcc, match_radius)
            first_hit[gt_hit & (first_hit == n_t)] = j
            if len(pcc):
                bad = np.isin(pcc.labels, np.flatnonzero(~pred_hit) + 1)
                first_false[bad & (first_false == n_t)] = j
        first_hit_counts += np.bincount(first_hit, minlength=n_t + 1)
        first_false_counts += np.bincount(first_false.ravel(), minlength=n_t + 1)
    hits = np.cumsum(first_hit_counts[:n_t])
    false = np.cumsum(first_false_counts[:n_t])
    pd = hits / n_targets if n_targets else np.full(n_t, np.nan)
    fa = false / n_pixels if n_pixels else np.zeros(n_t)
    return [(float(f), float(p)) for f, p in zip(fa, pd)]


@dataclass
class MetricReport:
    iou: float
    niou: float
    f1: float
    precision: float
    recall: float
    pd: float | None
    fa: float
    threshold: float
    match_radius: float
    num_images: int
    roc: list[tuple[float, float, float]] = field(default_factory=list)  # (threshold, fa, pd)

    def to_dict(self):
        d = {k: getattr(self, k) for k in
             ("iou", "niou", "f1", "precision", "recall", "pd", "fa", "threshold",
              "match_radius", "num_images")}
        d["fa_e6"] = self.fa * 1e6
        d["pd_status"] = "ok" if self.pd is not None else "undefined: no targets"
        d["roc"] = [list(r) for r in self.roc]
        return d


@dataclass
class MetricAccumulator:
    """Mergeable per-image partial counts; ``a.merge(b)`` is associative and commutative."""

    threshold: float = 0.5
    match_radius: float = 3.0
    tp: int = 0
    t: int = 0
    p: int = 0
    images: int = 0
    det: DetectionCounts = field(default_factory=DetectionCounts)
    per_image_iou: list[float] = field(default_factory=list)

    def update(self, prob, gt):
        pred = _binary(prob, self.threshold)
        gt = np.asarray(gt, bool)
        tp, t, p = pixel_counts(pred, gt)
        self.tp += tp
        self.t += t
        self.p += p
        self.per_image_iou.append(sample_iou(pred, gt))
        self.images += 1
        self.det = self.det + detection_counts(pred, gt, self.match_radius)
        return self

    def merge(self, other):
        if (self.threshold, self.match_radius) != (other.threshold, other.match_radius):
            raise ValueError("cannot merge accumulators with different settings")
        return MetricAccumulator(self.threshold, self.match_radius, self.tp + other.tp,
                                 self.t + other.t, self.p + other.p,
                                 self.images + other.images, self.det + other.det,
                                 self.per_image_iou + other.per_image_iou)

    def report(self) -> MetricReport:
        if self.images == 0:
            raise ValueError("no images accumulated")
        union = self.t + self.p - self.tp
        iou = 1.0 if union == 0 else self.tp / union
        fp, fn = self.p - self.tp, self.t - self.tp
        prec = self.tp / (self.tp + fp) if self.tp + fp else 0.0
        rec = self.tp / (self.tp + fn) if self.tp + fn else 0.0
        f1 = 0.0 if prec + rec == 0 else 2 * prec * rec / (prec + rec)
        # correctly rounded sum: order-independent result for merged accumulators
        niou = math.fsum(self.per_image_iou) / self.images
        return MetricReport(iou, niou, f1, prec, rec, self.det.pd, self.det.fa,
                            self.threshold, self.match_radius, self.images)


def evaluate(prob_maps, gts, threshold=0.5, match_radius=3.0, roc_thresholds=None) -> MetricReport:
    acc = MetricAccumulator(threshold, match_radius)
    for prob, gt in zip(prob_maps, gts):
        acc.update(prob, gt)
    report = acc.report()
    if roc_thresholds is not None:
        rows = roc_curve(prob_maps, gts, roc_thresholds, match_radius)
        report.roc = [(float(t), fa, pd) for t, (fa, pd) in zip(roc_thresholds, rows)]
    return report
