"""Saliency evaluation: PR curves, F-measure, MAE, weighted F-measure,
Otsu-adaptive scores and shuffled AUC."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage
from scipy.stats import rankdata

from .imaging import DegenerateMapError, otsu_threshold, quantize

__all__ = [
    "EmptyGroundTruthError",
    "PRCurve",
    "EvalReport",
    "pr_curve",
    "f_beta",
    "mae",
    "weighted_f_beta",
    "adaptive_scores",
    "shuffled_auc",
    "evaluate_image",
    "aggregate",
    "BETA_SQ",
]

BETA_SQ = 0.3
WFB_BETA_SQ = 1.0
WFB_WINDOW = 7
WFB_SIGMA = 5.0
WFB_DECAY = math.log(0.5) / 5.0
_EPS = np.finfo(np.float64).eps


class EmptyGroundTruthError(ValueError):
    """The ground truth has no salient pixel, so recall is undefined."""


def _check(smap, gt):
    smap = np.asarray(smap, dtype=np.float64)
    gt = np.asarray(gt)
    if smap.shape != gt.shape:
        raise ValueError(f"map {smap.shape} and ground truth {gt.shape} differ")
    return smap, gt.astype(bool)


@dataclass
class PRCurve:
    precision: np.ndarray
    recall: np.ndarray

    def f_beta(self, beta_sq=BETA_SQ) -> np.ndarray:
        return f_beta(self.precision, self.recall, beta_sq)

    def to_csv(self) -> str:
        rows = ["threshold,precision,recall"]
        rows += [f"{t},{p!r},{r!r}" for t, (p, r) in enumerate(zip(self.precision.tolist(), self.recall.tolist()))]
        return "\n".join(rows) + "\n"


def pr_curve(smap, gt) -> PRCurve:
    """Precision/recall for every threshold tau in 0..255 on round(255*s) >= tau.

    Precision is 1 when nothing is predicted salient.
    """
    smap, gt = _check(smap, gt)
    n_pos = int(gt.sum())
    if n_pos == 0:
        raise EmptyGroundTruthError("ground truth has no salient pixels")
    q = quantize(smap)
    hist_all = np.bincount(q.ravel(), minlength=256)
    hist_pos = np.bincount(q[gt], minlength=256)
    # counts of levels >= tau
    pred = np.cumsum(hist_all[::-1])[::-1]
    tp = np.cumsum(hist_pos[::-1])[::-1]
    precision = np.where(pred > 0, tp / np.maximum(pred, 1), 1.0)
    recall = tp / n_pos
    return PRCurve(precision.astype(np.float64), recall.astype(np.float64))


def f_beta(precision, recall, beta_sq=BETA_SQ):
    """Weighted harmonic mean of precision and recall; 0 where undefined."""
    p = np.asarray(precision, dtype=np.float64)
    r = np.asarray(recall, dtype=np.float64)
    num = (1 + beta_sq) * p * r
    den = beta_sq * p + r
    out = np.divide(num, den, out=np.zeros(np.broadcast(p, r).shape), where=den > 0)
    return float(out) if out.ndim == 0 else out


def mae(smap, gt) -> float:
    smap = np.asarray(smap, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if smap.shape != gt.shape:
        raise ValueError(f"map {smap.shape} and ground truth {gt.shape} differ")
    return float(np.abs(smap - gt).sum() / smap.size)


def gaussian_window(size=WFB_WINDOW, sigma=WFB_SIGMA) -> np.ndarray:
    half = (size - 1) / 2.0
    y, x = np.ogrid[-half : half + 1, -half : half + 1]
    k = np.exp(-(x * x + y * y) / (2.0 * sigma * sigma))
    k[k < _EPS * k.max()] = 0
    return k / k.sum()


def weighted_f_beta(smap, gt, beta_sq=WFB_BETA_SQ, sigma=WFB_SIGMA, window=WFB_WINDOW, decay=WFB_DECAY) -> float:
    """Weighted F-measure with location-dependent error weights.

    Errors on background pixels are replaced by the error of the nearest
    foreground pixel and smoothed with a Gaussian; foreground errors take the
    smaller of raw and smoothed values. Background errors are amplified by
    ``2 - exp(decay * dist)`` with ``dist`` the distance to the foreground.
    """
    smap, gt = _check(smap, gt)
    if not gt.any():
        raise EmptyGroundTruthError("ground truth has no salient pixels")
    dist, (iy, ix) = ndimage.distance_transform_edt(~gt, return_indices=True)
    err = np.abs(smap - gt)
    et = err[iy, ix]
    ea = ndimage.correlate(et, gaussian_window(window, sigma), mode="constant", cval=0.0)
    min_e = np.where(gt & (ea < err), ea, err)
    importance = np.where(gt, 1.0, 2.0 - np.exp(decay * dist))
    ew = min_e * importance
    tpw = gt.sum() - ew[gt].sum()
    fpw = ew[~gt].sum()
    recall = 1.0 - ew[gt].mean()
    precision = tpw / (_EPS + tpw + fpw)
    return float((1 + beta_sq) * recall * precision / (_EPS + recall + beta_sq * precision))


def _binary_scores(pred, gt, beta_sq):
    tp = int((pred & gt).sum())
    n_pred = int(pred.sum())
    n_pos = int(gt.sum())
    if n_pos == 0:
        raise EmptyGroundTruthError("ground truth has no salient pixels")
    precision = tp / n_pred if n_pred else 1.0
    recall = tp / n_pos
    return precision, recall, f_beta(precision, recall, beta_sq)


def adaptive_scores(smap, gt, beta_sq=BETA_SQ):
    """Precision, recall and F-beta after Otsu binarization.

    A map with a single grey level is one class: all salient if its level is
    at least 128, none otherwise.
    """
    smap, gt = _check(smap, gt)
    q = quantize(smap)
    try:
        tau = otsu_threshold(smap)
    except DegenerateMapError:
        tau = 128
    return _binary_scores(q >= tau, gt, beta_sq)


def _values_at(smap, points):
    pts = np.asarray(points, dtype=np.int64).reshape(-1, 2)
    h, w = smap.shape
    if len(pts) == 0:
        raise ValueError("fixation set is empty")
    if (pts[:, 0] < 0).any() or (pts[:, 0] >= w).any() or (pts[:, 1] < 0).any() or (pts[:, 1] >= h).any():
        raise ValueError("fixation outside the image")
    return smap[pts[:, 1], pts[:, 0]]


def shuffled_auc(smap, fixations, negatives) -> float:
    """ROC area of map values at fixations vs. fixations borrowed from other images.

    Points are (x, y) pixel coordinates. Ties count one half (rank formulation).
    """
    smap = np.asarray(smap, dtype=np.float64)
    pos = _values_at(smap, fixations)
    neg = _values_at(smap, negatives)
    ranks = rankdata(np.concatenate([pos, neg]), method="average")
    n_pos, n_neg = len(pos), len(neg)
    u = ranks[:n_pos].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


@dataclass
class EvalReport:
    """Scores for one image, or dataset means when built by :func:`aggregate`."""

    precision: np.ndarray
    recall: np.ndarray
    mae: float
    wfb: float
    adaptive_precision: float
    adaptive_recall: float
    adaptive_fb: float
    sauc: float | None = None
    name: str = ""
    images: list = field(default_factory=list)
    excluded: list = field(default_factory=list)

    @property
    def fb_curve(self) -> np.ndarray:
        return f_beta(self.precision, self.recall, BETA_SQ)

    @property
    def mean_fb(self) -> float:
        return float(self.fb_curve.mean())

    @property
    def max_fb(self) -> float:
        return float(self.fb_curve.max())

    def scalars(self) -> dict:
        out = {
            "meanFbeta": self.mean_fb,
            "maxFbeta": self.max_fb,
            "adaptiveFbeta": float(self.adaptive_fb),
            "adaptivePrecision": float(self.adaptive_precision),
            "adaptiveRecall": float(self.adaptive_recall),
            "mae": float(self.mae),
            "weightedFbeta": float(self.wfb),
        }
        if self.sauc is not None:
            out["shuffledAuc"] = float(self.sauc)
        return out

    def pr(self) -> PRCurve:
        return PRCurve(self.precision, self.recall)


def evaluate_image(smap, gt, name="", fixations=None, negatives=None) -> EvalReport:
    curve = pr_curve(smap, gt)
    ap, ar, af = adaptive_scores(smap, gt)
    sauc = None
    if fixations is not None and negatives is not None and len(fixations) and len(negatives):
        sauc = shuffled_auc(smap, fixations, negatives)
    return EvalReport(
        precision=curve.precision,
        recall=curve.recall,
        mae=mae(smap, gt),
        wfb=weighted_f_beta(smap, gt),
        adaptive_precision=ap,
        adaptive_recall=ar,
        adaptive_fb=af,
        sauc=sauc,
        name=name,
    )


def aggregate(reports, name="", excluded=()) -> EvalReport:
    """Dataset report: means of per-image scores, PR curves averaged per threshold.

    ``excluded`` names images left out of the means (empty ground truth).
    """
    reports = list(reports)
    if not reports:
        raise ValueError("no images to aggregate")

    def mean(values):
        total = 0.0
        for v in values:
            total += v
        return total / len(values)

    saucs = [r.sauc for r in reports if r.sauc is not None]
    return EvalReport(
        precision=np.mean([r.precision for r in reports], axis=0),
        recall=np.mean([r.recall for r in reports], axis=0),
        mae=mean([r.mae for r in reports]),
        wfb=mean([r.wfb for r in reports]),
        adaptive_precision=mean([r.adaptive_precision for r in reports]),
        adaptive_recall=mean([r.adaptive_recall for r in reports]),
        adaptive_fb=mean([r.adaptive_fb for r in reports]),
        sauc=mean(saucs) if saucs else None,
        name=name,
        images=reports,
        excluded=list(excluded),
    )
