"""Classification, reconstruction and segmentation quality measures."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage
from scipy.spatial import cKDTree

CLASSIFICATION_METRICS = ("AUC", "ACC", "SEN", "SPE", "F1")


class MetricError(ValueError):
    pass


@dataclass
class ClassificationResult:
    ACC: float
    SEN: float
    SPE: float
    F1: float
    tp: int
    fn: int
    fp: int
    tn: int
    degenerate: list[str] = field(default_factory=list)


def _ratio(num: int, den: int, name: str, flags: list[str]) -> float:
    if den == 0:
        flags.append(name)
        return 0.0
    return num / den


def classification_metrics(scores, labels, threshold: float = 0.5) -> ClassificationResult:
    """Confusion-matrix metrics in percent; score >= threshold predicts class 1.

    Undefined ratios (e.g. SEN with no positives) are reported as 0 and named
    in ``degenerate``.
    """
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels).ravel().astype(int)
    if scores.size == 0:
        raise MetricError("no predictions")
    if scores.shape != labels.shape:
        raise MetricError(f"{scores.size} scores but {labels.size} labels")
    if not np.all(np.isfinite(scores)):
        raise MetricError("scores must be finite")
    pred = scores >= threshold
    pos = labels == 1
    tp = int(np.sum(pred & pos))
    fn = int(np.sum(~pred & pos))
    fp = int(np.sum(pred & ~pos))
    tn = int(np.sum(~pred & ~pos))
    flags: list[str] = []
    sen = _ratio(tp, tp + fn, "SEN", flags)
    spe = _ratio(tn, tn + fp, "SPE", flags)
    prec = _ratio(tp, tp + fp, "PREC", flags)
    f1 = 0.0 if prec + sen == 0 else 2 * prec * sen / (prec + sen)
    if prec + sen == 0:
        flags.append("F1")
    acc = (tp + tn) / scores.size
    return ClassificationResult(100 * acc, 100 * sen, 100 * spe, 100 * f1, tp, fn, fp, tn, flags)


def auc(scores, labels) -> float:
    """Probability that a random positive outscores a random negative (ties 1/2)."""
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels).ravel().astype(int)
    pos, neg = scores[labels == 1], scores[labels == 0]
    if pos.size == 0 or neg.size == 0:
        raise MetricError("AUC needs at least one positive and one negative")
    # rank-sum with midranks for ties
    allv = np.concatenate([pos, neg])
    order = np.argsort(allv, kind="mergesort")
    ranks = np.empty(allv.size, dtype=np.float64)
    sorted_v = allv[order]
    i = 0
    while i < allv.size:
        j = i
        while j + 1 < allv.size and sorted_v[j + 1] == sorted_v[i]:
            j += 1
        ranks[order[i:j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    u = ranks[:pos.size].sum() - pos.size * (pos.size + 1) / 2.0
    return float(u / (pos.size * neg.size))


def all_classification_metrics(scores, labels, threshold: float = 0.5) -> dict[str, float]:
    res = classification_metrics(scores, labels, threshold)
    try:
        a = 100 * auc(scores, labels)
    except MetricError:
        a = math.nan
    return {"AUC": a, "ACC": res.ACC, "SEN": res.SEN, "SPE": res.SPE, "F1": res.F1}


# ---------------------------------------------------------------- reconstruction


def _entropy(p: np.ndarray) -> float:
    p = p[p > 0]
    return float(-(p * np.log(p)).sum())


def _bin_index(x: np.ndarray, bins: int) -> np.ndarray:
    lo, hi = float(x.min()), float(x.max())
    if hi == lo:
        return np.zeros(x.shape, dtype=np.int64)
    idx = np.floor((x - lo) / (hi - lo) * bins).astype(np.int64)
    return np.clip(idx, 0, bins - 1)


def normalized_mutual_information(x: np.ndarray, y: np.ndarray, bins: int = 32) -> float:
    """2 I(X;Y) / (H(X) + H(Y)) from a joint histogram of equal-width bins."""
    bx = _bin_index(np.asarray(x, np.float64).ravel(), bins)
    by = _bin_index(np.asarray(y, np.float64).ravel(), bins)
    joint = np.bincount(bx * bins + by, minlength=bins * bins).reshape(bins, bins).astype(np.float64)
    joint /= joint.sum()
    hx, hy = _entropy(joint.sum(axis=1)), _entropy(joint.sum(axis=0))
    hxy = _entropy(joint.ravel())
    if hx + hy == 0:
        return 1.0
    return float(2.0 * (hx + hy - hxy) / (hx + hy))


def ssim(x: np.ndarray, y: np.ndarray, window: int = 7, sigma: float = 1.5, k1: float = 0.01,
         k2: float = 0.03) -> float:
    """Mean local 3D SSIM with a Gaussian window; dynamic range from ``x``."""
    x = np.asarray(x, np.float64)
    y = np.asarray(y, np.float64)
    data_range = float(x.max() - x.min())
    if data_range == 0:
        if np.array_equal(x, y):
            return 1.0
        raise MetricError("SSIM undefined: reference volume is constant")
    truncate = ((window - 1) / 2.0) / sigma
    filt = lambda a: ndimage.gaussian_filter(a, sigma, truncate=truncate, mode="reflect")  # noqa: E731
    mx, my = filt(x), filt(y)
    vx = filt(x * x) - mx * mx
    vy = filt(y * y) - my * my
    cxy = filt(x * y) - mx * my
    c1, c2 = (k1 * data_range) ** 2, (k2 * data_range) ** 2
    s = ((2 * mx * my + c1) * (2 * cxy + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2))
    return float(s.mean())


def reconstruction_metrics(x, x_hat, bins: int = 32, ssim_window: int = 7, k1: float = 0.01,
                           k2: float = 0.03) -> dict[str, float]:
    x = np.asarray(getattr(x, "data", x), np.float64)
    x_hat = np.asarray(getattr(x_hat, "data", x_hat), np.float64)
    if x.shape != x_hat.shape:
        raise MetricError(f"volume dims differ: {x.shape} vs {x_hat.shape}")
    return {
        "MAE": float(np.abs(x - x_hat).mean()),
        "NMI": normalized_mutual_information(x, x_hat, bins),
        "SSIM": ssim(x, x_hat, window=ssim_window, k1=k1, k2=k2),
    }


# ---------------------------------------------------------------- segmentation


def surface_voxels(mask: np.ndarray) -> np.ndarray:
    """Foreground voxels with at least one 6-connected background neighbour
    (outside the volume counts as background); returns K x 3 indices."""
    mask = np.asarray(mask, dtype=bool)
    interior = ndimage.binary_erosion(mask, structure=ndimage.generate_binary_structure(3, 1),
                                      border_value=0)
    return np.argwhere(mask & ~interior)


def _directed(a: np.ndarray, b: np.ndarray, spacing) -> np.ndarray:
    tree = cKDTree(b * spacing)
    d, _ = tree.query(a * spacing, k=1)
    return d


@dataclass
class SurfaceDistances:
    dice: float
    asd: float
    hd: float
    defined: bool = True


def binary_scores(pred: np.ndarray, truth: np.ndarray, spacing=(1.0, 1.0, 1.0),
                  percentile: float = 100.0) -> SurfaceDistances:
    pred = np.asarray(pred, dtype=bool)
    truth = np.asarray(truth, dtype=bool)
    np_, nt = int(pred.sum()), int(truth.sum())
    if np_ == 0 and nt == 0:
        return SurfaceDistances(1.0, 0.0, 0.0)
    dice = 2.0 * int((pred & truth).sum()) / (np_ + nt)
    if np_ == 0 or nt == 0:
        return SurfaceDistances(dice, math.nan, math.nan, defined=False)
    sp = np.asarray(spacing, dtype=np.float64)
    sa, sb = surface_voxels(pred), surface_voxels(truth)
    dab, dba = _directed(sa, sb, sp), _directed(sb, sa, sp)
    both = np.concatenate([dab, dba])
    asd = float(both.sum() / both.size)
    if percentile >= 100:
        hd = float(max(dab.max(), dba.max()))
    else:
        hd = float(max(np.percentile(dab, percentile), np.percentile(dba, percentile)))
    return SurfaceDistances(dice, asd, hd)


def segmentation_metrics(pred_labels, true_labels, spacing=None, classes=(1, 2, 3),
                         percentile: float = 100.0) -> dict:
    """Per-class Dice / ASD (mm) / HD (mm) plus means over ``classes``.

    Classes present in only one volume get Dice 0 and NaN distances, listed
    under ``"undefined"``; the distance means skip them.
    """
    if spacing is None:
        spacing = getattr(true_labels, "spacing", (1.0, 1.0, 1.0))
    p = np.asarray(getattr(pred_labels, "data", pred_labels))
    t = np.asarray(getattr(true_labels, "data", true_labels))
    if p.shape != t.shape:
        raise MetricError(f"label dims differ: {p.shape} vs {t.shape}")
    per_class = {}
    undefined = []
    for c in classes:
        s = binary_scores(p == c, t == c, spacing, percentile)
        per_class[c] = {"Dice": s.dice, "ASD": s.asd, "HD": s.hd}
        if not s.defined:
            undefined.append(c)
    ok = [c for c in classes if c not in undefined]
    mean = {
        "Dice": float(np.mean([per_class[c]["Dice"] for c in classes])),
        "ASD": float(np.mean([per_class[c]["ASD"] for c in ok])) if ok else math.nan,
        "HD": float(np.mean([per_class[c]["HD"] for c in ok])) if ok else math.nan,
    }
    return {"per_class": per_class, "mean": mean, "undefined": undefined}


def soft_dice_scores(probs: np.ndarray, labels: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    """Per-sample soft Dice (p^2 denominator) averaged over all channels: N values."""
    probs = np.asarray(probs, np.float64)
    n, c = probs.shape[:2]
    onehot = np.stack([(labels == k) for k in range(c)], axis=1).astype(np.float64)
    axes = tuple(range(2, probs.ndim))
    inter = (probs * onehot).sum(axes)
    denom = (probs * probs).sum(axes) + onehot.sum(axes) + eps
    return ((2 * inter + eps) / denom).mean(axis=1)


def mean_std(values) -> tuple[float, float]:
    v = np.asarray(values, dtype=np.float64)
    return float(v.mean()), float(v.std(ddof=1)) if v.size > 1 else 0.0
