"""Segmentation and image-similarity metrics plus the statistics used in reports.

Conventions: two empty masks have DSC = IoU = 1. SSIM uses a normalized
Gaussian window (7x7, sigma 1.5), K1 = 0.01, K2 = 0.03, inputs mapped from
[-1, 1] to [0, 1] with dynamic range L = 1, averaged over fully-contained
window positions.
"""

import math

import numpy as np
from scipy import signal, stats

from .exceptions import ArgumentError, DegenerateInputError
from .validation import check_image, check_mask, check_same_shape

SSIM_DEFAULTS = {"win_size": 7, "sigma": 1.5, "k1": 0.01, "k2": 0.03}


def _binary_pair(a, b):
    a = getattr(a, "pixels", a)
    b = getattr(b, "pixels", b)
    check_same_shape(a, b)
    return check_mask(a, "a").astype(bool), check_mask(b, "b").astype(bool)


def dice(a, b):
    a, b = _binary_pair(a, b)
    total = int(a.sum()) + int(b.sum())
    if total == 0:
        return 1.0
    return 2.0 * int((a & b).sum()) / total


def iou(a, b):
    a, b = _binary_pair(a, b)
    union = int((a | b).sum())
    if union == 0:
        return 1.0
    return int((a & b).sum()) / union


def dice3d(pred_slices, ref_slices):
    """Dice of the stacked volumes (not the mean of per-slice scores)."""
    if len(pred_slices) != len(ref_slices):
        raise ArgumentError(
            f"slice count mismatch: {len(pred_slices)} predicted vs {len(ref_slices)}"
        )
    if not pred_slices:
        raise ArgumentError("dice3d needs at least one slice")
    inter = total = 0
    for p, r in zip(pred_slices, ref_slices):
        p, r = _binary_pair(p, r)
        inter += int((p & r).sum())
        total += int(p.sum()) + int(r.sum())
    return 1.0 if total == 0 else 2.0 * inter / total


def mse(x, y):
    x = check_image(x, "x", np.float64)
    y = check_image(y, "y", np.float64)
    check_same_shape(x, y, ("x", "y"))
    return float(np.mean((x - y) ** 2))


def gaussian_window(win_size=7, sigma=1.5):
    ax = np.arange(win_size) - (win_size - 1) / 2
    g = np.exp(-(ax**2) / (2 * sigma**2))
    w = np.outer(g, g)
    return w / w.sum()


def ssim(x, y, win_size=7, sigma=1.5, k1=0.01, k2=0.03, value_range=(-1.0, 1.0)):
    x = check_image(x, "x", np.float64)
    y = check_image(y, "y", np.float64)
    check_same_shape(x, y, ("x", "y"))
    if min(x.shape) < win_size:
        raise ArgumentError(f"images smaller than the {win_size}x{win_size} window")
    lo, hi = value_range
    x = (x - lo) / (hi - lo)
    y = (y - lo) / (hi - lo)
    c1, c2 = (k1 * 1.0) ** 2, (k2 * 1.0) ** 2
    w = gaussian_window(win_size, sigma)

    def filt(a):
        return signal.correlate2d(a, w, mode="valid")

    mx, my = filt(x), filt(y)
    vx = filt(x * x) - mx * mx
    vy = filt(y * y) - my * my
    cxy = filt(x * y) - mx * my
    num = (2 * mx * my + c1) * (2 * cxy + c2)
    den = (mx * mx + my * my + c1) * (vx + vy + c2)
    return float(np.mean(num / den))


def pearson(xs, ys):
    x = np.asarray(xs, dtype=np.float64)
    y = np.asarray(ys, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise ArgumentError("pearson needs two 1D sequences of equal length")
    if x.size < 3:
        raise ArgumentError("pearson needs at least 3 observations")
    dx, dy = x - x.mean(), y - y.mean()
    sxx, syy = float(dx @ dx), float(dy @ dy)
    if sxx == 0.0 or syy == 0.0:
        raise DegenerateInputError("pearson is undefined for zero-variance input")
    r = float(dx @ dy) / math.sqrt(sxx * syy)
    return max(-1.0, min(1.0, r))


def spearman(xs, ys):
    """Rank correlation, reported next to Pearson for comparison."""
    return pearson(stats.rankdata(xs), stats.rankdata(ys))


def paired_ttest(xs, ys):
    """Two-sided paired t-test; returns ``(t, p)`` with n-1 degrees of freedom."""
    x = np.asarray(xs, dtype=np.float64)
    y = np.asarray(ys, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise ArgumentError("paired_ttest needs two 1D sequences of equal length")
    n = x.size
    if n < 2:
        raise ArgumentError("paired_ttest needs at least 2 pairs")
    d = x - y
    sd = float(np.std(d, ddof=1))
    if sd == 0.0:
        raise DegenerateInputError(
            "paired differences have zero variance; t statistic undefined"
        )
    t = float(d.mean()) / (sd / math.sqrt(n))
    p = float(2.0 * stats.t.sf(abs(t), df=n - 1))
    return t, p


def mean_std(values):
    v = np.asarray(values, dtype=np.float64)
    return float(v.mean()), float(v.std())
