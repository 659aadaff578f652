"""Overlap, contour-distance and displacement-error metrics, plus the paired t-test."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np
from scipy.spatial.distance import cdist
from scipy.special import betainc
from scipy.stats import rankdata

from .field_core import as_mask, check_same_grid, warp_nearest

log = logging.getLogger(__name__)


class EmptyMaskError(ValueError):
    pass


@dataclass(frozen=True)
class MetricReport:
    dsc: float
    hd: float
    asd: float


def dice(a, b):
    a, b = as_mask(a), as_mask(b)
    check_same_grid(a, b, names=("a", "b"))
    total = int(a.sum()) + int(b.sum())
    if total == 0:
        raise EmptyMaskError("Dice is undefined for two empty masks")
    return 2.0 * int(np.logical_and(a, b).sum()) / total


def extract_contour(mask):
    """Boundary pixels of a mask as an ``(N, 2)`` array of ``(row, col)``.

    A true pixel is on the boundary if any 4-neighbour is false or lies
    outside the image.
    """
    mask = as_mask(mask)
    if mask.ndim != 2:
        raise ValueError(f"contour extraction needs a 2D mask, got {mask.shape}")
    if not mask.any():
        raise EmptyMaskError("cannot extract the contour of an empty mask")
    padded = np.pad(mask, 1, constant_values=False)
    interior = (
        padded[:-2, 1:-1] & padded[2:, 1:-1] & padded[1:-1, :-2] & padded[1:-1, 2:]
    )
    return np.argwhere(mask & ~interior)


def _nearest_distances(a, b):
    a = np.asarray(a, dtype=np.float64).reshape(-1, 2)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 2)
    if len(a) == 0 or len(b) == 0:
        raise EmptyMaskError("contour distances need two nonempty contours")
    d = cdist(a, b)
    return d.min(axis=1), d.min(axis=0)


def hausdorff(a, b):
    """Exact symmetric Hausdorff distance between two point sets (pixels)."""
    ab, ba = _nearest_distances(a, b)
    return float(max(ab.max(), ba.max()))


def asd(a, b):
    """Symmetric average surface distance, pooled over both contours."""
    ab, ba = _nearest_distances(a, b)
    return float((ab.sum() + ba.sum()) / (len(ab) + len(ba)))


def endpoint_error(est, gt, roi=None):
    """Mean Euclidean distance between displacement vectors inside ``roi``."""
    est = np.asarray(est, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if est.shape != gt.shape:
        raise ValueError(f"field shapes differ: {est.shape} vs {gt.shape}")
    norms = np.sqrt(np.sum((est - gt) ** 2, axis=-3))
    if roi is None:
        return float(norms.mean())
    roi = as_mask(roi)
    check_same_grid(norms, roi, names=("field", "roi"))
    if not roi.any():
        raise EmptyMaskError("endpoint error over an empty region")
    return float(norms[np.broadcast_to(roi, norms.shape)].mean())


def evaluate_masks(warped_mask, target_mask):
    """Dice/HD/ASD between a warped source mask and the target mask.

    Contour metrics are NaN when either mask is empty.
    """
    dsc = dice(warped_mask, target_mask)
    if not (np.any(warped_mask) and np.any(target_mask)):
        return MetricReport(dsc, math.nan, math.nan)
    ca, cb = extract_contour(warped_mask), extract_contour(target_mask)
    return MetricReport(dsc, hausdorff(ca, cb), asd(ca, cb))


def evaluate_pair(disp, mask_s, mask_t):
    """Warp the source mask with ``disp`` and score it against the target mask."""
    return evaluate_masks(warp_nearest(mask_s, disp), mask_t)


def t_sf_two_sided(t, dof):
    """Two-sided tail probability ``P(|T| >= |t|)`` for Student's t."""
    if math.isinf(t):
        return 0.0
    x = dof / (dof + t * t)
    return float(betainc(0.5 * dof, 0.5, x))


def paired_ttest(x, y):
    """Two-sided paired t-test on ``x - y``.

    Returns ``(t, p)``. All-zero differences give ``(0, 1)``; a constant
    nonzero difference gives ``(+-inf, 0)``. Both cases are logged.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise ValueError("paired samples must be 1D and of equal length")
    n = x.size
    if n < 2:
        raise ValueError(f"paired t-test needs n >= 2, got {n}")
    d = x - y
    mean = float(d.mean())
    sd = float(d.std(ddof=1))
    if sd == 0.0:
        if mean == 0.0:
            log.info("paired t-test: all differences are zero, reporting p = 1")
            return 0.0, 1.0
        log.info("paired t-test: zero-variance nonzero differences, reporting p = 0")
        return math.copysign(math.inf, mean), 0.0
    t = mean * math.sqrt(n) / sd
    return t, t_sf_two_sided(t, n - 1)


def detection_auc(scores, labels):
    """Area under the ROC curve of ``scores`` as a detector of ``labels``.

    Computed from the Mann-Whitney rank sum with ties averaged; NaN when
    one class is absent.
    """
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels, dtype=bool).ravel()
    if scores.shape != labels.shape:
        raise ValueError("scores and labels differ in size")
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        return math.nan
    ranks = rankdata(scores)
    u = ranks[labels].sum() - n_pos * (n_pos + 1) / 2
    return float(u / (n_pos * n_neg))
