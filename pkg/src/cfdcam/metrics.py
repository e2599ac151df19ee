"""Segmentation metrics: threshold-based binarization, Dice, IoU, HD95.

HD95 is computed on foreground pixel sets with Euclidean distances (optionally
anisotropic via ``spacing``) and the 95th percentile taken per direction with
linear interpolation; the two directed percentiles are combined by max.

Empty-mask policy: both masks empty scores perfect agreement (dice = iou = 1,
hd95 = 0); exactly one empty scores dice = iou = 0 and hd95 = the image diagonal,
so negative slices never crash a benchmark run.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .errors import ValidationError


@dataclass(frozen=True)
class SummaryStat:
    """Population mean/std over a metric column."""

    mean: float
    std: float
    count: int

    def render(self) -> str:
        return f"{self.mean:.3f}±{self.std:.3f}"


def binarize(saliency: np.ndarray, threshold: float = 0.5) -> np.ndarray:
    """Boolean mask: pixel true iff saliency value > threshold (strict)."""
    if not 0.0 < threshold < 1.0:
        raise ValidationError(f"threshold must lie in (0, 1), got {threshold}")
    arr = np.asarray(saliency, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise ValidationError("saliency contains non-finite values")
    return arr > threshold


def _as_mask_pair(a, b):
    a = np.asarray(a, dtype=bool)
    b = np.asarray(b, dtype=bool)
    if a.shape != b.shape:
        raise ValidationError(f"mask shapes differ: {a.shape} vs {b.shape}")
    return a, b


def dice(a: np.ndarray, b: np.ndarray) -> float:
    """2|A&B| / (|A| + |B|); 1.0 when both masks are empty."""
    a, b = _as_mask_pair(a, b)
    total = int(a.sum()) + int(b.sum())
    if total == 0:
        return 1.0
    return 2.0 * int((a & b).sum()) / total


def iou(a: np.ndarray, b: np.ndarray) -> float:
    """Intersection over union; 1.0 when both masks are empty."""
    a, b = _as_mask_pair(a, b)
    union = int((a | b).sum())
    if union == 0:
        return 1.0
    return int((a & b).sum()) / union


def _diagonal(shape, spacing) -> float:
    return math.hypot(shape[0] * spacing[0], shape[1] * spacing[1])


def hd95(a: np.ndarray, b: np.ndarray, spacing=(1.0, 1.0)) -> float:
    """95th-percentile Hausdorff distance between foreground pixel sets."""
    a, b = _as_mask_pair(a, b)
    a_empty, b_empty = not a.any(), not b.any()
    if a_empty and b_empty:
        return 0.0
    if a_empty or b_empty:
        return _diagonal(a.shape, spacing)
    dist_to_b = ndimage.distance_transform_edt(~b, sampling=spacing)
    dist_to_a = ndimage.distance_transform_edt(~a, sampling=spacing)
    d_ab = np.percentile(dist_to_b[a], 95)
    d_ba = np.percentile(dist_to_a[b], 95)
    return float(max(d_ab, d_ba))


def _percentile_linear(sorted_values: np.ndarray, q: float) -> float:
    # linear interpolation between order statistics, rank = q * (n - 1)
    n = len(sorted_values)
    if n == 1:
        return float(sorted_values[0])
    rank = q * (n - 1)
    lo = int(math.floor(rank))
    hi = min(lo + 1, n - 1)
    frac = rank - lo
    return float(sorted_values[lo] * (1.0 - frac) + sorted_values[hi] * frac)


def hd95_bruteforce(a: np.ndarray, b: np.ndarray, spacing=(1.0, 1.0)) -> float:
    """All-pairs oracle for hd95 with its own percentile implementation."""
    a, b = _as_mask_pair(a, b)
    a_empty, b_empty = not a.any(), not b.any()
    if a_empty and b_empty:
        return 0.0
    if a_empty or b_empty:
        return _diagonal(a.shape, spacing)
    pa = np.argwhere(a).astype(np.float64) * np.asarray(spacing, dtype=np.float64)
    pb = np.argwhere(b).astype(np.float64) * np.asarray(spacing, dtype=np.float64)
    diffs = pa[:, None, :] - pb[None, :, :]
    dmat = np.sqrt((diffs**2).sum(axis=2))
    d_ab = np.sort(dmat.min(axis=1))
    d_ba = np.sort(dmat.min(axis=0))
    return max(_percentile_linear(d_ab, 0.95), _percentile_linear(d_ba, 0.95))


def metric_triple(pred: np.ndarray, truth: np.ndarray, spacing=(1.0, 1.0)) -> tuple:
    """(dice, iou, hd95) for one mask pair."""
    return dice(pred, truth), iou(pred, truth), hd95(pred, truth, spacing)


def summarize(values) -> SummaryStat:
    """Population mean and std; renders in the m+-s table format."""
    arr = np.asarray(list(values), dtype=np.float64)
    if arr.size == 0:
        raise ValidationError("cannot summarize an empty sequence")
    if not np.all(np.isfinite(arr)):
        raise ValidationError("values contain non-finite entries")
    return SummaryStat(mean=float(arr.mean()), std=float(arr.std()), count=int(arr.size))
