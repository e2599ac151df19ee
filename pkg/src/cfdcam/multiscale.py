"""Multi-scale test-time inference: run a CAM at several input scales and fuse.

Per-scale maps are resized back to the original resolution and normalized before
fusion, so the finer 2x pass (smaller, sharper activations) is not drowned out.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .adapter import MIN_SPATIAL, ClassifierHandle
from .cams import CamRequest, compute_cam, min_max_normalize, upsample_bilinear
from .errors import ValidationError

FUSIONS = ("mean", "max")


@dataclass
class ScaleSpec:
    """Input scale factors and the fusion rule for their maps."""

    factors: tuple = (1.0, 2.0)
    fusion: str = "mean"

    def __post_init__(self):
        self.factors = tuple(float(f) for f in self.factors)
        if len(self.factors) == 0:
            raise ValidationError("scale factors must be non-empty")
        if any(f <= 0 for f in self.factors):
            raise ValidationError("scale factors must be > 0")
        if len(set(self.factors)) != len(self.factors):
            raise ValidationError("duplicate scale factors are forbidden")
        if self.fusion not in FUSIONS:
            raise ValidationError(f"unknown fusion {self.fusion!r}; known: {FUSIONS}")


def rescale_image(image: np.ndarray, factor: float) -> np.ndarray:
    """Bilinear resize of a C x H x W image to (round(f*H), round(f*W))."""
    if factor <= 0:
        raise ValidationError("scale factor must be > 0")
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 3:
        raise ValidationError(f"expected C x H x W image, got shape {image.shape}")
    h, w = image.shape[1:]
    out_h, out_w = int(round(factor * h)), int(round(factor * w))
    if out_h < MIN_SPATIAL or out_w < MIN_SPATIAL:
        raise ValidationError(
            f"rescaled size {(out_h, out_w)} below the minimum of {MIN_SPATIAL}"
        )
    if (out_h, out_w) == (h, w):
        return image.copy()
    return np.stack([upsample_bilinear(c, (out_h, out_w)) for c in image])


def fuse_maps(maps, fusion: str = "mean") -> np.ndarray:
    """Elementwise mean or max of same-shape [0,1] maps, then min-max normalize."""
    if fusion not in FUSIONS:
        raise ValidationError(f"unknown fusion {fusion!r}; known: {FUSIONS}")
    maps = [np.asarray(m, dtype=np.float64) for m in maps]
    if not maps:
        raise ValidationError("fuse_maps needs at least one map")
    shape = maps[0].shape
    if any(m.shape != shape for m in maps):
        raise ValidationError("all maps must share one shape")
    stacked = np.stack(maps)
    fused = stacked.mean(axis=0) if fusion == "mean" else stacked.max(axis=0)
    return min_max_normalize(fused)


def multiscale_cam(
    request: CamRequest,
    handle: ClassifierHandle,
    image: np.ndarray,
    scales: ScaleSpec | None = None,
) -> np.ndarray:
    """CAM at each scale factor, resized back to the original H x W, then fused."""
    scales = scales or ScaleSpec()
    image = np.asarray(image, dtype=np.float64)
    spatial = image.shape[1:]
    per_scale = []
    for factor in scales.factors:
        scaled = rescale_image(image, factor)
        cam = compute_cam(request, handle, scaled)
        back = upsample_bilinear(cam, spatial)
        per_scale.append(min_max_normalize(back))
    return fuse_maps(per_scale, scales.fusion)
