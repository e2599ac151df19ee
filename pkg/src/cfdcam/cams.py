"""CAM methods over the classifier handle: Grad-CAM, ScoreCAM, LayerCAM and the
confidence-weighted Cfd-CAM (with its raw-logit ablation variant).

All maps are returned at the input image's spatial resolution, min-max normalized
to [0, 1]. Channels are upsampled with the half-pixel bilinear convention before
masking; the aggregated map is clipped by a single ReLU after the weighted sum.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .adapter import ClassifierHandle
from .errors import ValidationError

METHODS = ("gradcam", "scorecam", "layercam", "cfdcam")
WEIGHTINGS = ("confidence", "logits")


def min_max_normalize(arr: np.ndarray) -> np.ndarray:
    """(x - min) / (max - min); a constant map normalizes to all zeros."""
    arr = np.asarray(arr, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise ValidationError("map contains non-finite values")
    lo = arr.min()
    hi = arr.max()
    if hi == lo:
        return np.zeros_like(arr)
    return (arr - lo) / (hi - lo)


def upsample_bilinear(arr: np.ndarray, target) -> np.ndarray:
    """Bilinear resize to ``target`` = (H, W) with half-pixel centers.

    Exact passthrough when the size already matches. Sample coordinates are
    (i + 0.5) * (src / dst) - 0.5 with edge clamping, so constants are preserved.
    """
    arr = np.asarray(arr, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[0] < 1 or arr.shape[1] < 1:
        raise ValidationError(f"expected a non-empty 2D map, got shape {arr.shape}")
    out_h, out_w = int(target[0]), int(target[1])
    if out_h < 1 or out_w < 1:
        raise ValidationError(f"target size must be positive, got {(out_h, out_w)}")
    in_h, in_w = arr.shape
    if (in_h, in_w) == (out_h, out_w):
        return arr.copy()

    def axis_coords(n_in: int, n_out: int):
        x = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
        x0 = np.floor(x).astype(int)
        t = x - x0
        lo = np.clip(x0, 0, n_in - 1)
        hi = np.clip(x0 + 1, 0, n_in - 1)
        return lo, hi, t

    r0, r1, tr = axis_coords(in_h, out_h)
    c0, c1, tc = axis_coords(in_w, out_w)
    top = arr[r0][:, c0] * (1 - tc) + arr[r0][:, c1] * tc
    bot = arr[r1][:, c0] * (1 - tc) + arr[r1][:, c1] * tc
    return top * (1 - tr[:, None]) + bot * tr[:, None]


def mask_input(image: np.ndarray, saliency: np.ndarray) -> np.ndarray:
    """Per-channel elementwise product of the image with a saliency mask."""
    image = np.asarray(image, dtype=np.float64)
    saliency = np.asarray(saliency, dtype=np.float64)
    if image.ndim != 3 or saliency.shape != image.shape[1:]:
        raise ValidationError(
            f"saliency shape {saliency.shape} must equal image spatial shape {image.shape[1:]}"
        )
    return image * saliency[None]


def softmax(logits: np.ndarray) -> np.ndarray:
    """Numerically stable softmax (max-subtracted)."""
    z = np.asarray(logits, dtype=np.float64)
    if not np.all(np.isfinite(z)):
        raise ValidationError("logits contain non-finite values")
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


@dataclass
class CamRequest:
    """Method selection for one CAM computation.

    ``layers`` holds one name for gradcam/scorecam/cfdcam and one or more for
    layercam; ``None`` falls back to the handle's defaults. ``weighting`` applies
    to cfdcam only.
    """

    method: str = "cfdcam"
    layers: list | None = None
    class_index: int = 1
    weighting: str = "confidence"
    batch_size: int = 8

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValidationError(f"unknown method {self.method!r}; known: {METHODS}")
        if self.weighting not in WEIGHTINGS:
            raise ValidationError(f"unknown weighting {self.weighting!r}; known: {WEIGHTINGS}")
        if self.batch_size < 1:
            raise ValidationError("batch_size must be >= 1")
        if self.layers is not None:
            self.layers = list(self.layers)
            if len(self.layers) == 0:
                raise ValidationError("layers must be non-empty when given")
            if self.method != "layercam" and len(self.layers) != 1:
                raise ValidationError(f"{self.method} takes exactly one target layer")


def _finalize(raw: np.ndarray, target_shape) -> np.ndarray:
    """ReLU -> upsample to image size -> min-max normalize."""
    clipped = np.maximum(raw, 0.0)
    return min_max_normalize(upsample_bilinear(clipped, target_shape))


def grad_cam(handle: ClassifierHandle, image: np.ndarray, class_index: int, layer: str | None = None) -> np.ndarray:
    """Channel weights = spatial mean of the class-logit gradients."""
    layer = layer or handle.default_layer
    acts = handle.activations(image, layer)
    grads = handle.grad_class_wrt_layer(image, class_index, layer)
    weights = grads.mean(axis=(1, 2))
    raw = np.tensordot(weights, acts, axes=(0, 0))
    return _finalize(raw, np.asarray(image).shape[1:])


def _channel_masks(acts: np.ndarray, spatial) -> np.ndarray:
    # one normalized mask per channel; constant channels degrade to all-zero masks
    return np.stack([min_max_normalize(upsample_bilinear(a, spatial)) for a in acts])


def _masked_logits(
    handle: ClassifierHandle, image: np.ndarray, masks: np.ndarray, batch_size: int
) -> np.ndarray:
    image = np.asarray(image, dtype=np.float64)
    masked = image[None] * masks[:, None]
    chunks = [
        handle.forward_batch(masked[i : i + batch_size])
        for i in range(0, len(masked), batch_size)
    ]
    return np.concatenate(chunks)


def score_channel_weights(
    handle: ClassifierHandle,
    image: np.ndarray,
    class_index: int,
    layer: str,
    batch_size: int = 8,
) -> np.ndarray:
    """ScoreCAM weights: softmax over channels of the masked-input score increase.

    Score increase is the target logit on the channel-masked input minus the target
    logit on the all-zeros baseline image.
    """
    acts = handle.activations(image, layer)
    spatial = np.asarray(image).shape[1:]
    masks = _channel_masks(acts, spatial)
    logits = _masked_logits(handle, image, masks, batch_size)
    baseline = handle.forward(np.zeros_like(np.asarray(image, dtype=np.float64)))
    scores = logits[:, class_index] - baseline[class_index]
    return softmax(scores)


def score_cam(
    handle: ClassifierHandle,
    image: np.ndarray,
    class_index: int,
    layer: str | None = None,
    batch_size: int = 8,
) -> np.ndarray:
    layer = layer or handle.default_layer
    acts = handle.activations(image, layer)
    weights = score_channel_weights(handle, image, class_index, layer, batch_size)
    raw = np.tensordot(weights, acts, axes=(0, 0))
    return _finalize(raw, np.asarray(image).shape[1:])


def cfd_channel_weights(
    handle: ClassifierHandle,
    image: np.ndarray,
    class_index: int,
    layer: str,
    weighting: str = "confidence",
    batch_size: int = 8,
) -> np.ndarray:
    """Cfd-CAM weights from channel-masked forward passes.

    ``confidence``: target-class softmax probability of the masked input (in [0, 1]).
    ``logits``: the raw target logit of the masked input (ablation variant).
    """
    if weighting not in WEIGHTINGS:
        raise ValidationError(f"unknown weighting {weighting!r}; known: {WEIGHTINGS}")
    acts = handle.activations(image, layer)
    spatial = np.asarray(image).shape[1:]
    masks = _channel_masks(acts, spatial)
    logits = _masked_logits(handle, image, masks, batch_size)
    if weighting == "confidence":
        return softmax(logits)[:, class_index]
    return logits[:, class_index]


def cfd_cam(
    handle: ClassifierHandle,
    image: np.ndarray,
    class_index: int,
    layer: str | None = None,
    weighting: str = "confidence",
    batch_size: int = 8,
) -> np.ndarray:
    layer = layer or handle.default_layer
    acts = handle.activations(image, layer)
    weights = cfd_channel_weights(handle, image, class_index, layer, weighting, batch_size)
    raw = np.tensordot(weights, acts, axes=(0, 0))
    return _finalize(raw, np.asarray(image).shape[1:])


def layer_cam(
    handle: ClassifierHandle,
    image: np.ndarray,
    class_index: int,
    layers=None,
) -> np.ndarray:
    """Per layer: sum over channels of ReLU(grad) * activation; fuse layers by max."""
    if layers is None:
        layers = handle.layer_names
    layers = list(layers)
    if not layers:
        raise ValidationError("layer_cam needs at least one layer")
    spatial = np.asarray(image).shape[1:]
    per_layer = []
    for layer in layers:
        acts = handle.activations(image, layer)
        grads = handle.grad_class_wrt_layer(image, class_index, layer)
        raw = (np.maximum(grads, 0.0) * acts).sum(axis=0)
        per_layer.append(min_max_normalize(upsample_bilinear(raw, spatial)))
    fused = np.maximum.reduce(per_layer)
    return min_max_normalize(fused)


def compute_cam(request: CamRequest, handle: ClassifierHandle, image: np.ndarray) -> np.ndarray:
    """Dispatch a CamRequest to the matching method."""
    cls = request.class_index
    if request.method == "gradcam":
        layer = request.layers[0] if request.layers else None
        return grad_cam(handle, image, cls, layer)
    if request.method == "scorecam":
        layer = request.layers[0] if request.layers else None
        return score_cam(handle, image, cls, layer, request.batch_size)
    if request.method == "cfdcam":
        layer = request.layers[0] if request.layers else None
        return cfd_cam(handle, image, cls, layer, request.weighting, request.batch_size)
    return layer_cam(handle, image, cls, request.layers)
