"""Uniform classifier interface: logits, named-layer activations, class-score gradients.

Every CAM method in this package talks to a :class:`ClassifierHandle` instead of a raw
network, so any backbone that exposes hookable stage modules can be explained. The
handle runs the wrapped module in float64 inference mode; numpy arrays in, numpy
arrays out.
"""

from __future__ import annotations

import json
import threading
from collections import OrderedDict
from pathlib import Path

import numpy as np
import torch
import torchvision
from torch import nn

from .errors import FormatError, InputSpecError, LayerRegistryError, ValidationError

_DTYPE = torch.float64

# CAM methods need a few spatial cells at the deepest stage.
MIN_SPATIAL = 8

MANIFEST_NAME = "manifest.json"
WEIGHTS_NAME = "weights.pt"


class ReferenceCnn(nn.Module):
    """Small three-stage CNN over 1-channel images (strides 2,2,2), GAP + linear head.

    Smooth activations (SiLU) keep finite-difference gradient checks clean; the
    adaptive pool makes the network accept any spatial size >= 8.
    """

    def __init__(self, num_classes: int = 2):
        super().__init__()
        self.stage1 = nn.Sequential(nn.Conv2d(1, 8, 3, stride=2, padding=1), nn.SiLU())
        self.stage2 = nn.Sequential(nn.Conv2d(8, 16, 3, stride=2, padding=1), nn.SiLU())
        self.stage3 = nn.Sequential(nn.Conv2d(16, 8, 3, stride=2, padding=1), nn.SiLU())
        self.pool = nn.AdaptiveAvgPool2d(1)
        self.head = nn.Linear(8, num_classes)

    def forward_features(self, x):
        x = self.stage3(self.stage2(self.stage1(x)))
        return self.pool(x).flatten(1)

    def forward(self, x):
        return self.head(self.forward_features(x))

    def classifier_head(self) -> nn.Linear:
        return self.head

    def stage_registry(self) -> "OrderedDict[str, nn.Module]":
        return OrderedDict(
            [("stage1", self.stage1), ("stage2", self.stage2), ("stage3", self.stage3)]
        )


class ResNet18Classifier(nn.Module):
    """Torchvision ResNet-18 with a configurable input channel count.

    State-dict keys live under ``net.``; :func:`load_checkpoint` also accepts bare
    torchvision key names so externally trained checkpoints load unchanged.
    """

    def __init__(self, num_classes: int = 2, input_channels: int = 1):
        super().__init__()
        net = torchvision.models.resnet18(weights=None, num_classes=num_classes)
        if input_channels != 3:
            net.conv1 = nn.Conv2d(input_channels, 64, kernel_size=7, stride=2, padding=3, bias=False)
        self.net = net

    def forward_features(self, x):
        n = self.net
        x = n.maxpool(n.relu(n.bn1(n.conv1(x))))
        x = n.layer4(n.layer3(n.layer2(n.layer1(x))))
        return torch.flatten(n.avgpool(x), 1)

    def forward(self, x):
        return self.net.fc(self.forward_features(x))

    def classifier_head(self) -> nn.Linear:
        return self.net.fc

    def stage_registry(self) -> "OrderedDict[str, nn.Module]":
        return OrderedDict(
            (f"layer{i}", getattr(self.net, f"layer{i}")) for i in (1, 2, 3, 4)
        )


class ClassifierHandle:
    """Immutable-by-convention wrapper exposing the CAM-facing interface.

    Concurrent read-only forward passes are safe; activation/gradient capture uses
    module hooks and is serialized internally with a lock.
    """

    def __init__(
        self,
        module: nn.Module,
        layer_registry,
        num_classes: int,
        input_channels: int,
        architecture: str = "custom",
        input_size=(64, 64),
        default_layer: str | None = None,
    ):
        registry = OrderedDict(layer_registry)
        if not registry:
            raise ValidationError("layer registry must not be empty")
        if num_classes < 2:
            raise ValidationError("classifier must have at least 2 classes")
        self._module = module.to(_DTYPE).eval()
        self._registry = registry
        self.num_classes = int(num_classes)
        self.input_channels = int(input_channels)
        self.architecture = architecture
        self.input_size = tuple(int(v) for v in input_size)
        self.default_layer = default_layer if default_layer is not None else next(reversed(registry))
        if self.default_layer not in registry:
            raise LayerRegistryError(self.default_layer)
        self._hook_lock = threading.Lock()

    @property
    def module(self) -> nn.Module:
        return self._module

    @property
    def layer_names(self) -> list:
        return list(self._registry)

    @property
    def training(self) -> bool:
        return self._module.training

    def set_training(self, flag: bool) -> None:
        """Toggle training mode. The CAM interface refuses calls while training."""
        self._module.train(bool(flag))

    # -- internals ---------------------------------------------------------

    def _check_inference(self):
        if self._module.training:
            raise ValidationError("handle is in training mode; CAM interface requires inference mode")

    def _layer(self, name: str) -> nn.Module:
        try:
            return self._registry[name]
        except KeyError:
            raise LayerRegistryError(
                f"unknown layer {name!r}; registered: {self.layer_names}"
            ) from None

    def _to_tensor(self, image: np.ndarray) -> torch.Tensor:
        arr = np.asarray(image, dtype=np.float64)
        if arr.ndim != 3 or arr.shape[0] != self.input_channels:
            raise InputSpecError(
                f"expected image of shape ({self.input_channels}, H, W), got {arr.shape}"
            )
        if arr.shape[1] < MIN_SPATIAL or arr.shape[2] < MIN_SPATIAL:
            raise InputSpecError(f"spatial size must be >= {MIN_SPATIAL}, got {arr.shape[1:]}")
        if not np.all(np.isfinite(arr)):
            raise ValidationError("image contains non-finite values")
        return torch.from_numpy(arr)

    # -- CAM-facing interface ----------------------------------------------

    def forward(self, image: np.ndarray) -> np.ndarray:
        """Raw logits for one C x H x W image."""
        self._check_inference()
        x = self._to_tensor(image)
        with torch.no_grad():
            logits = self._module(x[None])
        return logits[0].cpu().numpy()

    def forward_batch(self, images: np.ndarray) -> np.ndarray:
        """Raw logits for a B x C x H x W batch."""
        self._check_inference()
        arr = np.asarray(images, dtype=np.float64)
        if arr.ndim != 4:
            raise InputSpecError(f"expected batch of shape (B, C, H, W), got {arr.shape}")
        self._to_tensor(arr[0])
        with torch.no_grad():
            logits = self._module(torch.from_numpy(arr))
        return logits.cpu().numpy()

    def activations(self, image: np.ndarray, layer: str) -> np.ndarray:
        """K x h x w activation stack captured at ``layer`` during a forward pass."""
        self._check_inference()
        x = self._to_tensor(image)
        mod = self._layer(layer)
        captured = {}

        def hook(_m, _i, out):
            captured["out"] = out.detach()

        with self._hook_lock:
            h = mod.register_forward_hook(hook)
            try:
                with torch.no_grad():
                    self._module(x[None])
            finally:
                h.remove()
        return captured["out"][0].cpu().numpy()

    def grad_class_wrt_layer(self, image: np.ndarray, class_index: int, layer: str) -> np.ndarray:
        """Gradient of the raw class logit (not softmax) w.r.t. each activation element."""
        self._check_inference()
        if not 0 <= int(class_index) < self.num_classes:
            raise IndexError(f"class index {class_index} out of range [0, {self.num_classes})")
        x = self._to_tensor(image).requires_grad_(True)
        mod = self._layer(layer)
        captured = {}

        def hook(_m, _i, out):
            captured["out"] = out

        with self._hook_lock:
            h = mod.register_forward_hook(hook)
            try:
                with torch.enable_grad():
                    logits = self._module(x[None])
                    grad, = torch.autograd.grad(logits[0, int(class_index)], captured["out"])
            finally:
                h.remove()
        return grad[0].detach().cpu().numpy()

    def forward_from_layer(self, layer: str, stacks: np.ndarray) -> np.ndarray:
        """Replay the network tail: logits produced when ``layer`` outputs ``stacks``.

        ``stacks`` is K x h x w or B x K x h x w; returns (num_classes,) or
        (B, num_classes) accordingly. Used by the finite-difference oracle.
        """
        self._check_inference()
        arr = np.asarray(stacks, dtype=np.float64)
        single = arr.ndim == 3
        if single:
            arr = arr[None]
        if arr.ndim != 4:
            raise ValidationError(f"expected stack of 3 or 4 dims, got shape {arr.shape}")
        mod = self._layer(layer)
        replacement = torch.from_numpy(arr)

        def hook(_m, _i, _out):
            return replacement

        dummy = torch.zeros(
            (1, self.input_channels, MIN_SPATIAL, MIN_SPATIAL), dtype=_DTYPE
        )
        with self._hook_lock:
            h = mod.register_forward_hook(hook)
            try:
                with torch.no_grad():
                    logits = self._module(dummy)
            finally:
                h.remove()
        out = logits.cpu().numpy()
        return out[0] if single else out


def fd_gradient_at(
    handle: ClassifierHandle,
    image: np.ndarray,
    class_index: int,
    layer: str,
    eps: float,
    flat_indices,
    chunk: int = 256,
) -> np.ndarray:
    """Central-difference estimates (f(a+eps) - f(a-eps)) / (2 eps) at selected elements.

    ``flat_indices`` index the flattened K x h x w activation stack.
    """
    if eps <= 0:
        raise ValidationError("eps must be > 0")
    if not 0 <= int(class_index) < handle.num_classes:
        raise IndexError(f"class index {class_index} out of range")
    base = handle.activations(image, layer)
    flat = base.reshape(-1)
    indices = np.asarray(flat_indices, dtype=int)
    perturbed = np.empty((2 * len(indices),) + base.shape, dtype=np.float64)
    for j, idx in enumerate(indices):
        plus = flat.copy()
        plus[idx] += eps
        minus = flat.copy()
        minus[idx] -= eps
        perturbed[2 * j] = plus.reshape(base.shape)
        perturbed[2 * j + 1] = minus.reshape(base.shape)
    logits = np.concatenate(
        [
            handle.forward_from_layer(layer, perturbed[i : i + chunk])
            for i in range(0, len(perturbed), chunk)
        ]
    )
    scores = logits[:, int(class_index)]
    return (scores[0::2] - scores[1::2]) / (2.0 * eps)


def finite_difference_gradient(
    handle: ClassifierHandle, image: np.ndarray, class_index: int, layer: str, eps: float
) -> np.ndarray:
    """Full central-difference gradient stack; shape matches the activation stack."""
    base = handle.activations(image, layer)
    est = fd_gradient_at(handle, image, class_index, layer, eps, np.arange(base.size))
    return est.reshape(base.shape)


def _seeded_init(module: nn.Module, rng: np.random.Generator) -> None:
    # numpy-driven init keeps reference weights identical across torch versions
    for m in module.modules():
        if isinstance(m, (nn.Conv2d, nn.Linear)):
            fan_in = m.weight[0].numel()
            w = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=tuple(m.weight.shape))
            m.weight.data = torch.from_numpy(w).to(_DTYPE)
            if m.bias is not None:
                b = rng.normal(0.0, 0.1, size=tuple(m.bias.shape))
                m.bias.data = torch.from_numpy(b).to(_DTYPE)


def reference_network(seed: int) -> ClassifierHandle:
    """Deterministic 2-class reference classifier over 1 x 64 x 64 inputs.

    Three conv stages (strides 2,2,2 -> 8 x 8 final maps, 8 channels) keep
    per-channel CAM passes sub-second; same seed yields bit-identical weights.
    """
    net = ReferenceCnn(num_classes=2)
    _seeded_init(net, np.random.default_rng(seed))
    return ClassifierHandle(
        net,
        net.stage_registry(),
        num_classes=2,
        input_channels=1,
        architecture="reference_cnn",
        input_size=(64, 64),
        default_layer="stage3",
    )


def _build_reference_cnn(num_classes: int, input_channels: int):
    if input_channels != 1:
        raise FormatError("reference_cnn supports 1 input channel")
    net = ReferenceCnn(num_classes=num_classes)
    return net, net.stage_registry(), "stage3"


def _build_resnet18(num_classes: int, input_channels: int):
    net = ResNet18Classifier(num_classes=num_classes, input_channels=input_channels)
    return net, net.stage_registry(), "layer4"


ARCHITECTURES = {
    "reference_cnn": _build_reference_cnn,
    "resnet18": _build_resnet18,
}


def build_classifier(architecture: str, num_classes: int, input_channels: int, input_size=(64, 64)) -> ClassifierHandle:
    """Fresh (randomly initialized) handle for a registered architecture."""
    try:
        builder = ARCHITECTURES[architecture]
    except KeyError:
        raise FormatError(
            f"unknown architecture {architecture!r}; known: {sorted(ARCHITECTURES)}"
        ) from None
    module, registry, default_layer = builder(num_classes, input_channels)
    return ClassifierHandle(
        module,
        registry,
        num_classes=num_classes,
        input_channels=input_channels,
        architecture=architecture,
        input_size=input_size,
        default_layer=default_layer,
    )


def save_checkpoint(handle: ClassifierHandle, directory) -> Path:
    """Write weights + JSON manifest into ``directory``; returns the directory."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    manifest = {
        "architecture": handle.architecture,
        "num_classes": handle.num_classes,
        "input_channels": handle.input_channels,
        "input_size": list(handle.input_size),
        "layer_registry": handle.layer_names,
        "default_layer": handle.default_layer,
    }
    (directory / MANIFEST_NAME).write_text(json.dumps(manifest, indent=2))
    torch.save(handle.module.state_dict(), directory / WEIGHTS_NAME)
    return directory


def load_checkpoint(directory) -> ClassifierHandle:
    """Load a handle from the documented checkpoint layout (manifest + weights)."""
    directory = Path(directory)
    manifest_path = directory / MANIFEST_NAME
    weights_path = directory / WEIGHTS_NAME
    if not manifest_path.is_file():
        raise FormatError(f"missing checkpoint manifest: {manifest_path}")
    if not weights_path.is_file():
        raise FormatError(f"missing checkpoint weights: {weights_path}")
    try:
        manifest = json.loads(manifest_path.read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"malformed checkpoint manifest: {exc}") from exc
    for key in ("architecture", "num_classes", "input_channels"):
        if key not in manifest:
            raise FormatError(f"checkpoint manifest missing field {key!r}")
    handle = build_classifier(
        manifest["architecture"],
        int(manifest["num_classes"]),
        int(manifest["input_channels"]),
        input_size=manifest.get("input_size", (64, 64)),
    )
    state = torch.load(weights_path, map_location="cpu", weights_only=True)
    if manifest["architecture"] == "resnet18" and not any(k.startswith("net.") for k in state):
        state = {f"net.{k}": v for k, v in state.items()}  # bare torchvision checkpoint
    state = {k: v.to(_DTYPE) for k, v in state.items()}
    handle.module.load_state_dict(state)
    handle.module.eval()
    registry_names = manifest.get("layer_registry")
    if registry_names and registry_names != handle.layer_names:
        raise FormatError(
            f"manifest layer registry {registry_names} does not match architecture layers {handle.layer_names}"
        )
    default_layer = manifest.get("default_layer")
    if default_layer:
        if default_layer not in handle.layer_names:
            raise FormatError(f"manifest default_layer {default_layer!r} not in registry")
        handle.default_layer = default_layer
    return handle
