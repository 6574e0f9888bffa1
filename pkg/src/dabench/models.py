"""Backbone / bottleneck / classifier assembly with a feature tap, plus
gradient-weighted class-activation heatmaps.

The bundle exposes the bottleneck activations on every forward pass; that is
where the adaptation losses attach. Image backbones (residual-34/50,
densenet-121) are optional plug-ins built without downloaded weights; a
user-supplied state-dict path can be loaded on top. The toy backbones need
nothing external and carry the whole desk-scale test surface.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch
from torch import nn

from .adversarial import DomainDiscriminator
from .errors import ConfigError, ShapeError, UnsupportedLayerError

TOY_BACKBONES = ("toy-mlp", "toy-cnn")
IMAGE_BACKBONES = ("residual-34", "residual-50", "densenet-121")


@dataclass
class BackboneSpec:
    name: str = "toy-mlp"
    output_dim: int = 64
    pretrained: bool = False
    weights_path: str | None = None
    # toy-specific knobs
    input_dim: int = 2        # toy-mlp flattened input width
    in_channels: int = 3      # toy-cnn input channels
    hidden_dim: int = 64      # toy-mlp hidden width

    def __post_init__(self):
        known = TOY_BACKBONES + IMAGE_BACKBONES + ("external-feature-extractor",)
        if self.name not in known:
            raise ConfigError(f"backbone.name: unknown backbone {self.name!r}")
        if self.output_dim < 1:
            raise ConfigError("backbone.output_dim: must be >= 1")


@dataclass
class BottleneckSpec:
    width: int = 256
    has_activation: bool = True
    has_normalization: bool = True

    def __post_init__(self):
        if self.width < 1:
            raise ConfigError("bottleneck.width: must be >= 1")


class ToyMLP(nn.Module):
    """Two-layer perceptron backbone for vector inputs."""

    def __init__(self, input_dim: int, hidden_dim: int, output_dim: int):
        super().__init__()
        self.fc1 = nn.Linear(input_dim, hidden_dim)
        self.fc2 = nn.Linear(hidden_dim, output_dim)

    def forward(self, x):
        x = x.flatten(1)
        x = torch.relu(self.fc1(x))
        return torch.relu(self.fc2(x))


class ToyCNN(nn.Module):
    """Small convolutional backbone; conv2 is the natural heatmap layer."""

    def __init__(self, in_channels: int, output_dim: int):
        super().__init__()
        self.conv1 = nn.Conv2d(in_channels, 8, kernel_size=3, padding=1)
        self.pool = nn.MaxPool2d(2)
        self.conv2 = nn.Conv2d(8, 16, kernel_size=3, padding=1)
        self.head = nn.Linear(16, output_dim)

    def forward(self, x):
        x = self.pool(torch.relu(self.conv1(x)))
        x = torch.relu(self.conv2(x))
        x = x.mean(dim=(2, 3))  # global average pool
        return torch.relu(self.head(x))


def build_backbone(spec: BackboneSpec, external: nn.Module | None = None) -> nn.Module:
    """Instantiate the named backbone.

    Image backbones come from torchvision with their classification head
    stripped; weights load only from ``spec.weights_path`` (never the
    network). ``external`` supplies the module for
    ``external-feature-extractor`` and is frozen by default at train time.
    """
    if spec.name == "toy-mlp":
        return ToyMLP(spec.input_dim, spec.hidden_dim, spec.output_dim)
    if spec.name == "toy-cnn":
        return ToyCNN(spec.in_channels, spec.output_dim)
    if spec.name == "external-feature-extractor":
        if external is None:
            raise ConfigError("backbone.name: external-feature-extractor needs a module instance")
        return external

    from torchvision import models as tv_models  # heavyweight import kept lazy

    expected = {"residual-34": 512, "residual-50": 2048, "densenet-121": 1024}[spec.name]
    if spec.output_dim != expected:
        raise ConfigError(
            f"backbone.output_dim: {spec.name} produces {expected}-d features, got {spec.output_dim}"
        )
    if spec.name == "residual-34":
        net = tv_models.resnet34(weights=None)
        net.fc = nn.Identity()
    elif spec.name == "residual-50":
        net = tv_models.resnet50(weights=None)
        net.fc = nn.Identity()
    else:
        net = tv_models.densenet121(weights=None)
        net.classifier = nn.Identity()
    if spec.weights_path:
        state = torch.load(spec.weights_path, map_location="cpu", weights_only=True)
        net.load_state_dict(state, strict=False)
    return net


def build_bottleneck(in_dim: int, spec: BottleneckSpec) -> nn.Module:
    layers: list[nn.Module] = [nn.Linear(in_dim, spec.width)]
    if spec.has_normalization:
        layers.append(nn.BatchNorm1d(spec.width))
    if spec.has_activation:
        layers.append(nn.ReLU())
    return nn.Sequential(*layers)


class ModelBundle(nn.Module):
    """backbone -> bottleneck -> linear classifier, with the bottleneck
    features returned alongside the logits so losses can attach to them."""

    def __init__(self, backbone, bottleneck, classifier, discriminator=None,
                 frozen_backbone: bool = False):
        super().__init__()
        self.backbone = backbone
        self.bottleneck = bottleneck
        self.classifier = classifier
        self.discriminator = discriminator
        self.frozen_backbone = frozen_backbone
        if frozen_backbone:
            for p in self.backbone.parameters():
                p.requires_grad_(False)

    def forward(self, x):
        features = self.bottleneck(self.backbone(x))
        return features, self.classifier(features)

    def predict_proba(self, x):
        _, logits = self.forward(x)
        return torch.softmax(logits, dim=1)


def build_model(
    backbone_spec: BackboneSpec,
    bottleneck_spec: BottleneckSpec,
    num_classes: int,
    with_discriminator: bool = False,
    external_backbone: nn.Module | None = None,
    frozen_backbone: bool | None = None,
) -> ModelBundle:
    if num_classes < 2:
        raise ConfigError("num_classes: must be >= 2")
    backbone = build_backbone(backbone_spec, external=external_backbone)
    bottleneck = build_bottleneck(backbone_spec.output_dim, bottleneck_spec)
    classifier = nn.Linear(bottleneck_spec.width, num_classes)
    discriminator = DomainDiscriminator(bottleneck_spec.width) if with_discriminator else None
    if frozen_backbone is None:
        # external extractors arrive pretrained and stay frozen by default
        frozen_backbone = backbone_spec.name == "external-feature-extractor"
    return ModelBundle(backbone, bottleneck, classifier, discriminator,
                       frozen_backbone=frozen_backbone)


@dataclass
class HeatMap:
    """Min-max-normalized class-evidence map for one image."""

    data: np.ndarray  # (h, w) in [0, 1]
    source_layer: str


def grad_cam(model: nn.Module, image: torch.Tensor, class_index: int, layer: str) -> HeatMap:
    """Gradient-weighted class activation map at the named layer.

    weights w_k = spatial mean of d(score_c)/d(A_k); the map is
    ReLU(sum_k w_k A_k) rescaled to [0, 1] (max stays 1 unless the map is
    identically zero). ``layer`` is a dotted submodule path whose output must
    be a 4-D activation tensor.
    """
    try:
        module = model.get_submodule(layer)
    except AttributeError as exc:
        raise UnsupportedLayerError(f"no submodule named {layer!r}") from exc

    captured: dict = {}

    def _hook(_mod, _inp, out):
        captured["activations"] = out

    handle = module.register_forward_hook(_hook)
    was_training = model.training
    model.eval()
    try:
        if image.ndim == 3:
            image = image.unsqueeze(0)
        if image.shape[0] != 1:
            raise ShapeError("grad_cam expects a single image")
        with torch.enable_grad():
            # grad must reach the activations even under frozen parameters
            image = image.detach().clone().requires_grad_(True)
            out = model(image)
            logits = out[-1] if isinstance(out, tuple) else out
            if class_index >= logits.shape[1]:
                raise ShapeError(f"class_index {class_index} out of range ({logits.shape[1]} classes)")
            acts = captured.get("activations")
            if acts is None or acts.ndim != 4:
                raise UnsupportedLayerError(
                    f"layer {layer!r} does not produce spatial activations"
                )
            score = logits[0, class_index]
            grads = torch.autograd.grad(score, acts, allow_unused=True)[0]
    finally:
        handle.remove()
        model.train(was_training)

    acts = acts.detach()[0]  # (k, h, w)
    if grads is None:
        cam = torch.zeros(acts.shape[1:], dtype=acts.dtype)
    else:
        weights = grads.detach()[0].mean(dim=(1, 2))  # (k,)
        cam = torch.relu((weights[:, None, None] * acts).sum(dim=0))
    lo, hi = float(cam.min()), float(cam.max())
    if hi > lo:
        cam = (cam - lo) / (hi - lo)
    elif hi > 0.0:  # constant nonzero map
        cam = torch.ones_like(cam)
    else:
        cam = torch.zeros_like(cam)
    return HeatMap(cam.cpu().numpy(), source_layer=layer)


def upsample_heatmap(heatmap: HeatMap, height: int, width: int) -> np.ndarray:
    """Bilinear upsampling of a heatmap to overlay resolution."""
    t = torch.from_numpy(heatmap.data).float()[None, None]
    up = torch.nn.functional.interpolate(t, size=(height, width), mode="bilinear",
                                         align_corners=False)
    return up[0, 0].numpy()


def save_checkpoint(model: ModelBundle, path, config_fingerprint: str, epoch: int) -> None:
    torch.save(
        {"state_dict": model.state_dict(), "config_fingerprint": config_fingerprint,
         "epoch": epoch, "format_version": 1},
        path,
    )


def load_checkpoint(path, model: ModelBundle | None = None) -> dict:
    payload = torch.load(path, map_location="cpu", weights_only=True)
    if model is not None:
        model.load_state_dict(payload["state_dict"])
    return payload
