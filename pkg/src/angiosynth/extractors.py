"""Frozen convolutional feature extractors for the perceptual loss and metrics.

Two kinds are available behind one interface:

* ``random[:seed]`` -- a small fixed-seed random-weight network. Needs no
  downloads, so tests and CI use it. Numbers from it are only comparable
  with other numbers from the same seed.
* ``vgg19:<weights.pth>`` -- torchvision's VGG19 with a user-supplied state
  dict; the first four feature stages (relu1_2 .. relu4_4) are used.
"""
from __future__ import annotations

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigError

IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)
LEAK_EXTRACTOR = 0.1


class FeatureExtractor(nn.Module):
    """Sequence of stages; each stage output is one feature layer.

    Inputs are [B, C, H, W] images in [0, 1]. Single-channel images are
    replicated to three channels.
    """

    def __init__(self, stages, head=None, mean=None, std=None, provenance="unknown"):
        super().__init__()
        self.stages = nn.ModuleList(stages)
        self.head = head
        self.provenance = provenance
        mean = torch.tensor(mean if mean is not None else (0.5, 0.5, 0.5)).view(1, 3, 1, 1)
        std = torch.tensor(std if std is not None else (0.5, 0.5, 0.5)).view(1, 3, 1, 1)
        self.register_buffer("mean", mean)
        self.register_buffer("std", std)
        self.requires_grad_(False)
        self.eval()

    def train(self, mode=True):
        # Frozen: never switch to training behaviour.
        return super().train(False)

    def _prepare(self, x):
        if x.shape[1] == 1:
            x = x.expand(-1, 3, -1, -1)
        elif x.shape[1] != 3:
            raise ValueError(f"extractor expects 1 or 3 channels, got {x.shape[1]}")
        return (x - self.mean) / self.std

    def layers(self, x):
        """Per-stage activations, shallowest first."""
        x = self._prepare(x)
        out = []
        for stage in self.stages:
            x = stage(x)
            out.append(x)
        return out

    def element_counts(self, shape):
        """Element count of each layer for an input of ``shape`` [B, C, H, W]."""
        with torch.no_grad():
            probe = torch.zeros(shape, dtype=self.mean.dtype)
            return [t.numel() for t in self.layers(probe)]

    def embed(self, x):
        """One feature vector per image: spatially averaged deepest layer."""
        return self.layers(x)[-1].mean(dim=(-2, -1))

    def probs(self, x):
        """Class probabilities per image (rows sum to 1)."""
        if self.head is None:
            raise ConfigError(f"extractor {self.provenance} has no classification head")
        return torch.softmax(self.head(x, self), dim=-1)


class _LinearHead(nn.Module):
    def __init__(self, in_dim, classes):
        super().__init__()
        self.fc = nn.Linear(in_dim, classes)

    def forward(self, x, extractor):
        return self.fc(extractor.embed(x))


class _VGGHead(nn.Module):
    def __init__(self, vgg):
        super().__init__()
        self.vgg = vgg

    def forward(self, x, extractor):
        x = extractor._prepare(x)
        x = F.interpolate(x, size=(224, 224), mode="bilinear", align_corners=False)
        return self.vgg(x)


def random_extractor(seed: int = 0, widths=(8, 16, 32, 64), classes: int = 10) -> FeatureExtractor:
    gen = torch.Generator().manual_seed(seed)
    stages = []
    in_ch = 3
    for i, w in enumerate(widths):
        conv = nn.Conv2d(in_ch, w, kernel_size=3, padding=1)
        with torch.no_grad():
            conv.weight.normal_(0.0, (2.0 / (9 * in_ch)) ** 0.5, generator=gen)
            conv.bias.normal_(0.0, 0.1, generator=gen)
        layers = [nn.AvgPool2d(2)] if i else []
        stages.append(nn.Sequential(*layers, conv, nn.LeakyReLU(LEAK_EXTRACTOR)))
        in_ch = w
    head = _LinearHead(in_ch, classes)
    with torch.no_grad():
        head.fc.weight.normal_(0.0, 1.0 / in_ch ** 0.5, generator=gen)
        head.fc.bias.zero_()
    return FeatureExtractor(stages, head, provenance=f"random:{seed}")


def vgg19_extractor(weights_path) -> FeatureExtractor:
    try:
        from torchvision.models import vgg19
    except ImportError as exc:  # optional dependency
        raise ConfigError("the vgg19 extractor needs torchvision installed") from exc
    try:
        state = torch.load(weights_path, map_location="cpu", weights_only=True)
    except (OSError, RuntimeError) as exc:
        raise ConfigError(f"cannot load VGG19 weights from {weights_path}: {exc}") from exc
    net = vgg19()
    net.load_state_dict(state)
    feats = net.features
    cuts = [(0, 4), (4, 9), (9, 18), (18, 27)]
    stages = [nn.Sequential(*[feats[i] for i in range(a, b)]) for a, b in cuts]
    return FeatureExtractor(stages, _VGGHead(net), IMAGENET_MEAN, IMAGENET_STD,
                            provenance=f"vgg19:{weights_path}")


def load_extractor(spec: str | None) -> FeatureExtractor:
    """Build an extractor from ``random[:seed]`` or ``vgg19:<path>``."""
    if not spec:
        raise ConfigError("no feature extractor configured")
    kind, _, arg = spec.partition(":")
    if kind == "random":
        try:
            seed = int(arg) if arg else 0
        except ValueError:
            raise ConfigError(f"bad random extractor seed in {spec!r}") from None
        return random_extractor(seed)
    if kind == "vgg19":
        if not arg:
            raise ConfigError("vgg19 extractor needs a weights path: vgg19:<file>")
        return vgg19_extractor(arg)
    raise ConfigError(f"unknown extractor {spec!r}; use random[:seed] or vgg19:<weights>")
