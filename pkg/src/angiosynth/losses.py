"""Adversarial, feature-matching and perceptual losses and their weighted total."""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field

import torch
import torch.nn.functional as F

from .errors import ConfigError, DivergenceError


@dataclass(frozen=True)
class LossWeights:
    lambda_fm_c: float = 10.0
    lambda_vgg_c: float = 10.0
    lambda_fm_f: float = 10.0
    lambda_vgg_f: float = 10.0

    def validate(self):
        for name, v in asdict(self).items():
            if not math.isfinite(v) or v < 0:
                raise ConfigError(f"{name} must be finite and >= 0, got {v}")


def cgan_loss(real_logits, fake_logits, side="discriminator", literal=False):
    """Conditional adversarial loss on patch-logit maps.

    ``side="discriminator"``: mean BCE of real logits against 1 and fake logits
    against 0, averaged over both. ``side="generator"``: BCE of fake logits
    against 1 (non-saturating); with ``literal=True`` the minimax form
    ``mean(log(1 - D(G(c))))`` instead.
    """
    if side == "discriminator":
        real = F.binary_cross_entropy_with_logits(real_logits, torch.ones_like(real_logits))
        fake = F.binary_cross_entropy_with_logits(fake_logits, torch.zeros_like(fake_logits))
        return 0.5 * (real + fake)
    if side == "generator":
        if literal:
            # log(1 - sigmoid(l)) = -softplus(l)
            return -F.softplus(fake_logits).mean()
        return F.binary_cross_entropy_with_logits(fake_logits, torch.ones_like(fake_logits))
    raise ValueError(f"side must be 'discriminator' or 'generator', got {side!r}")


def _features(stack):
    return stack.features if hasattr(stack, "features") else list(stack)


def fm_loss(real_stack, fake_stack):
    """Sum over layers of the per-element mean L1 distance.

    The real activations are treated as constants.
    """
    real, fake = _features(real_stack), _features(fake_stack)
    if len(real) != len(fake):
        raise ValueError(f"feature stacks differ in depth: {len(real)} vs {len(fake)}")
    total = fake[0].new_zeros(())
    for r, f in zip(real, fake):
        if r.shape != f.shape:
            raise ValueError(f"layer shapes differ: {tuple(r.shape)} vs {tuple(f.shape)}")
        total = total + (r.detach() - f).abs().mean()
    return total


def perceptual_loss(real, fake, extractor):
    """Layerwise mean L1 distance between frozen extractor features.

    ``real`` and ``fake`` are images in [0, 1].
    """
    if extractor is None:
        raise ConfigError("perceptual loss needs a feature extractor; none is configured")
    if real.shape != fake.shape:
        raise ValueError(f"image shapes differ: {tuple(real.shape)} vs {tuple(fake.shape)}")
    with torch.no_grad():
        real_feats = extractor.layers(real)
    fake_feats = extractor.layers(fake)
    total = fake.new_zeros(())
    for r, f in zip(real_feats, fake_feats):
        total = total + (r - f).abs().mean()
    return total


@dataclass
class LossTerms:
    """Raw terms of the objective. Coarse FM/VGG terms hold one entry per discriminator."""

    cgan_d_c1: object
    cgan_d_c2: object
    cgan_d_f: object
    cgan_g_c: object
    cgan_g_f: object
    fm_c: list = field(default_factory=list)
    vgg_c: list = field(default_factory=list)
    fm_f: object = 0.0
    vgg_f: object = 0.0


def _check(name, value, step):
    v = float(value.detach()) if torch.is_tensor(value) else float(value)
    if not math.isfinite(v):
        raise DivergenceError(name, step)


def total_objective(terms: LossTerms, weights: LossWeights, step=None):
    """Weighted generator total and summed discriminator loss.

    Raises ``DivergenceError`` naming the first non-finite term.
    """
    for name in ("cgan_d_c1", "cgan_d_c2", "cgan_d_f", "cgan_g_c", "cgan_g_f", "fm_f", "vgg_f"):
        _check(name, getattr(terms, name), step)
    for name in ("fm_c", "vgg_c"):
        for v in getattr(terms, name):
            _check(name, v, step)
    g_total = (
        terms.cgan_g_c
        + terms.cgan_g_f
        + weights.lambda_fm_c * sum(terms.fm_c)
        + weights.lambda_vgg_c * sum(terms.vgg_c)
        + weights.lambda_fm_f * terms.fm_f
        + weights.lambda_vgg_f * terms.vgg_f
    )
    d_total = terms.cgan_d_c1 + terms.cgan_d_c2 + terms.cgan_d_f
    _check("total_g", g_total, step)
    _check("total_d", d_total, step)
    return g_total, d_total


@dataclass
class LossReport:
    step: int
    cgan_d_c1: float
    cgan_d_c2: float
    cgan_d_f: float
    cgan_g_c: float
    cgan_g_f: float
    fm_c: float
    fm_f: float
    vgg_c: float
    vgg_f: float
    total_g: float
    total_d: float

    @classmethod
    def from_terms(cls, step, terms: LossTerms, g_total, d_total):
        f = lambda v: float(v.detach()) if torch.is_tensor(v) else float(v)  # noqa: E731
        return cls(
            step=step,
            cgan_d_c1=f(terms.cgan_d_c1),
            cgan_d_c2=f(terms.cgan_d_c2),
            cgan_d_f=f(terms.cgan_d_f),
            cgan_g_c=f(terms.cgan_g_c),
            cgan_g_f=f(terms.cgan_g_f),
            fm_c=sum(f(v) for v in terms.fm_c),
            fm_f=f(terms.fm_f),
            vgg_c=sum(f(v) for v in terms.vgg_c),
            vgg_f=f(terms.vgg_f),
            total_g=f(g_total),
            total_d=f(d_total),
        )

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)
