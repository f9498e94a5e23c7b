"""Procedural paired fundus images with a known source-to-angiogram mapping.

Vessel trees are grown as branching random walks and rasterized into a latent
vessel map. Both modalities are rendered from the same latent maps, so every
pair is registered by construction and the target is a fixed function of the
latents.
"""
from __future__ import annotations

import math
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

from .errors import ConfigError, RegistrationError
from .raster import stamp_discs

# Target appearance: vessels*0.9 + lesions*0.7 + background, mild blur.
FA_VESSEL_GAIN = 0.9
FA_LESION_GAIN = 0.7
FA_BACKGROUND = 0.05
FA_BLUR_SIGMA = 0.6


@dataclass(frozen=True)
class SynthConfig:
    seed: int = 0
    height: int = 256
    width: int = 320
    vessel_branches: int = 6
    lesion_count: int = 4
    noise_std: float = 0.01

    def validate(self) -> None:
        if self.height <= 0 or self.width <= 0:
            raise ConfigError(f"image size must be positive, got {self.height}x{self.width}")
        if self.height % 16 or self.width % 16:
            raise ConfigError(
                f"height and width must be divisible by 16, got {self.height}x{self.width}"
            )
        if self.vessel_branches < 0 or self.lesion_count < 0:
            raise ConfigError("vessel_branches and lesion_count must be >= 0")
        if not 0.0 <= self.noise_std <= 0.2:
            raise ConfigError(f"noise_std must lie in [0, 0.2], got {self.noise_std}")


@dataclass
class ImagePair:
    source: np.ndarray  # [3, H, W] float in [0, 1]
    target: np.ndarray  # [1, H, W] float in [0, 1]
    pair_id: str

    def __post_init__(self):
        if self.source.ndim != 3 or self.target.ndim != 3:
            raise ValueError("source and target must be [C, H, W] arrays")
        if self.source.shape[1:] != self.target.shape[1:]:
            raise RegistrationError(
                f"pair {self.pair_id}: source {self.source.shape[1:]} and target "
                f"{self.target.shape[1:]} differ in spatial size"
            )

    @property
    def shape(self):
        return self.source.shape[1:]


@dataclass
class Latent:
    vessels: np.ndarray  # [H, W] in [0, 1]
    lesions: np.ndarray  # [H, W] in [0, 1]


def _grow_tree(rng, start, angle, width, bounds, out, depth=0):
    """Branching random walk. Appends (y, x, radius) samples to ``out``."""
    h, w = bounds
    y, x = start
    step = 1.5
    length = rng.uniform(0.25, 0.6) * max(h, w) / (1 + 0.6 * depth)
    travelled = 0.0
    while travelled < length and width >= 0.35:
        if not (-4 <= y < h + 4 and -4 <= x < w + 4):
            return
        out.append((y, x, width))
        angle += rng.normal(0.0, 0.12)
        y += step * math.sin(angle)
        x += step * math.cos(angle)
        travelled += step
        width *= 0.997
        if depth < 5 and rng.random() < 0.018:
            side = 1.0 if rng.random() < 0.5 else -1.0
            child_angle = angle + side * rng.uniform(0.35, 0.9)
            _grow_tree(rng, (y, x), child_angle, width * 0.7, bounds, out, depth + 1)
            width *= 0.9


def render_latent(cfg: SynthConfig, rng: np.random.Generator) -> Latent:
    h, w = cfg.height, cfg.width
    scale = min(h, w) / 256.0
    disc = (h * rng.uniform(0.42, 0.58), w * rng.uniform(0.3, 0.4))

    samples: list[tuple[float, float, float]] = []
    for b in range(cfg.vessel_branches):
        angle = 2.0 * math.pi * (b + rng.uniform(-0.3, 0.3)) / max(cfg.vessel_branches, 1)
        width = rng.uniform(1.6, 2.6) * scale
        _grow_tree(rng, disc, angle, width, (h, w), samples)

    vessels = np.zeros((h, w), dtype=np.float64)
    if samples:
        arr = np.asarray(samples, dtype=np.float64)
        radii = arr[:, 2]
        # Sub-pixel capillaries render fainter instead of vanishing.
        amps = np.minimum(1.0, 2.0 * radii)
        stamp_discs(vessels, arr[:, 0], arr[:, 1], np.maximum(radii, 0.5), amps)

    lesions = np.zeros((h, w), dtype=np.float64)
    if cfg.lesion_count:
        ys = rng.uniform(0.1 * h, 0.9 * h, cfg.lesion_count)
        xs = rng.uniform(0.1 * w, 0.9 * w, cfg.lesion_count)
        radii = rng.uniform(1.5, 4.0, cfg.lesion_count) * scale
        stamp_discs(lesions, ys, xs, radii, np.ones(cfg.lesion_count))
    return Latent(vessels=vessels, lesions=lesions)


def fa_from_latent(latent: Latent, noise=None) -> np.ndarray:
    """Angiogram appearance model; returns [1, H, W] clamped to [0, 1]."""
    fa = FA_VESSEL_GAIN * latent.vessels + FA_LESION_GAIN * latent.lesions
    fa = gaussian_filter(fa, FA_BLUR_SIGMA, mode="reflect") + FA_BACKGROUND
    if noise is not None:
        fa = fa + noise
    return np.clip(fa, 0.0, 1.0)[None]


def slo_from_latent(latent: Latent, h: int, w: int, noise=None) -> np.ndarray:
    """Three-channel reflectance image: reddish field, dark vessels, pale lesions."""
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    r2 = ((yy - h / 2) / (h / 2)) ** 2 + ((xx - w / 2) / (w / 2)) ** 2
    field = 0.85 - 0.3 * r2
    v, les = latent.vessels, latent.lesions
    src = np.stack([
        0.75 * field - 0.25 * v + 0.10 * les,
        0.50 * field - 0.35 * v - 0.20 * les,
        0.20 * field - 0.10 * v,
    ])
    if noise is not None:
        src = src + noise
    return np.clip(src, 0.0, 1.0)


def generate_pair(cfg: SynthConfig, index: int = 0) -> ImagePair:
    """Render one registered pair. Pure function of ``(cfg, index)``."""
    cfg.validate()
    rng = np.random.default_rng([cfg.seed, index])
    latent = render_latent(cfg, rng)
    h, w = cfg.height, cfg.width
    src_noise = fa_noise = None
    if cfg.noise_std > 0:
        src_noise = rng.normal(0.0, cfg.noise_std, (3, h, w))
        fa_noise = rng.normal(0.0, cfg.noise_std, (h, w))
    return ImagePair(
        source=slo_from_latent(latent, h, w, src_noise),
        target=fa_from_latent(latent, fa_noise),
        pair_id=f"s{cfg.seed}_{index:04d}",
    )


def generate_dataset(cfg: SynthConfig, n: int, out_dir) -> Path:
    """Write ``n`` pairs as 8-bit PNGs plus a TAB-separated manifest."""
    from .data import write_image

    cfg.validate()
    if n < 0:
        raise ConfigError(f"count must be >= 0, got {n}")
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create output directory {out}: {exc}") from exc
    rows = []
    for i in range(n):
        pair = generate_pair(cfg, i)
        src_rel = Path("source") / f"{pair.pair_id}.png"
        tgt_rel = Path("target") / f"{pair.pair_id}.png"
        write_image(out / src_rel, pair.source)
        write_image(out / tgt_rel, pair.target)
        rows.append(f"{src_rel.as_posix()}\t{tgt_rel.as_posix()}\n")
    manifest = out / "manifest.tsv"
    tmp = manifest.with_suffix(".tsv.tmp")
    try:
        with open(tmp, "w", encoding="utf-8") as fh:
            fh.writelines(rows)
        os.replace(tmp, manifest)
    except OSError as exc:
        raise OSError(f"cannot write manifest {manifest}: {exc}") from exc
    return manifest
