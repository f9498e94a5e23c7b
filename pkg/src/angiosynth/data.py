"""Loading, sharpening, resizing, patch sampling and augmentation of image pairs."""
from __future__ import annotations

import os
from dataclasses import dataclass, replace
from pathlib import Path
from typing import NamedTuple

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image
from skimage import exposure

from .errors import ConfigError, RegistrationError
from .synthetic import ImagePair

CLAHE_BINS = 256


@dataclass(frozen=True)
class PreprocessConfig:
    # 2432x3072 rather than the 2432x3702 sometimes quoted: the latter does not
    # tile with 608x768 patches and is not divisible by 16.
    target_height: int = 2432
    target_width: int = 3072
    sharpen: bool = True
    clahe_clip: float = 2.0
    clahe_tile: int = 64
    patch_height: int = 608
    patch_width: int = 768
    patches_per_image: int = 50
    coarse_factor: int = 4
    augment: bool = True

    def validate(self, max_downs: int = 0) -> None:
        if self.target_height <= 0 or self.target_width <= 0:
            raise ConfigError("target size must be positive")
        if self.clahe_clip <= 0 or self.clahe_tile <= 0:
            raise ConfigError("clahe_clip and clahe_tile must be positive")
        if self.patches_per_image < 0:
            raise ConfigError("patches_per_image must be >= 0")
        if self.coarse_factor < 2:
            raise ConfigError(f"coarse_factor must be >= 2, got {self.coarse_factor}")
        if self.patch_height > self.target_height or self.patch_width > self.target_width:
            raise ConfigError(
                f"patch {self.patch_height}x{self.patch_width} exceeds image "
                f"{self.target_height}x{self.target_width}"
            )
        f = self.coarse_factor
        for name, v in (("patch_height", self.patch_height), ("patch_width", self.patch_width),
                        ("target_height", self.target_height), ("target_width", self.target_width)):
            if v % f:
                raise ConfigError(f"{name}={v} is not divisible by coarse_factor={f}")
        step = 2 ** max_downs
        if self.patch_height % step or self.patch_width % step:
            raise ConfigError(
                f"patch {self.patch_height}x{self.patch_width} is not divisible by {step}"
            )


@dataclass(frozen=True)
class PatchSpec:
    top: int
    left: int
    height: int
    width: int

    def slices(self):
        return (slice(self.top, self.top + self.height), slice(self.left, self.left + self.width))

    def scaled(self, factor: int) -> "PatchSpec":
        """The same region in an image down-sampled by ``factor``."""
        if any(v % factor for v in (self.top, self.left, self.height, self.width)):
            raise ConfigError(f"{self} is not aligned to factor {factor}")
        return PatchSpec(self.top // factor, self.left // factor,
                         self.height // factor, self.width // factor)


@dataclass
class PatchPair:
    fine_source: np.ndarray  # [3, ph, pw]
    fine_target: np.ndarray  # [1, ph, pw]
    spec: PatchSpec
    pair_id: str


# --------------------------------------------------------------------------- io

def read_image(path, channels: int) -> np.ndarray:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"image file not found: {path}")
    with Image.open(path) as im:
        im = im.convert("RGB" if channels == 3 else "L")
        arr = np.asarray(im, dtype=np.float64) / 255.0
    if arr.ndim == 2:
        arr = arr[None]
    else:
        arr = arr.transpose(2, 0, 1)
    return np.ascontiguousarray(arr)


def write_image(path, arr: np.ndarray) -> None:
    """Quantize a [C, H, W] array in [0, 1] to an 8-bit PNG."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    q = np.clip(np.rint(np.asarray(arr) * 255.0), 0, 255).astype(np.uint8)
    if q.shape[0] == 1:
        im = Image.fromarray(q[0], mode="L")
    elif q.shape[0] == 3:
        im = Image.fromarray(q.transpose(1, 2, 0), mode="RGB")
    else:
        raise ValueError(f"cannot write a {q.shape[0]}-channel image")
    try:
        im.save(path, format="PNG")
    except OSError as exc:
        raise OSError(f"cannot write image {path}: {exc}") from exc


def read_manifest_rows(path) -> list[tuple[Path, Path, list[str]]]:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"manifest not found: {path}")
    base = path.parent
    rows = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) < 2:
                raise ConfigError(f"{path}:{lineno}: expected source<TAB>target")
            src, tgt = (base / p for p in parts[:2])
            rows.append((src, tgt, parts[2:]))
    return rows


def load_manifest(path) -> list[ImagePair]:
    pairs = []
    for src, tgt, _ in read_manifest_rows(path):
        source = read_image(src, 3)
        target = read_image(tgt, 1)
        if source.shape[1:] != target.shape[1:]:
            raise RegistrationError(
                f"{src} is {source.shape[1]}x{source.shape[2]} but {tgt} is "
                f"{target.shape[1]}x{target.shape[2]}; pairs must be registered"
            )
        pairs.append(ImagePair(source, target, pair_id=src.stem))
    return pairs


def alignment_overlay(pair: ImagePair) -> np.ndarray:
    """False-colour overlay for eyeballing registration.

    Source luminance goes to green, target to red and blue; aligned structures
    show up grey, misalignment as coloured fringes.
    """
    lum = pair.source.mean(axis=0)
    tgt = pair.target[0]
    return np.stack([tgt, lum, tgt])


# ------------------------------------------------------------------- transforms

def sharpen(image: np.ndarray, clahe_clip: float = 2.0, clahe_tile: int = 64) -> np.ndarray:
    """Contrast-limited adaptive histogram equalization, channel by channel.

    ``clahe_clip`` follows the usual convention of a multiple of the mean bin
    count per tile.
    """
    image = np.asarray(image, dtype=np.float64)
    h, w = image.shape[-2:]
    if clahe_tile > h or clahe_tile > w:
        raise ConfigError(f"CLAHE tile {clahe_tile} is larger than the {h}x{w} image")
    if clahe_clip <= 0:
        raise ConfigError("clahe_clip must be positive")
    out = np.empty_like(image)
    for c in range(image.shape[0]):
        ch = image[c]
        if ch.max() == ch.min():
            out[c] = ch
            continue
        out[c] = exposure.equalize_adapthist(
            ch, kernel_size=clahe_tile, clip_limit=min(clahe_clip / CLAHE_BINS, 1.0),
            nbins=CLAHE_BINS,
        )
    return np.clip(out, 0.0, 1.0)


def resize(arr: np.ndarray, height: int, width: int, antialias: bool = False) -> np.ndarray:
    """Bilinear resize of a [C, H, W] array (half-pixel centres)."""
    if height <= 0 or width <= 0:
        raise ConfigError(f"target size must be positive, got {height}x{width}")
    if arr.shape[-2:] == (height, width):
        return np.array(arr, dtype=np.float64)
    t = torch.from_numpy(np.ascontiguousarray(arr, dtype=np.float64))[None]
    out = F.interpolate(t, size=(height, width), mode="bilinear", align_corners=False,
                        antialias=antialias)
    return out[0].numpy()


def resize_pair(pair: ImagePair, target_height: int, target_width: int) -> ImagePair:
    return ImagePair(
        resize(pair.source, target_height, target_width),
        resize(pair.target, target_height, target_width),
        pair.pair_id,
    )


def prepare_pair(pair: ImagePair, cfg: PreprocessConfig) -> ImagePair:
    """Sharpen (if enabled) and resize a loaded pair to the working resolution."""
    if cfg.sharpen:
        pair = ImagePair(sharpen(pair.source, cfg.clahe_clip, cfg.clahe_tile),
                         sharpen(pair.target, cfg.clahe_clip, cfg.clahe_tile), pair.pair_id)
    return resize_pair(pair, cfg.target_height, cfg.target_width)


def sample_specs(height: int, width: int, cfg: PreprocessConfig,
                 rng: np.random.Generator) -> list[PatchSpec]:
    """Uniformly drawn patch origins snapped to multiples of ``coarse_factor``."""
    ph, pw, f = cfg.patch_height, cfg.patch_width, cfg.coarse_factor
    if ph > height or pw > width:
        raise ConfigError(f"patch {ph}x{pw} does not fit in a {height}x{width} image")
    n_top = (height - ph) // f + 1
    n_left = (width - pw) // f + 1
    tops = rng.integers(0, n_top, cfg.patches_per_image) * f
    lefts = rng.integers(0, n_left, cfg.patches_per_image) * f
    return [PatchSpec(int(t), int(l), ph, pw) for t, l in zip(tops, lefts)]


def sample_patches(pair: ImagePair, cfg: PreprocessConfig,
                   rng: np.random.Generator) -> list[PatchPair]:
    h, w = pair.shape
    specs = sample_specs(h, w, cfg, rng)
    return [
        PatchPair(pair.source[(slice(None), *s.slices())].copy(),
                  pair.target[(slice(None), *s.slices())].copy(), s, pair.pair_id)
        for s in specs
    ]


class Transform(NamedTuple):
    hflip: bool = False
    vflip: bool = False
    quarter_turns: int = 0


IDENTITY = Transform()


def draw_transform(rng: np.random.Generator, square: bool) -> Transform:
    # 90/270 degree turns would change a non-square patch's shape.
    hflip = bool(rng.random() < 0.5)
    vflip = bool(rng.random() < 0.5)
    k = int(rng.integers(4)) if square else 2 * int(rng.integers(2))
    return Transform(hflip, vflip, k)


def apply_transform(arr, t: Transform):
    """Apply ``t`` to the trailing two axes of a numpy array or torch tensor."""
    if isinstance(arr, torch.Tensor):
        if t.hflip:
            arr = torch.flip(arr, dims=(-1,))
        if t.vflip:
            arr = torch.flip(arr, dims=(-2,))
        if t.quarter_turns % 4:
            arr = torch.rot90(arr, t.quarter_turns, dims=(-2, -1))
        return arr
    if t.hflip:
        arr = arr[..., ::-1]
    if t.vflip:
        arr = arr[..., ::-1, :]
    if t.quarter_turns % 4:
        arr = np.rot90(arr, t.quarter_turns, axes=(-2, -1))
    return np.ascontiguousarray(arr)


def augment(patch: PatchPair, rng: np.random.Generator) -> PatchPair:
    """Random flips and rotation applied identically to source and target."""
    ph, pw = patch.fine_source.shape[1:]
    t = draw_transform(rng, square=ph == pw)
    return replace(
        patch,
        fine_source=apply_transform(patch.fine_source, t),
        fine_target=apply_transform(patch.fine_target, t),
    )


def crop_aligned(coarse_full, spec: PatchSpec):
    """Crop a full-resolution (already up-sampled) coarse output at ``spec``.

    Works on [C, H, W] or [B, C, H, W] arrays and tensors.
    """
    h, w = coarse_full.shape[-2:]
    if (spec.top < 0 or spec.left < 0 or spec.height <= 0 or spec.width <= 0
            or spec.top + spec.height > h or spec.left + spec.width > w):
        raise ConfigError(f"{spec} lies outside the {h}x{w} image")
    rows, cols = spec.slices()
    return coarse_full[..., rows, cols]


# ----------------------------------------------------------------- preprocessing

def preprocess_dataset(manifest, out_dir, cfg: PreprocessConfig, seed: int) -> Path:
    """Write sharpened, resized, augmented patches and an index file.

    Each pair draws from its own generator seeded by ``(seed, pair index)`` so
    the output does not depend on processing order.
    """
    cfg.validate()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for idx, pair in enumerate(load_manifest(manifest)):
        pair = prepare_pair(pair, cfg)
        rng = np.random.default_rng([seed, idx])
        for k, patch in enumerate(sample_patches(pair, cfg, rng)):
            if cfg.augment:
                patch = augment(patch, rng)
            name = f"{pair.pair_id}_p{k:03d}.png"
            write_image(out / "source" / name, patch.fine_source)
            write_image(out / "target" / name, patch.fine_target)
            rows.append(f"source/{name}\ttarget/{name}\t{patch.spec.top},{patch.spec.left}\n")
    index = out / "index.tsv"
    tmp = index.with_suffix(".tsv.tmp")
    with open(tmp, "w", encoding="utf-8") as fh:
        fh.writelines(rows)
    os.replace(tmp, index)
    return index
