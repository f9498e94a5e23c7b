"""FID, KID, Inception Score and LPIPS over pluggable feature extractors.

The statistical estimators work on plain float64 arrays; extractors only
turn images into features.
"""
from __future__ import annotations

import copy
import json
import math
import warnings
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
from scipy.special import rel_entr

from .data import read_image
from .errors import ConfigError
from .extractors import FeatureExtractor, load_extractor

LPIPS_EPS = 1e-10
NEG_EIG_TOL = 1e-6


def _as_2d(feats, name):
    a = np.asarray(feats, dtype=np.float64)
    if a.ndim != 2:
        raise ValueError(f"{name} must be an (n, d) array, got shape {a.shape}")
    return a


def _psd_sqrt(mat):
    vals, vecs = np.linalg.eigh(mat)
    return (vecs * np.sqrt(np.clip(vals, 0.0, None))) @ vecs.T


def fid(real_feats, fake_feats) -> float:
    """Frechet distance between Gaussians fitted to two feature sets.

    The trace of ``sqrt(S_r S_f)`` is taken from the eigenvalues of the
    symmetric matrix ``S_r^1/2 S_f S_r^1/2``, which has the same spectrum.
    """
    x, y = _as_2d(real_feats, "real_feats"), _as_2d(fake_feats, "fake_feats")
    if x.shape[0] < 2 or y.shape[0] < 2:
        raise ValueError("fid needs at least two samples per set")
    if x.shape[1] != y.shape[1]:
        raise ValueError(f"feature dims differ: {x.shape[1]} vs {y.shape[1]}")
    if x.shape[1] > min(x.shape[0], y.shape[0]):
        warnings.warn("feature dimension exceeds sample count; covariance is singular",
                      RuntimeWarning, stacklevel=2)
    mu_r, mu_f = x.mean(axis=0), y.mean(axis=0)
    cov_r = np.atleast_2d(np.cov(x, rowvar=False))
    cov_f = np.atleast_2d(np.cov(y, rowvar=False))
    root_r = _psd_sqrt(cov_r)
    inner = root_r @ cov_f @ root_r
    eig = np.linalg.eigvalsh((inner + inner.T) / 2.0)
    scale = max(1.0, float(np.abs(eig).max()))
    if eig.min() < -NEG_EIG_TOL * scale:
        warnings.warn(f"clamping negative eigenvalue {eig.min():.3g} in FID", RuntimeWarning,
                      stacklevel=2)
    tr_sqrt = np.sqrt(np.clip(eig, 0.0, None)).sum()
    diff = mu_r - mu_f
    return float(diff @ diff + np.trace(cov_r) + np.trace(cov_f) - 2.0 * tr_sqrt)


def polynomial_kernel(x, y):
    d = x.shape[1]
    return (x @ y.T / d + 1.0) ** 3


def mmd2_unbiased(x, y) -> float:
    """Unbiased MMD^2 with the cubic polynomial kernel, equal-size samples.

    Kernel values are offset by ``k(x_0, y_0)`` before averaging; the offsets
    cancel exactly in the estimator, and constant features give exactly zero.
    """
    m = x.shape[0]
    kxx, kyy, kxy = polynomial_kernel(x, x), polynomial_kernel(y, y), polynomial_kernel(x, y)
    ref = kxy[0, 0]
    off = ~np.eye(m, dtype=bool)
    return float((kxx[off] - ref).mean() + (kyy[off] - ref).mean() - 2.0 * (kxy - ref).mean())


def kid(real_feats, fake_feats, subset_size=None, subsets=100, seed=0) -> float:
    """Mean of the unbiased MMD^2 over random equal-size subsets."""
    x, y = _as_2d(real_feats, "real_feats"), _as_2d(fake_feats, "fake_feats")
    if x.shape[1] != y.shape[1]:
        raise ValueError(f"feature dims differ: {x.shape[1]} vs {y.shape[1]}")
    limit = min(x.shape[0], y.shape[0])
    if subset_size is None:
        subset_size = min(limit, 1000)
    if subset_size < 2:
        raise ValueError(f"kid subset_size must be >= 2, got {subset_size}")
    if subset_size > limit:
        raise ValueError(f"subset_size {subset_size} exceeds the smaller set size {limit}")
    if subsets < 1:
        raise ValueError("kid needs at least one subset")
    rng = np.random.default_rng(seed)
    vals = []
    for _ in range(subsets):
        ix = rng.choice(x.shape[0], subset_size, replace=False)
        iy = rng.choice(y.shape[0], subset_size, replace=False)
        vals.append(mmd2_unbiased(x[ix], y[iy]))
    return float(np.mean(vals))


def _check_simplex(p):
    if p.ndim != 2:
        raise ValueError(f"probabilities must be (n, K), got shape {p.shape}")
    if (p < -1e-12).any() or not np.allclose(p.sum(axis=1), 1.0, atol=1e-6):
        raise ValueError("probability rows must be nonnegative and sum to 1")


def inception_score(probs, splits=10) -> float:
    """exp(mean_i KL(p_i || p_marginal)), averaged over ``splits`` chunks."""
    p = np.asarray(probs, dtype=np.float64)
    _check_simplex(p)
    if splits < 1:
        raise ValueError("splits must be >= 1")
    splits = min(splits, p.shape[0])
    scores = []
    for chunk in np.array_split(p, splits):
        marginal = chunk.mean(axis=0, keepdims=True)
        # rel_entr treats 0 * log 0 as 0, so one-hot rows score exactly K
        kl = rel_entr(chunk, marginal).sum(axis=1)
        scores.append(math.exp(kl.mean()))
    return float(np.mean(scores))


def _unit_normalize(f):
    """Normalize a [B, C, H, W] map to unit length along channels at each position."""
    norm = np.sqrt((f * f).sum(axis=1, keepdims=True))
    return f / (norm + LPIPS_EPS)


def lpips_from_features(feats_a, feats_b, layer_weights=None) -> np.ndarray:
    """Per-image distance from lists of [B, C, H, W] feature maps."""
    if len(feats_a) != len(feats_b):
        raise ValueError("feature lists differ in length")
    if layer_weights is None:
        layer_weights = [1.0 / len(feats_a)] * len(feats_a)
    if len(layer_weights) != len(feats_a):
        raise ValueError(f"{len(layer_weights)} layer weights for {len(feats_a)} layers")
    total = 0.0
    for w, fa, fb in zip(layer_weights, feats_a, feats_b):
        fa, fb = np.asarray(fa, dtype=np.float64), np.asarray(fb, dtype=np.float64)
        if fa.shape != fb.shape:
            raise ValueError(f"layer shapes differ: {fa.shape} vs {fb.shape}")
        d = ((_unit_normalize(fa) - _unit_normalize(fb)) ** 2).sum(axis=1)
        total = total + w * d.mean(axis=(-2, -1))
    return np.asarray(total)


def _to_batch(img):
    t = torch.as_tensor(np.asarray(img, dtype=np.float64))
    return t[None] if t.ndim == 3 else t


def as_double(extractor: FeatureExtractor) -> FeatureExtractor:
    if extractor.mean.dtype == torch.float64:
        return extractor
    return copy.deepcopy(extractor).double()


@torch.no_grad()
def extract_layers(extractor: FeatureExtractor, img):
    return [f.numpy() for f in as_double(extractor).layers(_to_batch(img))]


def lpips(img_a, img_b, extractor: FeatureExtractor, layer_weights=None) -> float:
    """Perceptual distance between two images ([C, H, W] in [0, 1]).

    Default layer weights are uniform and sum to one.
    """
    a, b = np.asarray(img_a), np.asarray(img_b)
    if a.shape != b.shape:
        raise ValueError(f"image shapes differ: {a.shape} vs {b.shape}")
    d = lpips_from_features(extract_layers(extractor, a), extract_layers(extractor, b),
                            layer_weights)
    return float(d.mean())


@dataclass
class MetricReport:
    fid: float
    kid: float
    is_score: float
    lpips: float
    n_real: int
    n_fake: int
    extractor: str

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    def tsv_header(self) -> str:
        return "\t".join(asdict(self))

    def to_tsv(self) -> str:
        return "\t".join(str(v) for v in asdict(self).values())


def _list_images(d):
    d = Path(d)
    if not d.is_dir():
        raise FileNotFoundError(f"image directory not found: {d}")
    files = sorted(p for p in d.iterdir() if p.suffix.lower() in (".png", ".jpg", ".jpeg", ".tif", ".tiff"))
    if not files:
        raise ConfigError(f"no images in {d}")
    return files


@torch.no_grad()
def evaluate(real_dir, fake_dir, extractor_spec="random:0", kid_subsets=100, is_splits=10,
             seed=0) -> MetricReport:
    """All four metrics for two directories of images paired by filename."""
    real_files, fake_files = _list_images(real_dir), _list_images(fake_dir)
    real_names = [p.name for p in real_files]
    fake_names = [p.name for p in fake_files]
    if real_names != fake_names:
        missing = sorted(set(real_names) ^ set(fake_names))
        raise ConfigError(f"unmatched filenames between {real_dir} and {fake_dir}: "
                          f"{', '.join(missing[:5])}")
    if len(real_files) < 2:
        raise ConfigError("FID and KID need at least two images per set")
    extractor = as_double(extractor_spec if isinstance(extractor_spec, FeatureExtractor)
                          else load_extractor(extractor_spec))
    feats = {"real": [], "fake": []}
    probs = []
    dists = []
    for rp, fp in zip(real_files, fake_files):
        ra, fa = _to_batch(read_image(rp, 1)), _to_batch(read_image(fp, 1))
        if ra.shape != fa.shape:
            raise ConfigError(f"{rp.name}: real and generated images differ in size")
        la, lb = extractor.layers(ra), extractor.layers(fa)
        feats["real"].append(la[-1].mean(dim=(-2, -1))[0].numpy())
        feats["fake"].append(lb[-1].mean(dim=(-2, -1))[0].numpy())
        probs.append(extractor.probs(fa)[0].numpy())
        dists.append(float(lpips_from_features([t.numpy() for t in la],
                                               [t.numpy() for t in lb])[0]))
    real, fake = np.stack(feats["real"]), np.stack(feats["fake"])
    return MetricReport(
        fid=fid(real, fake),
        kid=kid(real, fake, subsets=kid_subsets, seed=seed),
        is_score=inception_score(np.stack(probs), splits=is_splits),
        lpips=float(np.mean(dists)),
        n_real=len(real_files),
        n_fake=len(fake_files),
        extractor=extractor.provenance,
    )
