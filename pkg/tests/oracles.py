"""Independent reference implementations used to check the metrics module.

Each oracle takes a different computational route from the production code:
scipy's Schur-based sqrtm for FID, explicit double loops for the MMD
U-statistic and the IS sums, and a hand-written forward pass plus per-pixel
loops for LPIPS.
"""
import math

import numpy as np
import scipy.linalg
import torch.nn.functional as F


def fid_oracle(x, y):
    mu1, mu2 = x.mean(0), y.mean(0)
    s1 = np.atleast_2d(np.cov(x, rowvar=False))
    s2 = np.atleast_2d(np.cov(y, rowvar=False))
    covmean = scipy.linalg.sqrtm(s1 @ s2)
    covmean = np.real(covmean)
    return float(((mu1 - mu2) ** 2).sum() + np.trace(s1) + np.trace(s2) - 2 * np.trace(covmean))


def _k(a, b):
    return (sum(p * q for p, q in zip(a, b)) / len(a) + 1.0) ** 3


def mmd2_oracle(x, y):
    """Unbiased MMD^2 U-statistic, cubic kernel, as explicit double sums."""
    m, n = len(x), len(y)
    sxx = sum(_k(x[i], x[j]) for i in range(m) for j in range(m) if i != j)
    syy = sum(_k(y[i], y[j]) for i in range(n) for j in range(n) if i != j)
    sxy = sum(_k(x[i], y[j]) for i in range(m) for j in range(n))
    return sxx / (m * (m - 1)) + syy / (n * (n - 1)) - 2 * sxy / (m * n)


def is_oracle(probs):
    """Single-split inception score by direct summation, skipping zero terms."""
    n, k = probs.shape
    marginal = [sum(probs[i][c] for i in range(n)) / n for c in range(k)]
    total = 0.0
    for i in range(n):
        for c in range(k):
            p = probs[i][c]
            if p > 0:
                total += p * (math.log(p) - math.log(marginal[c]))
    return math.exp(total / n)


def random_extractor_layers(extractor, img):
    """Hand-written forward of the random extractor (float64 torch ops)."""
    x = img.double()
    if x.shape[1] == 1:
        x = x.repeat(1, 3, 1, 1)
    x = (x - 0.5) / 0.5
    out = []
    for i, stage in enumerate(extractor.stages):
        conv = [m for m in stage if hasattr(m, "weight")][0]
        if i:
            x = F.avg_pool2d(x, 2)
        x = F.conv2d(x, conv.weight.double(), conv.bias.double(), padding=1)
        x = F.leaky_relu(x, 0.1)
        out.append(x.numpy())
    return out


def lpips_oracle(feats_a, feats_b, weights=None, eps=1e-10):
    weights = weights or [1.0 / len(feats_a)] * len(feats_a)
    total = 0.0
    for w, fa, fb in zip(weights, feats_a, feats_b):
        _, c, h, wd = fa.shape
        acc = 0.0
        for yy in range(h):
            for xx in range(wd):
                va, vb = fa[0, :, yy, xx], fb[0, :, yy, xx]
                na = math.sqrt(sum(v * v for v in va)) + eps
                nb = math.sqrt(sum(v * v for v in vb)) + eps
                acc += sum((va[j] / na - vb[j] / nb) ** 2 for j in range(c))
        total += w * acc / (h * wd)
    return total
