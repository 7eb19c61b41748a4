"""Fidelity metrics: PSNR, SSIM, Fréchet/kernel feature distances, TPS.

Feature distances run on a 64-dim encoder trained once per dataset as a
denoising autoencoder; absolute values are therefore not comparable to
published numbers computed with other feature networks, but orderings and
curve shapes are.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np
import scipy.linalg

from . import tensor as T
from .errors import GenspecError, ShapeError
from .nn import Conv2d, Linear, Module, upsample2x
from .tensor import Tensor

PSNR_CAP_DB = 100.0


def psnr(x: np.ndarray, xhat: np.ndarray) -> float:
    """10*log10(1/MSE) on unit-range images; exact match returns the 100 dB cap."""
    x = np.asarray(x, dtype=np.float64)
    xhat = np.asarray(xhat, dtype=np.float64)
    if x.shape != xhat.shape:
        raise ShapeError(f"psnr: shapes {x.shape} and {xhat.shape} differ")
    mse = float(np.mean((x - xhat) ** 2))
    if mse == 0.0:
        return PSNR_CAP_DB
    return min(PSNR_CAP_DB, 10.0 * np.log10(1.0 / mse))


def _box_sums(img: np.ndarray, k: int) -> np.ndarray:
    """Sums over all k x k windows (valid positions) via integral image."""
    ii = np.cumsum(np.cumsum(img, axis=0), axis=1)
    ii = np.pad(ii, ((1, 0), (1, 0)))
    return ii[k:, k:] - ii[:-k, k:] - ii[k:, :-k] + ii[:-k, :-k]


def ssim(x: np.ndarray, xhat: np.ndarray, window: int = 7,
         c1: float = 0.01**2, c2: float = 0.03**2) -> float:
    """Mean SSIM over all valid uniform windows (population moments).

    Accepts a single (H, W) image or a batch (N, H, W); batches average the
    per-image scores."""
    x = np.asarray(x, dtype=np.float64)
    xhat = np.asarray(xhat, dtype=np.float64)
    if x.shape != xhat.shape:
        raise ShapeError(f"ssim: shapes {x.shape} and {xhat.shape} differ")
    if x.ndim == 3:
        return float(np.mean([ssim(a, b, window, c1, c2) for a, b in zip(x, xhat)]))
    if x.ndim != 2 or min(x.shape) < window:
        raise ShapeError(f"ssim: need a 2-D image at least {window} pixels per side, got {x.shape}")
    n = window * window
    mu_x = _box_sums(x, window) / n
    mu_y = _box_sums(xhat, window) / n
    var_x = _box_sums(x * x, window) / n - mu_x**2
    var_y = _box_sums(xhat * xhat, window) / n - mu_y**2
    cov = _box_sums(x * xhat, window) / n - mu_x * mu_y
    num = (2 * mu_x * mu_y + c1) * (2 * cov + c2)
    den = (mu_x**2 + mu_y**2 + c1) * (var_x + var_y + c2)
    return float(np.mean(num / den))


# -- feature space -------------------------------------------------------------------


class FeatureExtractor(Module):
    """Denoising autoencoder; the frozen encoder provides evaluation features."""

    kind = "feature"

    def __init__(self, seed: int = 0, feat_dim: int = 64, base: int = 16, image_size: int = 32):
        rng = np.random.default_rng(seed)
        self.feat_dim = feat_dim
        self.image_size = image_size
        self.base = base
        self.c1 = Conv2d(1, base, 3, rng, stride=2, pad=1)
        self.c2 = Conv2d(base, 2 * base, 3, rng, stride=2, pad=1)
        self.c3 = Conv2d(2 * base, 2 * base, 3, rng, stride=2, pad=1)
        self._flat = 2 * base * (image_size // 8) ** 2
        self.to_feat = Linear(self._flat, feat_dim, rng)
        self.from_feat = Linear(feat_dim, self._flat, rng)
        self.d1 = Conv2d(2 * base, 2 * base, 3, rng, pad=1)
        self.d2 = Conv2d(2 * base, base, 3, rng, pad=1)
        self.d3 = Conv2d(base, 1, 3, rng, pad=1)

    def encode(self, x: Tensor) -> Tensor:
        if x.ndim != 4 or x.shape[2] != self.image_size:
            raise ShapeError(f"expected (B, 1, {self.image_size}, {self.image_size}), got {x.shape}")
        h = T.relu(self.c1(x))
        h = T.relu(self.c2(h))
        h = T.relu(self.c3(h))
        return self.to_feat(h.reshape(x.shape[0], self._flat))

    def decode(self, f: Tensor) -> Tensor:
        s = self.image_size // 8
        h = self.from_feat(f).reshape(f.shape[0], 2 * self.base, s, s)
        h = T.relu(self.d1(upsample2x(h)))
        h = T.relu(self.d2(upsample2x(h)))
        return T.sigmoid(self.d3(upsample2x(h)))

    def features(self, images: np.ndarray, batch: int = 64) -> np.ndarray:
        """(N, S, S) images -> (N, feat_dim) float64, deterministic."""
        images = np.asarray(images, dtype=np.float64)
        out = []
        with T.no_grad():
            for i in range(0, len(images), batch):
                chunk = images[i : i + batch][:, None]
                out.append(self.encode(Tensor(chunk)).data)
        return np.concatenate(out, axis=0)


@dataclass
class FeatureStats:
    mean: np.ndarray  # (D,)
    cov: np.ndarray  # (D, D), symmetric

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64)
        self.cov = np.asarray(self.cov, dtype=np.float64)
        if self.cov.shape != (self.mean.size, self.mean.size):
            raise ShapeError(f"covariance {self.cov.shape} does not match mean length {self.mean.size}")
        if not np.allclose(self.cov, self.cov.T, atol=1e-8):
            raise GenspecError("covariance must be symmetric")


def feature_stats(features: np.ndarray) -> FeatureStats:
    """Sample mean and unbiased covariance of (N, D) feature vectors."""
    features = np.asarray(features, dtype=np.float64)
    if features.ndim != 2 or features.shape[0] < 2:
        raise GenspecError(f"need at least 2 feature vectors, got shape {features.shape}")
    mean = features.mean(axis=0)
    centered = features - mean
    cov = centered.T @ centered / (features.shape[0] - 1)
    return FeatureStats(mean=mean, cov=(cov + cov.T) / 2)


def _sqrt_psd(mat: np.ndarray) -> np.ndarray:
    vals, vecs = scipy.linalg.eigh(mat)
    vals = np.where(vals < 0, 0.0, vals)  # clamp numerical negatives
    return (vecs * np.sqrt(vals)) @ vecs.T


def frechet_distance(a: FeatureStats, b: FeatureStats) -> float:
    """||mu_a - mu_b||^2 + tr(S_a + S_b - 2 (S_a S_b)^{1/2}).

    The cross square root is computed through the symmetrized product
    S_a^{1/2} S_b S_a^{1/2}, whose eigenvalues are clamped at zero, so the
    result is real and non-negative.
    """
    if a.mean.size != b.mean.size:
        raise ShapeError(f"feature dims differ: {a.mean.size} vs {b.mean.size}")
    delta = a.mean - b.mean
    root_a = _sqrt_psd(a.cov)
    inner = root_a @ b.cov @ root_a
    inner = (inner + inner.T) / 2
    vals = scipy.linalg.eigvalsh(inner)
    vals = np.where(vals < 0, 0.0, vals)
    tr_sqrt = float(np.sum(np.sqrt(vals)))
    fid = float(delta @ delta + np.trace(a.cov) + np.trace(b.cov) - 2.0 * tr_sqrt)
    return max(0.0, fid)


def kid(features_a: np.ndarray, features_b: np.ndarray) -> float:
    """Unbiased MMD^2 with kernel (x.y/D + 1)^3; within-set diagonals excluded."""
    fa = np.asarray(features_a, dtype=np.float64)
    fb = np.asarray(features_b, dtype=np.float64)
    if fa.ndim != 2 or fb.ndim != 2 or fa.shape[0] < 2 or fb.shape[0] < 2:
        raise GenspecError(f"need at least 2 vectors per side, got {fa.shape} and {fb.shape}")
    if fa.shape[1] != fb.shape[1]:
        raise ShapeError(f"feature dims differ: {fa.shape} vs {fb.shape}")
    d = fa.shape[1]
    m, n = fa.shape[0], fb.shape[0]
    kaa = (fa @ fa.T / d + 1.0) ** 3
    kbb = (fb @ fb.T / d + 1.0) ** 3
    kab = (fa @ fb.T / d + 1.0) ** 3
    term_a = (kaa.sum() - np.trace(kaa)) / (m * (m - 1))
    term_b = (kbb.sum() - np.trace(kbb)) / (n * (n - 1))
    return float(term_a + term_b - 2.0 * kab.mean())


def time_per_sample(sampler, n: int, repeats: int = 3) -> float:
    """Median over `repeats` of wall-clock seconds per sample.

    `sampler(n)` must produce n samples; model construction/loading belongs
    outside the callable.
    """
    if n < 3:
        raise GenspecError(f"TPS needs n >= 3, got {n}")
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        sampler(n)
        times.append((time.perf_counter() - t0) / n)
    return float(np.median(times))
