"""Stage-I tokenizers: VAE (continuous latents) and VQ (discrete codebook).

Both share a conv encoder/decoder pair with total downsampling factor F=4,
so 32x32 images become 8x8 latent grids (64 tokens for Stage II). The VQ
codebook trains purely by gradient on the codebook loss term; the
straight-through estimator carries decoder gradients past quantization.
An optional patch-discriminator adversarial branch is provided but off by
default.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import GenspecError, ShapeError
from .nn import Conv2d, Module, upsample2x
from .tensor import Tensor, parameter, stop_gradient

FACTOR = 4  # two stride-2 stages


@dataclass
class VaePosterior:
    mu: Tensor  # (B, C, h, w)
    logvar: Tensor

    def __post_init__(self):
        if self.mu.shape != self.logvar.shape:
            raise ShapeError(f"posterior mu {self.mu.shape} and logvar {self.logvar.shape} differ")


class _Encoder(Module):
    def __init__(self, out_channels: int, rng: np.random.Generator, base: int = 16):
        self.c1 = Conv2d(1, base, 3, rng, pad=1)
        self.c2 = Conv2d(base, 2 * base, 3, rng, stride=2, pad=1)
        self.c3 = Conv2d(2 * base, 2 * base, 3, rng, stride=2, pad=1)
        self.head = Conv2d(2 * base, out_channels, 3, rng, pad=1)

    def __call__(self, x: Tensor) -> Tensor:
        h = T.relu(self.c1(x))
        h = T.relu(self.c2(h))
        h = T.relu(self.c3(h))
        return self.head(h)


class _Decoder(Module):
    def __init__(self, in_channels: int, rng: np.random.Generator, base: int = 16):
        self.c1 = Conv2d(in_channels, 2 * base, 3, rng, pad=1)
        self.c2 = Conv2d(2 * base, 2 * base, 3, rng, pad=1)
        self.c3 = Conv2d(2 * base, base, 3, rng, pad=1)
        self.out = Conv2d(base, 1, 3, rng, pad=1)

    def __call__(self, z: Tensor) -> Tensor:
        h = T.relu(self.c1(z))
        h = upsample2x(h)
        h = T.relu(self.c2(h))
        h = upsample2x(h)
        h = T.relu(self.c3(h))
        return T.sigmoid(self.out(h))


def _check_divisible(x: Tensor) -> None:
    if x.ndim != 4 or x.shape[1] != 1:
        raise ShapeError(f"expected image batch (B, 1, H, W), got {x.shape}")
    if x.shape[2] % FACTOR or x.shape[3] % FACTOR:
        raise ShapeError(f"image extent {x.shape} not divisible by downsampling factor {FACTOR}")


class VaeModel(Module):
    """Continuous tokenizer trained on the evidence lower bound."""

    kind = "vae"

    def __init__(self, seed: int = 0, z_channels: int = 8, base: int = 16):
        rng = np.random.default_rng(seed)
        self.z_channels = z_channels
        self.base = base
        self.encoder = _Encoder(2 * z_channels, rng, base)
        self.decoder = _Decoder(z_channels, rng, base)

    def encode(self, x: Tensor) -> VaePosterior:
        _check_divisible(x)
        h = self.encoder(x)
        zc = self.z_channels
        return VaePosterior(mu=h[:, :zc], logvar=h[:, zc:])

    def sample(self, post: VaePosterior, rng: np.random.Generator) -> Tensor:
        eps = rng.standard_normal(post.mu.shape)
        return post.mu + T.exp(post.logvar * 0.5) * Tensor(eps)

    def decode(self, z: Tensor) -> Tensor:
        return self.decoder(z)

    def reconstruct(self, x: Tensor) -> Tensor:
        """Deterministic reconstruction through the posterior mean."""
        return self.decode(self.encode(x).mu)


def kl_to_standard_normal(post: VaePosterior) -> Tensor:
    """Closed-form KL(q || N(0, I)), summed over latent dims, batch-averaged."""
    batch = post.mu.shape[0]
    per_element = post.mu * post.mu + T.exp(post.logvar) - 1.0 + (-1.0 * post.logvar)
    return per_element.sum() * (0.5 / batch)


def elbo_loss(x: Tensor, xhat: Tensor, post: VaePosterior, kl_weight: float) -> Tensor:
    """Mean-squared reconstruction plus weighted closed-form KL (minimized)."""
    diff = x - xhat
    recon = (diff * diff).mean()
    return recon + kl_weight * kl_to_standard_normal(post)


# -- vector quantization ---------------------------------------------------------


class VqModel(Module):
    """Discrete tokenizer: nearest-codebook-entry quantization, K-way tokens."""

    kind = "vq"

    def __init__(self, seed: int = 0, K: int = 64, dim: int = 8, base: int = 16):
        rng = np.random.default_rng(seed)
        if K < 2:
            raise GenspecError(f"codebook needs at least 2 entries, got {K}")
        self.K = K
        self.dim = dim
        self.base = base
        self.encoder = _Encoder(dim, rng, base)
        self.decoder = _Decoder(dim, rng, base)
        self.codebook = parameter(rng.normal(0.0, 0.1, (K, dim)), name="codebook")

    def encode(self, x: Tensor) -> Tensor:
        _check_divisible(x)
        return self.encoder(x)

    def quantize(self, z: Tensor) -> tuple[Tensor, np.ndarray]:
        return vq_quantize(z, self.codebook)

    def decode(self, z_q: Tensor) -> Tensor:
        return self.decoder(z_q)

    def tokenize(self, x: Tensor) -> np.ndarray:
        """Image batch -> (B, h, w) token indices."""
        with T.no_grad():
            _, tokens = self.quantize(self.encode(x))
        return tokens

    def decode_tokens(self, tokens: np.ndarray) -> Tensor:
        """Token indices -> image batch (no gradient provenance needed)."""
        z = tokens_to_latent(self.codebook, tokens)
        return self.decode(z)

    def reconstruct(self, x: Tensor) -> Tensor:
        z_q, _ = self.quantize(self.encode(x))
        return self.decode(z_q)

    def seed_codebook(self, x: Tensor, rng: np.random.Generator) -> None:
        """Re-initialize entries from encoder outputs so all K start in-distribution."""
        with T.no_grad():
            z = self.encode(x).data
        vecs = z.transpose(0, 2, 3, 1).reshape(-1, self.dim)
        if len(vecs) < self.K:
            raise GenspecError(f"need at least {self.K} latent cells to seed the codebook, got {len(vecs)}")
        pick = rng.choice(len(vecs), size=self.K, replace=False)
        jitter = rng.normal(0.0, 1e-3, (self.K, self.dim))  # break exact duplicates
        self.codebook.data = vecs[pick] + jitter


def vq_quantize(z: Tensor, codebook: Tensor) -> tuple[Tensor, np.ndarray]:
    """Snap each latent cell to its nearest codebook entry.

    Returns the straight-through latent (forward value = codebook entry,
    backward = identity to z) and the (B, h, w) token indices. Ties pick the
    lowest index. The returned tensor carries quantization provenance in
    .meta so vq_loss can train the codebook.
    """
    if z.ndim != 4:
        raise ShapeError(f"expected latent batch (B, dim, h, w), got {z.shape}")
    K, dim = codebook.shape
    if z.shape[1] != dim:
        raise ShapeError(f"latent channels {z.shape} do not match codebook dim {codebook.shape}")
    B, _, h, w = z.shape
    flat = z.data.transpose(0, 2, 3, 1).reshape(-1, dim)  # (N, dim)
    # exact squared distances via explicit differences keep ties exact
    d2 = np.square(flat[:, None, :] - codebook.data[None, :, :]).sum(axis=2)
    tokens = np.argmin(d2, axis=1)  # first occurrence = lowest index on ties
    e_val = codebook.data[tokens].reshape(B, h, w, dim).transpose(0, 3, 1, 2)
    z_q = z + stop_gradient(Tensor(e_val) - z)
    z_q.meta = {"codebook": codebook, "tokens": tokens.reshape(B, h, w)}
    return z_q, tokens.reshape(B, h, w)


def tokens_to_latent(codebook: Tensor, tokens: np.ndarray) -> Tensor:
    """(B, h, w) indices -> (B, dim, h, w) latent of codebook entries."""
    B, h, w = tokens.shape
    e = T.embed(codebook, tokens.reshape(-1))
    return e.reshape(B, h, w, codebook.shape[1]).transpose((0, 3, 1, 2))


def vq_loss(x: Tensor, xhat: Tensor, z: Tensor, z_q: Tensor, beta: float) -> Tensor:
    """Reconstruction + codebook + commitment terms, all squared L2 sums.

    The codebook term re-derives the selected entries from the provenance on
    z_q (tokens + codebook), so its gradient trains the codebook and is
    exactly zero with respect to z. Without provenance the term is constant.
    The commitment gradient with respect to z is exactly 2*beta*(z - z_q).
    """
    if beta < 0:
        raise GenspecError(f"beta must be non-negative, got {beta}")
    diff = x - xhat
    recon = (diff * diff).sum()
    if z_q.meta and "codebook" in z_q.meta:
        e = tokens_to_latent(z_q.meta["codebook"], z_q.meta["tokens"])
    else:
        e = stop_gradient(z_q)
    d_code = stop_gradient(z) - e
    codebook_term = (d_code * d_code).sum()
    d_commit = z - stop_gradient(z_q)
    commit_term = (d_commit * d_commit).sum()
    return recon + codebook_term + beta * commit_term


def codebook_utilization(tokens: np.ndarray, K: int) -> float:
    return np.unique(tokens).size / K


# -- adversarial branch -----------------------------------------------------------


class PatchDiscriminator(Module):
    """Small conv net emitting a logit per local patch."""

    def __init__(self, seed: int = 0, base: int = 16):
        rng = np.random.default_rng(seed)
        self.c1 = Conv2d(1, base, 3, rng, stride=2, pad=1)
        self.c2 = Conv2d(base, 2 * base, 3, rng, stride=2, pad=1)
        self.head = Conv2d(2 * base, 1, 3, rng, pad=1)

    def __call__(self, x: Tensor) -> Tensor:
        h = T.relu(self.c1(x))
        h = T.relu(self.c2(h))
        return self.head(h)


_PROB_FLOOR = 1e-7


def _clamp_unit(p: Tensor) -> Tensor:
    """Clamp probabilities into [1e-7, 1 - 1e-7] with pass-through gradients inside."""
    lo = _PROB_FLOOR + T.relu(p - _PROB_FLOOR)
    return (1.0 - _PROB_FLOOR) - T.relu((1.0 - _PROB_FLOOR) - lo)


def gan_losses(x: Tensor, xhat: Tensor, disc: PatchDiscriminator) -> tuple[Tensor, Tensor]:
    """Generator and discriminator objectives, averaged over the patch map.

    gen = -E[log D(xhat)]; disc = -E[log D(x)] - E[log(1 - D(xhat))]. The
    discriminator term sees xhat through a stop-gradient so alternating
    updates never push generator parameters. Probabilities reaching the
    1e-7 clamp are flagged with a RuntimeWarning.
    """
    p_fake = T.sigmoid(disc(xhat))
    p_real = T.sigmoid(disc(stop_gradient(x)))
    p_fake_d = T.sigmoid(disc(stop_gradient(xhat)))
    eps = _PROB_FLOOR
    raw = np.concatenate([p_fake.data.ravel(), p_real.data.ravel()])
    if np.any(raw < eps) or np.any(raw > 1.0 - eps):
        warnings.warn("discriminator probability clamped at 1e-7", RuntimeWarning, stacklevel=2)
    gen_loss = -1.0 * T.log(_clamp_unit(p_fake)).mean()
    disc_loss = -1.0 * T.log(_clamp_unit(p_real)).mean() - T.log(_clamp_unit(1.0 - p_fake_d)).mean()
    return gen_loss, disc_loss


def vqgan_total(vq_term: Tensor, gen_term: Tensor, lam: float) -> Tensor:
    if lam < 0:
        raise GenspecError(f"lambda must be non-negative, got {lam}")
    return vq_term + lam * gen_term
