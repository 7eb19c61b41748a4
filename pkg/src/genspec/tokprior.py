"""Stage-II discrete priors over VQ token grids.

One transformer serves both factorizations: causal mode predicts each token
from its raster-order prefix (a BOS embedding fills position 0), and
bidirectional mode predicts masked positions given unmasked context, with a
reserved MASK token extending the vocabulary. Decoding offers sequential
top-k/temperature sampling and MaskGIT-style iterative parallel decoding
under a cosine keep-schedule.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import GenspecError, ShapeError
from .nn import Embedding, LayerNorm, Linear, Module
from .tensor import Tensor, stop_gradient


@dataclass
class MaskRatioDist:
    mean: float
    std: float
    lo: float
    hi: float

    def __post_init__(self):
        if not (0.0 <= self.lo < self.hi <= 1.0):
            raise GenspecError(f"truncation interval must satisfy 0 <= lo < hi <= 1, got [{self.lo}, {self.hi}]")
        if self.std <= 0:
            raise GenspecError(f"mask ratio stddev must be positive, got {self.std}")


# Mask-ratio rows for the two masked-prior training styles
MASKGIT_RATIOS = MaskRatioDist(mean=0.5, std=0.25, lo=0.05, hi=0.95)
MAGE_RATIOS = MaskRatioDist(mean=0.55, std=0.25, lo=0.5, hi=1.0)


def sample_mask_ratio(dist: MaskRatioDist, rng: np.random.Generator) -> float:
    """Truncated normal via rejection; the interval is narrow enough that
    the loop terminates in a handful of draws."""
    while True:
        r = rng.normal(dist.mean, dist.std)
        if dist.lo <= r <= dist.hi:
            return float(r)


class _Block(Module):
    def __init__(self, d: int, heads: int, rng: np.random.Generator):
        if d % heads:
            raise GenspecError(f"model width {d} not divisible by {heads} heads")
        self.heads = heads
        self.ln1 = LayerNorm(d)
        self.qkv = Linear(d, 3 * d, rng)
        self.proj = Linear(d, d, rng)
        self.ln2 = LayerNorm(d)
        self.ff1 = Linear(d, 4 * d, rng)
        self.ff2 = Linear(4 * d, d, rng)

    def __call__(self, x: Tensor, attn_bias: np.ndarray | None) -> Tensor:
        B, n, d = x.shape
        dh = d // self.heads
        qkv = self.qkv(self.ln1(x))  # (B, n, 3d)
        qkv = qkv.reshape(B, n, 3, self.heads, dh).transpose((2, 0, 3, 1, 4))
        q, k, v = qkv[0], qkv[1], qkv[2]  # (B, heads, n, dh)
        scores = T.matmul(q, k.transpose((0, 1, 3, 2))) * (1.0 / math.sqrt(dh))
        if attn_bias is not None:
            scores = scores + Tensor(attn_bias)
        att = T.softmax(scores, axis=-1)
        mixed = T.matmul(att, v)  # (B, heads, n, dh)
        mixed = mixed.transpose((0, 2, 1, 3)).reshape(B, n, d)
        x = x + self.proj(mixed)
        return x + self.ff2(T.gelu(self.ff1(self.ln2(x))))


class SeqModel(Module):
    """Small transformer over token grids; K-way logits per position."""

    def __init__(self, seed: int = 0, K: int = 64, seq_len: int = 64, mode: str = "causal",
                 d_model: int = 64, heads: int = 4, blocks: int = 3):
        if mode not in ("causal", "bidirectional"):
            raise GenspecError(f"attention mode must be causal or bidirectional, got {mode!r}")
        rng = np.random.default_rng(seed)
        self.K = K
        self.seq_len = seq_len
        self.mode = mode
        self.d_model = d_model
        self.heads = heads
        self.n_blocks = blocks
        self.special = K  # BOS in causal mode, MASK in bidirectional mode
        self.tok = Embedding(K + 1, d_model, rng)
        self.pos = Embedding(seq_len, d_model, rng)
        self.blocks = [_Block(d_model, heads, rng) for _ in range(blocks)]
        self.ln_out = LayerNorm(d_model)
        self.head = Linear(d_model, K, rng)
        if mode == "causal":
            # additive bias: -1e9 on strictly-future keys; exp underflows to 0
            bias = np.triu(np.full((seq_len, seq_len), -1e9), k=1)
            self._attn_bias = bias[None, None]
        else:
            self._attn_bias = None
        self.kind = mode

    def _forward(self, ids: np.ndarray) -> Tensor:
        """Input ids (already shifted/masked) of length m <= seq_len."""
        ids = np.asarray(ids, dtype=np.int64)
        m = ids.shape[1] if ids.ndim == 2 else -1
        if ids.ndim != 2 or not (1 <= m <= self.seq_len):
            raise ShapeError(f"expected ids (B, m<={self.seq_len}), got {ids.shape}")
        if ids.min() < 0 or ids.max() > self.special:
            raise ShapeError(f"token id outside [0, {self.special}]: range [{ids.min()}, {ids.max()}]")
        x = self.tok(ids) + self.pos(np.arange(m))
        bias = self._attn_bias[:, :, :m, :m] if self._attn_bias is not None else None
        for block in self.blocks:
            x = block(x, bias)
        return self.head(self.ln_out(x))  # (B, m, K)

    def logits(self, s: np.ndarray) -> Tensor:
        """Causal: position i sees BOS + s_<i and predicts s_i.
        Bidirectional: position i sees the full (partially MASKed) grid."""
        s = np.asarray(s, dtype=np.int64)
        if self.mode == "causal":
            shifted = np.concatenate([np.full((s.shape[0], 1), self.special), s[:, :-1]], axis=1)
            return self._forward(shifted)
        return self._forward(s)


def log_softmax(logits: Tensor, axis: int = -1) -> Tensor:
    """Numerically safe log-probabilities (shift by a constant max)."""
    shift = logits - stop_gradient(Tensor(logits.data.max(axis=axis, keepdims=True)))
    lse = T.log(T.exp(shift).sum(axis=axis, keepdims=True))
    return shift - lse


def causal_nll(model: SeqModel, s: np.ndarray) -> Tensor:
    """Mean over positions of -log p(s_i | s_<i)."""
    s = np.asarray(s, dtype=np.int64)
    if s.min() < 0 or s.max() >= model.K:
        raise ShapeError(f"token index outside [0, {model.K}): range [{s.min()}, {s.max()}]")
    logp = log_softmax(model.logits(s))
    picked = T.gather(logp, s[:, :, None], axis=-1)
    return -1.0 * picked.mean()


def masked_nll(model: SeqModel, s: np.ndarray, mask: np.ndarray) -> Tensor:
    """Mean of -log p(s_m | s_unmasked) over masked positions only."""
    s = np.asarray(s, dtype=np.int64)
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != s.shape:
        raise ShapeError(f"mask shape {mask.shape} does not match tokens {s.shape}")
    count = int(mask.sum())
    if count == 0:
        raise GenspecError("masked loss undefined for an empty mask")
    if s.min() < 0 or s.max() >= model.K:
        raise ShapeError(f"token index outside [0, {model.K}): range [{s.min()}, {s.max()}]")
    ids = np.where(mask, model.special, s)
    logp = log_softmax(model.logits(ids))
    picked = T.gather(logp, s[:, :, None], axis=-1).reshape(*s.shape)
    gated = picked * mask.astype(np.float64)  # unmasked paths contribute exactly zero
    return -1.0 * gated.sum() * (1.0 / count)


def _top_k_filter(row: np.ndarray, k: int) -> np.ndarray:
    """Indices of the k highest logits; ties at the boundary favor lower index."""
    order = np.argsort(-row, kind="stable")
    return order[:k]


def sample_causal(model: SeqModel, prefix: np.ndarray, tau: float, top_k: int,
                  rng: np.random.Generator) -> np.ndarray:
    """Sequential decoding from a fixed prefix to full grids.

    tau == 0 means greedy argmax; otherwise tokens are drawn from
    softmax(logits / tau) restricted to the top_k entries.
    """
    prefix = np.asarray(prefix, dtype=np.int64)
    if prefix.ndim != 2:
        raise ShapeError(f"prefix must be (B, m), got {prefix.shape}")
    if not (0 < top_k <= model.K):
        raise GenspecError(f"top_k must lie in [1, {model.K}], got {top_k}")
    if tau < 0:
        raise GenspecError(f"temperature must be non-negative, got {tau}")
    B, m = prefix.shape
    n = model.seq_len
    s = np.zeros((B, n), dtype=np.int64)
    s[:, :m] = prefix
    bos = np.full((B, 1), model.special, dtype=np.int64)
    with T.no_grad():
        for i in range(m, n):
            # feed only the live prefix; later positions cannot influence row i
            inp = np.concatenate([bos, s[:, :i]], axis=1)
            logits = model._forward(inp).data[:, -1, :]
            for b in range(B):
                row = logits[b]
                if tau == 0:
                    s[b, i] = int(np.argmax(row))
                    continue
                keep = _top_k_filter(row, top_k)
                scaled = row[keep] / tau
                scaled -= scaled.max()
                p = np.exp(scaled)
                p /= p.sum()
                s[b, i] = int(keep[rng.choice(len(keep), p=p)])
    return s


def _gumbel(rng: np.random.Generator, shape) -> np.ndarray:
    u = rng.uniform(1e-12, 1.0, size=shape)
    return -np.log(-np.log(u))


def maskgit_remaining(m_total: int, steps: int, r: int) -> int:
    """Masked tokens still open after round r of `steps` (cosine schedule)."""
    if r >= steps:
        return 0  # cos(pi/2) is 6e-17 in floats; ceil would leave one open forever
    return math.ceil(m_total * math.cos(math.pi / 2 * r / steps))


def maskgit_decode(model: SeqModel, s_known: np.ndarray, mask: np.ndarray, steps: int,
                   tau: float, rng: np.random.Generator) -> np.ndarray:
    """Iterative parallel decoding of the masked positions.

    Each round predicts all open positions at once, draws Gumbel candidates
    at the round temperature tau_r (annealed linearly from tau to 0), and
    fixes the highest-confidence ones so the number still open follows the
    cosine schedule. Known tokens are never rewritten.
    """
    if steps < 1:
        raise GenspecError(f"decode needs at least 1 round, got {steps}")
    if tau < 0:
        raise GenspecError(f"temperature must be non-negative, got {tau}")
    s = np.array(np.asarray(s_known, dtype=np.int64), copy=True)
    open_mask = np.array(np.asarray(mask, dtype=bool), copy=True)
    if open_mask.shape != s.shape:
        raise ShapeError(f"mask shape {open_mask.shape} does not match tokens {s.shape}")
    B, n = s.shape
    m_total = open_mask.sum(axis=1)  # per sample
    with T.no_grad():
        for r in range(1, steps + 1):
            if not open_mask.any():
                break
            tau_r = tau * (steps - r) / (steps - 1) if steps > 1 else tau
            ids = np.where(open_mask, model.special, s)
            logits = model.logits(ids).data  # (B, n, K)
            shift = logits - logits.max(axis=-1, keepdims=True)
            logp = shift - np.log(np.exp(shift).sum(axis=-1, keepdims=True))
            if tau_r > 0:
                cand = np.argmax(logits / tau_r + _gumbel(rng, logits.shape), axis=-1)
                conf = np.take_along_axis(logp, cand[..., None], axis=-1)[..., 0]
                conf = conf + tau_r * _gumbel(rng, conf.shape)
            else:
                cand = np.argmax(logits, axis=-1)
                conf = np.take_along_axis(logp, cand[..., None], axis=-1)[..., 0]
            for b in range(B):
                open_b = np.flatnonzero(open_mask[b])
                if open_b.size == 0:
                    continue
                remaining = maskgit_remaining(int(m_total[b]), steps, r)
                fix_count = open_b.size - remaining
                if fix_count <= 0:
                    continue
                ranked = open_b[np.argsort(-conf[b, open_b], kind="stable")]
                chosen = ranked[:fix_count]
                s[b, chosen] = cand[b, chosen]
                open_mask[b, chosen] = False
    return s
