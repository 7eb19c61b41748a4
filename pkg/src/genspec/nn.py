"""Small neural building blocks on top of the autodiff tensor.

Modules own parameter tensors and expose them recursively via named_params(),
which doubles as the checkpoint state-dict. Every module takes an rng at
construction so a model build is reproducible from a seed.
"""

from __future__ import annotations

import math

import numpy as np

from . import tensor as T
from .errors import GenspecError
from .tensor import Tensor, parameter


class Module:
    def named_params(self, prefix: str = "") -> list[tuple[str, Tensor]]:
        out: list[tuple[str, Tensor]] = []
        for key, value in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(value, Tensor) and value.requires_grad:
                out.append((name, value))
            elif isinstance(value, Module):
                out.extend(value.named_params(f"{name}."))
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        out.extend(item.named_params(f"{name}.{i}."))
                    elif isinstance(item, Tensor) and item.requires_grad:
                        out.append((f"{name}.{i}", item))
        return out

    def params(self) -> list[Tensor]:
        return [p for _, p in self.named_params()]

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_params()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = dict(self.named_params())
        missing = sorted(set(own) - set(state))
        extra = sorted(set(state) - set(own))
        if missing or extra:
            raise GenspecError(f"state dict mismatch: missing {missing[:4]}, unexpected {extra[:4]}")
        for name, p in own.items():
            value = np.asarray(state[name], dtype=np.float64)
            if value.shape != p.shape:
                raise GenspecError(f"parameter {name} has shape {p.shape}, checkpoint has {value.shape}")
            p.data = value.copy()

    def param_count(self) -> int:
        return sum(p.size for p in self.params())


class Linear(Module):
    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator, bias: bool = True):
        bound = 1.0 / math.sqrt(n_in)
        self.w = parameter(rng.uniform(-bound, bound, (n_in, n_out)), name="w")
        self.b = parameter(np.zeros(n_out), name="b") if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        out = T.matmul(x, self.w)
        if self.b is not None:
            out = out + self.b
        return out


class Conv2d(Module):
    def __init__(self, c_in: int, c_out: int, k: int, rng: np.random.Generator,
                 stride: int = 1, pad: int = 0, bias: bool = True):
        bound = 1.0 / math.sqrt(c_in * k * k)
        self.w = parameter(rng.uniform(-bound, bound, (c_out, c_in, k, k)), name="w")
        self.b = parameter(np.zeros(c_out), name="b") if bias else None
        self.stride = stride
        self.pad = pad

    def __call__(self, x: Tensor) -> Tensor:
        out = T.conv2d(x, self.w, stride=self.stride, pad=self.pad)
        if self.b is not None:
            out = out + self.b.reshape(1, -1, 1, 1)
        return out


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-5):
        self.gamma = parameter(np.ones(dim), name="gamma")
        self.beta = parameter(np.zeros(dim), name="beta")
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return T.layernorm(x, self.gamma, self.beta, eps=self.eps)


class Embedding(Module):
    def __init__(self, count: int, dim: int, rng: np.random.Generator, scale: float = 0.02):
        self.table = parameter(rng.normal(0.0, scale, (count, dim)), name="table")

    def __call__(self, ids: np.ndarray) -> Tensor:
        return T.embed(self.table, ids)


def upsample2x(x: Tensor) -> Tensor:
    """Nearest-neighbor 2x upsampling, built from reshape + concat."""
    B, C, H, W = x.shape
    col = x.reshape(B, C, H, 1, W, 1)
    col = T.concat([col, col], axis=3)
    col = T.concat([col, col], axis=5)
    return col.reshape(B, C, 2 * H, 2 * W)


def timestep_embedding(t: np.ndarray, dim: int, max_period: float = 10_000.0) -> np.ndarray:
    """Sinusoidal position features for integer timesteps, shape (len(t), dim)."""
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    half = dim // 2
    freqs = np.exp(-math.log(max_period) * np.arange(half) / half)
    angles = t[:, None] * freqs[None, :]
    emb = np.concatenate([np.cos(angles), np.sin(angles)], axis=1)
    if dim % 2:
        emb = np.concatenate([emb, np.zeros((len(t), 1))], axis=1)
    return emb
