"""Stage-II continuous prior: DDPM over tokenizer latents.

The schedule is linear in beta with an eta-parameterized sigma family; the
reverse step follows the predicted-z0 decomposition with a temperature
factor on the fresh-noise term. Inpainting re-imposes forward-noised known
latents after every reverse step, and injects the clean latents themselves
at t=0, so known cells of the output are bitwise equal to the input.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import GenspecError, ShapeError
from .nn import Conv2d, Linear, Module, timestep_embedding, upsample2x
from .tensor import Tensor


@dataclass
class NoiseSchedule:
    steps: int
    beta: np.ndarray  # (steps,), beta[t-1] belongs to timestep t
    alpha_bar: np.ndarray  # (steps+1,), alpha_bar[0] == 1
    sigma: np.ndarray  # (steps+1,), sigma[t] for t >= 1; sigma[0] unused
    eta: float


def make_schedule(steps: int = 200, beta_start: float = 1e-4, beta_end: float = 0.02,
                  eta: float = 1.0) -> NoiseSchedule:
    if steps < 1:
        raise GenspecError(f"schedule needs at least 1 step, got {steps}")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise GenspecError(f"beta range must satisfy 0 < start <= end < 1, got [{beta_start}, {beta_end}]")
    if not (0.0 <= eta <= 1.0):
        raise GenspecError(f"eta must lie in [0, 1], got {eta}")
    beta = np.linspace(beta_start, beta_end, steps)
    alpha_bar = np.concatenate([[1.0], np.cumprod(1.0 - beta)])
    if not np.all(np.diff(alpha_bar) < 0):
        raise GenspecError("alpha_bar must be strictly decreasing")
    sigma = np.zeros(steps + 1)
    ab_t = alpha_bar[1:]
    ab_prev = alpha_bar[:-1]
    sigma[1:] = eta * np.sqrt((1.0 - ab_prev) / (1.0 - ab_t)) * np.sqrt(1.0 - ab_t / ab_prev)
    if np.any(1.0 - ab_prev - sigma[1:] ** 2 < -1e-12):
        raise GenspecError("sigma exceeds the direction-term budget (1 - alpha_bar[t-1] - sigma^2 < 0)")
    return NoiseSchedule(steps=steps, beta=beta, alpha_bar=alpha_bar, sigma=sigma, eta=eta)


def forward_marginal(schedule: NoiseSchedule, z0: np.ndarray, t: int, eps: np.ndarray) -> np.ndarray:
    """Closed-form noising q(z_t | z_0). t = 0 returns z0 bitwise."""
    if not (0 <= t <= schedule.steps):
        raise GenspecError(f"timestep {t} outside [0, {schedule.steps}]")
    if t == 0:
        return np.array(z0, copy=True)
    ab = schedule.alpha_bar[t]
    return np.sqrt(ab) * z0 + np.sqrt(1.0 - ab) * eps


def forward_transition(schedule: NoiseSchedule, z_prev: np.ndarray, t: int,
                       rng: np.random.Generator) -> np.ndarray:
    """Single-step q(z_t | z_{t-1}); composing these must match the marginal."""
    if not (1 <= t <= schedule.steps):
        raise GenspecError(f"timestep {t} outside [1, {schedule.steps}]")
    b = schedule.beta[t - 1]
    return np.sqrt(1.0 - b) * z_prev + np.sqrt(b) * rng.standard_normal(z_prev.shape)


class DenoiserModel(Module):
    """Small conv U-shape predicting the noise component of z_t."""

    kind = "diffusion"

    def __init__(self, seed: int = 0, channels: int = 8, base: int = 32, temb_dim: int = 64):
        rng = np.random.default_rng(seed)
        self.channels = channels
        self.base = base
        self.temb_dim = temb_dim
        self.t1 = Linear(temb_dim // 2, temb_dim, rng)
        self.t2 = Linear(temb_dim, temb_dim, rng)
        self.d1a = Conv2d(channels, base, 3, rng, pad=1)
        self.d1b = Conv2d(base, base, 3, rng, pad=1)
        self.p1 = Linear(temb_dim, base, rng)
        self.d2a = Conv2d(base, 2 * base, 3, rng, stride=2, pad=1)
        self.d2b = Conv2d(2 * base, 2 * base, 3, rng, pad=1)
        self.p2 = Linear(temb_dim, 2 * base, rng)
        self.mid = Conv2d(2 * base, 2 * base, 3, rng, pad=1)
        self.u1 = Conv2d(2 * base, base, 3, rng, pad=1)
        self.u2 = Conv2d(2 * base, base, 3, rng, pad=1)  # after skip concat
        self.p3 = Linear(temb_dim, base, rng)
        self.out = Conv2d(base, channels, 3, rng, pad=1)

    def __call__(self, z_t: Tensor, t) -> Tensor:
        if z_t.ndim != 4 or z_t.shape[1] != self.channels:
            raise ShapeError(f"expected latent batch (B, {self.channels}, h, w), got {z_t.shape}")
        B = z_t.shape[0]
        t_arr = np.broadcast_to(np.asarray(t, dtype=np.float64), (B,))
        emb = Tensor(timestep_embedding(t_arr, self.temb_dim // 2))
        emb = self.t2(T.gelu(self.t1(emb)))  # (B, temb_dim)

        h1 = T.gelu(self.d1a(z_t) + self.p1(emb).reshape(B, -1, 1, 1))
        h1 = T.gelu(self.d1b(h1))
        h2 = T.gelu(self.d2a(h1) + self.p2(emb).reshape(B, -1, 1, 1))
        h2 = T.gelu(self.d2b(h2))
        m = T.gelu(self.mid(h2))
        up = T.gelu(self.u1(upsample2x(m)))
        joined = T.concat([up, h1], axis=1)
        u = T.gelu(self.u2(joined) + self.p3(emb).reshape(B, -1, 1, 1))
        return self.out(u)

    def as_sampler(self):
        """Pure-array callable f(z_t, t) -> predicted noise, for the samplers."""
        def f(z: np.ndarray, t) -> np.ndarray:
            with T.no_grad():
                return self(Tensor(z), t).data
        return f


def ddpm_loss(model, schedule: NoiseSchedule, z0: np.ndarray, rng: np.random.Generator) -> Tensor:
    """Noise-prediction MSE at uniformly drawn timesteps."""
    B = z0.shape[0]
    t = rng.integers(1, schedule.steps + 1, size=B)
    eps = rng.standard_normal(z0.shape)
    ab = schedule.alpha_bar[t].reshape(B, 1, 1, 1)
    z_t = np.sqrt(ab) * z0 + np.sqrt(1.0 - ab) * eps
    pred = model(Tensor(z_t), t)
    diff = pred - Tensor(eps)
    return (diff * diff).mean()


def reverse_step(z_t: np.ndarray, t: int, model, schedule: NoiseSchedule, tau: float,
                 rng: np.random.Generator) -> np.ndarray:
    """One reverse transition z_t -> z_{t-1} with temperature-scaled noise."""
    if not (1 <= t <= schedule.steps):
        raise GenspecError(f"timestep {t} outside [1, {schedule.steps}]")
    if tau < 0:
        raise GenspecError(f"temperature must be non-negative, got {tau}")
    ab_t = schedule.alpha_bar[t]
    ab_prev = schedule.alpha_bar[t - 1]
    sig = schedule.sigma[t]
    radicand = 1.0 - ab_prev - sig**2
    if radicand < 0:
        raise GenspecError(f"negative direction radicand {radicand} at t={t}: schedule invariant violated")
    eps_hat = model(z_t, t) if not isinstance(model, np.ndarray) else model
    z0_pred = (z_t - np.sqrt(1.0 - ab_t) * eps_hat) / np.sqrt(ab_t)
    out = np.sqrt(ab_prev) * z0_pred + np.sqrt(radicand) * eps_hat
    if tau > 0 and sig > 0:
        out = out + tau * sig * rng.standard_normal(z_t.shape)
    return out


def sample(model, schedule: NoiseSchedule, shape: tuple[int, ...], tau: float,
           rng: np.random.Generator, z_init: np.ndarray | None = None) -> np.ndarray:
    """Unconditional ancestral sampling from z_T ~ N(0, I)."""
    z = rng.standard_normal(shape) if z_init is None else np.array(z_init, copy=True)
    for t in range(schedule.steps, 0, -1):
        z = reverse_step(z, t, model, schedule, tau, rng)
    return z


def inpaint(model, schedule: NoiseSchedule, z_known: np.ndarray, mask: np.ndarray,
            tau: float, rng: np.random.Generator) -> np.ndarray:
    """Known-region injection: only cells with mask == 1 evolve freely.

    After each reverse step the known region is overwritten with a fresh
    forward-noised copy of z_known at the new timestep; the t = 0 injection
    writes z_known itself, which makes known cells bitwise exact.
    """
    try:
        mask = np.broadcast_to(np.asarray(mask, dtype=bool), z_known.shape)
    except ValueError:
        raise ShapeError(f"mask shape {np.shape(mask)} does not broadcast to latents {z_known.shape}") from None
    z = rng.standard_normal(z_known.shape)
    for t in range(schedule.steps, 0, -1):
        z = reverse_step(z, t, model, schedule, tau, rng)
        if t > 1:
            known_t = forward_marginal(schedule, z_known, t - 1, rng.standard_normal(z_known.shape))
        else:
            known_t = z_known
        z = np.where(mask, z, known_t)
    return z
