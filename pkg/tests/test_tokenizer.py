"""Tokenizer contracts: ELBO pieces, quantization, straight-through, GAN terms."""

import numpy as np
import pytest

from genspec import tensor as T
from genspec.errors import ShapeError
from genspec.tensor import Tensor
from genspec.tokenizer import (
    PatchDiscriminator,
    VaeModel,
    VaePosterior,
    VqModel,
    codebook_utilization,
    elbo_loss,
    gan_losses,
    kl_to_standard_normal,
    vq_loss,
    vq_quantize,
    vqgan_total,
)


def _post(mu, logvar):
    return VaePosterior(mu=Tensor(mu), logvar=Tensor(logvar))


# -- VAE -----------------------------------------------------------------------


def test_encode_decode_shapes():
    m = VaeModel(seed=0, z_channels=8)
    x = Tensor(np.random.default_rng(0).uniform(0, 1, (2, 1, 32, 32)))
    post = m.encode(x)
    assert post.mu.shape == (2, 8, 8, 8)
    out = m.decode(post.mu)
    assert out.shape == (2, 1, 32, 32)
    assert np.all(out.data >= 0) and np.all(out.data <= 1)


def test_encode_rejects_indivisible_size():
    m = VaeModel(seed=0)
    with pytest.raises(ShapeError):
        m.encode(Tensor(np.zeros((1, 1, 30, 30))))


def test_tiny_logvar_collapses_sample_to_mu():
    m = VaeModel(seed=0)
    mu = np.random.default_rng(1).normal(size=(2, 8, 4, 4))
    post = _post(mu, np.full(mu.shape, -30.0))
    z = m.sample(post, np.random.default_rng(2))
    assert np.allclose(z.data, mu, atol=1e-6)


def test_kl_of_standard_normal_is_zero():
    post = _post(np.zeros((1, 4)), np.zeros((1, 4)))
    assert kl_to_standard_normal(post).item() == 0.0


def test_kl_closed_form_pinned_value():
    post = _post(np.array([[1.0, 0.0]]), np.zeros((1, 2)))
    assert np.isclose(kl_to_standard_normal(post).item(), 0.5)


def test_kl_matches_monte_carlo():
    rng = np.random.default_rng(0)
    mu = rng.normal(0, 0.5, size=4)
    logvar = rng.normal(0, 0.3, size=4)
    post = _post(mu[None], logvar[None])
    closed = kl_to_standard_normal(post).item()

    n = 100_000
    std = np.exp(logvar / 2)
    z = mu + std * rng.standard_normal((n, 4))
    log_q = -0.5 * (((z - mu) / std) ** 2 + logvar + np.log(2 * np.pi)).sum(axis=1)
    log_p = -0.5 * (z**2 + np.log(2 * np.pi)).sum(axis=1)
    mc = float(np.mean(log_q - log_p))
    assert abs(closed - mc) / abs(closed) < 0.01


def test_elbo_zero_at_perfect_fit():
    x = Tensor(np.full((1, 1, 4, 4), 0.25))
    post = _post(np.zeros((1, 2, 1, 1)), np.zeros((1, 2, 1, 1)))
    assert elbo_loss(x, x, post, kl_weight=1.0).item() == 0.0


def test_elbo_kl_weight_zero_is_pure_mse():
    rng = np.random.default_rng(3)
    x = Tensor(rng.uniform(0, 1, (2, 1, 4, 4)))
    xh = Tensor(rng.uniform(0, 1, (2, 1, 4, 4)))
    post = _post(rng.normal(size=(2, 3)), rng.normal(size=(2, 3)))
    got = elbo_loss(x, xh, post, kl_weight=0.0).item()
    assert np.isclose(got, np.mean((x.data - xh.data) ** 2))


def test_reparameterized_moments():
    m = VaeModel(seed=0)
    n = 100_000
    post = _post(np.full((n, 1, 1, 1), 0.3), np.full((n, 1, 1, 1), -0.5))
    z = m.sample(post, np.random.default_rng(5)).data.ravel()
    assert abs(z.mean() - 0.3) < 0.02 * max(1, abs(0.3))
    assert abs(z.var() - np.exp(-0.5)) / np.exp(-0.5) < 0.02


# -- VQ ------------------------------------------------------------------------


def test_nearest_entry_and_tie_rule():
    cb = Tensor(np.array([[0.0, 0.0], [1.0, 1.0]]))
    z = Tensor(np.array([0.9, 0.8]).reshape(1, 2, 1, 1))
    _, tokens = vq_quantize(z, cb)
    assert tokens[0, 0, 0] == 1
    z_tie = Tensor(np.array([0.5, 0.5]).reshape(1, 2, 1, 1))
    _, tokens = vq_quantize(z_tie, cb)
    assert tokens[0, 0, 0] == 0  # equidistant -> lowest index


def test_quantize_matches_brute_force():
    rng = np.random.default_rng(7)
    cb = Tensor(rng.normal(size=(16, 4)))
    z = Tensor(rng.normal(size=(3, 4, 5, 5)))
    _, tokens = vq_quantize(z, cb)
    flat = z.data.transpose(0, 2, 3, 1).reshape(-1, 4)
    for i, vec in enumerate(flat):
        dists = [np.sum((vec - e) ** 2) for e in cb.data]
        assert tokens.reshape(-1)[i] == int(np.argmin(dists))


def test_indices_invariant_to_farther_entry():
    rng = np.random.default_rng(8)
    cb = rng.normal(size=(8, 3))
    z = Tensor(rng.normal(size=(2, 3, 4, 4)))
    _, before = vq_quantize(z, Tensor(cb))
    far = np.concatenate([cb, np.full((1, 3), 1e6)])
    _, after = vq_quantize(z, Tensor(far))
    assert np.array_equal(before, after)


def test_straight_through_gradient_is_identity():
    rng = np.random.default_rng(9)
    cb = Tensor(rng.normal(size=(4, 2)))
    w = rng.normal(size=(1, 2, 1, 1))

    z1 = Tensor(rng.normal(size=(1, 2, 1, 1)), requires_grad=True)
    z_q, _ = vq_quantize(z1, cb)
    (z_q * Tensor(w)).sum().backward()
    g_quantized = z1.grad.copy()

    z2 = Tensor(z1.data, requires_grad=True)
    (z2 * Tensor(w)).sum().backward()
    assert np.array_equal(g_quantized, z2.grad)


def test_vq_loss_zero_at_fixed_point():
    x = Tensor(np.full((1, 1, 2, 2), 0.5))
    z = Tensor(np.ones((1, 2, 1, 1)))
    z_q = Tensor(np.ones((1, 2, 1, 1)))
    assert vq_loss(x, x, z, z_q, beta=0.25).item() == 0.0


def test_codebook_term_gradient_wrt_z_is_exactly_zero():
    rng = np.random.default_rng(10)
    cb = Tensor(rng.normal(size=(4, 2)), requires_grad=True)
    z = Tensor(rng.normal(size=(1, 2, 2, 2)), requires_grad=True)
    z_q, _ = vq_quantize(z, cb)
    x = Tensor(rng.uniform(0, 1, (1, 1, 8, 8)))
    # beta=0 and x == xhat isolates the middle (codebook) term
    loss = vq_loss(x, x, z, z_q, beta=0.0)
    loss.backward()
    assert z.grad is None or np.all(z.grad == 0.0)
    assert cb.grad is not None and np.any(cb.grad != 0.0)


def test_commitment_gradient_is_2beta_z_minus_zq():
    rng = np.random.default_rng(11)
    cb = Tensor(rng.normal(size=(4, 2)))
    beta = 0.25
    z = Tensor(rng.normal(size=(1, 2, 2, 2)), requires_grad=True)
    z_q, _ = vq_quantize(z, cb)
    x = Tensor(rng.uniform(0, 1, (1, 1, 8, 8)))
    loss = vq_loss(x, x, z, z_q, beta=beta)
    loss.backward()
    assert np.allclose(z.grad, 2 * beta * (z.data - z_q.data), atol=1e-12)


def test_commitment_gradient_matches_finite_difference():
    rng = np.random.default_rng(12)
    cb_data = rng.normal(size=(4, 2))
    z0 = rng.normal(size=(1, 2, 2, 2))
    x = Tensor(rng.uniform(0, 1, (1, 1, 8, 8)))
    beta = 0.25

    z = Tensor(z0, requires_grad=True)
    z_q, _ = vq_quantize(z, Tensor(cb_data))
    vq_loss(x, x, z, z_q, beta).backward()

    # FD must respect the stop-gradient boundaries: the recon and codebook
    # terms are frozen at the base point, only the commitment term moves
    e_base = z_q.data.copy()

    def f(z_np):
        return beta * np.sum((z_np - e_base) ** 2)

    h = 1e-6
    flat = z0.ravel()
    for i in range(flat.size):
        hi = flat.copy()
        hi[i] += h
        lo = flat.copy()
        lo[i] -= h
        fd = (f(hi.reshape(z0.shape)) - f(lo.reshape(z0.shape))) / (2 * h)
        assert abs(z.grad.ravel()[i] - fd) < 1e-4


def test_recon_only_loss_never_touches_codebook():
    rng = np.random.default_rng(13)
    m = VqModel(seed=0, K=8, dim=4)
    x = Tensor(rng.uniform(0, 1, (2, 1, 32, 32)))
    z = m.encode(x)
    z_q, _ = m.quantize(z)
    xhat = m.decode(z_q)
    diff = x - xhat
    (diff * diff).sum().backward()
    assert m.codebook.grad is None


def test_codebook_utilization_counts_distinct():
    tokens = np.array([[0, 1], [1, 3]])
    assert codebook_utilization(tokens, K=8) == 3 / 8


# -- GAN branch ------------------------------------------------------------------


def test_coin_flip_discriminator_losses():
    disc = PatchDiscriminator(seed=0)
    for p in disc.params():
        p.data = np.zeros_like(p.data)  # logits identically 0 -> D = 0.5
    rng = np.random.default_rng(14)
    x = Tensor(rng.uniform(0, 1, (2, 1, 32, 32)))
    xhat = Tensor(rng.uniform(0, 1, (2, 1, 32, 32)))
    gen, dis = gan_losses(x, xhat, disc)
    assert np.isclose(gen.item(), np.log(2), atol=1e-9)
    assert np.isclose(dis.item(), 2 * np.log(2), atol=1e-9)


def test_patch_map_equals_scalar_case():
    class Stub:
        def __init__(self, shape):
            self.shape = shape

        def __call__(self, x):
            return Tensor(np.zeros(self.shape)) + 0.0 * x.mean()

    x = Tensor(np.ones((1, 1, 4, 4)))
    xhat = Tensor(np.zeros((1, 1, 4, 4)))
    g_map, d_map = gan_losses(x, xhat, Stub((1, 1, 2, 2)))
    g_scalar, d_scalar = gan_losses(x, xhat, Stub((1, 1, 1, 1)))
    assert np.isclose(g_map.item(), g_scalar.item())
    assert np.isclose(d_map.item(), d_scalar.item())


def test_confident_discriminator_drives_loss_to_zero_and_flags():
    class Sharp:
        def __call__(self, x):
            return x * 40.0 - 20.0  # real(ones) -> +20, fake(zeros) -> -20

    x = Tensor(np.ones((1, 1, 2, 2)))
    xhat = Tensor(np.zeros((1, 1, 2, 2)))
    with pytest.warns(RuntimeWarning, match="clamped"):
        _, dis = gan_losses(x, xhat, Sharp())
    assert dis.item() < 1e-6


def test_vqgan_total_weighting():
    vq_term = Tensor(1.0)
    gen_term = Tensor(1.0)
    assert vqgan_total(vq_term, gen_term, 0.0).item() == 1.0
    assert vqgan_total(vq_term, gen_term, 1.0).item() == 2.0
    vals = [vqgan_total(Tensor(0.5), Tensor(2.0), lam).item() for lam in (0.0, 0.5, 1.0)]
    assert np.isclose(vals[1] - vals[0], vals[2] - vals[1])  # linear in lambda
