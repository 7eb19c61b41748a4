"""Training loops for every model kind.

Shared conventions: AdamW at lr 1e-4 with per-kind betas, weight decay 0.01,
linear warmup over 200 steps; flip augmentation on images; per-epoch
validation loss with best-state retention; a non-finite loss aborts with the
last good state attached to the exception.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .data import Dataset, augment
from .diffusion import DenoiserModel, NoiseSchedule, ddpm_loss, make_schedule
from .errors import NumericalError
from .metrics import FeatureExtractor
from .nn import Module
from .optim import AdamW
from .tensor import Tensor
from .tokenizer import VaeModel, VqModel, elbo_loss, vq_loss
from .tokprior import MaskRatioDist, SeqModel, causal_nll, masked_nll, sample_mask_ratio

# optimizer rows by model kind: (betas, weight_decay)
OPTIM_ROWS = {
    "vae": ((0.9, 0.999), 0.01),
    "vq": ((0.9, 0.999), 0.01),
    "diffusion": ((0.9, 0.99), 0.01),
    "causal": ((0.9, 0.95), 0.01),
    "masked": ((0.9, 0.96), 0.01),
    "feature": ((0.9, 0.999), 0.01),
}
DEFAULT_LR = 1e-4
DEFAULT_WARMUP = 200


@dataclass
class TrainResult:
    model: Module
    history: list[dict] = field(default_factory=list)
    best_val: float = float("inf")
    best_state: dict | None = None

    def restore_best(self) -> None:
        if self.best_state is not None:
            self.model.load_state_dict(self.best_state)


def _batches(n: int, batch: int, rng: np.random.Generator):
    order = rng.permutation(n)
    for i in range(0, n, batch):
        yield order[i : i + batch]


def _as_image_tensor(images: np.ndarray) -> Tensor:
    return Tensor(images[:, None] if images.ndim == 3 else images)


def _check_finite(value: float, where: str, result: TrainResult):
    if not np.isfinite(value):
        raise NumericalError(f"non-finite loss {value!r} during {where}", partial=result)


def _run_epochs(result: TrainResult, opt: AdamW, epochs: int, step_fn, val_fn, log=None):
    """Generic epoch loop: step_fn yields per-step train losses for one epoch,
    val_fn returns the epoch's validation loss."""
    t0 = time.perf_counter()
    step = 0
    for epoch in range(epochs):
        losses = []
        for loss in step_fn(epoch):
            _check_finite(loss, f"epoch {epoch}", result)
            losses.append(loss)
            step += 1
            if log and step % 20 == 0:
                log(f"step={step} loss={loss:.5f} elapsed={time.perf_counter() - t0:.1f}s")
        val = val_fn()
        _check_finite(val, f"validation after epoch {epoch}", result)
        result.history.append(
            {"epoch": epoch, "train_loss": float(np.mean(losses)), "val_loss": val}
        )
        if log:
            log(f"epoch={epoch} train={np.mean(losses):.5f} val={val:.5f} "
                f"elapsed={time.perf_counter() - t0:.1f}s")
        if val < result.best_val:
            result.best_val = val
            result.best_state = result.model.state_dict()
    result.restore_best()
    return result


def train_vae(train_ds: Dataset, val_ds: Dataset, *, epochs: int = 30, batch: int = 64,
              lr: float = DEFAULT_LR, kl_weight: float = 1e-4, seed: int = 0,
              warmup: int = DEFAULT_WARMUP, log=None) -> TrainResult:
    model = VaeModel(seed=seed)
    betas, wd = OPTIM_ROWS["vae"]
    opt = AdamW(model.params(), lr=lr, betas=betas, weight_decay=wd, warmup_steps=warmup)
    rng = np.random.default_rng(seed + 1)
    result = TrainResult(model=model)

    def step_fn(epoch):
        for idx in _batches(len(train_ds), batch, rng):
            x = np.stack([augment(train_ds.images[i], rng) for i in idx])
            xt = _as_image_tensor(x)
            post = model.encode(xt)
            z = model.sample(post, rng)
            xhat = model.decode(z)
            loss = elbo_loss(xt, xhat, post, kl_weight)
            opt.zero_grad()
            loss.backward()
            opt.step()
            yield loss.item()

    def val_fn():
        with T.no_grad():
            xt = _as_image_tensor(val_ds.images)
            post = model.encode(xt)
            xhat = model.decode(post.mu)
            return elbo_loss(xt, xhat, post, kl_weight).item()

    return _run_epochs(result, opt, epochs, step_fn, val_fn, log)


def train_vq(train_ds: Dataset, val_ds: Dataset, *, epochs: int = 30, batch: int = 64,
             lr: float = DEFAULT_LR, beta: float = 0.25, seed: int = 0,
             warmup: int = DEFAULT_WARMUP, use_gan: bool = False, lam: float = 0.1,
             log=None) -> TrainResult:
    from .tokenizer import PatchDiscriminator, gan_losses, vqgan_total

    model = VqModel(seed=seed)
    betas, wd = OPTIM_ROWS["vq"]
    opt = AdamW(model.params(), lr=lr, betas=betas, weight_decay=wd, warmup_steps=warmup)
    rng = np.random.default_rng(seed + 1)
    model.seed_codebook(_as_image_tensor(train_ds.images[: max(64, model.K)]), rng)
    result = TrainResult(model=model)
    disc = PatchDiscriminator(seed=seed + 7) if use_gan else None
    disc_opt = AdamW(disc.params(), lr=lr, betas=betas, weight_decay=wd) if use_gan else None

    def step_fn(epoch):
        for idx in _batches(len(train_ds), batch, rng):
            x = np.stack([augment(train_ds.images[i], rng) for i in idx])
            xt = _as_image_tensor(x)
            z = model.encode(xt)
            z_q, _ = model.quantize(z)
            xhat = model.decode(z_q)
            loss = vq_loss(xt, xhat, z, z_q, beta)
            if use_gan:
                gen_term, disc_term = gan_losses(xt, xhat, disc)
                total = vqgan_total(loss, gen_term, lam)
                opt.zero_grad()
                disc_opt.zero_grad()  # generator loss also reaches disc params
                total.backward()
                opt.step()
                disc_opt.zero_grad()
                disc_term.backward()
                disc_opt.step()
            else:
                opt.zero_grad()
                loss.backward()
                opt.step()
            # report per-pixel-comparable value: recon sum scaled by batch only
            yield loss.item() / len(idx)

    def val_fn():
        with T.no_grad():
            xt = _as_image_tensor(val_ds.images)
            z = model.encode(xt)
            z_q, _ = model.quantize(z)
            xhat = model.decode(z_q)
            return vq_loss(xt, xhat, z, z_q, beta).item() / len(val_ds)

    return _run_epochs(result, opt, epochs, step_fn, val_fn, log)


def latent_moments(vae: VaeModel, images: np.ndarray, batch: int = 128) -> tuple[np.ndarray, float]:
    """Posterior means for a whole image set and their global stddev."""
    mus = []
    with T.no_grad():
        for i in range(0, len(images), batch):
            mus.append(vae.encode(_as_image_tensor(images[i : i + batch])).mu.data)
    mu = np.concatenate(mus, axis=0)
    return mu, float(mu.std())


def train_diffusion(vae: VaeModel, train_ds: Dataset, val_ds: Dataset, *, steps_T: int = 200,
                    epochs: int = 40, batch: int = 64, lr: float = DEFAULT_LR, seed: int = 0,
                    beta_start: float = 1e-4, beta_end: float = 0.02, eta: float = 1.0,
                    warmup: int = DEFAULT_WARMUP, log=None) -> tuple[TrainResult, NoiseSchedule, float]:
    schedule = make_schedule(steps_T, beta_start, beta_end, eta)
    z_train, scale = latent_moments(vae, train_ds.images)
    z_train = z_train / scale
    z_val, _ = latent_moments(vae, val_ds.images)
    z_val = z_val / scale
    model = DenoiserModel(seed=seed, channels=vae.z_channels)
    betas, wd = OPTIM_ROWS["diffusion"]
    opt = AdamW(model.params(), lr=lr, betas=betas, weight_decay=wd, warmup_steps=warmup)
    rng = np.random.default_rng(seed + 1)
    result = TrainResult(model=model)

    def step_fn(epoch):
        for idx in _batches(len(z_train), batch, rng):
            loss = ddpm_loss(model, schedule, z_train[idx], rng)
            opt.zero_grad()
            loss.backward()
            opt.step()
            yield loss.item()

    def val_fn():
        vrng = np.random.default_rng(9999)  # fixed noise draw keeps epochs comparable
        with T.no_grad():
            return ddpm_loss(model, schedule, z_val, vrng).item()

    result = _run_epochs(result, opt, epochs, step_fn, val_fn, log)
    return result, schedule, scale


def train_token_prior(vq: VqModel, train_ds: Dataset, val_ds: Dataset, *, mode: str,
                      mask_dist: MaskRatioDist | None = None, epochs: int = 30,
                      batch: int = 64, lr: float = DEFAULT_LR, seed: int = 0,
                      warmup: int = DEFAULT_WARMUP, log=None) -> TrainResult:
    """mode 'causal' trains next-token NLL; 'masked' trains masked NLL with
    ratios drawn from mask_dist."""
    if mode not in ("causal", "masked"):
        raise ValueError(f"unknown prior mode {mode!r}")
    if mode == "masked" and mask_dist is None:
        raise ValueError("masked prior training needs a mask ratio distribution")
    tokens_train = _tokenize_all(vq, train_ds.images)
    tokens_val = _tokenize_all(vq, val_ds.images)
    n = tokens_train.shape[1]
    model = SeqModel(seed=seed, K=vq.K, seq_len=n, mode="causal" if mode == "causal" else "bidirectional")
    model.kind = mode
    betas, wd = OPTIM_ROWS[mode]
    opt = AdamW(model.params(), lr=lr, betas=betas, weight_decay=wd, warmup_steps=warmup)
    rng = np.random.default_rng(seed + 1)
    result = TrainResult(model=model)

    def draw_mask(count: int) -> np.ndarray:
        mask = np.zeros((count, n), dtype=bool)
        for b in range(count):
            ratio = sample_mask_ratio(mask_dist, rng)
            m = max(1, int(round(ratio * n)))
            mask[b, rng.choice(n, size=m, replace=False)] = True
        return mask

    def step_fn(epoch):
        for idx in _batches(len(tokens_train), batch, rng):
            s = tokens_train[idx]
            if mode == "causal":
                loss = causal_nll(model, s)
            else:
                loss = masked_nll(model, s, draw_mask(len(s)))
            opt.zero_grad()
            loss.backward()
            opt.step()
            yield loss.item()

    def val_fn():
        vrng = np.random.default_rng(4242)
        with T.no_grad():
            if mode == "causal":
                return causal_nll(model, tokens_val).item()
            mask = np.zeros((len(tokens_val), n), dtype=bool)
            for b in range(len(tokens_val)):
                ratio = sample_mask_ratio(mask_dist, vrng)
                m = max(1, int(round(ratio * n)))
                mask[b, vrng.choice(n, size=m, replace=False)] = True
            return masked_nll(model, tokens_val, mask).item()

    return _run_epochs(result, opt, epochs, step_fn, val_fn, log)


def _tokenize_all(vq: VqModel, images: np.ndarray, batch: int = 128) -> np.ndarray:
    grids = []
    for i in range(0, len(images), batch):
        grids.append(vq.tokenize(_as_image_tensor(images[i : i + batch])))
    tokens = np.concatenate(grids, axis=0)
    return tokens.reshape(len(images), -1)  # raster order


def train_feature_extractor(train_ds: Dataset, val_ds: Dataset, *, epochs: int = 10,
                            batch: int = 64, lr: float = 1e-3, seed: int = 0,
                            noise_std: float = 0.1, log=None) -> TrainResult:
    """Denoising autoencoder; the encoder half becomes the metric feature map."""
    model = FeatureExtractor(seed=seed, image_size=train_ds.size)
    betas, wd = OPTIM_ROWS["feature"]
    opt = AdamW(model.params(), lr=lr, betas=betas, weight_decay=wd, warmup_steps=DEFAULT_WARMUP)
    rng = np.random.default_rng(seed + 1)
    result = TrainResult(model=model)

    def step_fn(epoch):
        for idx in _batches(len(train_ds), batch, rng):
            clean = train_ds.images[idx][:, None]
            noisy = np.clip(clean + rng.normal(0.0, noise_std, clean.shape), 0.0, 1.0)
            xhat = model.decode(model.encode(Tensor(noisy)))
            diff = xhat - Tensor(clean)
            loss = (diff * diff).mean()
            opt.zero_grad()
            loss.backward()
            opt.step()
            yield loss.item()

    def val_fn():
        vrng = np.random.default_rng(777)
        clean = val_ds.images[:, None]
        noisy = np.clip(clean + vrng.normal(0.0, noise_std, clean.shape), 0.0, 1.0)
        with T.no_grad():
            xhat = model.decode(model.encode(Tensor(noisy)))
            return float(np.mean((xhat.data - clean) ** 2))

    return _run_epochs(result, opt, epochs, step_fn, val_fn, log)
