"""Training-loop smoke tests on tiny datasets; fast, not convergence claims."""

import numpy as np
import pytest

from genspec.data import make_dataset
from genspec.errors import NumericalError
from genspec.optim import AdamW
from genspec.tensor import Tensor
from genspec.train import (
    TrainResult,
    _run_epochs,
    latent_moments,
    train_diffusion,
    train_feature_extractor,
    train_token_prior,
    train_vae,
    train_vq,
)
from genspec.tokenizer import VaeModel, VqModel
from genspec.tokprior import MASKGIT_RATIOS


@pytest.fixture(scope="module")
def tiny():
    return make_dataset("train", 48, size=32), make_dataset("val", 16, size=32)


def test_vae_smoke_improves(tiny):
    train_ds, val_ds = tiny
    res = train_vae(train_ds, val_ds, epochs=2, batch=16, lr=1e-3, warmup=0)
    assert len(res.history) == 2
    assert res.best_val <= res.history[0]["val_loss"]
    assert res.best_state is not None


def test_vq_smoke_improves(tiny):
    train_ds, val_ds = tiny
    res = train_vq(train_ds, val_ds, epochs=2, batch=16, lr=1e-3, warmup=0)
    assert res.best_val <= res.history[0]["val_loss"]


def test_vq_gan_smoke_runs(tiny):
    train_ds, val_ds = tiny
    res = train_vq(train_ds, val_ds, epochs=1, batch=16, lr=1e-4, warmup=0, use_gan=True)
    assert np.isfinite(res.history[0]["train_loss"])


def test_diffusion_smoke(tiny):
    train_ds, val_ds = tiny
    vae = VaeModel(seed=0)
    res, schedule, scale = train_diffusion(vae, train_ds, val_ds, steps_T=50, epochs=2,
                                           batch=16, lr=1e-3, warmup=0)
    assert schedule.steps == 50
    assert scale > 0
    assert res.history[-1]["val_loss"] < 1.5  # predicting noise at all beats silence


def test_latent_moments_scale(tiny):
    train_ds, _ = tiny
    vae = VaeModel(seed=0)
    mu, scale = latent_moments(vae, train_ds.images)
    assert mu.shape == (48, 8, 8, 8)
    assert np.isclose((mu / scale).std(), 1.0)


def test_token_prior_smoke_both_modes(tiny):
    train_ds, val_ds = tiny
    vq = VqModel(seed=0)
    for mode, kw in (("causal", {}), ("masked", {"mask_dist": MASKGIT_RATIOS})):
        res = train_token_prior(vq, train_ds, val_ds, mode=mode, epochs=1, batch=16,
                                lr=1e-3, warmup=0, **kw)
        assert res.model.kind == mode
        assert res.history[0]["val_loss"] < 2 * np.log(vq.K)


def test_token_prior_validates_mode(tiny):
    train_ds, val_ds = tiny
    with pytest.raises(ValueError):
        train_token_prior(VqModel(seed=0), train_ds, val_ds, mode="sideways", epochs=1)
    with pytest.raises(ValueError):
        train_token_prior(VqModel(seed=0), train_ds, val_ds, mode="masked", epochs=1)


def test_feature_extractor_smoke(tiny):
    train_ds, val_ds = tiny
    res = train_feature_extractor(train_ds, val_ds, epochs=2, batch=16)
    assert res.history[1]["val_loss"] <= res.history[0]["val_loss"] * 1.5


def test_nan_aborts_with_partial_state():
    model = VaeModel(seed=0)
    result = TrainResult(model=model)
    opt = AdamW(model.params(), lr=1e-4)
    losses = iter([0.5, float("nan")])

    def step_fn(epoch):
        yield next(losses)

    def val_fn():
        return 0.4

    with pytest.raises(NumericalError) as exc:
        _run_epochs(result, opt, epochs=2, step_fn=step_fn, val_fn=val_fn)
    assert exc.value.partial is result
    assert exc.value.partial.history  # the good epoch was recorded


def test_progress_lines_emitted(tiny):
    train_ds, val_ds = tiny
    lines = []
    train_vae(train_ds, val_ds, epochs=1, batch=2, warmup=0, log=lines.append)
    assert any(line.startswith("step=20 ") for line in lines)
    assert any(line.startswith("epoch=0 ") for line in lines)
