"""Build self-checks runnable without a test framework.

Every check is a small oracle: a value the implementation must hit exactly or
within a stated tolerance, independently derived (closed forms, hand-computed
toys, brute-force references). `genspec selftest` runs them all and reports
one line per check.
"""

from __future__ import annotations

import tempfile
import time

import numpy as np

from . import tensor as T
from .config import Config
from .data import make_dataset
from .diffusion import inpaint, make_schedule, reverse_step
from .errors import ConfigError
from .gradcheck import mlp_gradient_error, op_gradient_report, stop_gradient_error
from .harness import CellMetrics, MaskSpec, SweepResult, export, make_mask, parse
from .metrics import FeatureStats, frechet_distance, kid, psnr
from .tensor import Tensor
from .tokenizer import VaePosterior, kl_to_standard_normal, vq_quantize
from .tokprior import SeqModel, _gumbel, causal_nll, maskgit_remaining, masked_nll

_CHECKS = []


def _check(name):
    def deco(fn):
        _CHECKS.append((name, fn))
        return fn

    return deco


def _expect(cond, detail):
    if not cond:
        raise AssertionError(detail)


# -- autodiff -----------------------------------------------------------------------


@_check("tensor op gradients match finite differences (rel err <= 1e-4)")
def _op_grads():
    report = op_gradient_report()
    worst = max(report, key=report.get)
    _expect(report[worst] <= 1e-4, f"{worst}: rel err {report[worst]:.2e}")


@_check("stop-gradient blocks backward exactly")
def _sg():
    err = stop_gradient_error()
    _expect(err == 0.0, f"leak magnitude {err:.2e}")


@_check("composite MLP gradient matches finite differences")
def _mlp():
    err = mlp_gradient_error()
    _expect(err <= 1e-4, f"rel err {err:.2e}")


# -- data and formats ---------------------------------------------------------------


@_check("phantom generation is deterministic and splits are disjoint")
def _data():
    a = make_dataset("train", 4)
    b = make_dataset("train", 4)
    _expect(np.array_equal(a.images, b.images), "same split differs across calls")
    c = make_dataset("val", 4)
    _expect(not np.array_equal(a.images, c.images), "train and val collide")


@_check("dataset file round-trips bitwise")
def _dataset_io():
    from .data import load_dataset, save_dataset

    ds = make_dataset("test", 3)
    with tempfile.TemporaryDirectory() as d:
        path = f"{d}/x.gmzd"
        save_dataset(ds, path)
        back = load_dataset(path)
    _expect(np.array_equal(ds.images, back.images), "pixels changed in transit")


@_check("checkpoint tensors round-trip bitwise")
def _weights_io():
    from .checkpoint import load_weights, save_weights

    rng = np.random.default_rng(0)
    tensors = {"a/w": rng.normal(size=(3, 4)), "b": np.float64(2.5)}
    with tempfile.TemporaryDirectory() as d:
        path = f"{d}/x.gmzw"
        save_weights(path, tensors)
        back = load_weights(path)
    _expect(set(back) == set(tensors), "name set changed")
    for k in tensors:
        _expect(np.array_equal(np.asarray(tensors[k]), back[k]), f"{k} changed")


# -- tokenizers ---------------------------------------------------------------------


@_check("KL oracle: standard normal -> 0, pinned (mu=[1,0], logvar=0) -> 0.5")
def _kl():
    zero = VaePosterior(Tensor(np.zeros((1, 2, 1, 1))), Tensor(np.zeros((1, 2, 1, 1))))
    _expect(abs(float(kl_to_standard_normal(zero).data)) < 1e-12, "standard normal KL not 0")
    mu = np.zeros((1, 2, 1, 1))
    mu[0, 0] = 1.0
    pinned = VaePosterior(Tensor(mu), Tensor(np.zeros((1, 2, 1, 1))))
    got = float(kl_to_standard_normal(pinned).data)
    _expect(abs(got - 0.5) < 1e-12, f"pinned KL {got}, want 0.5")


@_check("VQ nearest-entry rule with ties to the lowest index")
def _vq():
    codebook = Tensor(np.array([[0.0], [1.0]]))
    z = Tensor(np.array([0.9, 0.5]).reshape(1, 1, 1, 2))
    _, tokens = vq_quantize(z, codebook)
    _expect(list(tokens.reshape(-1)) == [1, 0], f"tokens {tokens.reshape(-1)}")


@_check("straight-through estimator passes identity gradient")
def _ste():
    codebook = Tensor(np.array([[0.0], [1.0]]))
    z = Tensor(np.linspace(-0.4, 1.4, 4).reshape(1, 1, 1, 4), requires_grad=True)
    z_q, _ = vq_quantize(z, codebook)
    T.sum_(z_q).backward()
    _expect(np.array_equal(z.grad, np.ones_like(z.grad)), "grad is not all-ones")


# -- diffusion ----------------------------------------------------------------------


@_check("schedule endpoints: alpha_bar_0 = 1, strictly decreasing")
def _schedule():
    s = make_schedule(steps=50)
    _expect(s.alpha_bar[0] == 1.0, "alpha_bar[0] != 1")
    _expect(np.all(np.diff(s.alpha_bar) < 0), "alpha_bar not strictly decreasing")


@_check("sigma=0 reverse chain recovers z0 within 1e-8")
def _chain():
    s = make_schedule(steps=40, eta=0.0)
    rng = np.random.default_rng(1)
    z0 = rng.normal(size=(1, 1, 2, 2))

    def oracle(z_t, t):
        ab = s.alpha_bar[t]
        return (z_t - np.sqrt(ab) * z0) / np.sqrt(1.0 - ab)

    z = rng.normal(size=z0.shape)
    for t in range(40, 0, -1):
        z = reverse_step(z, t, oracle, s, 1.0, rng)
    _expect(np.max(np.abs(z - z0)) <= 1e-8, f"max err {np.max(np.abs(z - z0)):.2e}")


@_check("known-region injection keeps unmasked cells bitwise")
def _inject():
    s = make_schedule(steps=20)
    rng = np.random.default_rng(2)
    z_known = rng.normal(size=(2, 1, 4, 4))
    mask = rng.random(z_known.shape) < 0.5
    out = inpaint(lambda z, t: np.zeros_like(z), s, z_known, mask, 1.0, rng)
    _expect(np.array_equal(out[~mask], z_known[~mask]), "known cells drifted")


# -- token priors -------------------------------------------------------------------


@_check("causal logits ignore future tokens exactly")
def _causality():
    model = SeqModel(seed=0, K=8, seq_len=6, mode="causal", d_model=16, heads=2, blocks=1)
    rng = np.random.default_rng(3)
    s = rng.integers(0, 8, size=(2, 6))
    base = model.logits(s).data
    s2 = s.copy()
    s2[:, 3:] = (s2[:, 3:] + 1) % 8
    pert = model.logits(s2).data
    _expect(np.array_equal(base[:, :4], pert[:, :4]), "past logits moved")
    _expect(not np.array_equal(base[:, 4:], pert[:, 4:]), "future logits ignored input")


@_check("zeroed prior scores uniform: NLL = ln K in both modes")
def _uniform_nll():
    for mode in ("causal", "bidirectional"):
        model = SeqModel(seed=0, K=8, seq_len=6, mode=mode, d_model=16, heads=2, blocks=1)
        for p in model.params():
            p.data[...] = 0.0
        s = np.arange(12).reshape(2, 6) % 8
        if mode == "causal":
            got = float(causal_nll(model, s).data)
        else:
            mask = np.zeros((2, 6), dtype=bool)
            mask[:, ::2] = True
            got = float(masked_nll(model, s, mask).data)
        _expect(abs(got - np.log(8.0)) < 1e-12, f"{mode} NLL {got}, want ln 8")


@_check("maskgit schedule counts sum to |M| and end at zero")
def _maskgit_counts():
    for m_total, steps in [(64, 8), (37, 5), (5, 12), (1, 3)]:
        remaining = [maskgit_remaining(m_total, steps, r) for r in range(steps + 1)]
        _expect(remaining[0] == m_total and remaining[-1] == 0,
                f"endpoints {remaining[0]}, {remaining[-1]} for m={m_total}")
        fixed = -np.diff(remaining)
        _expect(fixed.sum() == m_total and np.all(fixed >= 0),
                f"round counts {list(fixed)} for m={m_total}, steps={steps}")


@_check("Gumbel-max matches softmax within 2% total variation")
def _gumbel_tv():
    logits = np.array([0.5, -0.3, 1.2, 0.0])
    p = np.exp(logits - logits.max())
    p /= p.sum()
    rng = np.random.default_rng(4)
    draws = np.argmax(logits + _gumbel(rng, (100_000, 4)), axis=1)
    emp = np.bincount(draws, minlength=4) / len(draws)
    tv = 0.5 * np.abs(emp - p).sum()
    _expect(tv <= 0.02, f"TV {tv:.4f}")


# -- metrics ------------------------------------------------------------------------


@_check("PSNR pins: MSE 0.01 -> 20 dB, identical -> 100 dB cap")
def _psnr():
    x = np.zeros((4, 4))
    got = psnr(x, np.full((4, 4), 0.1))
    _expect(abs(got - 20.0) < 1e-9, f"PSNR {got}")
    _expect(psnr(x, x) == 100.0, "identical images not capped at 100 dB")


@_check("Frechet 1-D closed form and mean-shift identity")
def _frechet():
    a = FeatureStats(np.array([0.0]), np.array([[1.0]]))
    b = FeatureStats(np.array([2.0]), np.array([[4.0]]))
    got = frechet_distance(a, b)
    _expect(abs(got - 5.0) < 1e-8, f"1-D case {got}, want 5")
    eye = np.eye(3)
    c = FeatureStats(np.zeros(3), eye)
    d = FeatureStats(np.array([1.0, 2.0, 3.0]), eye)
    got = frechet_distance(c, d)
    _expect(abs(got - 14.0) < 1e-8, f"mean shift {got}, want 14")


@_check("KID matches the hand-computed 2x2 toy")
def _kid():
    a = np.array([[1.0, 0.0], [0.0, 1.0]])
    b = np.array([[1.0, 1.0], [0.0, 0.0]])
    k = lambda x, y: (x @ y / 2.0 + 1.0) ** 3
    xx = k(a[0], a[1])  # only off-diagonal pair
    yy = k(b[0], b[1])
    xy = np.mean([k(x, y) for x in a for y in b])
    want = xx + yy - 2.0 * xy
    got = kid(a, b)
    _expect(abs(got - want) < 1e-12, f"KID {got}, want {want}")


# -- harness ------------------------------------------------------------------------


@_check("mask coverage within one pixel block of the request")
def _masks():
    for geometry in ("random-rect", "random-token"):
        for seed in range(5):
            pixel, latent, token = make_mask(MaskSpec(0.5, geometry, seed))
            _expect(abs(int(pixel.sum()) - 512) <= 16,
                    f"{geometry} seed {seed}: {int(pixel.sum())} px")
            _expect(np.array_equal(token, latent.reshape(-1)), "token view mismatch")


@_check("sweep CSV export round-trips every numeric cell")
def _csv():
    cells = [
        CellMetrics("m1", 0.0, 1.0, 0.5, 31.25, 0.91, 0.002, 5, protocol="reconstruction"),
        CellMetrics("m1", 0.5, 1.0, 1.75, 22.5, 0.6, 0.004, 5),
        CellMetrics("m2", 0.0, 1.0, float("nan"), float("nan"), float("nan"),
                    float("nan"), 5, failed=True, protocol="failed: no inpaint"),
        CellMetrics("m2", 0.5, 1.0, 2.5, 20.0, 0.5, 0.008, 5),
    ]
    sweep = SweepResult(["m1", "m2"], [0.0, 0.5], [1.0], 5, 0, "random-rect", cells)
    with tempfile.TemporaryDirectory() as d:
        export(sweep, d)
        back = parse(d)
    _expect(len(back.cells) == len(cells), "cell count changed")
    for x, y in zip(cells, back.cells):
        for f in ("ratio", "tau", "rfid", "psnr", "ssim", "tps"):
            a, b = getattr(x, f), getattr(y, f)
            _expect(a == b or (np.isnan(a) and np.isnan(b)), f"{x.model} {f}: {a} vs {b}")


@_check("config echo re-parses to the identical mapping")
def _config():
    cfg = Config.from_text("alpha = 1\n# comment\npaths = a,b # inline\n")
    again = Config.from_text(cfg.resolved())
    _expect(again.values == cfg.values, "echo drifted")
    try:
        cfg.require_known({"alpha"})
    except ConfigError:
        pass
    else:
        raise AssertionError("unknown key 'paths' was accepted")


def run_selftest(log=print) -> int:
    """Run every check; returns the failure count."""
    t0 = time.perf_counter()
    failures = 0
    for name, fn in _CHECKS:
        try:
            fn()
        except Exception as exc:
            failures += 1
            log(f"FAIL - {name}: {exc}")
        else:
            log(f"ok - {name}")
    log(f"{len(_CHECKS)} checks, {failures} failed, {time.perf_counter() - t0:.1f}s")
    return failures
