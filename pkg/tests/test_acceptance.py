"""Release-gate acceptance checks.

Ten end-to-end checks covering gradient soundness, sampler algebra, inpainting
exactness, discrete-prior behavior, metric oracles, desk-scale training
quality, the reconstruction-generation spectrum's qualitative shape, the
temperature surface, sweep determinism, and timing bookkeeping. Each test
prints a PASS line with its measured numbers (visible with -s or -rA).

The trained-model fixtures are heavy (roughly an hour of CPU in total). Set
GENSPEC_TEST_CACHE to a directory to persist checkpoints between runs.
"""

import json
import os
import time
from types import SimpleNamespace

import numpy as np
import pytest
from scipy import stats as scipy_stats

from genspec import tensor as T
from genspec.cli import main as cli_main
from genspec.data import make_dataset, save_dataset
from genspec.diffusion import forward_transition, make_schedule, reverse_step
from genspec.gradcheck import op_gradient_report
from genspec.harness import (
    CausalPipeline,
    DiffusionPipeline,
    MaskedPipeline,
    MaskSpec,
    inpaint_grid_cell,
    make_mask,
    run_spectrum,
    run_unconditional,
)
from genspec.metrics import FeatureStats, frechet_distance, kid, psnr, time_per_sample
from genspec.modelio import load_model, save_model, schedule_from_meta
from genspec.diffusion import inpaint as diffusion_inpaint
from genspec.tensor import Tensor
from genspec.tokenizer import codebook_utilization
from genspec.tokprior import MASKGIT_RATIOS, SeqModel, _gumbel, maskgit_remaining, masked_nll
from genspec.train import (
    train_diffusion,
    train_feature_extractor,
    train_token_prior,
    train_vae,
    train_vq,
)

# desk-scale training recipe: 2000/500/500 phantoms at 32x32, settings sized
# for a ~2000-step budget (the library defaults assume much longer runs)
DESK = dict(
    vae=dict(epochs=30, batch=32, lr=1e-3, kl_weight=1e-6),
    vq=dict(epochs=30, batch=32, lr=1e-3),
    diffusion=dict(epochs=60, batch=32, lr=5e-4),
    causal=dict(epochs=40, batch=32, lr=1e-3),
    masked=dict(epochs=60, batch=32, lr=1e-3),
)

RATIO_GRID = tuple(round(0.1 * i, 1) for i in range(11))
SWEEP_N = 200


def _pass(msg: str) -> None:
    print(f"PASS {msg}")


@pytest.fixture(scope="session")
def desk_data():
    return SimpleNamespace(
        train=make_dataset("train", 2000, size=32),
        val=make_dataset("val", 500, size=32),
        test=make_dataset("test", 500, size=32),
    )


def _recon_psnr(model, images, batch=100):
    outs = []
    with T.no_grad():
        for i in range(0, len(images), batch):
            outs.append(model.reconstruct(Tensor(images[i : i + batch][:, None])).data[:, 0])
    return psnr(images, np.concatenate(outs))


@pytest.fixture(scope="session")
def zoo(desk_data, tmp_path_factory):
    """Trained desk-scale models plus checkpoints on disk for the CLI tests."""
    cache = os.environ.get("GENSPEC_TEST_CACHE")
    root = cache if cache else str(tmp_path_factory.mktemp("zoo"))
    os.makedirs(root, exist_ok=True)
    names = ["vae", "vq", "feature", "diffusion", "causal", "masked"]
    paths = {n: os.path.join(root, f"{n}.gmzw") for n in names}
    timings_path = os.path.join(root, "timings.json")

    if all(os.path.exists(p) for p in paths.values()) and os.path.exists(timings_path):
        with open(timings_path) as fh:
            timings = json.load(fh)
        models = {n: load_model(paths[n]) for n in names}
    else:
        timings = {}
        models = {}
        tr, va = desk_data.train, desk_data.val

        t0 = time.time()
        res = train_vae(tr, va, **DESK["vae"])
        res.restore_best()
        timings["vae"] = time.time() - t0
        models["vae"] = (res.model, {})
        save_model(paths["vae"], res.model)

        t0 = time.time()
        res = train_vq(tr, va, **DESK["vq"])
        res.restore_best()
        timings["vq"] = time.time() - t0
        models["vq"] = (res.model, {})
        save_model(paths["vq"], res.model)

        res = train_feature_extractor(tr, va)
        res.restore_best()
        models["feature"] = (res.model, {})
        save_model(paths["feature"], res.model)

        res, _, scale = train_diffusion(models["vae"][0], tr, va, **DESK["diffusion"])
        res.restore_best()
        extra = {"T": 200, "beta_start": 1e-4, "beta_end": 0.02, "eta": 1.0,
                 "latent_scale": scale}
        save_model(paths["diffusion"], res.model, extra=extra)
        models["diffusion"] = load_model(paths["diffusion"])

        for mode in ("causal", "masked"):
            dist = MASKGIT_RATIOS if mode == "masked" else None
            res = train_token_prior(models["vq"][0], tr, va, mode=mode,
                                    mask_dist=dist, **DESK[mode])
            res.restore_best()
            models[mode] = (res.model, {})
            save_model(paths[mode], res.model)

        with open(timings_path, "w") as fh:
            json.dump(timings, fh)

    vae, vq, fe = models["vae"][0], models["vq"][0], models["feature"][0]
    den, dmeta = models["diffusion"]
    return SimpleNamespace(
        vae=vae, vq=vq, fe=fe,
        denoiser=den, schedule=schedule_from_meta(dmeta), latent_scale=dmeta["latent_scale"],
        causal=models["causal"][0], masked=models["masked"][0],
        paths=paths, tokenizer_seconds=timings["vae"] + timings["vq"],
    )


def _pipelines(zoo):
    return [
        DiffusionPipeline("diffusion", zoo.vae, zoo.denoiser, zoo.schedule, zoo.latent_scale),
        CausalPipeline("causal", zoo.vq, zoo.causal),
        MaskedPipeline("masked", zoo.vq, zoo.masked),
    ]


@pytest.fixture(scope="session")
def spectrum(zoo, desk_data):
    """The criterion sweep: full ratio grid at tau 1.0, n=200, plus the
    matched unconditional run. Timed against the 20-minute budget."""
    images = desk_data.test.images[:SWEEP_N]
    t0 = time.time()
    sweep = run_spectrum(_pipelines(zoo), images, zoo.fe, ratios=RATIO_GRID,
                         taus=(1.0,), n=SWEEP_N, seed=0)
    rows = run_unconditional(_pipelines(zoo), images, zoo.fe, n=SWEEP_N, seed=0)
    elapsed = time.time() - t0
    return SimpleNamespace(sweep=sweep, rows=rows, elapsed=elapsed, images=images)


# -- 1: autodiff --------------------------------------------------------------------


def test_all_tensor_ops_pass_finite_difference_checks():
    t0 = time.time()
    report = op_gradient_report()
    elapsed = time.time() - t0
    worst = max(report, key=report.get)
    assert report[worst] <= 1e-4, f"{worst} rel err {report[worst]:.2e}"
    assert elapsed < 60.0, f"gradient checks took {elapsed:.0f}s"
    _pass(f"autodiff: {len(report)} ops, worst rel err {report[worst]:.2e} ({worst}), "
          f"{elapsed:.1f}s")


# -- 2: sampler algebra -------------------------------------------------------------


def test_reverse_chain_recovers_z0_and_transitions_match_marginal():
    t0 = time.time()
    schedule = make_schedule(steps=200, eta=0.0)
    rng = np.random.default_rng(0)
    z0 = rng.normal(size=(2, 3, 4, 4))

    def oracle(z_t, t):
        ab = schedule.alpha_bar[t]
        return (z_t - np.sqrt(ab) * z0) / np.sqrt(1.0 - ab)

    z = rng.normal(size=z0.shape)
    for t in range(200, 0, -1):
        z = reverse_step(z, t, oracle, schedule, 1.0, rng)
    err = float(np.max(np.abs(z - z0)))
    assert err <= 1e-8, f"sigma=0 chain missed z0 by {err:.2e}"

    sched = make_schedule(steps=6)
    trials = 10_000
    z_start = np.full((trials, 1), 0.7)
    z_seq = z_start.copy()
    for t in range(1, 7):
        z_seq = forward_transition(sched, z_seq, t, rng)
    want_mean = np.sqrt(sched.alpha_bar[6]) * 0.7
    want_var = 1.0 - sched.alpha_bar[6]
    mean_err = abs(z_seq.mean() - want_mean) / abs(want_mean)
    var_err = abs(z_seq.var() - want_var) / want_var
    assert mean_err < 0.01, f"sequential mean off by {mean_err:.3%}"
    assert var_err < 0.01, f"sequential variance off by {var_err:.3%}"
    elapsed = time.time() - t0
    assert elapsed < 120.0, f"took {elapsed:.0f}s"
    _pass(f"sampler algebra: chain err {err:.1e}, transition moments within "
          f"{max(mean_err, var_err):.2%}, {elapsed:.1f}s")


# -- 3: injection and compositing ---------------------------------------------------


def test_known_region_injection_bitwise_and_compositing_exact():
    schedule = make_schedule(steps=50)
    rng = np.random.default_rng(1)
    z_known = rng.normal(size=(4, 2, 8, 8))
    worst_ratio = None
    for ratio in (0.1, 0.3, 0.5, 0.7, 0.9):
        _, latent, _ = make_mask(MaskSpec(ratio, "random-token", seed=int(ratio * 10)))
        mask = np.broadcast_to(latent, z_known.shape)
        out = diffusion_inpaint(lambda z, t: np.zeros_like(z), schedule, z_known,
                                mask, 1.0, rng)
        assert np.array_equal(out[~mask], z_known[~mask]), f"drift at ratio {ratio}"
        worst_ratio = ratio

    class ConstPipe:
        name, protocol = "const", "as-given"

        def reconstruct(self, images):
            return np.zeros_like(images)

        def inpaint(self, images, masks, tau, rng):
            return np.full_like(images, 0.25)

    images = make_dataset("val", 16, size=32).images
    out, mask = inpaint_grid_cell(ConstPipe(), images, 0.5, 1.0, "random-rect",
                                  np.random.default_rng(2))
    assert np.array_equal(out[~mask], images[~mask])
    assert np.all(out[mask] == 0.25)
    _pass(f"injection bitwise through ratio {worst_ratio}; pixel compositing exact")


# -- 4: discrete priors -------------------------------------------------------------


def test_discrete_prior_causality_gradients_schedule_and_gumbel():
    model = SeqModel(seed=0, K=16, seq_len=8, mode="causal", d_model=32, heads=2, blocks=2)
    rng = np.random.default_rng(3)
    s = rng.integers(0, 16, size=(2, 8))
    base = model.logits(s).data
    for i in range(8):
        s2 = s.copy()
        s2[:, i:] = (s2[:, i:] + 1) % 16
        pert = model.logits(s2).data
        assert np.array_equal(base[:, : i + 1], pert[:, : i + 1]), f"position {i} leaks"

    class LogitLeaf:
        """Fixed logits as a graph leaf so position-wise gradients are visible."""

        K, special = 16, 16

        def __init__(self, rng):
            self.leaf = Tensor(rng.normal(size=(2, 8, 17)), requires_grad=True)
            self.kind = "masked"

        def logits(self, s):
            return self.leaf

    stub = LogitLeaf(rng)
    mask = np.zeros((2, 8), dtype=bool)
    mask[:, [1, 4]] = True
    masked_nll(stub, rng.integers(0, 16, size=(2, 8)), mask).backward()
    grads = stub.leaf.grad
    assert np.all(grads[~mask] == 0.0), "unmasked positions received gradient"
    assert np.all(np.abs(grads[mask]).sum(axis=-1) > 0), "masked positions got none"

    for m_total, steps in [(64, 8), (37, 5), (9, 16)]:
        remaining = [maskgit_remaining(m_total, steps, r) for r in range(steps + 1)]
        fixed = -np.diff(remaining)
        assert fixed.sum() == m_total and remaining[-1] == 0

    logits = np.array([1.0, 0.2, -0.5, 2.0])
    p = np.exp(logits) / np.exp(logits).sum()
    draws = np.argmax(logits + _gumbel(np.random.default_rng(4), (100_000, 4)), axis=1)
    tv = 0.5 * np.abs(np.bincount(draws, minlength=4) / 100_000 - p).sum()
    assert tv <= 0.02, f"Gumbel-max TV {tv:.4f}"
    _pass(f"discrete priors: causality exact, masked-loss grads clean, "
          f"schedule partitions, Gumbel TV {tv:.3%}")


# -- 5: metric oracles --------------------------------------------------------------


def test_metric_closed_forms_and_null_behavior():
    a = FeatureStats(np.array([0.5]), np.array([[2.0]]))
    b = FeatureStats(np.array([-1.5]), np.array([[0.5]]))
    want = (0.5 + 1.5) ** 2 + 2.0 + 0.5 - 2.0 * np.sqrt(2.0 * 0.5)
    got = frechet_distance(a, b)
    assert abs(got - want) <= 1e-8, f"1-D Frechet {got} vs {want}"

    eye = np.eye(4)
    delta = np.array([1.0, -2.0, 0.5, 3.0])
    got = frechet_distance(FeatureStats(np.zeros(4), eye), FeatureStats(delta, eye))
    assert abs(got - float(delta @ delta)) <= 1e-8

    x = np.zeros((5, 5))
    got = psnr(x, np.full((5, 5), 0.1))
    assert abs(got - 20.0) < 1e-9

    rng = np.random.default_rng(5)
    kids = []
    for _ in range(100):
        feats = rng.normal(size=(200, 8))
        kids.append(kid(feats[:100], feats[100:]))
    kids = np.array(kids)
    se = kids.std(ddof=1) / np.sqrt(len(kids))
    assert abs(kids.mean()) <= 3.0 * se, f"KID null mean {kids.mean():.2e}, SE {se:.2e}"
    _pass(f"metrics: Frechet closed forms exact, PSNR pin 20 dB, "
          f"KID null {kids.mean():.1e} within 3 SE ({se:.1e})")


# -- 6: desk-scale tokenizer training -----------------------------------------------


def test_desk_scale_tokenizer_quality_and_budget(zoo, desk_data):
    test_images = desk_data.test.images
    vae_psnr = _recon_psnr(zoo.vae, test_images)
    vq_psnr = _recon_psnr(zoo.vq, test_images)
    toks = []
    with T.no_grad():
        for i in range(0, len(test_images), 100):
            toks.append(zoo.vq.tokenize(Tensor(test_images[i : i + 100][:, None])))
    util = codebook_utilization(np.concatenate(toks), zoo.vq.K)
    minutes = zoo.tokenizer_seconds / 60.0
    assert vae_psnr >= 25.0, f"VAE test PSNR {vae_psnr:.2f} dB < 25"
    assert vq_psnr >= 22.0, f"VQ test PSNR {vq_psnr:.2f} dB < 22"
    assert util >= 0.5, f"codebook utilization {util:.2f} < 0.5"
    assert minutes <= 30.0, f"tokenizer training took {minutes:.1f} min"
    _pass(f"desk-scale tokenizers: VAE {vae_psnr:.2f} dB, VQ {vq_psnr:.2f} dB, "
          f"utilization {util:.2f}, trained in {minutes:.1f} min")


# -- 7: spectrum shape --------------------------------------------------------------


def test_spectrum_shape_monotone_anchored_with_interior_maximum(zoo, spectrum):
    sweep, rows = spectrum.sweep, spectrum.rows
    cells = {(c.model, c.ratio): c for c in sweep.cells}
    assert not any(c.failed for c in sweep.cells)

    for model in sweep.models:
        psnrs = [cells[(model, r)].psnr for r in RATIO_GRID]
        rho, p = scipy_stats.spearmanr(RATIO_GRID, psnrs)
        assert rho < 0 and p < 0.05, f"{model}: rho {rho:.3f}, p {p:.3g}"

    recon = {"diffusion": _recon_psnr(zoo.vae, spectrum.images),
             "causal": _recon_psnr(zoo.vq, spectrum.images),
             "masked": _recon_psnr(zoo.vq, spectrum.images)}
    for model, want in recon.items():
        got = cells[(model, 0.0)].psnr
        assert abs(got - want) <= 0.1, f"{model} ratio-0 anchor {got:.2f} vs {want:.2f}"

    gfid = {r["model"]: r["gfid"] for r in rows}
    for model in sweep.models:
        rfid1 = cells[(model, 1.0)].rfid
        rel = abs(rfid1 - gfid[model]) / gfid[model]
        assert rel <= 0.15, f"{model} ratio-1 rFID {rfid1:.3f} vs gFID {gfid[model]:.3f} ({rel:.1%})"

    dif = [cells[("diffusion", r)].rfid for r in RATIO_GRID]
    interior_max = max(dif[1:-1])
    assert interior_max > dif[0] and interior_max > dif[-1], (
        f"no interior rFID maximum: endpoints {dif[0]:.3f}/{dif[-1]:.3f}, "
        f"interior max {interior_max:.3f}")
    peak_ratio = RATIO_GRID[1 + int(np.argmax(dif[1:-1]))]

    assert spectrum.elapsed <= 20 * 60, f"sweep took {spectrum.elapsed/60:.1f} min"
    _pass(f"spectrum: PSNR monotone (all rho<0, p<0.05), anchors hold, diffusion "
          f"rFID peaks at ratio {peak_ratio}, sweep {spectrum.elapsed/60:.1f} min")


# -- 8: temperature surface ---------------------------------------------------------


def test_temperature_direction_for_diffusion_and_masked(zoo, desk_data):
    images = desk_data.test.images[:SWEEP_N]
    dif_pipe = [p for p in _pipelines(zoo) if p.name == "diffusion"]
    mas_pipe = [p for p in _pipelines(zoo) if p.name == "masked"]

    high = run_spectrum(dif_pipe, images, zoo.fe, ratios=(0.9, 1.0),
                        taus=(0.5, 1.5), n=SWEEP_N, seed=1)
    rfid = {(c.ratio, c.tau): c.rfid for c in high.cells}
    cool = np.mean([rfid[(r, 0.5)] for r in (0.9, 1.0)])
    hot = np.mean([rfid[(r, 1.5)] for r in (0.9, 1.0)])
    assert cool <= hot, f"high-ratio diffusion rFID: tau 0.5 {cool:.3f} > tau 1.5 {hot:.3f}"

    low = run_spectrum(mas_pipe, images, zoo.fe, ratios=(0.1, 0.2),
                       taus=(0.25, 1.5), n=SWEEP_N, seed=1)
    p = {(c.ratio, c.tau): c.psnr for c in low.cells}
    sharp = np.mean([p[(r, 0.25)] for r in (0.1, 0.2)])
    diverse = np.mean([p[(r, 1.5)] for r in (0.1, 0.2)])
    assert sharp >= diverse, f"low-ratio masked PSNR: tau 0.25 {sharp:.2f} < tau 1.5 {diverse:.2f}"
    _pass(f"temperature: diffusion high-ratio rFID {cool:.3f} (tau .5) <= {hot:.3f} "
          f"(tau 1.5); masked low-ratio PSNR {sharp:.2f} (tau .25) >= {diverse:.2f} (tau 1.5)")


# -- 9: sweep determinism -----------------------------------------------------------


def test_cli_sweep_is_bitwise_deterministic_across_thread_counts(zoo, desk_data, tmp_path):
    data_path = str(tmp_path / "eval.gmzd")
    save_dataset(make_dataset("test", 16, size=32), data_path)
    blobs = {}
    for threads in (1, 4):
        out = tmp_path / f"t{threads}"
        cfg = tmp_path / f"t{threads}.cfg"
        cfg.write_text(
            "models = diffusion,causal,masked\n"
            f"diffusion.prior = {zoo.paths['diffusion']}\n"
            f"diffusion.tokenizer = {zoo.paths['vae']}\n"
            f"causal.prior = {zoo.paths['causal']}\n"
            f"causal.tokenizer = {zoo.paths['vq']}\n"
            f"masked.prior = {zoo.paths['masked']}\n"
            f"masked.tokenizer = {zoo.paths['vq']}\n"
            f"feature = {zoo.paths['feature']}\n"
            f"data = {data_path}\n"
            "n = 16\nseed = 77\nratios = 0,0.5,1\ntaus = 1.0\n"
            f"threads = {threads}\nout = {out}\n"
        )
        assert cli_main(["sweep", "--config", str(cfg)]) == 0
        blobs[threads] = (out / "metrics.csv").read_bytes()
    assert blobs[1] == blobs[4], "metrics.csv differs between threads=1 and threads=4"
    _pass(f"determinism: sweep metrics.csv bitwise identical at threads 1 and 4 "
          f"({len(blobs[1])} bytes)")


# -- 10: TPS bookkeeping ------------------------------------------------------------


def test_time_per_sample_tracks_step_count_and_decode_parallelism(zoo):
    full = make_schedule(steps=200)
    half = make_schedule(steps=100)
    pipe_full = DiffusionPipeline("d200", zoo.vae, zoo.denoiser, full, zoo.latent_scale)
    pipe_half = DiffusionPipeline("d100", zoo.vae, zoo.denoiser, half, zoo.latent_scale)
    rng = np.random.default_rng(6)
    tps_full = time_per_sample(lambda n: pipe_full.sample(n, 1.0, rng), n=4)
    tps_half = time_per_sample(lambda n: pipe_half.sample(n, 1.0, rng), n=4)
    ratio = tps_half / tps_full
    assert 0.375 <= ratio <= 0.625, f"halving steps gave TPS ratio {ratio:.3f}"

    causal = CausalPipeline("causal", zoo.vq, zoo.causal)
    masked = MaskedPipeline("masked", zoo.vq, zoo.masked, steps=8)
    tps_causal = time_per_sample(lambda n: causal.sample(n, 1.0, rng), n=4)
    tps_masked = time_per_sample(lambda n: masked.sample(n, 1.0, rng), n=4)
    assert tps_masked < tps_causal, (
        f"8-round parallel decode ({tps_masked:.3f}s) not faster than "
        f"sequential ({tps_causal:.3f}s)")
    _pass(f"TPS: halved steps ratio {ratio:.2f} (want 0.5 +-25%); maskgit "
          f"{tps_masked*1e3:.0f} ms < causal {tps_causal*1e3:.0f} ms per sample")
