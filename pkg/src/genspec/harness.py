"""The reconstruction-generation spectrum experiment.

Masks held-out images at a grid of ratios and temperatures, runs each model's
inpainting path, and scores every cell with rFID / PSNR / SSIM plus wall-clock
time per sample. Ratio 0 runs the tokenizer-only reconstruction (nothing to
generate); every other cell composites the decoded output with the input in
pixel space, so unmasked pixels match the input exactly. Grid cells are
independent jobs with RNG streams derived from (seed, model, ratio, tau);
aggregation is single-threaded and order-fixed, so a sweep is deterministic at
any thread count.
"""

from __future__ import annotations

import csv
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .diffusion import NoiseSchedule
from .diffusion import inpaint as diffusion_inpaint
from .diffusion import sample as diffusion_sample
from .errors import GenspecError, ShapeError
from .metrics import FeatureExtractor, feature_stats, frechet_distance, kid, psnr, ssim
from .tensor import Tensor
from .tokenizer import FACTOR, VaeModel, VqModel
from .tokprior import SeqModel, maskgit_decode, sample_causal

GEOMETRIES = ("random-rect", "random-token")
DEFAULT_RATIOS = tuple(round(0.1 * i, 1) for i in range(11))
DEFAULT_TAUS = (0.25, 0.5, 0.75, 1.0, 1.25, 1.5)


@dataclass(frozen=True)
class MaskSpec:
    ratio: float
    geometry: str = "random-rect"
    seed: int = 0

    def __post_init__(self):
        if not (0.0 <= self.ratio <= 1.0):
            raise GenspecError(f"mask ratio must lie in [0, 1], got {self.ratio}")
        if self.geometry not in GEOMETRIES:
            raise GenspecError(f"mask geometry must be one of {GEOMETRIES}, got {self.geometry!r}")


def _rect_pixels(ratio: float, size: int, rng: np.random.Generator) -> np.ndarray:
    """Axis-aligned rectangles (overlap allowed, <= 64 of them) covering the
    target pixel count exactly; each rectangle is shrunk so its fresh area
    never overshoots the remaining deficit."""
    target = round(ratio * size * size)
    covered = np.zeros((size, size), dtype=bool)
    if target == 0:
        return covered
    if target == size * size:
        return ~covered
    for _ in range(64):
        deficit = target - int(covered.sum())
        if deficit <= 0:
            break
        cy, cx = divmod(int(rng.choice(np.flatnonzero(~covered))), size)
        side = max(1, int(round(np.sqrt(deficit) * rng.uniform(0.6, 1.4))))
        h = min(side, size)
        w = min(max(1, int(round(side * rng.uniform(0.6, 1.4)))), size)
        while True:
            y0 = min(max(cy - h // 2, 0), size - h)
            x0 = min(max(cx - w // 2, 0), size - w)
            block = covered[y0 : y0 + h, x0 : x0 + w]
            fresh = block.size - int(block.sum())
            if fresh <= deficit:
                break
            scale = np.sqrt(deficit / fresh)
            h2, w2 = max(1, int(h * scale)), max(1, int(w * scale))
            if (h2, w2) == (h, w):
                h2, w2 = max(1, h - 1), max(1, w - 1)  # force progress
            h, w = h2, w2
        covered[y0 : y0 + h, x0 : x0 + w] = True
    deficit = target - int(covered.sum())
    if deficit > FACTOR * FACTOR:
        raise GenspecError(f"mask generation stalled {deficit} pixels short of the target")
    return covered


def make_mask(spec: MaskSpec, image_size: int = 32, factor: int = FACTOR):
    """-> (pixel (S,S), latent (g,g), token (g*g,)) boolean views, aligned so a
    latent cell is masked iff at least half of its pixel block is masked."""
    if image_size % factor:
        raise ShapeError(f"image size {image_size} not divisible by the factor {factor}")
    g = image_size // factor
    rng = np.random.default_rng(spec.seed)
    if spec.geometry == "random-token":
        latent = np.zeros(g * g, dtype=bool)
        m = round(spec.ratio * g * g)
        if m:
            latent[rng.choice(g * g, size=m, replace=False)] = True
        latent = latent.reshape(g, g)
        pixel = np.kron(latent, np.ones((factor, factor), dtype=bool))
    else:
        pixel = _rect_pixels(spec.ratio, image_size, rng)
        block_counts = pixel.reshape(g, factor, g, factor).sum(axis=(1, 3))
        latent = 2 * block_counts >= factor * factor
    return pixel, latent, latent.reshape(-1)


# -- model pipelines ---------------------------------------------------------------


class DiffusionPipeline:
    """VAE tokenizer + latent DDPM; inpaints by known-region injection."""

    protocol = "as-given"

    def __init__(self, name: str, vae: VaeModel, denoiser, schedule: NoiseSchedule,
                 latent_scale: float, image_size: int = 32):
        self.name = name
        self.vae = vae
        self.schedule = schedule
        self.latent_scale = latent_scale
        self.image_size = image_size
        self._sampler = denoiser.as_sampler()

    def _decode(self, z: np.ndarray) -> np.ndarray:
        with T.no_grad():
            return self.vae.decode(Tensor(z * self.latent_scale)).data[:, 0]

    def reconstruct(self, images: np.ndarray) -> np.ndarray:
        with T.no_grad():
            return self.vae.reconstruct(Tensor(images[:, None])).data[:, 0]

    def inpaint(self, images: np.ndarray, masks, tau: float, rng: np.random.Generator) -> np.ndarray:
        _, latent, _ = masks
        with T.no_grad():
            mu = self.vae.encode(Tensor(images[:, None])).mu.data
        z = diffusion_inpaint(self._sampler, self.schedule, mu / self.latent_scale,
                              latent[:, None], tau, rng)
        return self._decode(z)

    def sample(self, count: int, tau: float, rng: np.random.Generator) -> np.ndarray:
        g = self.image_size // FACTOR
        z = diffusion_sample(self._sampler, self.schedule,
                             (count, self.vae.z_channels, g, g), tau, rng)
        return self._decode(z)


class CausalPipeline:
    """VQ tokenizer + causal transformer; conditions on a raster prefix only,
    so its inpainting protocol masks a trailing raster segment."""

    protocol = "raster-suffix"

    def __init__(self, name: str, vq: VqModel, model: SeqModel, top_k: int | None = None):
        self.name = name
        self.vq = vq
        self.model = model
        self.top_k = top_k or model.K

    def _tokens(self, images: np.ndarray) -> np.ndarray:
        with T.no_grad():
            return self.vq.tokenize(Tensor(images[:, None])).reshape(len(images), -1)

    def _decode(self, flat: np.ndarray) -> np.ndarray:
        g = int(np.sqrt(flat.shape[1]))
        with T.no_grad():
            return self.vq.decode_tokens(flat.reshape(-1, g, g)).data[:, 0]

    def reconstruct(self, images: np.ndarray) -> np.ndarray:
        with T.no_grad():
            return self.vq.reconstruct(Tensor(images[:, None])).data[:, 0]

    def inpaint(self, images: np.ndarray, masks, tau: float, rng: np.random.Generator) -> np.ndarray:
        _, _, token = masks
        m = int(token[0].sum())
        want = np.zeros_like(token[0])
        if m:
            want[token.shape[1] - m :] = True
        if not np.all(token == want):
            raise GenspecError("causal inpainting needs raster-suffix token masks")
        tokens = self._tokens(images)
        prefix = tokens[:, : tokens.shape[1] - m]
        return self._decode(sample_causal(self.model, prefix, tau, self.top_k, rng))

    def sample(self, count: int, tau: float, rng: np.random.Generator) -> np.ndarray:
        prefix = np.zeros((count, 0), dtype=np.int64)
        return self._decode(sample_causal(self.model, prefix, tau, self.top_k, rng))


class MaskedPipeline:
    """VQ tokenizer + bidirectional transformer with iterative parallel decoding."""

    protocol = "as-given"

    def __init__(self, name: str, vq: VqModel, model: SeqModel, steps: int = 8):
        self.name = name
        self.vq = vq
        self.model = model
        self.steps = steps

    _tokens = CausalPipeline._tokens
    _decode = CausalPipeline._decode
    reconstruct = CausalPipeline.reconstruct

    def inpaint(self, images: np.ndarray, masks, tau: float, rng: np.random.Generator) -> np.ndarray:
        _, _, token = masks
        tokens = self._tokens(images)
        return self._decode(maskgit_decode(self.model, tokens, token, self.steps, tau, rng))

    def sample(self, count: int, tau: float, rng: np.random.Generator) -> np.ndarray:
        n = self.model.seq_len
        blank = np.zeros((count, n), dtype=np.int64)
        full = np.ones((count, n), dtype=bool)
        return self._decode(maskgit_decode(self.model, blank, full, self.steps, tau, rng))


# -- the sweep ----------------------------------------------------------------------


@dataclass
class CellMetrics:
    model: str
    ratio: float
    tau: float
    rfid: float
    psnr: float
    ssim: float
    tps: float
    n_samples: int
    failed: bool = False
    protocol: str = "random-rect"


@dataclass
class SweepResult:
    models: list[str]
    ratios: list[float]
    taus: list[float]
    n: int
    seed: int
    geometry: str
    cells: list[CellMetrics] = field(default_factory=list)
    provenance: dict = field(default_factory=dict)


def _cell_masks(pipe, ratio: float, geometry: str, count: int, size: int,
                rng: np.random.Generator):
    """Per-image mask stack in the pipeline's protocol."""
    g = size // FACTOR
    if pipe.protocol == "raster-suffix":
        m = round(ratio * g * g)
        token = np.zeros(g * g, dtype=bool)
        if m:
            token[g * g - m :] = True
        latent = token.reshape(g, g)
        pixel = np.kron(latent, np.ones((FACTOR, FACTOR), dtype=bool))
        tile = lambda a: np.broadcast_to(a, (count,) + a.shape).copy()
        return tile(pixel), tile(latent), tile(token)
    seeds = rng.integers(0, 2**63 - 1, size=count)
    views = [make_mask(MaskSpec(ratio, geometry, int(s)), size) for s in seeds]
    return tuple(np.stack([v[i] for v in views]) for i in range(3))


def inpaint_grid_cell(pipe, images: np.ndarray, ratio: float, tau: float,
                      geometry: str, rng: np.random.Generator):
    """One grid cell's outputs: (composited images, per-image pixel masks).
    Ratio 0 is the tokenizer-only reconstruction path (zero mask, nothing
    composited); otherwise unmasked pixels are copied from the input exactly."""
    if ratio == 0:
        return pipe.reconstruct(images), np.zeros(images.shape, dtype=bool)
    masks = _cell_masks(pipe, ratio, geometry, len(images), images.shape[-1], rng)
    raw = pipe.inpaint(images, masks, tau, rng)
    return np.where(masks[0], raw, images), masks[0]


def _eval_cell(pipe, images: np.ndarray, ratio: float, tau: float, geometry: str,
               rng: np.random.Generator, fe: FeatureExtractor, truth_stats,
               n: int) -> CellMetrics:
    protocol = "reconstruction" if ratio == 0 else (
        pipe.protocol if pipe.protocol == "raster-suffix" else geometry)
    base = dict(model=pipe.name, ratio=ratio, tau=tau, n_samples=n, protocol=protocol)
    try:
        t0 = time.perf_counter()
        outputs, _ = inpaint_grid_cell(pipe, images, ratio, tau, geometry, rng)
        elapsed = time.perf_counter() - t0
    except (GenspecError, NotImplementedError, AttributeError) as exc:
        nan = float("nan")
        return CellMetrics(rfid=nan, psnr=nan, ssim=nan, tps=nan, failed=True,
                           **{**base, "protocol": f"failed: {exc}"})
    stats = feature_stats(fe.features(outputs))
    return CellMetrics(rfid=frechet_distance(stats, truth_stats),
                       psnr=psnr(images, outputs), ssim=ssim(images, outputs),
                       tps=elapsed / n, **base)


def run_spectrum(pipelines: list, images: np.ndarray, fe: FeatureExtractor,
                 ratios=DEFAULT_RATIOS, taus=DEFAULT_TAUS, n: int = 200, seed: int = 0,
                 geometry: str = "random-rect", threads: int = 1, log=None) -> SweepResult:
    """Evaluate every (model, ratio, tau) cell on the first n images."""
    if geometry not in GEOMETRIES:
        raise GenspecError(f"mask geometry must be one of {GEOMETRIES}, got {geometry!r}")
    if len(images) < n:
        raise GenspecError(f"need {n} evaluation images, got {len(images)}")
    if threads < 1:
        raise GenspecError(f"thread count must be positive, got {threads}")
    images = np.asarray(images[:n], dtype=np.float64)
    truth_stats = feature_stats(fe.features(images))
    result = SweepResult(models=[p.name for p in pipelines], ratios=list(ratios),
                         taus=list(taus), n=n, seed=seed, geometry=geometry)

    jobs = [(mi, ri, ti) for mi in range(len(pipelines))
            for ri in range(len(ratios)) for ti in range(len(taus))]

    def run_job(job):
        mi, ri, ti = job
        rng = np.random.default_rng([seed, mi, ri, ti])
        cell = _eval_cell(pipelines[mi], images, ratios[ri], taus[ti], geometry,
                          rng, fe, truth_stats, n)
        if log:
            log(f"cell model={cell.model} ratio={cell.ratio} tau={cell.tau} "
                f"rfid={cell.rfid:.4f} psnr={cell.psnr:.2f}")
        return cell

    if threads == 1:
        result.cells = [run_job(j) for j in jobs]
    else:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            result.cells = list(pool.map(run_job, jobs))  # input order preserved
    return result


def run_unconditional(pipelines: list, test_images: np.ndarray, fe: FeatureExtractor,
                      n: int = 500, tau: float = 1.0, seed: int = 0, log=None) -> list[dict]:
    """Per-model gFID/KID/TPS against the test set, plus a split-half control row."""
    test_images = np.asarray(test_images, dtype=np.float64)
    ref_feats = fe.features(test_images)
    ref_stats = feature_stats(ref_feats)
    half = len(test_images) // 2
    rows = [{
        "model": "test-split-control",
        "gfid": frechet_distance(feature_stats(ref_feats[:half]), feature_stats(ref_feats[half:])),
        "kid": kid(ref_feats[:half], ref_feats[half:]),
        "tps": float("nan"),
        "n": n,
    }]
    for mi, pipe in enumerate(pipelines):
        rng = np.random.default_rng([seed, mi])
        t0 = time.perf_counter()
        samples = pipe.sample(n, tau, rng)
        elapsed = time.perf_counter() - t0
        feats = fe.features(samples)
        rows.append({
            "model": pipe.name,
            "gfid": frechet_distance(feature_stats(feats), ref_stats),
            "kid": kid(feats, ref_feats),
            "tps": elapsed / n,
            "n": n,
        })
        if log:
            log(f"unconditional model={pipe.name} gfid={rows[-1]['gfid']:.4f} "
                f"tps={rows[-1]['tps']:.4f}s")
    return rows


# -- export -------------------------------------------------------------------------

METRIC_COLUMNS = ["model", "protocol", "ratio", "tau", "n", "rfid", "psnr", "ssim", "failed"]


def _fmt(v) -> str:
    return repr(float(v))  # shortest round-trip decimal


def export(sweep: SweepResult, out_dir: str) -> list[str]:
    """Writes metrics.csv (deterministic), timings.csv (wall clock), and one
    curve + one heatmap vector plot per model. Returns the written paths."""
    try:
        os.makedirs(out_dir, exist_ok=True)
        probe = os.path.join(out_dir, ".write-probe")
        with open(probe, "w"):
            pass
        os.remove(probe)
    except OSError as exc:
        raise GenspecError(f"output directory {out_dir!r} is not writable: {exc}") from None

    paths = [os.path.join(out_dir, "metrics.csv")]
    with open(paths[0], "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(METRIC_COLUMNS)
        for c in sweep.cells:
            w.writerow([c.model, c.protocol, _fmt(c.ratio), _fmt(c.tau), c.n_samples,
                        _fmt(c.rfid), _fmt(c.psnr), _fmt(c.ssim), int(c.failed)])

    paths.append(os.path.join(out_dir, "timings.csv"))
    with open(paths[1], "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["model", "ratio", "tau", "tps"])
        for c in sweep.cells:
            w.writerow([c.model, _fmt(c.ratio), _fmt(c.tau), _fmt(c.tps)])

    paths.extend(_export_figures(sweep, out_dir))
    return paths


def _export_figures(sweep: SweepResult, out_dir: str) -> list[str]:
    import matplotlib

    from matplotlib.figure import Figure

    written = []
    tau_idx = int(np.argmin(np.abs(np.array(sweep.taus) - 1.0)))
    with matplotlib.rc_context({"svg.hashsalt": "genspec", "svg.fonttype": "none"}):
        for name in sweep.models:
            cells = [c for c in sweep.cells if c.model == name and not c.failed]
            grid = np.full((len(sweep.ratios), len(sweep.taus)), np.nan)
            for c in cells:
                grid[sweep.ratios.index(c.ratio), sweep.taus.index(c.tau)] = c.rfid

            fig = Figure(figsize=(5, 3.5))
            ax = fig.add_subplot()
            line = [c for c in cells if c.tau == sweep.taus[tau_idx]]
            line.sort(key=lambda c: c.ratio)
            xs = [c.ratio for c in line]
            ax.plot(xs, [c.rfid for c in line], "o-", color="tab:red", label="rFID")
            ax.set_xlabel("mask ratio")
            ax.set_ylabel("rFID", color="tab:red")
            ax2 = ax.twinx()
            ax2.plot(xs, [c.psnr for c in line], "s--", color="tab:blue", label="PSNR")
            ax2.set_ylabel("PSNR (dB)", color="tab:blue")
            ax.set_title(f"{name} (tau={sweep.taus[tau_idx]})")
            path = os.path.join(out_dir, f"curve_{name}.svg")
            fig.savefig(path, format="svg", metadata={"Date": None})
            written.append(path)

            fig = Figure(figsize=(4.5, 3.5))
            ax = fig.add_subplot()
            pad = lambda lo, hi: (lo - 0.5, hi + 0.5) if lo == hi else (lo, hi)
            im = ax.imshow(grid, aspect="auto", origin="lower",
                           extent=pad(min(sweep.taus), max(sweep.taus))
                           + pad(min(sweep.ratios), max(sweep.ratios)))
            ax.set_xlabel("temperature")
            ax.set_ylabel("mask ratio")
            ax.set_title(f"{name} rFID")
            fig.colorbar(im, ax=ax)
            path = os.path.join(out_dir, f"heatmap_{name}.svg")
            fig.savefig(path, format="svg", metadata={"Date": None})
            written.append(path)
    return written


def parse(out_dir: str) -> SweepResult:
    """Rebuild a SweepResult's numeric cells from an export directory.
    Provenance fields (seed, geometry) are not stored in the CSVs; the
    resolved-config echo next to the outputs carries them."""
    metrics_path = os.path.join(out_dir, "metrics.csv")
    timings = {}
    timings_path = os.path.join(out_dir, "timings.csv")
    if os.path.exists(timings_path):
        with open(timings_path, newline="") as fh:
            for row in csv.DictReader(fh):
                timings[(row["model"], row["ratio"], row["tau"])] = float(row["tps"])
    cells = []
    with open(metrics_path, newline="") as fh:
        for row in csv.DictReader(fh):
            cells.append(CellMetrics(
                model=row["model"], protocol=row["protocol"], ratio=float(row["ratio"]),
                tau=float(row["tau"]), n_samples=int(row["n"]), rfid=float(row["rfid"]),
                psnr=float(row["psnr"]), ssim=float(row["ssim"]),
                failed=bool(int(row["failed"])),
                tps=timings.get((row["model"], row["ratio"], row["tau"]), float("nan")),
            ))
    models = list(dict.fromkeys(c.model for c in cells))
    ratios = sorted({c.ratio for c in cells})
    taus = sorted({c.tau for c in cells})
    n = cells[0].n_samples if cells else 0
    return SweepResult(models=models, ratios=ratios, taus=taus, n=n, seed=0,
                       geometry="", cells=cells)


def write_report_csv(rows: list[dict], path: str) -> None:
    """Unconditional-generation report: one row per model plus the control."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["model", "n", "gfid", "kid", "tps"])
        for r in rows:
            w.writerow([r["model"], r["n"], _fmt(r["gfid"]), _fmt(r["kid"]), _fmt(r["tps"])])
