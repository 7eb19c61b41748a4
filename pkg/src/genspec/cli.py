"""Command-line entry point.

One binary, subcommand per pipeline stage: data generation, tokenizer and
prior training, sampling, inpainting, evaluation, spectrum sweeps, and a
self-check suite. Exit codes: 0 success, 1 usage error, 2 data or validation
error, 3 numeric failure (non-finite loss). Progress goes to standard error;
artifacts (datasets, checkpoints, CSVs, plots) go to the configured paths, and
every run writes its resolved config next to its outputs.
"""

from __future__ import annotations

import argparse
import os
import sys

import numpy as np

from .config import Config
from .data import Dataset, load_dataset, make_dataset, save_dataset
from .errors import ConfigError, GenspecError, NumericalError
from .harness import (
    DEFAULT_RATIOS,
    DEFAULT_TAUS,
    CausalPipeline,
    DiffusionPipeline,
    MaskedPipeline,
    export,
    inpaint_grid_cell,
    run_spectrum,
    run_unconditional,
    write_report_csv,
)
from .modelio import load_model, save_model, schedule_from_meta
from .tokprior import MASKGIT_RATIOS, MaskRatioDist
from .train import (
    train_diffusion,
    train_feature_extractor,
    train_token_prior,
    train_vae,
    train_vq,
)


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse defaults to exit 2; usage errors are 1 here
        raise _UsageError(message)


def _progress(msg: str) -> None:
    print(msg, file=sys.stderr, flush=True)


def _load_config(args, allowed: set[str]) -> Config:
    cfg = Config.from_file(args.config) if args.config else Config()
    cfg.override(args.set or [])
    if getattr(args, "out", None):
        cfg.values["out"] = args.out
    cfg.require_known(allowed)
    return cfg


def _require_kind(model, want: str, path: str):
    kind = getattr(model, "kind", "?")
    if kind != want:
        raise ConfigError(f"checkpoint {path!r} holds a {kind!r} model, expected {want!r}")
    return model


def _build_pipeline(name: str, cfg: Config, prefix: str = ""):
    """Assemble a sampling pipeline from `<prefix>prior` / `<prefix>tokenizer` keys."""
    prior_path = cfg.get_path(prefix + "prior")
    tok_path = cfg.get_path(prefix + "tokenizer")
    prior, meta = load_model(prior_path)
    tok, _ = load_model(tok_path)
    kind = getattr(prior, "kind", "?")
    if kind == "diffusion":
        _require_kind(tok, "vae", tok_path)
        if "latent_scale" not in meta:
            raise ConfigError(f"diffusion checkpoint {prior_path!r} lacks latent_scale metadata")
        return DiffusionPipeline(name, tok, prior, schedule_from_meta(meta), meta["latent_scale"])
    if kind == "causal":
        _require_kind(tok, "vq", tok_path)
        top_k = cfg.get_int(prefix + "top_k", 0) or None
        return CausalPipeline(name, tok, prior, top_k)
    if kind == "masked":
        _require_kind(tok, "vq", tok_path)
        return MaskedPipeline(name, tok, prior, steps=cfg.get_int(prefix + "steps", 8))
    raise ConfigError(f"checkpoint {prior_path!r} holds a {kind!r} model, not a prior")


# -- subcommands --------------------------------------------------------------------


def cmd_gen_data(args) -> int:
    cfg = _load_config(args, {"split", "count", "size", "seed", "out"})
    cfg.set_default("size", 32)
    split = cfg.get_str("split")
    count = cfg.get_int("count")
    size = cfg.get_int("size")
    base = cfg.get_int("seed") if "seed" in cfg.values else None
    out = cfg.get_path("out")
    ds = make_dataset(split, count, size, base_seed=base)
    save_dataset(ds, out)
    cfg.write_resolved(out)
    _progress(f"wrote {out}: {count} phantoms, {size}x{size}, split {split}")
    return 0


def _save_partial_on_nan(exc: NumericalError, out: str) -> None:
    result = exc.partial
    if result is not None and result.best_state is not None:
        result.restore_best()
        save_model(out, result.model)
        _progress(f"non-finite loss; kept last good checkpoint at {out}")


_TOKENIZER_KEYS = {"kind", "train_data", "val_data", "epochs", "batch", "lr", "warmup",
                   "kl_weight", "beta", "lam", "use_gan", "noise_std", "seed", "out"}


def cmd_train_tokenizer(args) -> int:
    cfg = _load_config(args, _TOKENIZER_KEYS)
    kind = cfg.get_str("kind")
    if kind not in ("vae", "vq", "feature"):
        raise ConfigError(f"tokenizer kind must be vae, vq, or feature, got {kind!r}")
    cfg.set_default("epochs", 10 if kind == "feature" else 30)
    cfg.set_default("batch", 64)
    cfg.set_default("lr", 1e-3 if kind == "feature" else 1e-4)
    cfg.set_default("warmup", 200)
    cfg.set_default("seed", 0)
    train_ds = load_dataset(cfg.get_path("train_data"))
    val_ds = load_dataset(cfg.get_path("val_data"))
    out = cfg.get_path("out")
    common = dict(epochs=cfg.get_int("epochs"), batch=cfg.get_int("batch"),
                  lr=cfg.get_float("lr"), seed=cfg.get_int("seed"), log=_progress)
    try:
        if kind == "vae":
            cfg.set_default("kl_weight", 1e-4)
            result = train_vae(train_ds, val_ds, warmup=cfg.get_int("warmup"),
                               kl_weight=cfg.get_float("kl_weight"), **common)
        elif kind == "vq":
            cfg.set_default("beta", 0.25)
            cfg.set_default("lam", 0.1)
            cfg.set_default("use_gan", "false")
            result = train_vq(train_ds, val_ds, warmup=cfg.get_int("warmup"),
                              beta=cfg.get_float("beta"), lam=cfg.get_float("lam"),
                              use_gan=cfg.get_bool("use_gan"), **common)
        else:
            cfg.set_default("noise_std", 0.1)
            result = train_feature_extractor(train_ds, val_ds,
                                             noise_std=cfg.get_float("noise_std"), **common)
    except NumericalError as exc:
        _save_partial_on_nan(exc, out)
        raise
    result.restore_best()
    save_model(out, result.model)
    cfg.write_resolved(out)
    _progress(f"wrote {out}: {kind} tokenizer, best val {result.best_val:.6f}")
    return 0


_PRIOR_KEYS = {"kind", "tokenizer", "train_data", "val_data", "epochs", "batch", "lr",
               "warmup", "T", "beta_start", "beta_end", "eta",
               "mask_mean", "mask_std", "mask_lo", "mask_hi", "seed", "out"}


def cmd_train_prior(args) -> int:
    cfg = _load_config(args, _PRIOR_KEYS)
    kind = cfg.get_str("kind")
    if kind not in ("diffusion", "causal", "masked"):
        raise ConfigError(f"prior kind must be diffusion, causal, or masked, got {kind!r}")
    cfg.set_default("epochs", 40 if kind == "diffusion" else 30)
    cfg.set_default("batch", 64)
    cfg.set_default("lr", 1e-4)
    cfg.set_default("warmup", 200)
    cfg.set_default("seed", 0)
    tok_path = cfg.get_path("tokenizer")
    tokenizer, _ = load_model(tok_path)
    train_ds = load_dataset(cfg.get_path("train_data"))
    val_ds = load_dataset(cfg.get_path("val_data"))
    out = cfg.get_path("out")
    common = dict(epochs=cfg.get_int("epochs"), batch=cfg.get_int("batch"),
                  lr=cfg.get_float("lr"), seed=cfg.get_int("seed"),
                  warmup=cfg.get_int("warmup"), log=_progress)
    try:
        if kind == "diffusion":
            _require_kind(tokenizer, "vae", tok_path)
            cfg.set_default("T", 200)
            cfg.set_default("beta_start", 1e-4)
            cfg.set_default("beta_end", 0.02)
            cfg.set_default("eta", 1.0)
            extra = {"T": cfg.get_int("T"), "beta_start": cfg.get_float("beta_start"),
                     "beta_end": cfg.get_float("beta_end"), "eta": cfg.get_float("eta")}
            result, _, scale = train_diffusion(tokenizer, train_ds, val_ds,
                                               steps_T=extra["T"],
                                               beta_start=extra["beta_start"],
                                               beta_end=extra["beta_end"],
                                               eta=extra["eta"], **common)
            extra["latent_scale"] = scale
        else:
            _require_kind(tokenizer, "vq", tok_path)
            mask_dist = None
            if kind == "masked":
                cfg.set_default("mask_mean", MASKGIT_RATIOS.mean)
                cfg.set_default("mask_std", MASKGIT_RATIOS.std)
                cfg.set_default("mask_lo", MASKGIT_RATIOS.lo)
                cfg.set_default("mask_hi", MASKGIT_RATIOS.hi)
                mask_dist = MaskRatioDist(mean=cfg.get_float("mask_mean"),
                                          std=cfg.get_float("mask_std"),
                                          lo=cfg.get_float("mask_lo"),
                                          hi=cfg.get_float("mask_hi"))
            extra = None
            result = train_token_prior(tokenizer, train_ds, val_ds, mode=kind,
                                       mask_dist=mask_dist, **common)
    except NumericalError as exc:
        _save_partial_on_nan(exc, out)
        raise
    result.restore_best()
    save_model(out, result.model, extra=extra)
    cfg.write_resolved(out)
    _progress(f"wrote {out}: {kind} prior, best val {result.best_val:.6f}")
    return 0


def cmd_sample(args) -> int:
    cfg = _load_config(args, {"prior", "tokenizer", "count", "tau", "steps", "top_k",
                              "seed", "out"})
    cfg.set_default("count", 16)
    cfg.set_default("tau", 1.0)
    cfg.set_default("seed", 0)
    pipe = _build_pipeline("sample", cfg)
    rng = np.random.default_rng(cfg.get_int("seed"))
    images = pipe.sample(cfg.get_int("count"), cfg.get_float("tau"), rng)
    out = cfg.get_path("out")
    # decoders are unbounded; the dataset format stores [0, 1]
    save_dataset(Dataset(np.clip(images, 0.0, 1.0), split="generated",
                         seed=cfg.get_int("seed")), out)
    cfg.write_resolved(out)
    _progress(f"wrote {out}: {len(images)} samples at tau {cfg.get_float('tau')}")
    return 0


def cmd_inpaint(args) -> int:
    cfg = _load_config(args, {"prior", "tokenizer", "data", "count", "ratio", "geometry",
                              "tau", "steps", "top_k", "seed", "out"})
    cfg.set_default("count", 16)
    cfg.set_default("ratio", 0.5)
    cfg.set_default("geometry", "random-rect")
    cfg.set_default("tau", 1.0)
    cfg.set_default("seed", 0)
    ds = load_dataset(cfg.get_path("data"))
    count = cfg.get_int("count")
    if count > len(ds):
        raise GenspecError(f"asked for {count} images but {cfg.get_path('data')} holds {len(ds)}")
    pipe = _build_pipeline("inpaint", cfg)
    rng = np.random.default_rng(cfg.get_int("seed"))
    outputs, _ = inpaint_grid_cell(pipe, ds.images[:count], cfg.get_float("ratio"),
                                   cfg.get_float("tau"), cfg.get_str("geometry"), rng)
    out = cfg.get_path("out")
    save_dataset(Dataset(np.clip(outputs, 0.0, 1.0), split="inpainted",
                         seed=cfg.get_int("seed")), out)
    cfg.write_resolved(out)
    _progress(f"wrote {out}: {count} inpaintings at ratio {cfg.get_float('ratio')}")
    return 0


def _model_sections(cfg: Config) -> list[str]:
    names = cfg.get_strs("models")
    if not names:
        raise ConfigError("config key 'models' must list at least one model name")
    return list(names)


def _section_keys(names: list[str]) -> set[str]:
    keys = set()
    for name in names:
        keys |= {f"{name}.prior", f"{name}.tokenizer", f"{name}.steps", f"{name}.top_k"}
    return keys


def _load_feature_extractor(cfg: Config):
    path = cfg.get_path("feature")
    fe, _ = load_model(path)
    return _require_kind(fe, "feature", path)


def cmd_eval(args) -> int:
    base = {"models", "data", "feature", "n", "tau", "seed", "out"}
    pre = Config.from_file(args.config) if args.config else Config()
    pre.override(args.set or [])
    names = _model_sections(pre)
    cfg = _load_config(args, base | _section_keys(names))
    cfg.set_default("n", 500)
    cfg.set_default("tau", 1.0)
    cfg.set_default("seed", 0)
    pipes = [_build_pipeline(name, cfg, prefix=f"{name}.") for name in names]
    fe = _load_feature_extractor(cfg)
    test = load_dataset(cfg.get_path("data"))
    out = cfg.get_path("out")
    os.makedirs(out, exist_ok=True)
    rows = run_unconditional(pipes, test.images, fe, n=cfg.get_int("n"),
                             tau=cfg.get_float("tau"), seed=cfg.get_int("seed"),
                             log=_progress)
    write_report_csv(rows, os.path.join(out, "report.csv"))
    cfg.write_resolved(out)
    _progress(f"wrote {os.path.join(out, 'report.csv')}: {len(rows)} rows")
    return 0


def cmd_sweep(args) -> int:
    base = {"models", "data", "feature", "n", "seed", "geometry", "ratios", "taus",
            "threads", "out"}
    pre = Config.from_file(args.config) if args.config else Config()
    pre.override(args.set or [])
    names = _model_sections(pre)
    cfg = _load_config(args, base | _section_keys(names))
    cfg.set_default("n", 200)
    cfg.set_default("seed", 0)
    cfg.set_default("geometry", "random-rect")
    cfg.set_default("ratios", ",".join(str(r) for r in DEFAULT_RATIOS))
    cfg.set_default("taus", ",".join(str(t) for t in DEFAULT_TAUS))
    cfg.set_default("threads", 1)
    pipes = [_build_pipeline(name, cfg, prefix=f"{name}.") for name in names]
    fe = _load_feature_extractor(cfg)
    images = load_dataset(cfg.get_path("data")).images
    sweep = run_spectrum(pipes, images, fe,
                         ratios=cfg.get_floats("ratios"), taus=cfg.get_floats("taus"),
                         n=cfg.get_int("n"), seed=cfg.get_int("seed"),
                         geometry=cfg.get_str("geometry"),
                         threads=cfg.get_int("threads"), log=_progress)
    out = cfg.get_path("out")
    paths = export(sweep, out)
    cfg.write_resolved(out)
    _progress(f"wrote {len(paths)} files under {out}")
    return 0


def cmd_selftest(args) -> int:
    from .selftest import run_selftest

    failures = run_selftest(log=print)
    return 0 if failures == 0 else 2


# -- dispatch -----------------------------------------------------------------------


def _add_common(sub: argparse.ArgumentParser) -> None:
    sub.add_argument("--config", help="plain-text key = value config file")
    sub.add_argument("--set", action="append", metavar="KEY=VALUE", default=[],
                     help="override a config key (repeatable)")
    sub.add_argument("--out", help="override the config's out path")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="genspec",
                     description="Tokenizer + prior zoo on synthetic cardiac phantoms: "
                                 "train, sample, inpaint, and sweep the "
                                 "reconstruction-generation spectrum.")
    subs = parser.add_subparsers(dest="command", metavar="COMMAND")
    table = [
        ("gen-data", cmd_gen_data, "generate a phantom dataset"),
        ("train-tokenizer", cmd_train_tokenizer, "train a vae, vq, or feature tokenizer"),
        ("train-prior", cmd_train_prior, "train a diffusion, causal, or masked prior"),
        ("sample", cmd_sample, "draw unconditional samples from a prior"),
        ("inpaint", cmd_inpaint, "mask and inpaint held-out images"),
        ("eval", cmd_eval, "unconditional generation report (gFID/KID/TPS)"),
        ("sweep", cmd_sweep, "mask-ratio x temperature spectrum sweep"),
        ("selftest", cmd_selftest, "run the build's invariant checks"),
    ]
    for name, fn, help_text in table:
        sub = subs.add_parser(name, help=help_text)
        if name != "selftest":
            _add_common(sub)
        sub.set_defaults(func=fn)
    return parser


def main(argv=None) -> int:
    argv = list(sys.argv[1:]) if argv is None else list(argv)
    parser = build_parser()
    if not argv:
        parser.print_help(sys.stderr)
        return 1
    try:
        args = parser.parse_args(argv)
        if not hasattr(args, "func"):
            parser.print_help(sys.stderr)
            return 1
        return args.func(args)
    except _UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except NumericalError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 3
    except GenspecError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
