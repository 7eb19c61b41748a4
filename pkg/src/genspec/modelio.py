"""Model (de)serialization over the named-tensor checkpoint container.

Architecture hyperparameters ride along as scalar tensors under meta/ names,
so a checkpoint alone reconstructs the right model. Diffusion checkpoints
also carry their noise-schedule parameters and the latent normalization
scale.
"""

from __future__ import annotations

import numpy as np

from .checkpoint import load_weights, save_weights
from .diffusion import DenoiserModel, NoiseSchedule, make_schedule
from .errors import FormatError
from .metrics import FeatureExtractor
from .tokenizer import VaeModel, VqModel
from .tokprior import SeqModel

KIND_CODES = {"vae": 0.0, "vq": 1.0, "diffusion": 2.0, "causal": 3.0, "masked": 4.0, "feature": 5.0}
CODE_KINDS = {v: k for k, v in KIND_CODES.items()}


def save_model(path: str, model, extra: dict[str, float] | None = None) -> None:
    tensors = {f"param/{k}": v for k, v in model.state_dict().items()}
    kind = "masked" if model.kind == "bidirectional" else model.kind
    if kind not in KIND_CODES:
        raise FormatError(f"cannot serialize model kind {kind!r}")
    tensors["meta/kind"] = np.float64(KIND_CODES[kind])
    if kind == "vae":
        tensors["meta/F"] = np.float64(4)
        tensors["meta/z_channels"] = np.float64(model.z_channels)
        tensors["meta/base"] = np.float64(model.base)
    elif kind == "vq":
        tensors["meta/F"] = np.float64(4)
        tensors["meta/K"] = np.float64(model.K)
        tensors["meta/dim"] = np.float64(model.dim)
        tensors["meta/base"] = np.float64(model.base)
    elif kind == "diffusion":
        tensors["meta/channels"] = np.float64(model.channels)
        tensors["meta/base"] = np.float64(model.base)
    elif kind in ("causal", "masked"):
        tensors["meta/K"] = np.float64(model.K)
        tensors["meta/seq_len"] = np.float64(model.seq_len)
        tensors["meta/d_model"] = np.float64(model.d_model)
        tensors["meta/heads"] = np.float64(model.heads)
        tensors["meta/blocks"] = np.float64(model.n_blocks)
    elif kind == "feature":
        tensors["meta/feat_dim"] = np.float64(model.feat_dim)
        tensors["meta/image_size"] = np.float64(model.image_size)
        tensors["meta/base"] = np.float64(model.base)
    for key, value in (extra or {}).items():
        tensors[f"meta/{key}"] = np.float64(value)
    save_weights(path, tensors)


def load_model(path: str):
    """Returns (model, meta dict). For diffusion, meta includes the schedule."""
    tensors = load_weights(path)
    meta = {k[len("meta/"):]: float(v) for k, v in tensors.items() if k.startswith("meta/")}
    params = {k[len("param/"):]: v for k, v in tensors.items() if k.startswith("param/")}
    if "kind" not in meta:
        raise FormatError(f"checkpoint {path} lacks a meta/kind tensor")
    kind = CODE_KINDS.get(meta["kind"])
    if kind is None:
        raise FormatError(f"checkpoint {path} has unknown model kind code {meta['kind']}")
    if kind == "vae":
        model = VaeModel(z_channels=int(meta["z_channels"]), base=int(meta["base"]))
    elif kind == "vq":
        model = VqModel(K=int(meta["K"]), dim=int(meta["dim"]), base=int(meta["base"]))
    elif kind == "diffusion":
        model = DenoiserModel(channels=int(meta["channels"]), base=int(meta["base"]))
    elif kind in ("causal", "masked"):
        mode = "causal" if kind == "causal" else "bidirectional"
        model = SeqModel(K=int(meta["K"]), seq_len=int(meta["seq_len"]), mode=mode,
                         d_model=int(meta["d_model"]), heads=int(meta["heads"]),
                         blocks=int(meta["blocks"]))
        model.kind = kind
    else:
        model = FeatureExtractor(feat_dim=int(meta["feat_dim"]),
                                 image_size=int(meta["image_size"]), base=int(meta["base"]))
    model.load_state_dict(params)
    return model, meta


def schedule_from_meta(meta: dict[str, float]) -> NoiseSchedule:
    return make_schedule(
        steps=int(meta["T"]),
        beta_start=meta["beta_start"],
        beta_end=meta["beta_end"],
        eta=meta["eta"],
    )
