"""
Stage II priors over discrete tokens
====================================

Two transformers over the VQ token grid:
  - causal: next-token factorization, sampled left-to-right in raster order
  - masked: bidirectional, decoded in parallel MaskGIT rounds, fixing the
    highest-confidence predictions each round under a cosine schedule

The masked model produces a full 64-token image in 8 forward passes; the
causal model needs 64 sequential passes. Both share the same backbone size.
"""

import matplotlib.pyplot as plt
import numpy as np

from genspec.data import make_dataset
from genspec.harness import CausalPipeline, MaskedPipeline
from genspec.tokprior import MASKGIT_RATIOS, maskgit_remaining
from genspec.train import train_token_prior, train_vq

train_ds = make_dataset("train", 400, size=32)
val_ds = make_dataset("val", 64, size=32)

print("training VQ tokenizer (4 epochs)...")
vq = train_vq(train_ds, val_ds, epochs=4, batch=32, lr=1e-3)
vq.restore_best()

print("training causal prior (4 epochs)...")
causal = train_token_prior(vq.model, train_ds, val_ds, mode="causal",
                           epochs=4, batch=32, lr=1e-3, log=print)
causal.restore_best()

print("training masked prior (4 epochs)...")
masked = train_token_prior(vq.model, train_ds, val_ds, mode="masked",
                           mask_dist=MASKGIT_RATIOS, epochs=4, batch=32,
                           lr=1e-3, log=print)
masked.restore_best()

# the cosine schedule: how many tokens stay masked after each round
m_total, steps = 64, 8
remaining = [maskgit_remaining(m_total, steps, r) for r in range(steps + 1)]
print(f"maskgit schedule over {steps} rounds: {remaining} (fixes "
      f"{list(-np.diff(remaining))} per round)")

cau_pipe = CausalPipeline("causal", vq.model, causal.model)
mas_pipe = MaskedPipeline("masked", vq.model, masked.model, steps=8)

import time

for pipe in (cau_pipe, mas_pipe):
    rng = np.random.default_rng(0)
    t0 = time.perf_counter()
    imgs = pipe.sample(8, 1.0, rng)
    tps = (time.perf_counter() - t0) / 8
    print(f"{pipe.name}: {tps * 1e3:.0f} ms/sample")

fig, axes = plt.subplots(2, 8, figsize=(12, 3.4))
for row, pipe in enumerate((cau_pipe, mas_pipe)):
    imgs = pipe.sample(8, 1.0, np.random.default_rng(1))
    for col in range(8):
        axes[row, col].imshow(imgs[col], cmap="gray", vmin=0, vmax=1)
        axes[row, col].axis("off")
    axes[row, 0].set_ylabel(pipe.name)
fig.suptitle("sequential (top) vs parallel (bottom) token decoding")
fig.tight_layout()
fig.savefig("token_priors.png", dpi=120)
print("wrote token_priors.png")
