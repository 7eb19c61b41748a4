"""
Stage I tokenizers: VAE and VQ
==============================

Both tokenizers compress a 32x32 image to an 8x8 latent grid (factor 4).
The VAE keeps continuous 8-channel latents; the VQ snaps each cell to one
of K=64 codebook entries, so an image becomes 64 discrete tokens.

This demo trains both briefly on a small dataset. Expect rough
reconstructions; the test suite trains the full desk-scale versions.
"""

import matplotlib.pyplot as plt
import numpy as np

from genspec import tensor as T
from genspec.data import make_dataset
from genspec.metrics import psnr
from genspec.tensor import Tensor
from genspec.tokenizer import codebook_utilization
from genspec.train import train_vae, train_vq

train_ds = make_dataset("train", 400, size=32)
val_ds = make_dataset("val", 64, size=32)

print("training VAE (4 epochs, small run)...")
# short-run settings: the library defaults are sized for much longer runs
vae = train_vae(train_ds, val_ds, epochs=4, batch=32, lr=1e-3,
                kl_weight=1e-6, log=print)
vae.restore_best()

print("training VQ (4 epochs, small run)...")
vq = train_vq(train_ds, val_ds, epochs=4, batch=32, lr=1e-3, log=print)
vq.restore_best()

test = make_dataset("test", 32, size=32).images
with T.no_grad():
    x = Tensor(test[:, None])
    vae_rec = vae.model.reconstruct(x).data[:, 0]
    vq_rec = vq.model.reconstruct(x).data[:, 0]
    tokens = vq.model.tokenize(x)

print(f"VAE test PSNR {psnr(test, vae_rec):.2f} dB")
print(f"VQ  test PSNR {psnr(test, vq_rec):.2f} dB")
print(f"VQ codebook utilization {codebook_utilization(tokens, vq.model.K):.2f}")

# one image as: input, VAE recon, VQ recon, VQ token map
fig, axes = plt.subplots(1, 4, figsize=(10, 3))
for ax, (img, title) in zip(axes, [(test[0], "input"),
                                   (vae_rec[0], "vae"),
                                   (vq_rec[0], "vq"),
                                   (tokens[0], "tokens")]):
    ax.imshow(img, cmap="gray" if title != "tokens" else "viridis")
    ax.set_title(title)
    ax.axis("off")
fig.tight_layout()
fig.savefig("tokenizers.png", dpi=120)
print("wrote tokenizers.png")

# the discrete path is exactly reproducible: tokenize -> decode -> tokenize
with T.no_grad():
    rec = vq.model.decode_tokens(tokens)
    again = vq.model.tokenize(Tensor(np.clip(rec.data, 0, 1)))
print(f"token round-trip agreement {np.mean(tokens == again):.2f}")
