"""Desk-scale generative model zoo.

Two-stage pipeline on procedurally generated cardiac phantoms: Stage I
tokenizers (VAE, VQ) compress images into latents; Stage II priors (DDPM,
causal AR, masked AR) model the latent space. The harness sweeps mask ratio
and sampling temperature to trace the spectrum between reconstruction and
unconditional generation.
"""

__version__ = "0.1.0"
