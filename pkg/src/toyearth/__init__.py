"""Toy-Earth: a desk-scale text-driven satellite-tile generation studio.

Subpackages cover the full pipeline: procedural dataset (data), image
compression autoencoder (vae), contrastive dual text/image encoder
(textenc), conditioned denoising backbone (backbone), noise schedule and
guided sampling (diffusion), unbounded canvas construction (canvas),
low-rank adapters (lora), evaluation metrics (metrics), HTTP service
(service) and the command-line entrypoint (cli).
"""

__version__ = "0.1.0"
