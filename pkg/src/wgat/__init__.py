"""Graph attention over Gaussian embeddings with Wasserstein-based attention and losses."""

__version__ = "0.1.0"
