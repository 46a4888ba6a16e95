"""Spectral 3D face templates: GFT features, GCN embeddings, keyed diffusion protection."""

__version__ = "0.1.0"
