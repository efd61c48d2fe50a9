"""EEG-to-video reconstruction with regional semantic mapping, temporal blueprints and dual-guided latent diffusion."""

__version__ = "0.1.0"
