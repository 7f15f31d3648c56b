"""Audio-driven avatar diffusion and guarded medical-intake dialogue toolkit."""

__version__ = "0.1.0"
