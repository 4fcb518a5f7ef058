"""Masked discrete diffusion decoding lab."""
__version__ = "0.1.0"
