"""Mixture-of-experts composition of LoRA adapters with routing losses."""

__version__ = "0.1.0"
