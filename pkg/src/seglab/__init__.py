"""Desk-scale segmentation training stack.

A from-scratch float64 reverse-mode autodiff engine, state-space sequence
blocks, an uncertainty-weighted multi-loss, sharpness-aware minimization,
a small encoder/decoder segmentation model, and a synthetic multi-class
dataset generator, wired together behind one CLI.
"""

from . import autodiff, blocks, data, kernels, losses, model, optim

__all__ = ["autodiff", "blocks", "data", "kernels", "losses", "model", "optim"]
