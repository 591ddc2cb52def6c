"""Architectural primitives: SSM scan, scaled dot-product attention,
residual conv blocks, and the two-branch Hadamard-gated sequence block.

Everything here is a pure function from graph Tensors to graph Tensors;
parameters arrive as small dataclasses of leaf Tensors that the model (or a
test) binds.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor
from .kernels import (
    conv2d,
    conv_transpose2d,
    instance_norm,
    instance_norm_leaky,
    mix_conv1d,
    ssm_scan_op,
)

LEAKY_SLOPE = 0.01  # fixed; the activation is named but its slope is not


@dataclass
class SsmParams:
    """State-transition A (d,d), input map B (d,d_in), readout C (d_out,d),
    feedthrough D (d_out,d_in), initial state x0 (d,), plus optional fixed
    per-step noise vectors used only by the stochastic unit-test mode."""

    a: Tensor
    b: Tensor
    c: Tensor
    d: Tensor
    x0: Tensor
    noise_w: np.ndarray | None = None
    noise_v: np.ndarray | None = None


def ssm_scan(params: SsmParams, u_seq: Tensor, deterministic: bool = True) -> Tensor:
    """Run the linear recurrence over ``u_seq`` ((T,d_in) or (batch,T,d_in)).

    Deterministic mode rejects noise vectors; stochastic mode adds the fixed
    offsets w_t to the state update and v_t to the observation.
    """
    if deterministic and (params.noise_w is not None or params.noise_v is not None):
        raise ValueError("noise vectors supplied in deterministic mode")
    noise_w = None if deterministic else params.noise_w
    noise_v = None if deterministic else params.noise_v
    squeeze = u_seq.ndim == 2
    u = ad.reshape(u_seq, (1,) + u_seq.shape) if squeeze else u_seq
    if u.ndim != 3 or u.shape[1] == 0:
        raise ShapeError(f"ssm_scan: need a non-empty sequence, got shape {u_seq.shape}")
    y = ssm_scan_op(u, params.a, params.b, params.c, params.d, params.x0,
                    noise_w=noise_w, noise_v=noise_v)
    return ad.reshape(y, y.shape[1:]) if squeeze else y


@dataclass
class AttentionInputs:
    q: Tensor  # (T, d_k)
    k: Tensor  # (T', d_k)
    v: Tensor  # (T', d_v)


def selective_attention(inputs: AttentionInputs) -> Tensor:
    """softmax(Q K^T / sqrt(d_k)) V with the softmax over the key axis."""
    q, k, v = inputs.q, inputs.k, inputs.v
    if q.ndim != 2 or k.ndim != 2 or v.ndim != 2:
        raise ShapeError("attention inputs must be 2-D matrices")
    if q.shape[1] != k.shape[1]:
        raise ShapeError(f"query dim {q.shape[1]} != key dim {k.shape[1]}")
    if k.shape[0] != v.shape[0]:
        raise ShapeError(f"key count {k.shape[0]} != value count {v.shape[0]}")
    d_k = q.shape[1]
    logits = ad.scale(ad.matmul(q, ad.transpose(k, (1, 0))), 1.0 / math.sqrt(d_k))
    weights = ad.softmax(logits, axis=1)
    return ad.matmul(weights, v)


@dataclass
class ConvUnit:
    w: Tensor
    b: Tensor
    gamma: Tensor
    beta: Tensor


@dataclass
class ResidualBlockParams:
    unit1: ConvUnit
    unit2: ConvUnit
    skip_w: Tensor | None = None  # 1x1 projection when channel counts differ


def _conv_in_act(x: Tensor, unit: ConvUnit) -> Tensor:
    h = conv2d(x, unit.w, unit.b, stride=1)
    return instance_norm_leaky(h, unit.gamma, unit.beta, axes=(1, 2), slope=LEAKY_SLOPE)


def conv1x1(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """Pointwise channel map on (..., C) via one GEMM."""
    lead = x.shape[:-1]
    h = ad.matmul(ad.reshape(x, (-1, x.shape[-1])), w)
    if b is not None:
        h = ad.add(h, b)
    return ad.reshape(h, lead + (w.shape[1],))


def residual_block(x: Tensor, params: ResidualBlockParams) -> Tensor:
    """x + f(x) with f = (conv -> instance norm -> leaky ReLU) twice."""
    h = _conv_in_act(_conv_in_act(x, params.unit1), params.unit2)
    skip = x if params.skip_w is None else conv1x1(x, params.skip_w)
    return ad.add(skip, h)


@dataclass
class MambaBlockParams:
    norm_gamma: Tensor
    norm_beta: Tensor
    w_ssm_in: Tensor
    b_ssm_in: Tensor
    mix_w: Tensor
    mix_b: Tensor
    ssm: SsmParams
    w_gate: Tensor
    b_gate: Tensor
    w_out: Tensor
    b_out: Tensor


def mamba_block(x: Tensor, params: MambaBlockParams) -> Tensor:
    """Two-branch sequence block on (batch, T, C).

    normalize -> project to two branches -> (SSM branch: depthwise mix conv,
    SiLU, scan; gate branch: SiLU) -> Hadamard product -> project back.
    Output shape equals input shape.
    """
    if x.ndim != 3:
        raise ShapeError(f"mamba_block expects (batch, T, C), got {x.shape}")
    if x.shape[1] == 0:
        raise ShapeError("mamba_block: empty sequence")
    h = instance_norm(x, params.norm_gamma, params.norm_beta, axes=(1,))
    s = conv1x1(h, params.w_ssm_in, params.b_ssm_in)
    s = mix_conv1d(s, params.mix_w, params.mix_b)
    s = ad.silu(s)
    s = ssm_scan(params.ssm, s)
    gate = ad.silu(conv1x1(h, params.w_gate, params.b_gate))
    merged = ad.multiply(s, gate)
    return conv1x1(merged, params.w_out, params.b_out)
