"""Finite-difference check registry: one entry per differentiable operation.

Each entry builds a scalar-valued function of a single leaf plus the probe
point, at toy sizes chosen so the whole sweep stays well under a minute.
``run_gradcheck`` is the engine behind the ``gradcheck`` CLI command.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from . import blocks, losses, model
from .kernels import (
    conv2d,
    conv_transpose2d,
    instance_norm,
    instance_norm_leaky,
    mix_conv1d,
    ssm_scan_op,
)

TOLERANCE = 1e-4
STEP = 1e-6


def _sq(t):
    return ad.tsum(ad.power(t, 2.0))


def _interior_probs(rng, shape):
    # away from 0/1 so clamped logs and focal powers stay smooth
    return rng.uniform(0.15, 0.85, shape)


def _entries(seed):
    rng = np.random.default_rng(seed)
    x34 = rng.standard_normal((3, 4))
    y34 = rng.standard_normal((3, 4))
    m42 = rng.standard_normal((4, 2))
    img = rng.standard_normal((2, 4, 4, 3))
    ker = rng.standard_normal((3, 3, 3, 5))
    ker2 = rng.standard_normal((2, 2, 3, 5))
    gamma = 1.0 + 0.1 * rng.standard_normal(3)
    beta = rng.standard_normal(3)
    seq = rng.standard_normal((2, 6, 3))
    mixw = rng.standard_normal((3, 3))
    mixb = rng.standard_normal(3)
    scan_u = rng.standard_normal((2, 7, 3))
    scan_a = 0.4 * rng.standard_normal((4, 4))
    scan_b = rng.standard_normal((4, 3))
    scan_c = rng.standard_normal((3, 4))
    scan_d = rng.standard_normal((3, 3))
    scan_x0 = rng.standard_normal(4)
    probs = _interior_probs(rng, (4, 5, 5))
    labels = rng.integers(0, 4, (5, 5))

    def scan_wrt(name):
        def fn(t):
            g = t.graph
            parts = {
                "u": g.leaf(scan_u), "a": g.leaf(scan_a), "b": g.leaf(scan_b),
                "c": g.leaf(scan_c), "d": g.leaf(scan_d), "x0": g.leaf(scan_x0),
            }
            parts[name] = t
            return _sq(ssm_scan_op(parts["u"], parts["a"], parts["b"],
                                   parts["c"], parts["d"], parts["x0"]))
        return fn

    entries = [
        ("add", lambda t: _sq(ad.add(t, t.graph.leaf(y34))), x34),
        ("subtract", lambda t: _sq(ad.subtract(t, t.graph.leaf(y34))), x34),
        ("multiply", lambda t: _sq(ad.multiply(t, t.graph.leaf(y34))), x34),
        ("divide", lambda t: _sq(ad.divide(t.graph.leaf(y34), ad.add_const(_abs_off(t), 2.0))), x34),
        ("scale", lambda t: _sq(ad.scale(t, 1.7)), x34),
        ("matmul", lambda t: _sq(ad.matmul(t, t.graph.leaf(m42))), x34),
        ("conv2d_stride1", lambda t: _sq(conv2d(t.graph.leaf(img), t, stride=1)), ker),
        ("conv2d_stride1_input", lambda t: _sq(conv2d(t, t.graph.leaf(ker), stride=1)), img),
        ("conv2d_stride2", lambda t: _sq(conv2d(t.graph.leaf(img), t, stride=2)), ker),
        ("conv_transpose2d", lambda t: _sq(conv_transpose2d(t.graph.leaf(img), t)), ker2),
        ("leaky_relu", lambda t: _sq(ad.leaky_relu(ad.add_const(t, 0.3), 0.01)), x34),
        ("silu", lambda t: _sq(ad.silu(t)), x34),
        ("instance_norm", lambda t: _sq(instance_norm(t, t.graph.leaf(gamma), t.graph.leaf(beta))), img),
        ("instance_norm_gamma", lambda t: _sq(instance_norm(t.graph.leaf(img), t, t.graph.leaf(beta))), gamma),
        ("instance_norm_leaky", lambda t: _sq(instance_norm_leaky(t, t.graph.leaf(gamma), t.graph.leaf(beta))), img),
        ("softmax", lambda t: _sq(ad.softmax(t, axis=1)), x34),
        ("log", lambda t: ad.tsum(ad.log(ad.add_const(_abs_off(t), 2.0))), x34),
        ("exp", lambda t: ad.tsum(ad.exp(t)), 0.3 * x34),
        ("power", lambda t: ad.tsum(ad.power(ad.add_const(_abs_off(t), 2.0), 1.7)), x34),
        ("clamp_min", lambda t: _sq(ad.clamp_min(t, 0.1)), 1.0 + 0.5 * x34),
        ("sum", lambda t: ad.tsum(ad.power(ad.tsum(t, axis=1), 2.0)), x34),
        ("mean", lambda t: ad.tsum(ad.power(ad.tmean(t, axis=0), 2.0)), x34),
        ("reshape", lambda t: _sq(ad.reshape(t, (4, 3))), x34),
        ("transpose", lambda t: _sq(ad.transpose(t, (1, 0))), x34),
        ("slice", lambda t: _sq(ad.slice_axes(t, ((1, 3), (0, 2)))), x34),
        ("concat", lambda t: _sq(ad.concat([t, t.graph.leaf(y34)], axis=1)), x34),
        ("mix_conv1d", lambda t: _sq(mix_conv1d(t.graph.leaf(seq), t, t.graph.leaf(mixb))), mixw),
        ("ssm_scan_u", scan_wrt("u"), scan_u),
        ("ssm_scan_a", scan_wrt("a"), scan_a),
        ("ssm_scan_b", scan_wrt("b"), scan_b),
        ("ssm_scan_c", scan_wrt("c"), scan_c),
        ("ssm_scan_d", scan_wrt("d"), scan_d),
        ("dice_loss", lambda t: losses.dice_loss(t, labels), probs),
        ("cross_entropy_loss", lambda t: losses.cross_entropy_loss(t, labels), probs),
        ("focal_loss", lambda t: losses.focal_loss(t, labels, 2.0), probs),
        ("uncertainty_aware_loss", _ua_wrt_logvar, np.array([0.2, -0.3, 0.1])),
        ("attention_query", _attention_wrt_q(rng), rng.standard_normal((3, 4))),
        ("residual_block", _residual_wrt_conv1(rng), rng.standard_normal((3, 3, 2, 2)) * 0.4),
        ("mamba_block", _mamba_wrt_out(rng), rng.standard_normal((3, 3)) * 0.4),
    ]
    return entries


def _abs_off(t):
    # smooth positive shift helper: t^2 keeps probes away from kinks
    return ad.power(t, 2.0)


def _ua_wrt_logvar(t):
    g = t.graph
    comps = [g.constant(0.7), g.constant(1.3), g.constant(0.4)]
    return losses.uncertainty_aware_loss(comps, losses.UncertaintyWeights(log_var=t))


def _attention_wrt_q(rng):
    k = rng.standard_normal((5, 4))
    v = rng.standard_normal((5, 2))

    def fn(t):
        g = t.graph
        inputs = blocks.AttentionInputs(q=t, k=g.leaf(k), v=g.leaf(v))
        return _sq(blocks.selective_attention(inputs))

    return fn


def _residual_wrt_conv1(rng):
    x = rng.standard_normal((1, 4, 4, 2))
    w2 = rng.standard_normal((3, 3, 2, 2)) * 0.4

    def fn(t):
        g = t.graph
        params = blocks.ResidualBlockParams(
            unit1=blocks.ConvUnit(w=t, b=g.leaf(np.zeros(2)),
                                  gamma=g.leaf(np.ones(2)), beta=g.leaf(np.zeros(2))),
            unit2=blocks.ConvUnit(w=g.leaf(w2), b=g.leaf(np.zeros(2)),
                                  gamma=g.leaf(np.ones(2)), beta=g.leaf(np.zeros(2))),
        )
        return _sq(blocks.residual_block(g.leaf(x), params))

    return fn


def _mamba_wrt_out(rng):
    x = rng.standard_normal((1, 16, 3))  # a 4x4 map flattened to a sequence
    made = _small_mamba_params(rng, 3, 2)

    def fn(t):
        g = t.graph
        params = _bind_mamba(g, made, w_out=t)
        return _sq(blocks.mamba_block(g.leaf(x), params))

    return fn


def _small_mamba_params(rng, c, d):
    return {
        "norm_gamma": np.ones(c), "norm_beta": np.zeros(c),
        "w_ssm_in": rng.standard_normal((c, c)) * 0.5, "b_ssm_in": np.zeros(c),
        "mix_w": rng.standard_normal((3, c)) * 0.5, "mix_b": np.zeros(c),
        "a": rng.standard_normal((d, d)) * 0.4, "b": rng.standard_normal((d, c)) * 0.5,
        "c": rng.standard_normal((c, d)) * 0.5, "d": rng.standard_normal((c, c)) * 0.5,
        "x0": np.zeros(d),
        "w_gate": rng.standard_normal((c, c)) * 0.5, "b_gate": np.zeros(c),
        "w_out": rng.standard_normal((c, c)) * 0.5, "b_out": np.zeros(c),
    }


def _bind_mamba(g, made, **overrides):
    def leaf(key):
        if key in overrides:
            return overrides[key]
        return g.leaf(made[key])

    return blocks.MambaBlockParams(
        norm_gamma=leaf("norm_gamma"), norm_beta=leaf("norm_beta"),
        w_ssm_in=leaf("w_ssm_in"), b_ssm_in=leaf("b_ssm_in"),
        mix_w=leaf("mix_w"), mix_b=leaf("mix_b"),
        ssm=blocks.SsmParams(a=leaf("a"), b=leaf("b"), c=leaf("c"),
                             d=leaf("d"), x0=leaf("x0")),
        w_gate=leaf("w_gate"), b_gate=leaf("b_gate"),
        w_out=leaf("w_out"), b_out=leaf("b_out"),
    )


def _end_to_end_entry(seed):
    """dice(predict(model, x), g) against a probe subset of one conv kernel."""
    rng = np.random.default_rng(seed)
    cfg = model.ModelConfig(stages=2, base_width=4, d_state=2, seed=seed)
    built = model.build_model(cfg)
    image = rng.random((1, 8, 8, 1))
    labels = rng.integers(0, 4, (1, 8, 8))
    name = "enc0.rb1.conv2.w"
    point = built.params[name].copy()

    def fn(t):
        g = t.graph
        leaves = {}
        for pname, arr in built.params.items():
            leaves[pname] = t if pname == name else g.leaf(arr)
        x = g.leaf(image)
        probs = model.model_forward(cfg, leaves, x)
        probs = ad.transpose(probs, (0, 3, 1, 2))
        return losses.dice_loss(probs, labels)

    coords = rng.choice(point.size, size=12, replace=False)
    return fn, point, sorted(int(c) for c in coords)


def run_gradcheck(seed: int = 0, tolerance: float = TOLERANCE):
    """Yields (op name, max relative error, passed) for every registered op."""
    results = []
    for name, fn, point in _entries(seed):
        err = ad.grad_check(fn, point, STEP)
        results.append((name, err, err < tolerance))
    fn, point, coords = _end_to_end_entry(seed)
    err = ad.grad_check(fn, point, STEP, coords=coords)
    results.append(("model_end_to_end_8x8", err, err < tolerance))
    return results
