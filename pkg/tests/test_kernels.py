"""Kernel tests: convolution against scipy, the scan against a naive loop,
normalization against a direct numpy transcription, and finite differences
for every hand-derived backward."""

import numpy as np
import pytest
from scipy import signal

from seglab import autodiff as ad
from seglab.kernels import (
    _recurrence_states,
    conv2d,
    conv_transpose2d,
    instance_norm,
    instance_norm_leaky,
    mix_conv1d,
    ssm_scan_op,
)

rng = np.random.default_rng(0)


def sq(t):
    return ad.tsum(ad.power(t, 2.0))


def scipy_conv_same(x, w):
    b, h, wd, cin = x.shape
    cout = w.shape[3]
    out = np.zeros((b, h, wd, cout))
    for bi in range(b):
        for o in range(cout):
            for c in range(cin):
                out[bi, :, :, o] += signal.correlate2d(x[bi, :, :, c], w[:, :, c, o], mode="same")
    return out


def test_conv2d_stride1_matches_scipy():
    x = rng.standard_normal((2, 6, 8, 3))
    w = rng.standard_normal((3, 3, 3, 4))
    g = ad.Graph()
    y = conv2d(g.leaf(x), g.leaf(w), stride=1)
    assert np.abs(y.data - scipy_conv_same(x, w)).max() < 1e-12


def test_conv2d_stride1_5x5_kernel():
    x = rng.standard_normal((1, 8, 8, 2))
    w = rng.standard_normal((5, 5, 2, 3))
    g = ad.Graph()
    y = conv2d(g.leaf(x), g.leaf(w), stride=1)
    ref = np.zeros((1, 8, 8, 3))
    for o in range(3):
        for c in range(2):
            ref[0, :, :, o] += signal.correlate2d(x[0, :, :, c], w[:, :, c, o], mode="same")
    assert np.abs(y.data - ref).max() < 1e-12


def test_conv2d_stride2_matches_strided_scipy():
    x = rng.standard_normal((2, 8, 8, 3))
    for k in (2, 3):
        w = rng.standard_normal((k, k, 3, 4))
        g = ad.Graph()
        y = conv2d(g.leaf(x), g.leaf(w), stride=2)
        pad = (k - 1) // 2
        xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad), (0, 0)))
        ref = np.zeros((2, 4, 4, 4))
        for bi in range(2):
            for o in range(4):
                for c in range(3):
                    full = signal.correlate2d(xp[bi, :, :, c], w[:, :, c, o], mode="valid")
                    ref[bi, :, :, o] += full[::2, ::2]
        assert np.abs(y.data - ref).max() < 1e-12, f"k={k}"


def test_conv2d_bias_and_channel_validation():
    g = ad.Graph()
    x = g.leaf(rng.standard_normal((1, 4, 4, 2)))
    w = g.leaf(rng.standard_normal((3, 3, 2, 3)))
    b = g.leaf(np.array([1.0, -1.0, 0.5]))
    y0 = conv2d(x, w)
    y1 = conv2d(x, w, b)
    assert np.allclose(y1.data - y0.data, np.array([1.0, -1.0, 0.5]))
    bad = g.leaf(rng.standard_normal((3, 3, 5, 3)))
    with pytest.raises(ad.ShapeError):
        conv2d(x, bad)
    with pytest.raises(ad.ShapeError):
        conv2d(g.leaf(rng.standard_normal((1, 5, 5, 2))), w, stride=2)


@pytest.mark.parametrize("stride", [1, 2])
def test_conv2d_gradients(stride):
    x = rng.standard_normal((2, 4, 4, 2))
    w = rng.standard_normal((3, 3, 2, 3))
    b = rng.standard_normal(3)
    assert ad.grad_check(lambda t: sq(conv2d(t, t.graph.leaf(w), t.graph.leaf(b), stride=stride)), x) < 1e-4
    assert ad.grad_check(lambda t: sq(conv2d(t.graph.leaf(x), t, t.graph.leaf(b), stride=stride)), w) < 1e-4
    assert ad.grad_check(lambda t: sq(conv2d(t.graph.leaf(x), t.graph.leaf(w), t, stride=stride)), b) < 1e-4


def test_conv_transpose2d_matches_manual_scatter():
    x = rng.standard_normal((2, 3, 5, 2))
    w = rng.standard_normal((2, 2, 2, 4))
    g = ad.Graph()
    y = conv_transpose2d(g.leaf(x), g.leaf(w))
    ref = np.zeros((2, 6, 10, 4))
    for di in range(2):
        for dj in range(2):
            ref[:, di::2, dj::2, :] = np.einsum("bhwc,co->bhwo", x, w[di, dj])
    assert np.abs(y.data - ref).max() < 1e-12


def test_conv_transpose2d_gradients():
    x = rng.standard_normal((1, 3, 3, 2))
    w = rng.standard_normal((2, 2, 2, 3))
    b = rng.standard_normal(3)
    assert ad.grad_check(lambda t: sq(conv_transpose2d(t, t.graph.leaf(w), t.graph.leaf(b))), x) < 1e-4
    assert ad.grad_check(lambda t: sq(conv_transpose2d(t.graph.leaf(x), t, t.graph.leaf(b))), w) < 1e-4


def test_instance_norm_matches_numpy():
    x = rng.standard_normal((2, 4, 5, 3))
    gamma = 1.0 + 0.2 * rng.standard_normal(3)
    beta = rng.standard_normal(3)
    g = ad.Graph()
    y = instance_norm(g.leaf(x), g.leaf(gamma), g.leaf(beta), axes=(1, 2), eps=1e-5)
    mu = x.mean(axis=(1, 2), keepdims=True)
    var = x.var(axis=(1, 2), keepdims=True)
    ref = (x - mu) / np.sqrt(var + 1e-5) * gamma + beta
    assert np.abs(y.data - ref).max() < 1e-12


def test_instance_norm_leaky_equals_composition():
    x = rng.standard_normal((2, 4, 4, 3))
    gamma = 1.0 + 0.2 * rng.standard_normal(3)
    beta = rng.standard_normal(3)
    g = ad.Graph()
    fused = instance_norm_leaky(g.leaf(x), g.leaf(gamma), g.leaf(beta), slope=0.01)
    parts = ad.leaky_relu(instance_norm(g.leaf(x), g.leaf(gamma), g.leaf(beta)), 0.01)
    assert np.array_equal(fused.data, parts.data)


@pytest.mark.parametrize("shape,axes", [((2, 4, 4, 3), (1, 2)), ((2, 7, 3), (1,))])
def test_instance_norm_gradients(shape, axes):
    x = rng.standard_normal(shape)
    gamma = 1.0 + 0.2 * rng.standard_normal(shape[-1])
    beta = rng.standard_normal(shape[-1])
    for kernel in (instance_norm, instance_norm_leaky):
        assert ad.grad_check(
            lambda t: sq(kernel(t, t.graph.leaf(gamma), t.graph.leaf(beta), axes=axes)), x
        ) < 1e-4
        assert ad.grad_check(
            lambda t: sq(kernel(t.graph.leaf(x), t, t.graph.leaf(beta), axes=axes)), gamma
        ) < 1e-4
        assert ad.grad_check(
            lambda t: sq(kernel(t.graph.leaf(x), t.graph.leaf(gamma), t, axes=axes)), beta
        ) < 1e-4


def test_mix_conv1d_matches_manual():
    x = rng.standard_normal((2, 6, 3))
    w = rng.standard_normal((3, 3))
    b = rng.standard_normal(3)
    g = ad.Graph()
    y = mix_conv1d(g.leaf(x), g.leaf(w), g.leaf(b))
    xp = np.pad(x, ((0, 0), (1, 1), (0, 0)))
    ref = xp[:, :6] * w[0] + xp[:, 1:7] * w[1] + xp[:, 2:] * w[2] + b
    assert np.abs(y.data - ref).max() < 1e-12


def naive_scan(u, a, bm, cm, d, x0, noise_w=None, noise_v=None):
    nb, t, din = u.shape
    ys = np.zeros((nb, t, cm.shape[0]))
    for bi in range(nb):
        x = x0.copy()
        for k in range(t):
            ys[bi, k] = cm @ x + d @ u[bi, k]
            if noise_v is not None:
                ys[bi, k] += noise_v[k]
            x = a @ x + bm @ u[bi, k]
            if noise_w is not None:
                x += noise_w[k]
    return ys


def scan_instance(seed, d_state=None, t_len=None, nb=2):
    r = np.random.default_rng(seed)
    ds = d_state or int(r.integers(1, 5))
    t = t_len or int(r.integers(1, 17))
    din = int(r.integers(1, 4))
    dout = int(r.integers(1, 4))
    return (
        r.standard_normal((nb, t, din)),
        r.standard_normal((ds, ds)) * (0.8 / np.sqrt(ds)),
        r.standard_normal((ds, din)),
        r.standard_normal((dout, ds)),
        r.standard_normal((dout, din)),
        r.standard_normal(ds),
    )


def test_ssm_scan_equals_naive_loop_small():
    for seed in range(20):
        u, a, bm, cm, d, x0 = scan_instance(seed)
        g = ad.Graph()
        y = ssm_scan_op(g.leaf(u), g.leaf(a), g.leaf(bm), g.leaf(cm), g.leaf(d), g.leaf(x0))
        assert np.abs(y.data - naive_scan(u, a, bm, cm, d, x0)).max() < 1e-12


def test_ssm_scan_equals_naive_loop_blocked_path():
    # long sequences exercise the block-GEMM evaluation
    for t_len in (65, 96, 128, 200, 257):
        u, a, bm, cm, d, x0 = scan_instance(t_len, d_state=4, t_len=t_len)
        g = ad.Graph()
        y = ssm_scan_op(g.leaf(u), g.leaf(a), g.leaf(bm), g.leaf(cm), g.leaf(d), g.leaf(x0))
        ref = naive_scan(u, a, bm, cm, d, x0)
        assert np.abs(y.data - ref).max() / max(1.0, np.abs(ref).max()) < 1e-12


def test_recurrence_states_blocked_vs_loop_lengths():
    for k in [0, 1, 15, 16, 17, 63, 64, 65, 127, 128, 129, 320]:
        r = np.random.default_rng(k)
        bm = r.standard_normal((5, 5)) * 0.3
        x0 = r.standard_normal((3, 5))
        c = r.standard_normal((k, 3, 5))
        got = _recurrence_states(bm, x0, c)
        exp = np.empty((k + 1, 3, 5))
        exp[0] = x0
        x = x0
        for i in range(k):
            x = x @ bm + c[i]
            exp[i + 1] = x
        assert np.abs(got - exp).max() / max(1.0, np.abs(exp).max()) < 1e-13


def test_ssm_scan_gradients_cover_blocked_and_loop():
    for t_len in (7, 70):
        u, a, bm, cm, d, x0 = scan_instance(123 + t_len, d_state=3, t_len=t_len)
        arrays = {"u": u, "a": a, "b": bm, "c": cm, "d": d, "x0": x0}
        for name, point in arrays.items():
            def f(t, name=name):
                g = t.graph
                parts = {k: g.leaf(v) for k, v in arrays.items()}
                parts[name] = t
                return sq(ssm_scan_op(parts["u"], parts["a"], parts["b"],
                                      parts["c"], parts["d"], parts["x0"]))
            assert ad.grad_check(f, point) < 1e-4, (t_len, name)


def test_ssm_scan_noise_matches_naive():
    u, a, bm, cm, d, x0 = scan_instance(5, d_state=3, t_len=9)
    r = np.random.default_rng(9)
    noise_w = r.standard_normal((9, 3)) * 0.1
    noise_v = r.standard_normal((9, cm.shape[0])) * 0.1
    g = ad.Graph()
    y = ssm_scan_op(g.leaf(u), g.leaf(a), g.leaf(bm), g.leaf(cm), g.leaf(d), g.leaf(x0),
                    noise_w=noise_w, noise_v=noise_v)
    ref = naive_scan(u, a, bm, cm, d, x0, noise_w, noise_v)
    assert np.abs(y.data - ref).max() < 1e-12


def test_ssm_scan_shape_validation():
    g = ad.Graph()
    u = g.leaf(rng.standard_normal((1, 4, 3)))
    a = g.leaf(rng.standard_normal((2, 2)))
    bm = g.leaf(rng.standard_normal((2, 3)))
    cm = g.leaf(rng.standard_normal((4, 2)))
    d = g.leaf(rng.standard_normal((4, 3)))
    with pytest.raises(ad.ShapeError):
        ssm_scan_op(u, a, bm, cm, d, g.leaf(np.zeros(5)))
    with pytest.raises(ad.ShapeError):
        ssm_scan_op(u, a, g.leaf(rng.standard_normal((3, 3))), cm, d, g.leaf(np.zeros(2)))
