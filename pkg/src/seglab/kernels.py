"""Spatial and sequence kernels for the autodiff graph.

Feature maps are channels-last ``(batch, H, W, C)``.  Stride-1 convolution
runs as three GEMMs over row-window views (one per kernel row), which is the
fastest float64 arrangement measured on a single core; the windows are kept
for the weight-gradient GEMMs.  The state-space scan evaluates its linear
recurrence blockwise with precomputed transition powers so no Python loop
runs per timestep.  Each kernel is one graph node with a hand-derived
vector-Jacobian product, pinned against central finite differences by the
tests.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import as_strided

from .autodiff import ShapeError, Tensor, register_op


# Per-thread scratch buffers, keyed by shape.  A graph executes one op at a
# time and every borrower finishes with its buffer before the next op runs,
# so one buffer per shape per thread suffices; this avoids re-faulting fresh
# pages on every call.
import threading

_SCRATCH = threading.local()


def _scratch(shape, tag="") -> np.ndarray:
    pool = getattr(_SCRATCH, "pool", None)
    if pool is None:
        pool = _SCRATCH.pool = {}
    key = (tag, shape)
    buf = pool.get(key)
    if buf is None:
        buf = np.empty(shape)
        pool[key] = buf
    return buf


def _pad_hw(x, p):
    """Zero-padded copy of x in a pooled buffer.

    The buffer is only ever written through this function, so its border
    stays zero across reuses; callers must finish with it before the next
    padded op runs (true for the sequential graph execution).
    """
    if p == 0:
        return x
    b, h, w, c = x.shape
    shape = (b, h + 2 * p, w + 2 * p, c)
    pool = getattr(_SCRATCH, "pad_pool", None)
    if pool is None:
        pool = _SCRATCH.pad_pool = {}
    buf = pool.get(shape)
    if buf is None:
        buf = np.zeros(shape)
        pool[shape] = buf
    buf[:, p : p + h, p : p + w, :] = x
    return buf


def _conv_geometry(h, w, kh, kw, stride):
    if stride == 1:
        if kh % 2 == 0 or kw % 2 == 0:
            raise ShapeError("stride-1 conv needs odd kernel for same padding")
        return h, w, (kh - 1) // 2
    if stride == 2:
        if h % 2 or w % 2:
            raise ShapeError(f"stride-2 conv needs even spatial size, got {h}x{w}")
        return h // 2, w // 2, (kh - 1) // 2
    raise ShapeError(f"conv stride must be 1 or 2, got {stride}")


def _row_windows(xp, kh, kw, h, wd):
    """kh views of the padded map, each (B,h,wd,kw*C): window di starts at
    row di and its last axis runs over the kw*C contiguous floats of one
    sliding row window.  Read-only aliases; always copied before use."""
    b, _, _, c = xp.shape
    sb, sh, sw, sc = xp.strides
    return [
        as_strided(xp[:, di:, :, :], shape=(b, h, wd, kw * c), strides=(sb, sh, sw, sc))
        for di in range(kh)
    ]


def _conv_s1_apply(xp, w, out):
    """out (N,Cout) = sum over kernel rows of window_di(xp) @ w[di]."""
    kh, kw, cin, cout = w.shape
    b = xp.shape[0]
    h = xp.shape[1] - kh + 1
    wd = xp.shape[2] - kw + 1
    n = b * h * wd
    views = _row_windows(xp, kh, kw, h, wd)
    scratch = _scratch((b, h, wd, kw * cin))
    flat = scratch.reshape(n, kw * cin)
    tmp = _scratch((n, cout))
    for di in range(kh):
        np.copyto(scratch, views[di])
        if di == 0:
            np.matmul(flat, w[0].reshape(kw * cin, cout), out=out)
        else:
            np.matmul(flat, w[di].reshape(kw * cin, cout), out=tmp)
            out += tmp
    return out


def _conv2d_fwd(attrs, x, w, *bias):
    stride = attrs["stride"]
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv2d expects (B,H,W,C) and (kh,kw,Cin,Cout), got {x.shape}, {w.shape}")
    b, h, wd, cin = x.shape
    kh, kw, wcin, cout = w.shape
    if wcin != cin:
        raise ShapeError(f"conv2d: input has {cin} channels, kernel expects {wcin}")
    ho, wo, pad = _conv_geometry(h, wd, kh, kw, stride)
    xp = _pad_hw(x, pad)
    if stride == 1:
        out = _conv_s1_apply(xp, w, np.empty((b * ho * wo, cout)))
        cache = None  # vjp re-pads the stored input
    else:
        col = _gather_patches(xp, kh, kw, ho, wo, stride)
        out = col @ w.reshape(kh * kw * cin, cout)
        cache = col
    if bias:
        out += bias[0]
    return out.reshape(b, ho, wo, cout), cache


def _gather_patches(xp, kh, kw, ho, wo, stride):
    """Patch matrix (N, kh*kw*C); only used for the small stride-2 maps."""
    b, _, _, c = xp.shape
    col = np.empty((b, ho, wo, kh, kw, c))
    for di in range(kh):
        for dj in range(kw):
            col[:, :, :, di, dj, :] = xp[
                :, di : di + ho * stride : stride, dj : dj + wo * stride : stride, :
            ]
    return col.reshape(b * ho * wo, kh * kw * c)


def _conv2d_vjp(attrs, cache, g, y, needs, x, w, *bias):
    stride = attrs["stride"]
    b, h, wd, cin = x.shape
    kh, kw, _, cout = w.shape
    ho, wo, pad = _conv_geometry(h, wd, kh, kw, stride)
    gf = g.reshape(b * ho * wo, cout)
    dx = dw = None
    if stride == 1:
        if needs[1]:
            xp = _pad_hw(x, pad)
            dw = np.empty_like(w)
            views = _row_windows(xp, kh, kw, ho, wo)
            scratch = _scratch((b, ho, wo, kw * cin))
            flat = scratch.reshape(b * ho * wo, kw * cin)
            for di in range(kh):
                np.copyto(scratch, views[di])
                np.matmul(flat.T, gf, out=dw[di].reshape(kw * cin, cout))
        if needs[0]:
            # same-padded convolution of g with the flipped, swapped kernel
            wf = np.ascontiguousarray(w[::-1, ::-1].transpose(0, 1, 3, 2))
            dx = _conv_s1_apply(_pad_hw(g, pad), wf, np.empty((b * h * wd, cin)))
            dx = dx.reshape(x.shape)
    else:
        col = cache
        if needs[1]:
            dw = (col.T @ gf).reshape(w.shape)
        if needs[0]:
            dcol = gf @ w.reshape(kh * kw * cin, cout).T
            dcol = dcol.reshape(b, ho, wo, kh, kw, cin)
            dxp = np.zeros((b, h + 2 * pad, wd + 2 * pad, cin))
            for di in range(kh):
                for dj in range(kw):
                    dxp[:, di : di + ho * stride : stride, dj : dj + wo * stride : stride, :] += dcol[
                        :, :, :, di, dj, :
                    ]
            dx = dxp[:, pad : pad + h, pad : pad + wd, :] if pad else dxp
            dx = np.ascontiguousarray(dx)
    if bias:
        return dx, dw, g.sum(axis=(0, 1, 2)) if needs[2] else None
    return dx, dw


register_op("conv2d", _conv2d_fwd, _conv2d_vjp)


def _conv_transpose2d_fwd(attrs, x, w, *bias):
    if x.ndim != 4 or w.ndim != 4 or w.shape[0] != 2 or w.shape[1] != 2:
        raise ShapeError("conv_transpose2d expects (B,H,W,C) and a (2,2,Cin,Cout) kernel")
    b, h, wd, cin = x.shape
    if w.shape[2] != cin:
        raise ShapeError(f"conv_transpose2d: input has {cin} channels, kernel expects {w.shape[2]}")
    cout = w.shape[3]
    w2 = w.transpose(2, 0, 1, 3).reshape(cin, 4 * cout)
    t = (x.reshape(b * h * wd, cin) @ w2).reshape(b, h, wd, 2, 2, cout)
    y = np.ascontiguousarray(t.transpose(0, 1, 3, 2, 4, 5)).reshape(b, 2 * h, 2 * wd, cout)
    if bias:
        y += bias[0]
    return y, None


def _conv_transpose2d_vjp(attrs, cache, g, y, needs, x, w, *bias):
    b, h, wd, cin = x.shape
    cout = w.shape[3]
    gt = g.reshape(b, h, 2, wd, 2, cout).transpose(0, 1, 3, 2, 4, 5)
    gt = np.ascontiguousarray(gt).reshape(b * h * wd, 4 * cout)
    w2 = w.transpose(2, 0, 1, 3).reshape(cin, 4 * cout)
    dx = (gt @ w2.T).reshape(x.shape) if needs[0] else None
    dw = None
    if needs[1]:
        dw2 = x.reshape(b * h * wd, cin).T @ gt
        dw = np.ascontiguousarray(dw2.reshape(cin, 2, 2, cout).transpose(1, 2, 0, 3))
    if bias:
        return dx, dw, g.sum(axis=(0, 1, 2)) if needs[2] else None
    return dx, dw


register_op("conv_transpose2d", _conv_transpose2d_fwd, _conv_transpose2d_vjp)


# -- instance normalization (plain and fused with leaky ReLU) ---------------

_IN_SUBS = {3: "btc", 4: "bhwc"}


def _check_norm_layout(x, gamma, beta, axes):
    if gamma.shape != (x.shape[-1],) or beta.shape != (x.shape[-1],):
        raise ShapeError("instance_norm: gamma/beta must be per-channel vectors")
    if x.ndim not in _IN_SUBS or axes != tuple(range(1, x.ndim - 1)):
        raise ShapeError(
            f"instance_norm expects (batch, ..., C) with axes {tuple(range(1, x.ndim - 1))}, "
            f"got ndim {x.ndim} and axes {axes}"
        )


def _in_keep(arr_bc, ndim):
    # (B,C) statistics broadcast back over the reduced middle axes
    return arr_bc.reshape(arr_bc.shape[:1] + (1,) * (ndim - 2) + arr_bc.shape[1:])


def _in_stats(x, eps):
    subs = _IN_SUBS[x.ndim]
    n = 1
    for a in range(1, x.ndim - 1):
        n *= x.shape[a]
    mu = np.einsum(f"{subs}->bc", x) / n
    sq = np.einsum(f"{subs},{subs}->bc", x, x) / n
    var = sq - mu * mu
    inv = 1.0 / np.sqrt(np.maximum(var, 0.0) + eps)
    return _in_keep(mu, x.ndim), _in_keep(inv, x.ndim), n


def _in_normalize(x, mu, inv, gamma, beta):
    a = inv * gamma
    y = x * a
    y += beta - mu * a
    return y


def _in_backward(g_eff, x, mu, inv, n, gamma, needs):
    """Shared reverse pass: g_eff is the gradient at the affine output."""
    subs = _IN_SUBS[x.ndim]
    xhat = _scratch(x.shape, "in_xhat")
    np.subtract(x, mu, out=xhat)
    xhat *= inv
    dgamma = np.einsum(f"{subs},{subs}->c", g_eff, xhat) if needs[1] else None
    dbeta = np.einsum(f"{subs}->c", g_eff) if needs[2] else None
    dx = None
    if needs[0]:
        g_hat = g_eff * gamma
        m1 = _in_keep(np.einsum(f"{subs}->bc", g_hat), x.ndim)
        m1 /= n
        m2 = _in_keep(np.einsum(f"{subs},{subs}->bc", g_hat, xhat), x.ndim)
        m2 /= n
        xhat *= m2
        g_hat -= m1
        g_hat -= xhat
        g_hat *= inv
        dx = g_hat
    return dx, dgamma, dbeta


def _instance_norm_fwd(attrs, x, gamma, beta):
    _check_norm_layout(x, gamma, beta, attrs["axes"])
    mu, inv, n = _in_stats(x, attrs["eps"])
    return _in_normalize(x, mu, inv, gamma, beta), (mu, inv, n)


def _instance_norm_vjp(attrs, cache, g, y, needs, x, gamma, beta):
    mu, inv, n = cache
    return _in_backward(g, x, mu, inv, n, gamma, needs)


register_op("instance_norm", _instance_norm_fwd, _instance_norm_vjp)


def _instance_norm_leaky_fwd(attrs, x, gamma, beta):
    _check_norm_layout(x, gamma, beta, attrs["axes"])
    mu, inv, n = _in_stats(x, attrs["eps"])
    pre = _in_normalize(x, mu, inv, gamma, beta)
    y = pre * attrs["slope"]
    np.maximum(pre, y, out=y)
    return y, (mu, inv, n, pre)


def _instance_norm_leaky_vjp(attrs, cache, g, y, needs, x, gamma, beta):
    mu, inv, n, pre = cache
    gact = np.where(pre > 0.0, 1.0, attrs["slope"])
    gact *= g
    return _in_backward(gact, x, mu, inv, n, gamma, needs)


register_op("instance_norm_leaky", _instance_norm_leaky_fwd, _instance_norm_leaky_vjp)


def _mix_conv1d_fwd(attrs, x, w, bias):
    # Depthwise width-3 mixing along the sequence axis, zero padded.
    if x.ndim != 3 or w.shape != (3, x.shape[-1]):
        raise ShapeError(f"mix_conv1d expects (B,T,C) and (3,C), got {x.shape}, {w.shape}")
    b, t, c = x.shape
    xp = np.pad(x, ((0, 0), (1, 1), (0, 0)))
    y = xp[:, :t] * w[0] + xp[:, 1 : t + 1] * w[1] + xp[:, 2:] * w[2]
    y += bias
    return y, xp


def _mix_conv1d_vjp(attrs, xp, g, y, needs, x, w, bias):
    b, t, c = x.shape
    dx = dw = None
    if needs[0]:
        gp = np.pad(g, ((0, 0), (1, 1), (0, 0)))
        dx = gp[:, 2:] * w[0] + gp[:, 1 : t + 1] * w[1] + gp[:, :t] * w[2]
    if needs[1]:
        dw = np.stack(
            [
                np.einsum("btc,btc->c", xp[:, :t], g),
                np.einsum("btc,btc->c", xp[:, 1 : t + 1], g),
                np.einsum("btc,btc->c", xp[:, 2:], g),
            ]
        )
    db = g.sum(axis=(0, 1)) if needs[2] else None
    return dx, dw, db


register_op("mix_conv1d", _mix_conv1d_fwd, _mix_conv1d_vjp)


# -- state-space scan --------------------------------------------------------

_SCAN_BLOCK = 16
_SCAN_LOOP_LIMIT = 64  # short sequences just run the plain loop


def _recurrence_states(bmat, x0, c):
    """States of x_{k+1} = x_k @ bmat + c[k] (row convention).

    x0: (nb, ds); c: (K, nb, ds).  Returns xs (K+1, nb, ds) holding
    x_0 .. x_K.  Long sequences are evaluated blockwise: within a block all
    contributions are GEMMs against precomputed powers of ``bmat``, so only
    one short carry loop runs over blocks.
    """
    nb, ds = x0.shape
    k_steps = c.shape[0]
    t = k_steps + 1
    xs = np.empty((t, nb, ds))
    xs[0] = x0
    if t <= _SCAN_LOOP_LIMIT:
        x = x0
        for k in range(k_steps):
            x = x @ bmat + c[k]
            xs[k + 1] = x
        return xs
    m = _SCAN_BLOCK
    q = -(-k_steps // m)  # blocks of inputs
    powers = [np.eye(ds)]
    for _ in range(m):
        powers.append(powers[-1] @ bmat)
    # mixing matrix: row block i, column block j holds bmat^(j-1-i) for i < j
    mix = np.zeros((m * ds, (m + 1) * ds))
    for i in range(m):
        for j in range(i + 1, m + 1):
            mix[i * ds : (i + 1) * ds, j * ds : (j + 1) * ds] = powers[j - 1 - i]
    cpad = c
    if q * m != k_steps:
        cpad = np.concatenate([c, np.zeros((q * m - k_steps, nb, ds))], axis=0)
    # prefix sums S[q, j] = sum_{i<j} c[qm+i] @ bmat^(j-1-i), j = 0..m
    blocks = np.ascontiguousarray(cpad.reshape(q, m, nb, ds).transpose(0, 2, 1, 3))
    s = (blocks.reshape(q * nb, m * ds) @ mix).reshape(q, nb, m + 1, ds)
    # carry x at block starts
    starts = np.empty((q + 1, nb, ds))
    starts[0] = x0
    pm = powers[m]
    for b in range(q):
        starts[b + 1] = starts[b] @ pm + s[b, :, m]
    # in-block states: x_{qm+j} = starts[q] @ bmat^j + S[q, j]
    pcat = np.ascontiguousarray(np.stack(powers[:m]).transpose(1, 0, 2)).reshape(ds, m * ds)
    inblock = (starts[:q].reshape(q * nb, ds) @ pcat).reshape(q, nb, m, ds)
    inblock += s[:, :, :m]
    xs_full = np.ascontiguousarray(inblock.transpose(0, 2, 1, 3)).reshape(q * m, nb, ds)
    limit = min(t, q * m)
    xs[1:limit] = xs_full[1:limit]
    if t > q * m:  # k_steps was an exact multiple of the block: last state is the carry
        xs[q * m] = starts[q]
    return xs


def _scan_shapes(u, a, bm, cm, d, x0):
    if u.ndim != 3:
        raise ShapeError("ssm_scan expects u of shape (batch, T, d_in)")
    nb, t, din = u.shape
    ds = a.shape[0]
    if a.shape != (ds, ds):
        raise ShapeError(f"ssm_scan: A must be square, got {a.shape}")
    if bm.shape != (ds, din):
        raise ShapeError(f"ssm_scan: B must be ({ds},{din}), got {bm.shape}")
    dout = cm.shape[0]
    if cm.shape != (dout, ds):
        raise ShapeError(f"ssm_scan: C must be (d_out,{ds}), got {cm.shape}")
    if d.shape != (dout, din):
        raise ShapeError(f"ssm_scan: D must be ({dout},{din}), got {d.shape}")
    if x0.shape != (ds,):
        raise ShapeError(f"ssm_scan: x0 must be ({ds},), got {x0.shape}")
    return nb, t, din, ds, dout


def _ssm_scan_fwd(attrs, u, a, bm, cm, d, x0):
    nb, t, din, ds, dout = _scan_shapes(u, a, bm, cm, d, x0)
    noise_w = attrs.get("noise_w")
    noise_v = attrs.get("noise_v")
    bu = (u.reshape(nb * t, din) @ bm.T).reshape(nb, t, ds).transpose(1, 0, 2)
    bu = np.ascontiguousarray(bu)
    if noise_w is not None:
        bu += noise_w[:, None, :]
    x0_rows = np.broadcast_to(x0, (nb, ds))
    xs = _recurrence_states(np.ascontiguousarray(a.T), x0_rows, bu[: t - 1])
    y = (xs.transpose(1, 0, 2).reshape(nb * t, ds) @ cm.T).reshape(nb, t, dout)
    y += (u.reshape(nb * t, din) @ d.T).reshape(nb, t, dout)
    if noise_v is not None:
        y += noise_v[None, :, :]
    return y, xs


def _ssm_scan_vjp(attrs, xs, g, y, needs, u, a, bm, cm, d, x0):
    nb, t, din, ds, dout = _scan_shapes(u, a, bm, cm, d, x0)
    gf = g.reshape(nb * t, dout)
    uf = u.reshape(nb * t, din)
    xsf = xs.transpose(1, 0, 2).reshape(nb * t, ds)
    dd = gf.T @ uf if needs[4] else None
    dcm = gf.T @ xsf if needs[3] else None
    du = gf @ d
    # Adjoint recurrence mu_k = dxs_k + mu_{k+1} @ A, solved newest-first.
    dxs = np.ascontiguousarray((gf @ cm).reshape(nb, t, ds).transpose(1, 0, 2))
    rev = _recurrence_states(
        np.ascontiguousarray(a),
        dxs[t - 1],
        np.ascontiguousarray(dxs[t - 2 :: -1]) if t > 1 else np.zeros((0, nb, ds)),
    )
    mus = np.ascontiguousarray(rev[::-1])
    dx0 = mus[0].sum(axis=0) if needs[5] else None
    if t > 1:
        mu_next = mus[1:].reshape((t - 1) * nb, ds)
        da = mu_next.T @ xs[: t - 1].reshape((t - 1) * nb, ds) if needs[1] else None
        db = None
        if needs[2]:
            ut = np.ascontiguousarray(u.transpose(1, 0, 2))  # (T, nb, din)
            db = mu_next.T @ ut[: t - 1].reshape((t - 1) * nb, din)
        if needs[0]:
            du_state = (mu_next @ bm).reshape(t - 1, nb, din).transpose(1, 0, 2)
            du = du.reshape(nb, t, din)
            du[:, : t - 1] += du_state
    else:
        da = np.zeros_like(a) if needs[1] else None
        db = np.zeros_like(bm) if needs[2] else None
    return (du.reshape(u.shape) if needs[0] else None), da, db, dcm, dd, dx0


register_op("ssm_scan", _ssm_scan_fwd, _ssm_scan_vjp)


# -- public wrappers --------------------------------------------------------


def conv2d(x: Tensor, w: Tensor, bias: Tensor | None = None, stride: int = 1) -> Tensor:
    """2-D convolution on (B,H,W,C); same padding at stride 1, halving at stride 2."""
    inputs = (x, w) if bias is None else (x, w, bias)
    return x.graph.apply("conv2d", inputs, {"stride": int(stride)})


def conv_transpose2d(x: Tensor, w: Tensor, bias: Tensor | None = None) -> Tensor:
    """Stride-2 transposed convolution with a 2x2 kernel: doubles H and W."""
    inputs = (x, w) if bias is None else (x, w, bias)
    return x.graph.apply("conv_transpose2d", inputs, {})


def instance_norm(x: Tensor, gamma: Tensor, beta: Tensor, axes=(1, 2), eps: float = 1e-5) -> Tensor:
    """Normalize over ``axes`` per sample and channel, then apply the affine pair."""
    return x.graph.apply("instance_norm", (x, gamma, beta), {"axes": tuple(axes), "eps": float(eps)})


def instance_norm_leaky(
    x: Tensor, gamma: Tensor, beta: Tensor, axes=(1, 2), eps: float = 1e-5, slope: float = 0.01
) -> Tensor:
    """instance_norm followed by leaky ReLU, fused into one node."""
    return x.graph.apply(
        "instance_norm_leaky",
        (x, gamma, beta),
        {"axes": tuple(axes), "eps": float(eps), "slope": float(slope)},
    )


def mix_conv1d(x: Tensor, w: Tensor, bias: Tensor) -> Tensor:
    return x.graph.apply("mix_conv1d", (x, w, bias), {})


def ssm_scan_op(
    u: Tensor,
    a: Tensor,
    b: Tensor,
    c: Tensor,
    d: Tensor,
    x0: Tensor,
    noise_w: np.ndarray | None = None,
    noise_v: np.ndarray | None = None,
) -> Tensor:
    """Linear state-space recurrence x_{t+1} = A x_t + B u_t (+w_t) observed
    through y_t = C x_t + D u_t (+v_t), batched over the leading axis of u.

    Noise arrays are fixed per-step offsets (unit-test plumbing), never
    differentiated.
    """
    attrs = {"noise_w": None, "noise_v": None}
    if noise_w is not None:
        attrs["noise_w"] = np.asarray(noise_w, dtype=np.float64)
    if noise_v is not None:
        attrs["noise_v"] = np.asarray(noise_v, dtype=np.float64)
    return u.graph.apply("ssm_scan", (u, a, b, c, d, x0), attrs)
