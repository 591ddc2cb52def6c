"""Reverse-mode automatic differentiation over dense float64 arrays.

Define-by-run: every operation appends a node to the owning ``Graph`` and
computes its value eagerly, so the tape is always topologically ordered.
``Graph.backward`` walks the tape in reverse and accumulates vector-Jacobian
products; ``Graph.forward_eval`` re-executes the recorded tape against fresh
leaf bindings, which is what the finite-difference checker builds on.

All values are float64 and treated as immutable once attached to a node.
"""

from __future__ import annotations

import numpy as np


class GraphError(Exception):
    """Base class for graph construction and evaluation errors."""


class ShapeError(GraphError):
    """Operand shapes are inconsistent for the requested operation."""


class NonFiniteError(GraphError):
    """An operation produced NaN or Inf from finite inputs."""


# Op registry: kind -> (forward, vjp).
#   forward(attrs, *inputs) -> (value, cache)
#   vjp(attrs, cache, grad, value, needs, *inputs) -> tuple of per-input
#     gradients; entries where needs[i] is False may be None (and should be,
#     when skipping them saves work).
_FORWARD = {}
_VJP = {}


def register_op(kind, forward, vjp):
    if kind in _FORWARD:
        raise ValueError(f"op kind {kind!r} already registered")
    _FORWARD[kind] = forward
    _VJP[kind] = vjp


class Node:
    __slots__ = ("kind", "inputs", "value", "requires_grad", "attrs", "cache")

    def __init__(self, kind, inputs, value, requires_grad, attrs, cache):
        self.kind = kind
        self.inputs = inputs
        self.value = value
        self.requires_grad = requires_grad
        self.attrs = attrs
        self.cache = cache


class Tensor:
    """Handle to one node of a computation graph.

    ``data`` is the cached forward value (row-major float64). Tensors are
    immutable: mutating ``data`` in place while the graph is alive is
    undefined behaviour.
    """

    __slots__ = ("graph", "node_id")

    def __init__(self, graph, node_id):
        self.graph = graph
        self.node_id = node_id

    @property
    def data(self) -> np.ndarray:
        return self.graph.nodes[self.node_id].value

    @property
    def shape(self):
        return self.graph.nodes[self.node_id].value.shape

    @property
    def ndim(self):
        return self.graph.nodes[self.node_id].value.ndim

    @property
    def size(self):
        return self.graph.nodes[self.node_id].value.size

    @property
    def requires_grad(self) -> bool:
        return self.graph.nodes[self.node_id].requires_grad

    def item(self) -> float:
        return float(self.data)

    def backward(self):
        return self.graph.backward(self)

    def __repr__(self):
        node = self.graph.nodes[self.node_id]
        return f"Tensor(kind={node.kind!r}, shape={node.value.shape})"

    # Operator sugar; the actual ops live below.
    def __add__(self, other):
        return add(self, _lift(self.graph, other))

    def __radd__(self, other):
        return add(_lift(self.graph, other), self)

    def __sub__(self, other):
        return subtract(self, _lift(self.graph, other))

    def __rsub__(self, other):
        return subtract(_lift(self.graph, other), self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return multiply(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __truediv__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, 1.0 / float(other))
        return divide(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def __pow__(self, exponent):
        return power(self, float(exponent))

    def __matmul__(self, other):
        return matmul(self, other)


def _lift(graph, x):
    if isinstance(x, Tensor):
        if x.graph is not graph:
            raise GraphError("operands belong to different graphs")
        return x
    return graph.constant(x)


def _as_f64(data):
    arr = np.asarray(data, dtype=np.float64)
    if arr.size == 0:
        raise ShapeError("zero-sized tensors are not supported")
    return arr


class Graph:
    """Append-only tape of operations.

    ``validate=True`` checks every node's output for NaN/Inf, which is what
    the tests run under; the training loop turns it off for speed and checks
    the scalar loss instead.
    """

    def __init__(self, validate=True):
        self.nodes: list[Node] = []
        self.validate = validate

    # -- construction -----------------------------------------------------

    def leaf(self, data, requires_grad=False) -> Tensor:
        """A bindable input node. ``forward_eval`` requires a binding for it."""
        value = _as_f64(data)
        if not np.all(np.isfinite(value)):
            raise NonFiniteError("leaf value contains NaN/Inf")
        return self._append("leaf", (), value, requires_grad, None, None)

    def constant(self, data) -> Tensor:
        """A fixed node: never bound, never differentiated."""
        value = _as_f64(data)
        if not np.all(np.isfinite(value)):
            raise NonFiniteError("constant value contains NaN/Inf")
        return self._append("const", (), value, False, None, None)

    def _append(self, kind, inputs, value, requires_grad, attrs, cache) -> Tensor:
        node = Node(kind, inputs, value, requires_grad, attrs, cache)
        self.nodes.append(node)
        return Tensor(self, len(self.nodes) - 1)

    def apply(self, kind, inputs, attrs=None) -> Tensor:
        """Run a registered op on input tensors and record the node."""
        nodes = self.nodes
        values = []
        for t in inputs:
            if t.graph is not self:
                raise GraphError("operands belong to different graphs")
            values.append(nodes[t.node_id].value)
        try:
            value, cache = _FORWARD[kind](attrs, *values)
        except (ShapeError, NonFiniteError):
            raise
        except ValueError as exc:
            raise ShapeError(f"{kind} (node {len(nodes)}): {exc}") from exc
        if value.dtype != np.float64:
            value = value.astype(np.float64)
        if self.validate and not np.all(np.isfinite(value)):
            raise NonFiniteError(f"{kind} (node {len(nodes)}) produced NaN/Inf")
        requires_grad = any(t.requires_grad for t in inputs)
        return self._append(
            kind, tuple(t.node_id for t in inputs), value, requires_grad, attrs, cache
        )

    # -- evaluation -------------------------------------------------------

    def forward_eval(self, bindings) -> Tensor:
        """Re-execute the tape with every leaf bound to a new value.

        ``bindings`` maps leaf Tensors (or node ids) to array-likes. Returns
        the root (last node). Re-running with identical bindings is bitwise
        reproducible because each op recomputes from the same inputs.
        """
        by_id = {}
        for key, val in bindings.items():
            node_id = key.node_id if isinstance(key, Tensor) else int(key)
            by_id[node_id] = val
        for i, node in enumerate(self.nodes):
            if node.kind == "leaf":
                if i not in by_id:
                    raise GraphError(f"leaf node {i} not bound")
                value = _as_f64(by_id[i])
                if value.shape != node.value.shape:
                    raise ShapeError(
                        f"binding for leaf node {i} has shape {value.shape}, "
                        f"declared {node.value.shape}"
                    )
                node.value = value
            elif node.kind == "const":
                continue
            else:
                values = [self.nodes[j].value for j in node.inputs]
                value, cache = _FORWARD[node.kind](node.attrs, *values)
                if value.dtype != np.float64:
                    value = value.astype(np.float64)
                if not np.all(np.isfinite(value)):
                    raise NonFiniteError(f"{node.kind} (node {i}) produced NaN/Inf")
                node.value = value
                node.cache = cache
        if not self.nodes:
            raise GraphError("empty graph")
        return Tensor(self, len(self.nodes) - 1)

    def backward(self, root: Tensor) -> dict[int, np.ndarray]:
        """Accumulate d(root)/d(leaf) for every requires_grad leaf.

        ``root`` must be scalar-valued. Returns a map from leaf node id to
        gradient array (zeros for leaves the root does not depend on).
        Gradients add across fan-out.
        """
        if root.graph is not self:
            raise GraphError("root belongs to a different graph")
        nodes = self.nodes
        root_node = nodes[root.node_id]
        if root_node.value.size != 1:
            raise ShapeError(
                f"backward root must be scalar, got shape {root_node.value.shape}"
            )
        # Restrict work to nodes the root actually depends on.
        reachable = np.zeros(root.node_id + 1, dtype=bool)
        reachable[root.node_id] = True
        for i in range(root.node_id, -1, -1):
            if not reachable[i]:
                continue
            for j in nodes[i].inputs:
                reachable[j] = True
        grads: dict[int, np.ndarray] = {
            root.node_id: np.ones_like(root_node.value)
        }
        for i in range(root.node_id, -1, -1):
            node = nodes[i]
            if not reachable[i] or not node.requires_grad or i not in grads:
                continue
            if not node.inputs:
                continue
            in_values = [nodes[j].value for j in node.inputs]
            needs = tuple(nodes[j].requires_grad for j in node.inputs)
            in_grads = _VJP[node.kind](
                node.attrs, node.cache, grads.pop(i), node.value, needs, *in_values
            )
            seen_ids = set()
            for j, g in zip(node.inputs, in_grads):
                if g is None or not nodes[j].requires_grad:
                    continue
                if j in grads:
                    grads[j] += g
                elif id(g) in seen_ids or g.base is not None or not g.flags.writeable:
                    # the same buffer may be handed to several inputs, or be a
                    # view of the upstream gradient; own it before mutating
                    grads[j] = np.array(g, dtype=np.float64)
                else:
                    grads[j] = g
                    seen_ids.add(id(g))
        out = {}
        for i, node in enumerate(nodes):
            if node.kind == "leaf" and node.requires_grad:
                out[i] = grads.get(i, np.zeros_like(node.value))
        return out


# ---------------------------------------------------------------------------
# Elementwise, reduction and shape ops.
# ---------------------------------------------------------------------------


def _unbroadcast(g, shape):
    """Sum a broadcast gradient back down to ``shape``."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _check_broadcast(kind, a, b):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError as exc:
        raise ShapeError(f"{kind}: shapes {a.shape} and {b.shape} do not broadcast") from exc


def _add_fwd(attrs, a, b):
    _check_broadcast("add", a, b)
    return a + b, None


register_op(
    "add",
    _add_fwd,
    lambda attrs, cache, g, y, needs, a, b: (
        _unbroadcast(g, a.shape) if needs[0] else None,
        _unbroadcast(g, b.shape) if needs[1] else None,
    ),
)


def _subtract_fwd(attrs, a, b):
    _check_broadcast("subtract", a, b)
    return a - b, None


register_op(
    "subtract",
    _subtract_fwd,
    lambda attrs, cache, g, y, needs, a, b: (
        _unbroadcast(g, a.shape) if needs[0] else None,
        _unbroadcast(-g, b.shape) if needs[1] else None,
    ),
)


def _multiply_fwd(attrs, a, b):
    _check_broadcast("multiply", a, b)
    return a * b, None


register_op(
    "multiply",
    _multiply_fwd,
    lambda attrs, cache, g, y, needs, a, b: (
        _unbroadcast(g * b, a.shape) if needs[0] else None,
        _unbroadcast(g * a, b.shape) if needs[1] else None,
    ),
)


def _divide_fwd(attrs, a, b):
    _check_broadcast("divide", a, b)
    return a / b, None


register_op(
    "divide",
    _divide_fwd,
    lambda attrs, cache, g, y, needs, a, b: (
        _unbroadcast(g / b, a.shape) if needs[0] else None,
        _unbroadcast(-g * a / (b * b), b.shape) if needs[1] else None,
    ),
)

register_op(
    "scale",
    lambda attrs, a: (a * attrs["c"], None),
    lambda attrs, cache, g, y, needs, a: (g * attrs["c"],),
)

register_op(
    "add_const",
    lambda attrs, a: (a + attrs["c"], None),
    lambda attrs, cache, g, y, needs, a: (g,),
)


def _matmul_fwd(attrs, a, b):
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} @ {b.shape}")
    return a @ b, None


register_op(
    "matmul",
    _matmul_fwd,
    lambda attrs, cache, g, y, needs, a, b: (
        g @ b.T if needs[0] else None,
        a.T @ g if needs[1] else None,
    ),
)


def _log_fwd(attrs, a):
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(a)
    if not np.all(np.isfinite(out)):
        raise NonFiniteError("log of non-positive value")
    return out, None


register_op("log", _log_fwd, lambda attrs, cache, g, y, needs, a: (g / a,))


def _exp_fwd(attrs, a):
    out = np.exp(a)
    if not np.all(np.isfinite(out)):
        raise NonFiniteError("exp overflow")
    return out, None


register_op("exp", _exp_fwd, lambda attrs, cache, g, y, needs, a: (g * y,))


def _power_fwd(attrs, a):
    p = attrs["p"]
    with np.errstate(invalid="ignore"):
        out = np.power(a, p)
    if not np.all(np.isfinite(out)):
        raise NonFiniteError(f"power {p} produced NaN/Inf")
    return out, None


def _power_vjp(attrs, cache, g, y, needs, a):
    p = attrs["p"]
    if p == 0.0:
        return (np.zeros_like(a),)
    if p == 1.0:
        return (g,)
    if p == 2.0:
        return (g * 2.0 * a,)
    with np.errstate(invalid="ignore", divide="ignore"):
        d = p * np.power(a, p - 1.0)
    d = np.where(np.isfinite(d), d, 0.0)
    return (g * d,)


register_op("power", _power_fwd, _power_vjp)

register_op(
    "maximum_const",
    lambda attrs, a: (np.maximum(a, attrs["c"]), None),
    lambda attrs, cache, g, y, needs, a: (np.where(a > attrs["c"], g, 0.0),),
)


def _sum_fwd(attrs, a):
    return np.asarray(np.sum(a, axis=attrs["axis"], keepdims=attrs["keepdims"])), None


def _bcast_reduced(g, shape, axis, keepdims):
    if axis is None:
        return np.broadcast_to(g, shape)
    if not keepdims:
        axes = axis if isinstance(axis, tuple) else (axis,)
        axes = tuple(a % len(shape) for a in axes)
        g = np.expand_dims(g, axes)
    return np.broadcast_to(g, shape)


register_op(
    "sum",
    _sum_fwd,
    lambda attrs, cache, g, y, needs, a: (
        np.ascontiguousarray(_bcast_reduced(g, a.shape, attrs["axis"], attrs["keepdims"])),
    ),
)


def _mean_count(shape, axis):
    if axis is None:
        return int(np.prod(shape))
    axes = axis if isinstance(axis, tuple) else (axis,)
    n = 1
    for a in axes:
        n *= shape[a % len(shape)]
    return n


register_op(
    "mean",
    lambda attrs, a: (
        np.asarray(np.mean(a, axis=attrs["axis"], keepdims=attrs["keepdims"])),
        None,
    ),
    lambda attrs, cache, g, y, needs, a: (
        np.ascontiguousarray(
            _bcast_reduced(g, a.shape, attrs["axis"], attrs["keepdims"])
        )
        / _mean_count(a.shape, attrs["axis"]),
    ),
)


def _reshape_fwd(attrs, a):
    try:
        return np.reshape(a, attrs["shape"]), None
    except ValueError as exc:
        raise ShapeError(f"reshape: {exc}") from exc


register_op(
    "reshape",
    _reshape_fwd,
    lambda attrs, cache, g, y, needs, a: (np.reshape(g, a.shape),),
)


def _transpose_fwd(attrs, a):
    perm = attrs["perm"]
    if sorted(perm) != list(range(a.ndim)):
        raise ShapeError(f"transpose: {perm} is not a permutation of {a.ndim} axes")
    return np.ascontiguousarray(np.transpose(a, perm)), None


def _transpose_vjp(attrs, cache, g, y, needs, a):
    perm = attrs["perm"]
    inv = np.argsort(perm)
    return (np.ascontiguousarray(np.transpose(g, inv)),)


register_op("transpose", _transpose_fwd, _transpose_vjp)


def _slice_fwd(attrs, a):
    key = tuple(slice(*s) for s in attrs["slices"])
    if len(key) > a.ndim:
        raise ShapeError("slice: more slices than axes")
    return np.ascontiguousarray(a[key]), None


def _slice_vjp(attrs, cache, g, y, needs, a):
    out = np.zeros_like(a)
    key = tuple(slice(*s) for s in attrs["slices"])
    out[key] = g
    return (out,)


register_op("slice", _slice_fwd, _slice_vjp)


def _concat_fwd(attrs, *parts):
    axis = attrs["axis"]
    base = list(parts[0].shape)
    for p in parts[1:]:
        other = list(p.shape)
        if len(other) != len(base):
            raise ShapeError("concat: rank mismatch")
        for i, (x, z) in enumerate(zip(base, other)):
            if i != axis % len(base) and x != z:
                raise ShapeError(f"concat: shapes {parts[0].shape} vs {p.shape}")
    return np.concatenate(parts, axis=axis), None


def _concat_vjp(attrs, cache, g, y, needs, *parts):
    axis = attrs["axis"]
    out = []
    start = 0
    for i, p in enumerate(parts):
        size = p.shape[axis]
        if needs[i]:
            key = [slice(None)] * g.ndim
            key[axis] = slice(start, start + size)
            out.append(np.ascontiguousarray(g[tuple(key)]))
        else:
            out.append(None)
        start += size
    return tuple(out)


register_op("concat", _concat_fwd, _concat_vjp)


def _leaky_relu_fwd(attrs, a):
    # max(a, slope*a) == leaky relu for slope < 1, with no temporaries kept
    y = a * attrs["slope"]
    np.maximum(a, y, out=y)
    return y, None


def _leaky_relu_vjp(attrs, cache, g, y, needs, a):
    d = np.where(a > 0.0, 1.0, attrs["slope"])
    d *= g
    return (d,)


register_op("leaky_relu", _leaky_relu_fwd, _leaky_relu_vjp)


def _silu_fwd(attrs, a):
    s = 1.0 / (1.0 + np.exp(-a))
    return a * s, s


def _silu_vjp(attrs, cache, g, y, needs, a):
    s = cache if cache is not None else 1.0 / (1.0 + np.exp(-a))
    return (g * (s + a * s * (1.0 - s)),)


register_op("silu", _silu_fwd, _silu_vjp)


def _softmax_fwd(attrs, a):
    axis = attrs["axis"]
    shifted = a - np.max(a, axis=axis, keepdims=True)
    np.exp(shifted, out=shifted)
    shifted /= np.sum(shifted, axis=axis, keepdims=True)
    return shifted, None


def _softmax_vjp(attrs, cache, g, y, needs, a):
    axis = attrs["axis"]
    dot = np.sum(g * y, axis=axis, keepdims=True)
    return (y * (g - dot),)


register_op("softmax", _softmax_fwd, _softmax_vjp)


# ---------------------------------------------------------------------------
# Public op functions.
# ---------------------------------------------------------------------------


def add(a: Tensor, b) -> Tensor:
    b = _lift(a.graph, b)
    return a.graph.apply("add", (a, b))


def subtract(a: Tensor, b) -> Tensor:
    b = _lift(a.graph, b)
    return a.graph.apply("subtract", (a, b))


def multiply(a: Tensor, b) -> Tensor:
    b = _lift(a.graph, b)
    return a.graph.apply("multiply", (a, b))


def divide(a: Tensor, b) -> Tensor:
    b = _lift(a.graph, b)
    return a.graph.apply("divide", (a, b))


def scale(a: Tensor, c: float) -> Tensor:
    return a.graph.apply("scale", (a,), {"c": float(c)})


def add_const(a: Tensor, c: float) -> Tensor:
    return a.graph.apply("add_const", (a,), {"c": float(c)})


def matmul(a: Tensor, b: Tensor) -> Tensor:
    return a.graph.apply("matmul", (a, b))


def log(a: Tensor) -> Tensor:
    return a.graph.apply("log", (a,))


def exp(a: Tensor) -> Tensor:
    return a.graph.apply("exp", (a,))


def power(a: Tensor, p: float) -> Tensor:
    return a.graph.apply("power", (a,), {"p": float(p)})


def clamp_min(a: Tensor, c: float) -> Tensor:
    """Elementwise max(a, c); the gradient is zero where the clamp is active."""
    return a.graph.apply("maximum_const", (a,), {"c": float(c)})


def tsum(a: Tensor, axis=None, keepdims=False) -> Tensor:
    return a.graph.apply("sum", (a,), {"axis": axis, "keepdims": keepdims})


def tmean(a: Tensor, axis=None, keepdims=False) -> Tensor:
    return a.graph.apply("mean", (a,), {"axis": axis, "keepdims": keepdims})


def reshape(a: Tensor, shape) -> Tensor:
    return a.graph.apply("reshape", (a,), {"shape": tuple(shape)})


def transpose(a: Tensor, perm) -> Tensor:
    return a.graph.apply("transpose", (a,), {"perm": tuple(perm)})


def slice_axes(a: Tensor, slices) -> Tensor:
    """Slice leading axes; ``slices`` is a sequence of (start, stop[, step])."""
    norm = tuple(tuple(s) for s in slices)
    return a.graph.apply("slice", (a,), {"slices": norm})


def concat(parts, axis: int) -> Tensor:
    if not parts:
        raise ShapeError("concat of zero tensors")
    return parts[0].graph.apply("concat", tuple(parts), {"axis": axis})


def leaky_relu(a: Tensor, slope: float = 0.01) -> Tensor:
    return a.graph.apply("leaky_relu", (a,), {"slope": float(slope)})


def silu(a: Tensor) -> Tensor:
    return a.graph.apply("silu", (a,))


def softmax(a: Tensor, axis: int) -> Tensor:
    return a.graph.apply("softmax", (a,), {"axis": int(axis)})


# ---------------------------------------------------------------------------
# Gradient checking.
# ---------------------------------------------------------------------------


def grad_check(scalar_function, point, step=1e-6, coords=None) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``scalar_function`` maps a leaf Tensor to a scalar Tensor.  The analytic
    gradient comes from one reverse pass; the numeric one re-evaluates the
    function through fresh graphs at ``point ± step`` per coordinate, so the
    two paths share no machinery beyond the forward ops themselves.

    Error per coordinate is |analytic - numeric| / max(1, |analytic|);
    ``coords`` restricts the probe to a subset of flat indices.
    """
    if not (0.0 < step <= 1e-3):
        raise ValueError(f"step must be in (0, 1e-3], got {step}")
    point = np.asarray(point, dtype=np.float64)

    g = Graph()
    x = g.leaf(point, requires_grad=True)
    out = scalar_function(x)
    if out.size != 1:
        raise ShapeError("grad_check target must be scalar")
    analytic = g.backward(out)[x.node_id].ravel()

    def evaluate(arr):
        gg = Graph()
        t = gg.leaf(arr)
        r = scalar_function(t)
        val = float(r.data)
        if not np.isfinite(val):
            raise NonFiniteError("function non-finite at finite probe point")
        return val

    flat = point.ravel()
    if coords is None:
        coords = range(flat.size)
    worst = 0.0
    for i in coords:
        probe = flat.copy()
        probe[i] = flat[i] + step
        f_plus = evaluate(probe.reshape(point.shape))
        probe[i] = flat[i] - step
        f_minus = evaluate(probe.reshape(point.shape))
        numeric = (f_plus - f_minus) / (2.0 * step)
        err = abs(analytic[i] - numeric) / max(1.0, abs(analytic[i]))
        worst = max(worst, err)
    return worst
