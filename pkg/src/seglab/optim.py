"""Plain SGD, the two-pass sharpness-aware step, and an empirical
sharpness probe over a radius-rho parameter ball.

Both optimizers speak a small protocol: ``loss_fn(params)`` builds a fresh
graph at the given parameter values and returns ``(loss_tensor, leaves)``
where ``leaves`` maps parameter names to their bound leaf Tensors, so the
step can pull gradients for every parameter by name.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import NonFiniteError, ShapeError

ZERO_GRAD_TOL = 1e-12


class ParamSet:
    """Named, ordered collection of float64 parameter arrays.

    Names are unique by construction; shapes are fixed after creation.  One
    step mutates exactly one ParamSet; never share across concurrent steps.
    """

    def __init__(self, params: dict[str, np.ndarray]):
        self._data: dict[str, np.ndarray] = {}
        for name, arr in params.items():
            self._data[name] = np.array(arr, dtype=np.float64)

    def __getitem__(self, name: str) -> np.ndarray:
        return self._data[name]

    def __setitem__(self, name: str, arr: np.ndarray):
        arr = np.asarray(arr, dtype=np.float64)
        if name in self._data and self._data[name].shape != arr.shape:
            raise ShapeError(
                f"parameter {name!r} has shape {self._data[name].shape}, got {arr.shape}"
            )
        self._data[name] = np.array(arr, dtype=np.float64)

    def __contains__(self, name: str) -> bool:
        return name in self._data

    def __len__(self) -> int:
        return len(self._data)

    def names(self) -> list[str]:
        return list(self._data)

    def items(self):
        return self._data.items()

    def clone(self) -> "ParamSet":
        return ParamSet(self._data)

    def n_scalars(self) -> int:
        return sum(v.size for v in self._data.values())


@dataclass
class SamConfig:
    rho: float = 0.05
    lr: float = 5e-3
    zero_grad_policy: str = "plain_step"  # or "skip"

    def __post_init__(self):
        if self.rho < 0:
            raise ValueError(f"rho must be >= 0, got {self.rho}")
        if self.lr < 0:
            raise ValueError(f"lr must be >= 0, got {self.lr}")
        if self.zero_grad_policy not in ("plain_step", "skip"):
            raise ValueError(f"unknown zero_grad_policy {self.zero_grad_policy!r}")


def _grads_by_name(graph, loss, leaves) -> dict[str, np.ndarray]:
    grad_map = graph.backward(loss)
    return {
        name: grad_map.get(t.node_id, np.zeros(t.shape)) for name, t in leaves.items()
    }


def evaluate_loss_and_grads(params: ParamSet, loss_fn):
    loss, leaves = loss_fn(params)
    value = loss.item()
    if not np.isfinite(value):
        raise NonFiniteError("loss is non-finite")
    return value, _grads_by_name(loss.graph, loss, leaves)


def evaluate_loss(params: ParamSet, loss_fn) -> float:
    loss, _ = loss_fn(params)
    value = loss.item()
    if not np.isfinite(value):
        raise NonFiniteError("loss is non-finite")
    return value


def global_norm(grads: dict[str, np.ndarray]) -> float:
    total = 0.0
    for g in grads.values():
        total += float(np.dot(g.ravel(), g.ravel()))
    return float(np.sqrt(total))


def sgd_step(params: ParamSet, grads: dict[str, np.ndarray], lr: float) -> ParamSet:
    """theta <- theta - lr * g, elementwise and in place (lr=0 is a no-op)."""
    if lr < 0:
        raise ValueError(f"lr must be >= 0, got {lr}")
    for name in params.names():
        if name not in grads:
            raise ShapeError(f"missing gradient for parameter {name!r}")
        g = grads[name]
        if g.shape != params[name].shape:
            raise ShapeError(
                f"gradient for {name!r} has shape {g.shape}, parameter {params[name].shape}"
            )
    for name in params.names():
        params._data[name] -= lr * grads[name]
    return params


def sam_step(params: ParamSet, loss_fn, cfg: SamConfig) -> ParamSet:
    """Two-pass sharpness-aware update.

    Pass 1 takes the gradient at theta and climbs to the first-order
    worst case theta + rho * g / ||g||_2 (one global L2 norm across all
    parameters).  Pass 2 re-evaluates the gradient there and descends from
    the original theta.  Degenerate gradients fall back per
    ``cfg.zero_grad_policy``; rho = 0 reduces to plain SGD bitwise.
    """
    _, grads = evaluate_loss_and_grads(params, loss_fn)
    norm = global_norm(grads)
    if cfg.rho == 0.0 or norm < ZERO_GRAD_TOL:
        if norm < ZERO_GRAD_TOL and cfg.zero_grad_policy == "skip":
            return params
        return sgd_step(params, grads, cfg.lr)
    saved = {name: params[name].copy() for name in params.names()}
    scale = cfg.rho / norm
    for name in params.names():
        params._data[name] += scale * grads[name]
    try:
        _, adv_grads = evaluate_loss_and_grads(params, loss_fn)
    finally:
        for name in params.names():
            params._data[name] = saved[name]
    return sgd_step(params, adv_grads, cfg.lr)


def sharpness_probe(
    params: ParamSet,
    loss_fn,
    rho: float,
    n_ascent_steps: int = 3,
    n_random_dirs: int = 8,
    seed: int = 0,
) -> float:
    """Empirical max of L(theta + eps) - L(theta) over the rho-ball.

    Probes the iterated normalized-gradient ascent direction plus
    ``n_random_dirs`` random unit directions scaled to radius rho, always
    including eps = 0, so the result is >= 0 up to rounding.  Deterministic
    for a fixed seed; the parameters are restored on exit.
    """
    if rho <= 0:
        raise ValueError(f"rho must be > 0, got {rho}")
    if n_ascent_steps < 1 or n_random_dirs < 1:
        raise ValueError("probe counts must be >= 1")
    names = params.names()
    saved = {name: params[name].copy() for name in names}

    def restore():
        for name in names:
            params._data[name] = saved[name].copy()

    try:
        base, grads = evaluate_loss_and_grads(params, loss_fn)
        worst = base

        # (a) iterated ascent along the normalized gradient, projected to the ball
        step = rho / n_ascent_steps
        for _ in range(n_ascent_steps):
            norm = global_norm(grads)
            if norm < ZERO_GRAD_TOL:
                break
            for name in names:
                params._data[name] += (step / norm) * grads[name]
            offset = {name: params[name] - saved[name] for name in names}
            radius = global_norm(offset)
            if radius > rho:
                shrink = rho / radius
                for name in names:
                    params._data[name] = saved[name] + shrink * offset[name]
            value, grads = evaluate_loss_and_grads(params, loss_fn)
            worst = max(worst, value)
        restore()

        # (b) random unit directions scaled to the sphere of radius rho
        rng = np.random.default_rng(seed)
        for _ in range(n_random_dirs):
            direction = {name: rng.standard_normal(saved[name].shape) for name in names}
            norm = global_norm(direction)
            if norm < ZERO_GRAD_TOL:
                continue
            for name in names:
                params._data[name] = saved[name] + (rho / norm) * direction[name]
            worst = max(worst, evaluate_loss(params, loss_fn))
        return worst - base
    finally:
        restore()
