from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import tensor as T
from .tensor import Var


def analytic_gradients(loss_fn: Callable[[], Var], params: dict[str, Var]) -> tuple[float, dict[str, np.ndarray]]:
    for p in params.values():
        p.zero_grad()
    loss = loss_fn()
    T.backward(loss)
    grads = {k: (p.grad if p.grad is not None else np.zeros_like(p.data)) for k, p in params.items()}
    return float(loss.data), grads


def relative_error(a: float, f: float, floor: float = 1.0) -> float:
    """``|a - f| / max(floor, |a|, |f|)``; the floor keeps near-zero gradients from dominating."""
    return abs(a - f) / max(floor, abs(a), abs(f))


def grad_check(
    loss_fn: Callable[[], Var],
    params: dict[str, Var],
    eps: float = 1e-6,
    *,
    grads: dict[str, np.ndarray] | None = None,
    max_coords: int | None = None,
    rng: np.random.Generator | None = None,
    per_block: dict[str, float] | None = None,
) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``loss_fn`` re-evaluates the loss from the current parameter values.
    With ``max_coords`` only that many randomly chosen coordinates per block
    are probed. ``per_block``, if given, receives each block's worst error.
    """
    if grads is None:
        _, grads = analytic_gradients(loss_fn, params)
    rng = rng or np.random.default_rng(0)
    worst = 0.0
    for name, p in params.items():
        flat = p.data.reshape(-1)
        n = flat.size
        coords = np.arange(n) if max_coords is None or n <= max_coords else rng.choice(n, max_coords, replace=False)
        g = grads[name].reshape(-1)
        block_worst = 0.0
        for i in coords:
            orig = flat[i]
            flat[i] = orig + eps
            up = float(loss_fn().data)
            flat[i] = orig - eps
            down = float(loss_fn().data)
            flat[i] = orig
            err = relative_error(float(g[i]), (up - down) / (2.0 * eps))
            block_worst = max(block_worst, err)
        if per_block is not None:
            per_block[name] = block_worst
        worst = max(worst, block_worst)
    return worst


@dataclass
class DirectionalResult:
    per_block: dict[str, float]
    kinks_skipped: int


def directional_check(
    loss_fn: Callable[[], Var],
    params: dict[str, Var],
    eps: float = 1e-4,
    *,
    n_dirs: int = 1,
    tol: float = 1e-4,
    max_tries: int = 6,
    rng: np.random.Generator | None = None,
    grads: dict[str, np.ndarray] | None = None,
    floor: float = 1e-6,
) -> DirectionalResult:
    """Per-block worst relative error of ``g . v`` against a fourth-order central difference along ``v``.

    ``v`` mixes the normalized gradient with a random direction, so every
    coordinate contributes while the derivative stays well above round-off.
    Derivatives below ``floor`` in magnitude are compared absolutely.
    When the difference disagrees with ``g . v``, it is repeated at half the
    step: if the two differences also disagree the probe straddled a
    non-differentiable point (ReLU boundary, max switch, mode reselection)
    and a fresh, more random direction is drawn at a quarter of the step.
    Two steps that agree with each other but not with ``g . v`` are reported.
    """
    if grads is None:
        _, grads = analytic_gradients(loss_fn, params)
    rng = rng or np.random.default_rng(0)
    out: dict[str, float] = {}
    kinks = 0

    def loss_at(p: Var, x: np.ndarray) -> float:
        p.data = x
        return float(loss_fn().data)

    def central(p: Var, base: np.ndarray, v: np.ndarray, h: float) -> float:
        # fourth-order central stencil
        f1 = loss_at(p, base + h * v) - loss_at(p, base - h * v)
        f2 = loss_at(p, base + 2 * h * v) - loss_at(p, base - 2 * h * v)
        p.data = base.copy()
        return (8.0 * f1 - f2) / (12.0 * h)

    for name, p in params.items():
        base = p.data.copy()
        g = grads[name]
        gn = float(np.linalg.norm(g))
        worst = 0.0
        for _ in range(n_dirs):
            err = 0.0
            for attempt in range(max_tries):
                # each retry after a kink moves to a smaller step and a more random direction
                h = eps * 0.25**attempt
                r = rng.standard_normal(base.shape)
                v = 0.7 * 2.0**attempt * r / np.linalg.norm(r) + (g / gn if gn > 0 else 0.0)
                v /= np.linalg.norm(v)
                a = float(np.sum(g * v))
                f1 = central(p, base, v, h)
                err = relative_error(a, f1, floor)
                if err <= tol:
                    break
                f2 = central(p, base, v, h / 2)
                if relative_error(f1, f2, floor) <= tol:
                    err = min(err, relative_error(a, f2, floor))
                    break
                kinks += 1
            worst = max(worst, err)
        out[name] = worst
    return DirectionalResult(out, kinks)
