from __future__ import annotations

from typing import Callable

import numpy as np

from .tensor import Tape, Tensor


def analytic_grads(loss_fn: Callable[[], Tensor], params: list[Tensor]) -> list[np.ndarray]:
    for p in params:
        p.grad = None
    with Tape() as tape:
        loss = loss_fn()
    tape.backward(loss)
    return [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]


def finite_difference_check(
    loss_fn: Callable[[], Tensor],
    params: list[Tensor],
    h: float = 1e-5,
    max_per_param: int | None = None,
    seed: int = 0,
    floor: float = 1e-7,
    order: int = 2,
) -> float:
    """Worst relative error between tape gradients and central differences.

    Relative error is ``|a - n| / max(|a|, |n|, floor)``; ``floor`` keeps
    vanishing gradients from turning rounding noise into large ratios.
    ``order=4`` uses the five-point stencil, which tolerates a larger ``h``
    and so loses less to cancellation on small gradient entries.
    ``loss_fn`` must rebuild the graph on every call.
    """
    if order not in (2, 4):
        raise ValueError("order must be 2 or 4")
    grads = analytic_grads(loss_fn, params)
    rng = np.random.default_rng(seed)
    worst = 0.0
    for p, g in zip(params, grads):
        flat = p.data.reshape(-1)
        idx = np.arange(flat.size)
        if max_per_param is not None and flat.size > max_per_param:
            idx = rng.choice(flat.size, size=max_per_param, replace=False)
        for i in idx:
            orig = flat[i]

            def at(step):
                flat[i] = orig + step
                v = float(loss_fn().data)
                flat[i] = orig
                return v

            if order == 2:
                num = (at(h) - at(-h)) / (2 * h)
            else:
                num = (8 * (at(h) - at(-h)) - (at(2 * h) - at(-2 * h))) / (12 * h)
            ana = g.reshape(-1)[i]
            worst = max(worst, abs(ana - num) / max(abs(ana), abs(num), floor))
    return worst
