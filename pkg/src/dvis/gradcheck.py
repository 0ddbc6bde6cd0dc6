"""Central finite-difference verification of tape gradients."""
from __future__ import annotations

from typing import Any, Callable

import numpy as np

from .autodiff import Tape, Tensor
from .errors import EvaluationError
from .tree import leaves, replace_leaves


def _scalar(value: Tensor) -> float:
    v = float(np.asarray(value.data).reshape(()))
    if not np.isfinite(v):
        raise EvaluationError(f"loss evaluated to non-finite value {v}")
    return v


def tape_gradient(f: Callable[[Any], Tensor], params: Any) -> tuple[float, list[np.ndarray]]:
    """Value and tape gradient of ``f`` w.r.t. every tensor leaf of ``params``."""
    with Tape() as tape:
        watched = tape.watch(*leaves(params))
        loss = f(replace_leaves(params, watched))
    return _scalar(loss), tape.gradient(loss, watched)


def grad_check(
    f: Callable[[Any], Tensor],
    params: Any,
    step: float = 1e-5,
    *,
    max_coords: int | None = None,
    seed: int = 0,
) -> float:
    """Max over coordinates of |g_ad - g_fd| / max(1, |g_ad|, |g_fd|).

    ``params`` is a tensor or any container of tensors; ``f`` maps a container
    of the same structure to a scalar tensor. With ``max_coords`` only a
    seeded random subset of coordinates is probed.
    """
    _, ad = tape_gradient(f, params)
    base = leaves(params)
    coords = [(i, j) for i, t in enumerate(base) for j in range(t.data.size)]
    if max_coords is not None and len(coords) > max_coords:
        pick = np.random.default_rng(seed).choice(len(coords), max_coords, replace=False)
        coords = [coords[k] for k in sorted(pick)]

    def evaluate(i: int, j: int, delta: float) -> float:
        arr = base[i].data.copy()
        arr.flat[j] += delta
        shifted = list(base)
        shifted[i] = Tensor(arr)
        return _scalar(f(replace_leaves(params, shifted)))

    worst = 0.0
    for i, j in coords:
        g_fd = (evaluate(i, j, step) - evaluate(i, j, -step)) / (2.0 * step)
        g_ad = float(ad[i].flat[j])
        err = abs(g_ad - g_fd) / max(1.0, abs(g_ad), abs(g_fd))
        worst = max(worst, err)
    return worst
