"""rmsprop and global-norm gradient clipping over named parameter dicts."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .errors import ShapeError


@dataclass
class RmspropState:
    lr: float = 1e-4
    rho: float = 0.9
    eps: float = 1e-8
    acc: dict[str, np.ndarray] = field(default_factory=dict)


def rmsprop_update(
    params: Mapping[str, np.ndarray],
    grads: Mapping[str, np.ndarray],
    state: RmspropState,
) -> dict[str, np.ndarray]:
    """One rmsprop step; returns new parameter arrays, updates `state.acc`.

    acc <- rho * acc + (1 - rho) * g^2 ; theta <- theta - lr * g / (sqrt(acc) + eps)
    Parameters without a gradient entry are passed through unchanged.
    """
    out = {}
    for name, theta in params.items():
        g = grads.get(name)
        if g is None:
            out[name] = theta
            continue
        if g.shape != theta.shape:
            raise ShapeError(f"gradient for {name!r} has shape {g.shape}, parameter has {theta.shape}")
        acc = state.acc.get(name)
        if acc is None:
            acc = np.zeros_like(theta)
        acc = state.rho * acc + (1.0 - state.rho) * g * g
        state.acc[name] = acc.astype(theta.dtype, copy=False)
        step = state.lr * g / (np.sqrt(acc) + state.eps)
        out[name] = (theta - step).astype(theta.dtype, copy=False)
    return out


def global_norm(grads: Mapping[str, np.ndarray]) -> float:
    return float(np.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads.values())))


def clip_by_global_norm(grads: Mapping[str, np.ndarray], max_norm: float | None) -> dict[str, np.ndarray]:
    if not max_norm:
        return dict(grads)
    norm = global_norm(grads)
    if norm <= max_norm or norm == 0.0:
        return dict(grads)
    scale = max_norm / norm
    return {k: (g * scale).astype(g.dtype, copy=False) for k, g in grads.items()}


def tree_sum(maps: list[Mapping[str, np.ndarray]]) -> dict[str, np.ndarray]:
    """Pairwise reduction in fixed list order, so sums are reproducible."""
    if not maps:
        return {}
    level = [dict(m) for m in maps]
    while len(level) > 1:
        nxt = []
        for i in range(0, len(level) - 1, 2):
            a, b = level[i], level[i + 1]
            nxt.append({k: a[k] + b[k] for k in a})
        if len(level) % 2:
            nxt.append(level[-1])
        level = nxt
    return level[0]
