"""Central finite-difference checks of tape gradients.

Relative error is measured per leaf as ||g_tape - g_fd|| / max(||g_tape||, ||g_fd||),
which stays meaningful when individual entries are near zero.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    scale = max(np.linalg.norm(analytic), np.linalg.norm(numeric))
    if scale == 0.0:
        return 0.0
    return float(np.linalg.norm(analytic - numeric) / scale)


def numeric_gradient(loss_fn: Callable[[], Tensor], leaf: Tensor, indices=None, eps: float = 1e-5) -> np.ndarray:
    """Central differences of ``loss_fn()`` w.r.t. ``leaf`` at flat ``indices`` (all when None)."""
    flat = leaf.data.reshape(-1)
    indices = range(flat.size) if indices is None else indices
    out = []
    for i in indices:
        old = flat[i]
        flat[i] = old + eps
        up = loss_fn().item()
        flat[i] = old - eps
        down = loss_fn().item()
        flat[i] = old
        out.append((up - down) / (2.0 * eps))
    return np.asarray(out)


def check_gradients(loss_fn: Callable[[], Tensor], leaves: Sequence[Tensor], eps: float = 1e-5,
                    max_entries: int | None = None, rng: np.random.Generator | None = None) -> float:
    """Worst relative error over ``leaves``; ``max_entries`` samples entries per leaf."""
    for leaf in leaves:
        leaf.grad = None
    loss_fn().backward()
    worst = 0.0
    for leaf in leaves:
        analytic = (leaf.grad if leaf.grad is not None else np.zeros(leaf.shape)).reshape(-1)
        if max_entries is not None and leaf.size > max_entries:
            rng = rng or np.random.default_rng(0)
            idx = np.sort(rng.choice(leaf.size, max_entries, replace=False))
        else:
            idx = np.arange(leaf.size)
        worst = max(worst, relative_error(analytic[idx], numeric_gradient(loss_fn, leaf, idx, eps)))
    return worst
