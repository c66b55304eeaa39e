"""Central finite-difference gradient checks."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from demixkit.autodiff.tensor import Tape, Tensor, backward


# Gradients that are identically zero (e.g. a bias feeding train-mode batch
# norm) come back from central differences as O(1e-11) noise; the floor keeps
# that noise from reading as a 100% relative error.
NORM_FLOOR = 1e-6


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """||a - n|| / max(||a||, ||n||, NORM_FLOOR)."""
    scale = max(np.linalg.norm(analytic), np.linalg.norm(numeric), NORM_FLOOR)
    return float(np.linalg.norm(analytic - numeric) / scale)


def numeric_grad(
    fn: Callable[[], Tensor],
    x: Tensor,
    h: float = 1e-5,
    indices: Sequence[int] | None = None,
) -> np.ndarray:
    """d fn() / d x by central differences; only ``indices`` (flat) if given."""
    flat = x.data.reshape(-1)
    grad = np.zeros(flat.size)
    for i in range(flat.size) if indices is None else indices:
        orig = flat[i]
        flat[i] = orig + h
        up = float(fn().data)
        flat[i] = orig - h
        down = float(fn().data)
        flat[i] = orig
        grad[i] = (up - down) / (2 * h)
    return grad.reshape(x.shape)


def check_gradients(
    fn: Callable[[], Tensor],
    inputs: Sequence[Tensor],
    h: float = 1e-5,
    max_coords: int | None = None,
    rng: np.random.Generator | None = None,
    joint: bool = False,
) -> float:
    """Worst relative error between backward and finite differences.

    ``fn`` must rebuild the scalar output from the current values of
    ``inputs``. With ``max_coords`` only that many randomly chosen coordinates
    of each input are compared. ``joint`` compares the concatenation of all
    inputs' gradients as one vector (the natural unit for a whole network,
    where some parameters have structurally zero gradients).
    """
    with Tape() as tape:
        out = fn()
    analytic = backward(out, tape, params=list(inputs))
    worst = 0.0
    all_a, all_n = [], []
    for x, a in zip(inputs, analytic):
        idx = None
        if max_coords is not None and x.data.size > max_coords:
            rng = rng or np.random.default_rng(0)
            idx = np.sort(rng.choice(x.data.size, size=max_coords, replace=False))
        n = numeric_grad(fn, x, h, idx)
        if idx is not None:
            a, n = a.reshape(-1)[idx], n.reshape(-1)[idx]
        all_a.append(np.ravel(a))
        all_n.append(np.ravel(n))
        worst = max(worst, relative_error(a, n))
    if joint:
        return relative_error(np.concatenate(all_a), np.concatenate(all_n))
    return worst
