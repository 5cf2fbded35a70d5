"""Central-difference gradient verification.

Compares analytic gradients from the tape against (f(p+eps) - f(p-eps)) /
(2 eps) on sampled coordinates. Meant to run in double precision.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .autograd import Tensor

# Relative error floor: coordinates whose gradients are tiny are compared
# near-absolutely so finite-difference roundoff does not dominate.
_DENOM_FLOOR = 1e-2


def finite_diff_check(
    f: Callable[[], Tensor],
    params: Sequence[Tensor],
    eps: float = 1e-6,
    max_coords_per_param: int | None = None,
    seed: int = 0,
) -> float:
    """Return the max relative error between analytic and numeric gradients.

    ``f`` rebuilds the scalar loss from the live ``params`` tensors on every
    call. When ``max_coords_per_param`` is set, coordinates are subsampled
    with a fixed-seed RNG; otherwise every coordinate is checked.
    """
    rng = np.random.default_rng(seed)
    for p in params:
        p.zero_grad()
    loss = f()
    loss.backward()
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]
    for p in params:
        p.zero_grad()

    max_rel = 0.0
    for p, ana in zip(params, analytic):
        flat = p.data.reshape(-1)
        n = flat.size
        if max_coords_per_param is not None and n > max_coords_per_param:
            coords = rng.choice(n, size=max_coords_per_param, replace=False)
        else:
            coords = np.arange(n)
        ana_flat = ana.reshape(-1)
        for c in coords:
            orig = flat[c]
            flat[c] = orig + eps
            up = float(f().data)
            flat[c] = orig - eps
            down = float(f().data)
            flat[c] = orig
            numeric = (up - down) / (2.0 * eps)
            a = float(ana_flat[c])
            rel = abs(a - numeric) / max(abs(a), abs(numeric), _DENOM_FLOOR)
            if rel > max_rel:
                max_rel = rel
    return max_rel
