"""AdamW with a cosine learning-rate schedule.

Decoupled weight decay; the cosine factor is 0.5 * (1 + cos(pi * step /
horizon)) and clamps at zero past the horizon instead of restarting.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .autograd import Tensor
from .errors import ConfigError


def cosine_factor(step: int, horizon: int) -> float:
    if horizon <= 0:
        raise ConfigError(f"cosine horizon must be positive, got {horizon}")
    if step >= horizon:
        return 0.0
    return 0.5 * (1.0 + math.cos(math.pi * step / horizon))


@dataclass
class ParamGroup:
    params: dict[str, Tensor]
    lr: float


@dataclass
class AdamW:
    """Optimizer state: per-parameter moments, step counter, schedule.

    ``groups`` lets stages assign different base learning rates to named
    parameter sets; all groups share the step counter and horizon.
    """

    groups: list[ParamGroup]
    horizon: int
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.0
    step_count: int = 0
    _m: dict[int, np.ndarray] = field(default_factory=dict, repr=False)
    _v: dict[int, np.ndarray] = field(default_factory=dict, repr=False)

    def zero_grad(self) -> None:
        for group in self.groups:
            for p in group.params.values():
                p.zero_grad()

    def current_lr(self, base_lr: float) -> float:
        return base_lr * cosine_factor(self.step_count, self.horizon)

    def step(self) -> None:
        b1, b2 = self.betas
        t = self.step_count + 1
        factor = cosine_factor(self.step_count, self.horizon)
        for group in self.groups:
            lr = group.lr * factor
            for p in group.params.values():
                if not p.requires_grad or p.grad is None:
                    continue
                key = id(p)
                if key not in self._m:
                    self._m[key] = np.zeros_like(p.data)
                    self._v[key] = np.zeros_like(p.data)
                g = p.grad
                m = self._m[key]
                v = self._v[key]
                m *= b1
                m += (1.0 - b1) * g
                v *= b2
                v += (1.0 - b2) * (g * g)
                mhat = m / (1.0 - b1**t)
                vhat = v / (1.0 - b2**t)
                update = mhat / (np.sqrt(vhat) + self.eps)
                if self.weight_decay:
                    update = update + self.weight_decay * p.data
                p.data -= (p.data.dtype.type(lr)) * update.astype(p.data.dtype, copy=False)
        self.step_count += 1


def adamw_step(opt: AdamW) -> None:
    """Single optimizer step (alias kept for symmetry with the op contract)."""
    opt.step()
