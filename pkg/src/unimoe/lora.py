"""Low-rank adaptation of frozen linear weights.

An adapter adds (alpha / r) * B A to a frozen base matrix. B starts at
zero, so a freshly attached adapter is an exact no-op; merging
materializes the delta into the base weight.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autograd import Tensor, add, matmul, parameter, scale, transpose
from .errors import ConfigError, ShapeError

STAGE2_RANK = 64
STAGE3_RANK = 8
LORA_ALPHA = 16.0
_A_INIT_STD = 0.02


@dataclass
class LoraAdapter:
    """Trainable low-rank factors for one frozen weight.

    Weights follow the x @ W (in, out) convention, so A is (r, in_dim) and
    B is (out_dim, r); the delta applied to W is (alpha / r) * (B A)^T.
    """

    a: Tensor
    b: Tensor
    rank: int
    alpha: float
    target: str

    def __post_init__(self):
        if self.rank < 1:
            raise ConfigError(f"lora rank must be >= 1, got {self.rank}")
        if self.alpha <= 0:
            raise ConfigError(f"lora alpha must be > 0, got {self.alpha}")
        if self.a.shape[0] != self.rank or self.b.shape[1] != self.rank:
            raise ShapeError(f"rank mismatch: A {self.a.shape}, B {self.b.shape}, r={self.rank}")

    @property
    def scaling(self) -> float:
        return self.alpha / self.rank


def make_adapter(target: str, in_dim: int, out_dim: int, rank: int, alpha: float, rng: np.random.Generator, dtype=np.float32) -> LoraAdapter:
    a = parameter(rng.normal(0.0, _A_INIT_STD, size=(rank, in_dim)).astype(dtype))
    b = parameter(np.zeros((out_dim, rank), dtype=dtype))
    return LoraAdapter(a=a, b=b, rank=rank, alpha=alpha, target=target)


def lora_forward(x: Tensor, w0: Tensor, adapter: LoraAdapter | None) -> Tensor:
    """x @ W0 plus the scaled low-rank delta; W0 receives no gradient."""
    base = matmul(x, w0)
    if adapter is None:
        return base
    if adapter.a.shape[1] != w0.shape[0] or adapter.b.shape[0] != w0.shape[1]:
        raise ShapeError(f"adapter {adapter.target} does not fit weight {w0.shape}")
    delta = matmul(matmul(x, transpose(adapter.a)), transpose(adapter.b))
    return add(base, scale(delta, adapter.scaling))


def merge_adapter(w0: np.ndarray, adapter: LoraAdapter) -> np.ndarray:
    """Materialize W0 + (alpha / r) * (B A)^T. Not idempotent: merging the
    same adapter twice adds the delta twice.

    The sum is formed in double precision and rounded once into the base
    dtype, so the merged weight is the correctly rounded materialization.
    """
    delta = (adapter.b.data.astype(np.float64) @ adapter.a.data.astype(np.float64)).T
    merged = w0.astype(np.float64) + adapter.scaling * delta
    return merged.astype(w0.dtype)


@dataclass
class AdapterSet:
    """Adapters keyed by target weight name."""

    adapters: dict[str, LoraAdapter] = field(default_factory=dict)

    def get(self, target: str) -> LoraAdapter | None:
        return self.adapters.get(target)

    def params(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for target, ad in self.adapters.items():
            out[f"{target}.lora_A"] = ad.a
            out[f"{target}.lora_B"] = ad.b
        return out


def attach_adapters(
    weights: dict[str, Tensor],
    targets: list[str],
    rank: int,
    alpha: float,
    seed: int,
    existing: AdapterSet | None = None,
) -> AdapterSet:
    """Create one adapter per target weight and freeze the base weights."""
    if not targets:
        raise ConfigError("attach_adapters: empty target set")
    adapter_set = existing if existing is not None else AdapterSet()
    for target in targets:
        if target not in weights:
            raise ConfigError(f"lora target {target!r} not found in model")
        if target in adapter_set.adapters:
            raise ConfigError(f"duplicate adapter attachment to {target!r}")
        w0 = weights[target]
        rng = np.random.default_rng([seed, _stable_id(target)])
        adapter_set.adapters[target] = make_adapter(
            target, w0.shape[0], w0.shape[1], rank, alpha, rng, dtype=w0.data.dtype
        )
        w0.requires_grad = False
    return adapter_set


def _stable_id(name: str) -> int:
    import zlib

    return zlib.crc32(name.encode("utf-8"))
