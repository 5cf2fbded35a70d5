"""Dense-tensor engine with reverse-mode differentiation.

Covers exactly the operation set the model needs: linear maps, stable
softmax, layer norm, multi-head attention, the SiLU-gated feed-forward,
cross-entropy, and the gather/scatter/concat plumbing used by token
routing. Data lives in numpy arrays (float32 for training runs, float64
for gradient tests); the graph is a closure tape walked in reverse
topological order.
"""

from __future__ import annotations

import math
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import NumericError, ShapeError

Array = np.ndarray


class Tensor:
    """A node in the computation graph.

    Leaf tensors hold parameters or inputs; interior tensors remember their
    parents and a backward closure. ``grad`` is accumulated only on leaves
    that require grad and on interior nodes (frozen leaves stay at None).
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward")

    def __init__(
        self,
        data: Array | float | Sequence,
        requires_grad: bool = False,
        parents: tuple["Tensor", ...] = (),
        backward: Optional[Callable[[Array], None]] = None,
    ):
        if not isinstance(data, np.ndarray):
            if isinstance(data, np.generic):
                data = np.asarray(data)  # keep numpy scalar dtypes
            else:
                data = np.asarray(data, dtype=np.float64)
        self.data = data
        self.requires_grad = requires_grad
        self.grad: Optional[Array] = None
        self._parents = parents
        self._backward = backward

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def needs_grad(self) -> bool:
        return self.requires_grad or bool(self._parents)

    def accumulate(self, g: Array) -> None:
        if self.grad is None:
            self.grad = g.copy()
        else:
            self.grad += g

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        """Reverse-mode sweep from a scalar root.

        The traversal is a structural DFS over parent edges, so two graphs
        with identical topology produce bitwise-identical gradients no
        matter in which order they were constructed.
        """
        if self.data.ndim != 0:
            raise ShapeError(f"backward() needs a scalar root, got shape {self.shape}")
        topo: list[Tensor] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in visited:
                    stack.append((p, False))
        self.accumulate(np.ones((), dtype=self.data.dtype))
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"


def parameter(data: Array, requires_grad: bool = True) -> Tensor:
    return Tensor(np.ascontiguousarray(data), requires_grad=requires_grad)


def _make(data: Array, parents: tuple[Tensor, ...], backward: Callable[[Array], None]) -> Tensor:
    if any(p.needs_grad for p in parents):
        return Tensor(data, parents=parents, backward=backward)
    return Tensor(data)


def _check_same_dtype(*ts: Tensor) -> None:
    d0 = ts[0].data.dtype
    for t in ts[1:]:
        if t.data.dtype != d0:
            raise ShapeError(f"mixed dtypes in op: {d0} vs {t.data.dtype}")


# ---------------------------------------------------------------------------
# arithmetic primitives
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Standard 2-D product; backward is a.grad += g @ b.T, b.grad += a.T @ g."""
    _check_same_dtype(a, b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    out_data = a.data @ b.data

    def backward(g: Array) -> None:
        if a.needs_grad:
            a.accumulate(g @ b.data.T)
        if b.needs_grad:
            b.accumulate(a.data.T @ g)

    return _make(out_data, (a, b), backward)


def transpose(x: Tensor) -> Tensor:
    if x.data.ndim != 2:
        raise ShapeError(f"transpose needs a 2-D tensor, got {x.shape}")
    out_data = np.ascontiguousarray(x.data.T)

    def backward(g: Array) -> None:
        x.accumulate(g.T)

    return _make(out_data, (x,), backward)


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same_dtype(a, b)
    if a.shape != b.shape:
        raise ShapeError(f"add shape mismatch: {a.shape} vs {b.shape}")
    out_data = a.data + b.data

    def backward(g: Array) -> None:
        if a.needs_grad:
            a.accumulate(g)
        if b.needs_grad:
            b.accumulate(g)

    return _make(out_data, (a, b), backward)


def sub(a: Tensor, b: Tensor) -> Tensor:
    return add(a, scale(b, -1.0))


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    """Row-broadcast bias: (T, d) + (d,)."""
    _check_same_dtype(x, b)
    if x.data.ndim != 2 or b.data.ndim != 1 or x.shape[1] != b.shape[0]:
        raise ShapeError(f"add_bias shape mismatch: {x.shape} + {b.shape}")
    out_data = x.data + b.data

    def backward(g: Array) -> None:
        if x.needs_grad:
            x.accumulate(g)
        if b.needs_grad:
            b.accumulate(g.sum(axis=0))

    return _make(out_data, (x, b), backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_same_dtype(a, b)
    if a.shape != b.shape:
        raise ShapeError(f"mul shape mismatch: {a.shape} vs {b.shape}")
    out_data = a.data * b.data

    def backward(g: Array) -> None:
        if a.needs_grad:
            a.accumulate(g * b.data)
        if b.needs_grad:
            b.accumulate(g * a.data)

    return _make(out_data, (a, b), backward)


def mul_cols(x: Tensor, c: Tensor) -> Tensor:
    """Per-row scaling: (T, d) * (T, 1)."""
    _check_same_dtype(x, c)
    if c.shape != (x.shape[0], 1):
        raise ShapeError(f"mul_cols needs ({x.shape[0]}, 1) scale, got {c.shape}")
    out_data = x.data * c.data

    def backward(g: Array) -> None:
        if x.needs_grad:
            x.accumulate(g * c.data)
        if c.needs_grad:
            c.accumulate((g * x.data).sum(axis=1, keepdims=True))

    return _make(out_data, (x, c), backward)


def div_cols(x: Tensor, c: Tensor) -> Tensor:
    """Per-row division: (T, k) / (T, 1)."""
    _check_same_dtype(x, c)
    if c.shape != (x.shape[0], 1):
        raise ShapeError(f"div_cols needs ({x.shape[0]}, 1) divisor, got {c.shape}")
    out_data = x.data / c.data

    def backward(g: Array) -> None:
        if x.needs_grad:
            x.accumulate(g / c.data)
        if c.needs_grad:
            c.accumulate(-(g * out_data / c.data).sum(axis=1, keepdims=True))

    return _make(out_data, (x, c), backward)


def scale(x: Tensor, s: float) -> Tensor:
    out_data = x.data * x.data.dtype.type(s)

    def backward(g: Array) -> None:
        x.accumulate(g * x.data.dtype.type(s))

    return _make(out_data, (x,), backward)


def add_const(x: Tensor, const: Array) -> Tensor:
    """Add a non-differentiable constant (attention masks)."""
    out_data = x.data + const

    def backward(g: Array) -> None:
        x.accumulate(g)

    return _make(out_data, (x,), backward)


def silu(x: Tensor) -> Tensor:
    sig = 1.0 / (1.0 + np.exp(-x.data))
    out_data = x.data * sig

    def backward(g: Array) -> None:
        x.accumulate(g * (sig * (1.0 + x.data * (1.0 - sig))))

    return _make(out_data, (x,), backward)


def sum_all(x: Tensor) -> Tensor:
    out_data = x.data.sum()

    def backward(g: Array) -> None:
        x.accumulate(np.full(x.shape, g, dtype=x.data.dtype))

    return _make(out_data, (x,), backward)


def sum_rows(x: Tensor) -> Tensor:
    """Column sums: (T, M) -> (M,)."""
    if x.data.ndim != 2:
        raise ShapeError(f"sum_rows needs a 2-D tensor, got {x.shape}")
    out_data = x.data.sum(axis=0)

    def backward(g: Array) -> None:
        x.accumulate(np.broadcast_to(g, x.shape).astype(x.data.dtype, copy=True))

    return _make(out_data, (x,), backward)


def row_sum_keepdim(x: Tensor) -> Tensor:
    """Row sums with kept axis: (T, k) -> (T, 1)."""
    out_data = x.data.sum(axis=1, keepdims=True)

    def backward(g: Array) -> None:
        x.accumulate(np.broadcast_to(g, x.shape).astype(x.data.dtype, copy=True))

    return _make(out_data, (x,), backward)


# ---------------------------------------------------------------------------
# normalization and losses
# ---------------------------------------------------------------------------

def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Row-stable softmax; rows along ``axis`` are nonnegative and sum to 1."""
    if np.isnan(x.data).any():
        raise NumericError("softmax received NaN input")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out_data = e / e.sum(axis=axis, keepdims=True)

    def backward(g: Array) -> None:
        inner = (g * out_data).sum(axis=axis, keepdims=True)
        x.accumulate(out_data * (g - inner))

    return _make(out_data, (x,), backward)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Zero mean / unit variance per row (biased variance), then affine."""
    _check_same_dtype(x, gain, bias)
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(f"layer_norm affine shapes {gain.shape}/{bias.shape} do not match width {d}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + x.data.dtype.type(eps))
    xhat = xc * inv
    out_data = xhat * gain.data + bias.data

    def backward(g: Array) -> None:
        if gain.needs_grad:
            gain.accumulate((g * xhat).sum(axis=0))
        if bias.needs_grad:
            bias.accumulate(g.sum(axis=0))
        if x.needs_grad:
            gx = g * gain.data
            gx_mean = gx.mean(axis=-1, keepdims=True)
            gxxhat_mean = (gx * xhat).mean(axis=-1, keepdims=True)
            x.accumulate(inv * (gx - gx_mean - xhat * gxxhat_mean))

    return _make(out_data, (x, gain, bias), backward)


def cross_entropy(logits: Tensor, targets: Array, ignore: Optional[Array] = None) -> Tensor:
    """Mean negative log-softmax of the target logits over non-ignored rows.

    ``targets`` holds token ids per row; ``ignore`` marks rows excluded from
    the mean. Raises if every row is ignored (the mean is undefined).
    """
    t, v = logits.shape
    targets = np.asarray(targets, dtype=np.int64)
    if targets.shape != (t,):
        raise ShapeError(f"targets shape {targets.shape} does not match {t} rows")
    keep = np.ones(t, dtype=bool) if ignore is None else ~np.asarray(ignore, dtype=bool)
    n = int(keep.sum())
    if n == 0:
        raise NumericError("cross_entropy: every position is ignored, mean undefined")
    if (targets[keep] < 0).any() or (targets[keep] >= v).any():
        raise ShapeError(f"target id out of range for vocab {v}")
    safe_targets = np.where(keep, targets, 0)

    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    z = e.sum(axis=1, keepdims=True)
    logp = shifted - np.log(z)
    rows = np.arange(t)
    picked = logp[rows, safe_targets]
    out_data = np.asarray(-(picked[keep]).sum() / n, dtype=logits.data.dtype)

    def backward(g: Array) -> None:
        p = e / z
        grad = p.copy()
        grad[rows, safe_targets] -= 1.0
        grad[~keep] = 0.0
        logits.accumulate(grad * (g / n))

    return _make(out_data, (logits,), backward)


# ---------------------------------------------------------------------------
# gather / scatter / concat plumbing
# ---------------------------------------------------------------------------

def row_gather(x: Tensor, idx: Array) -> Tensor:
    """out[i] = x[idx[i]]; backward scatter-adds into x."""
    idx = np.asarray(idx, dtype=np.int64)
    if idx.size and (idx.min() < 0 or idx.max() >= x.shape[0]):
        raise ShapeError(f"row index out of range for {x.shape[0]} rows")
    out_data = x.data[idx]

    def backward(g: Array) -> None:
        gx = np.zeros_like(x.data)
        np.add.at(gx, idx, g)
        x.accumulate(gx)

    return _make(out_data, (x,), backward)


def row_slice(x: Tensor, start: int, stop: int) -> Tensor:
    out_data = x.data[start:stop].copy()

    def backward(g: Array) -> None:
        gx = np.zeros_like(x.data)
        gx[start:stop] = g
        x.accumulate(gx)

    return _make(out_data, (x,), backward)


def col_slice(x: Tensor, start: int, stop: int) -> Tensor:
    out_data = np.ascontiguousarray(x.data[:, start:stop])

    def backward(g: Array) -> None:
        gx = np.zeros_like(x.data)
        gx[:, start:stop] = g
        x.accumulate(gx)

    return _make(out_data, (x,), backward)


def gather_cols(x: Tensor, idx: Array) -> Tensor:
    """out[t, j] = x[t, idx[t, j]] for a per-row index matrix."""
    idx = np.asarray(idx, dtype=np.int64)
    t = x.shape[0]
    if idx.shape[0] != t:
        raise ShapeError(f"gather_cols rows {idx.shape[0]} != {t}")
    rows = np.arange(t)[:, None]
    out_data = x.data[rows, idx]

    def backward(g: Array) -> None:
        gx = np.zeros_like(x.data)
        np.add.at(gx, (rows, idx), g)
        x.accumulate(gx)

    return _make(out_data, (x,), backward)


def concat_rows(parts: Sequence[Tensor]) -> Tensor:
    if not parts:
        raise ShapeError("concat_rows of an empty sequence")
    _check_same_dtype(*parts)
    widths = {p.shape[1] for p in parts}
    if len(widths) != 1:
        raise ShapeError(f"concat_rows width mismatch: {sorted(widths)}")
    out_data = np.concatenate([p.data for p in parts], axis=0)
    offsets = np.cumsum([0] + [p.shape[0] for p in parts])

    def backward(g: Array) -> None:
        for p, a, b in zip(parts, offsets[:-1], offsets[1:]):
            if p.needs_grad:
                p.accumulate(g[a:b])

    return _make(out_data, tuple(parts), backward)


def concat_cols(parts: Sequence[Tensor]) -> Tensor:
    if not parts:
        raise ShapeError("concat_cols of an empty sequence")
    _check_same_dtype(*parts)
    out_data = np.concatenate([p.data for p in parts], axis=1)
    offsets = np.cumsum([0] + [p.shape[1] for p in parts])

    def backward(g: Array) -> None:
        for p, a, b in zip(parts, offsets[:-1], offsets[1:]):
            if p.needs_grad:
                p.accumulate(g[:, a:b])

    return _make(out_data, tuple(parts), backward)


# ---------------------------------------------------------------------------
# composite layers
# ---------------------------------------------------------------------------

def linear(x: Tensor, w: Tensor, b: Optional[Tensor] = None) -> Tensor:
    out = matmul(x, w)
    return add_bias(out, b) if b is not None else out


def causal_mask(t: int, dtype) -> Array:
    mask = np.zeros((t, t), dtype=dtype)
    mask[np.triu_indices(t, k=1)] = -1e30
    return mask


def attention_concat(
    q: Tensor,
    k: Tensor,
    v: Tensor,
    heads: int,
    causal: bool = False,
    weights_out: Optional[list[Array]] = None,
) -> Tensor:
    """Per-head attention outputs concatenated, before output projection.

    q is (Tq, d); k and v are (Tk, d). The per-head weights are
    softmax(q_h k_h^T / sqrt(d/heads)); a causal mask (requires Tq == Tk)
    zeroes attention to future positions. ``weights_out``, when given,
    collects a copy of each head's attention matrix.
    """
    from .errors import ConfigError

    d = q.shape[1]
    if d % heads != 0:
        raise ConfigError(f"width {d} not divisible by {heads} heads")
    if k.shape != v.shape or k.shape[1] != d:
        raise ShapeError(f"attention k/v shapes {k.shape}/{v.shape} do not match width {d}")
    if causal and q.shape[0] != k.shape[0]:
        raise ShapeError("causal attention needs square score matrix")
    dh = d // heads
    inv_sqrt = 1.0 / math.sqrt(dh)
    mask = causal_mask(q.shape[0], q.data.dtype) if causal else None
    outs = []
    for h in range(heads):
        a, b = h * dh, (h + 1) * dh
        qh, kh, vh = col_slice(q, a, b), col_slice(k, a, b), col_slice(v, a, b)
        scores = scale(matmul(qh, transpose(kh)), inv_sqrt)
        if mask is not None:
            scores = add_const(scores, mask)
        attn = softmax(scores, axis=-1)
        if weights_out is not None:
            weights_out.append(attn.data.copy())
        outs.append(matmul(attn, vh))
    return concat_cols(outs)


def attention(
    q: Tensor,
    k: Tensor,
    v: Tensor,
    w_out: Tensor,
    heads: int,
    causal: bool = False,
    return_weights: bool = False,
):
    """Multi-head scaled dot-product attention with output projection."""
    weights: Optional[list[Array]] = [] if return_weights else None
    out = matmul(attention_concat(q, k, v, heads, causal=causal, weights_out=weights), w_out)
    if return_weights:
        return out, weights
    return out


def gated_ffn(x: Tensor, w_gate: Tensor, w_up: Tensor, w_down: Tensor) -> Tensor:
    """SiLU-gated feed-forward: (silu(x W_gate) * (x W_up)) W_down."""
    return matmul(mul(silu(matmul(x, w_gate)), matmul(x, w_up)), w_down)
