"""Sparse-MoE transformer stack.

Blocks are pre-norm: attention with residual, then a dense or MoE
feed-forward with residual, then a trailing layer norm. MoE layers route
each token to its top-k experts by softmax probability and combine the
selected outputs with per-token normalized gate weights.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .errors import ConfigError, NumericError, ShapeError
from .lora import AdapterSet, lora_forward

MOE_LAYOUTS = ("first_half", "second_half", "interval", "all", "none")
INIT_STD = 0.02
# keeps untrained logits near-uniform (CE ~ ln vocab) while leaving the
# connectors enough logit reach through the frozen head
HEAD_STD = 0.07


@dataclass
class ModelConfig:
    """Architecture hyperparameters for the LLM stack."""

    layers: int = 4
    width: int = 64
    ffn: int = 172
    ffn_factor: int = 3
    heads: int = 4
    vocab: int = 256
    experts: int = 1
    topk: int = 1
    moe_layout: str = "interval"
    aux_loss_coeff: float = 0.0
    max_seq: int = 128

    def __post_init__(self):
        if not 1 <= self.topk <= self.experts:
            raise ConfigError(f"need 1 <= topk <= experts, got topk={self.topk}, experts={self.experts}")
        if self.width % self.heads != 0:
            raise ConfigError(f"width {self.width} not divisible by heads {self.heads}")
        if self.moe_layout not in MOE_LAYOUTS:
            raise ConfigError(f"unknown moe_layout {self.moe_layout!r}, expected one of {MOE_LAYOUTS}")
        if self.aux_loss_coeff < 0:
            raise ConfigError(f"aux_loss_coeff must be >= 0, got {self.aux_loss_coeff}")


def build_layer_layout(cfg: ModelConfig) -> list[bool]:
    """Per-layer MoE flags for the four placement variants."""
    n = cfg.layers
    half = (n + 1) // 2
    if cfg.moe_layout == "first_half":
        return [i < half for i in range(n)]
    if cfg.moe_layout == "second_half":
        return [i >= n - half for i in range(n)]
    if cfg.moe_layout == "interval":
        return [i % 2 == 1 for i in range(n)]
    if cfg.moe_layout == "all":
        return [True] * n
    return [False] * n


def count_parameters(cfg: ModelConfig, base_total: int) -> tuple[int, int]:
    """(activated, total) parameter counts for a dense base of ``base_total``.

    Each extra expert per MoE layer adds ffn_factor * width * ffn weights;
    activation counts top-k experts instead of all of them.
    """
    extra = cfg.ffn_factor * cfg.width * cfg.ffn
    moe_layers = sum(build_layer_layout(cfg))
    total = base_total + moe_layers * (cfg.experts - 1) * extra
    activated = base_total + moe_layers * (cfg.topk - 1) * extra
    return activated, total


def format_param_count(n: int) -> str:
    """Round to the nearest 0.1B, half away from zero."""
    tenths = int(np.floor(n / 1e8 + 0.5))
    return f"{tenths / 10:.1f}B"


# ---------------------------------------------------------------------------
# parameter initialization
# ---------------------------------------------------------------------------

def _name_rng(seed: int, name: str) -> np.random.Generator:
    return np.random.default_rng([seed, zlib.crc32(name.encode("utf-8"))])


def init_weight(seed: int, name: str, shape: tuple[int, ...], dtype, std: float | None = None) -> Tensor:
    """Gaussian init from a per-name stream (order-independent across
    architectures). Default std is 1/sqrt(fan_in) so the frozen stack mixes
    token information at O(1) scale."""
    if std is None:
        std = 1.0 / np.sqrt(shape[0])
    rng = _name_rng(seed, name)
    return ag.parameter(rng.normal(0.0, std, size=shape).astype(dtype))


def init_zeros(shape: tuple[int, ...], dtype) -> Tensor:
    return ag.parameter(np.zeros(shape, dtype=dtype))


def init_ones(shape: tuple[int, ...], dtype) -> Tensor:
    return ag.parameter(np.ones(shape, dtype=dtype))


# ---------------------------------------------------------------------------
# routing
# ---------------------------------------------------------------------------

@dataclass
class RoutingDecision:
    """Per-token routing for one MoE layer.

    ``probs`` stays attached to the graph so gate gradients reach the
    router. ``indices`` are each token's top-k experts by descending
    probability (ties to the lower index); ``gates`` are the raw selected
    probabilities, without renormalization.
    """

    probs: Tensor
    indices: np.ndarray
    gates: np.ndarray

    @property
    def num_tokens(self) -> int:
        return self.probs.shape[0]

    @property
    def num_experts(self) -> int:
        return self.probs.shape[1]

    @property
    def topk(self) -> int:
        return self.indices.shape[1]


def route(tokens: Tensor, router_w: Tensor, topk: int) -> RoutingDecision:
    """Softmax over expert logits, then top-k selection per token."""
    m = router_w.shape[1]
    if topk > m:
        raise ConfigError(f"topk {topk} exceeds expert count {m}")
    probs = ag.softmax(ag.matmul(tokens, router_w), axis=-1)
    order = np.argsort(-probs.data, axis=1, kind="stable")
    indices = np.ascontiguousarray(order[:, :topk])
    gates = np.take_along_axis(probs.data, indices, axis=1).copy()
    return RoutingDecision(probs=probs, indices=indices, gates=gates)


@dataclass
class ExpertFFN:
    """One gated feed-forward expert: base weights plus optional adapters."""

    w_gate: Tensor
    w_up: Tensor
    w_down: Tensor
    adapters: AdapterSet = field(default_factory=AdapterSet)
    names: tuple[str, str, str] = ("w_gate", "w_up", "w_down")

    def forward(self, x: Tensor) -> Tensor:
        g = lora_forward(x, self.w_gate, self.adapters.get(self.names[0]))
        u = lora_forward(x, self.w_up, self.adapters.get(self.names[1]))
        return lora_forward(ag.mul(ag.silu(g), u), self.w_down, self.adapters.get(self.names[2]))

    def weights(self) -> dict[str, Tensor]:
        return {self.names[0]: self.w_gate, self.names[1]: self.w_up, self.names[2]: self.w_down}


def _combine_slots(slot_outputs: list[Tensor], decision: RoutingDecision) -> Tensor:
    """Mix per-slot expert outputs with per-token normalized gates.

    Written in residual form out = y0 + sum_s g'_s * (y_s - y0) so that
    identical expert outputs collapse to y0 bitwise, which keeps the
    pure-expert and top-1 degenerations exact.
    """
    out = slot_outputs[0]
    if len(slot_outputs) == 1:
        return out
    gates_t = ag.gather_cols(decision.probs, decision.indices)
    norm = ag.div_cols(gates_t, ag.row_sum_keepdim(gates_t))
    for s in range(1, len(slot_outputs)):
        g_s = ag.col_slice(norm, s, s + 1)
        out = ag.add(out, ag.mul_cols(ag.sub(slot_outputs[s], slot_outputs[0]), g_s))
    return out


def expert_slot_outputs(
    tokens: Tensor,
    decision: RoutingDecision,
    evaluate: "Callable[[int, Tensor], Tensor]",
) -> list[Tensor]:
    """Per-slot output matrices from per-expert evaluations.

    Each expert that received at least one (token, slot) assignment is
    evaluated exactly once on the full token matrix and its rows are
    gathered per slot; experts with no assignments are never evaluated.
    Full-matrix evaluation keeps identical experts bitwise identical
    across slots (the row-subset batching of a GEMM is shape-dependent),
    and unused rows contribute exactly zero gradient.
    """
    used = np.unique(decision.indices)
    outputs = {int(e): evaluate(int(e), tokens) for e in used}
    slot_outputs = []
    for s in range(decision.topk):
        sel = decision.indices[:, s]
        pieces = []
        perm = []
        for e in sorted(outputs):
            rows = np.nonzero(sel == e)[0]
            if rows.size == 0:
                continue
            pieces.append(ag.row_gather(outputs[e], rows))
            perm.append(rows)
        order = np.concatenate(perm)
        inverse = np.empty(tokens.shape[0], dtype=np.int64)
        inverse[order] = np.arange(tokens.shape[0])
        slot_outputs.append(ag.row_gather(ag.concat_rows(pieces), inverse))
    return slot_outputs


def moe_forward(tokens: Tensor, experts: list[ExpertFFN], decision: RoutingDecision) -> Tensor:
    """Weighted combination of each token's selected experts.

    Unselected experts contribute nothing to a token and receive no
    gradient from it. Gate weights are normalized per token before mixing
    (see _combine_slots).
    """
    t = tokens.shape[0]
    if decision.num_tokens != t:
        raise ShapeError(f"decision covers {decision.num_tokens} tokens, input has {t}")
    if decision.indices.max(initial=0) >= len(experts):
        raise ShapeError(f"expert index {decision.indices.max()} out of range for {len(experts)} experts")
    slot_outputs = expert_slot_outputs(tokens, decision, lambda e, x: experts[e].forward(x))
    return _combine_slots(slot_outputs, decision)


def aux_balance_loss(decision: RoutingDecision, coeff: float, num_experts: int) -> Tensor:
    """Importance-balancing loss coeff * M * sum_i mean_prob_i^2.

    mean_prob_i is expert i's average router probability over the batch
    (its "importance"). By Cauchy-Schwarz the sum is at least 1/M with
    equality exactly at uniform importance, so the loss is bounded below
    by coeff and pushes the router toward giving all experts the same
    importance (and with it a roughly equal share of assignments).
    """
    if coeff < 0:
        raise ConfigError(f"aux loss coefficient must be >= 0, got {coeff}")
    t = decision.num_tokens
    if t == 0:
        raise NumericError("aux_balance_loss over zero tokens")
    mean_probs = ag.scale(ag.sum_rows(decision.probs), 1.0 / t)
    return ag.scale(ag.sum_all(ag.mul(mean_probs, mean_probs)), coeff * num_experts)


# ---------------------------------------------------------------------------
# blocks and the full stack
# ---------------------------------------------------------------------------

@dataclass
class MoELayer:
    experts: list[ExpertFFN]
    router_w: Tensor
    topk: int


@dataclass
class Block:
    prefix: str
    ln_attn_g: Tensor
    ln_attn_b: Tensor
    wq: Tensor
    wk: Tensor
    wv: Tensor
    wo: Tensor
    ln_ffn_g: Tensor
    ln_ffn_b: Tensor
    ffn: ExpertFFN | MoELayer
    ln_out_g: Tensor
    ln_out_b: Tensor
    heads: int
    attn_adapters: AdapterSet = field(default_factory=AdapterSet)

    @property
    def is_moe(self) -> bool:
        return isinstance(self.ffn, MoELayer)

    def attn_weights(self) -> dict[str, Tensor]:
        p = self.prefix
        return {
            f"{p}.attn.wq": self.wq,
            f"{p}.attn.wk": self.wk,
            f"{p}.attn.wv": self.wv,
            f"{p}.attn.wo": self.wo,
        }


def block_forward(x: Tensor, block: Block, causal: bool = True) -> tuple[Tensor, Optional[RoutingDecision]]:
    """Pre-norm attention and feed-forward with residuals, trailing norm."""
    p = block.prefix
    h = ag.layer_norm(x, block.ln_attn_g, block.ln_attn_b)
    q = lora_forward(h, block.wq, block.attn_adapters.get(f"{p}.attn.wq"))
    k = lora_forward(h, block.wk, block.attn_adapters.get(f"{p}.attn.wk"))
    v = lora_forward(h, block.wv, block.attn_adapters.get(f"{p}.attn.wv"))
    concat = ag.attention_concat(q, k, v, block.heads, causal=causal)
    attn = lora_forward(concat, block.wo, block.attn_adapters.get(f"{p}.attn.wo"))
    xs = ag.add(attn, x)

    h2 = ag.layer_norm(xs, block.ln_ffn_g, block.ln_ffn_b)
    decision: Optional[RoutingDecision] = None
    if isinstance(block.ffn, MoELayer):
        decision = route(h2, block.ffn.router_w, block.ffn.topk)
        ff = moe_forward(h2, block.ffn.experts, decision)
    else:
        ff = block.ffn.forward(h2)
    xm = ag.add(ff, xs)
    return ag.layer_norm(xm, block.ln_out_g, block.ln_out_b), decision


@dataclass
class LMOutput:
    logits: Tensor
    decisions: list[tuple[int, RoutingDecision]]
    aux_loss: Optional[Tensor]


class UniMoeModel:
    """Token-embedding input, stacked blocks per layout, LM head."""

    def __init__(self, cfg: ModelConfig, seed: int = 0, dtype=np.float32):
        self.cfg = cfg
        self.dtype = np.dtype(dtype)
        d, f, v = cfg.width, cfg.ffn, cfg.vocab
        self.tok_emb = init_weight(seed, "llm.tok_emb.weight", (v, d), dtype, std=1.0)
        self.pos_emb = init_weight(seed, "llm.pos_emb.weight", (cfg.max_seq, d), dtype, std=1.0)
        self.lm_head = init_weight(seed, "llm.lm_head.weight", (d, v), dtype, std=HEAD_STD)
        self.layout = build_layer_layout(cfg)
        self.blocks: list[Block] = []
        for i, is_moe in enumerate(self.layout):
            prefix = f"llm.blocks.{i}"
            ffn: ExpertFFN | MoELayer
            if is_moe:
                experts = [
                    self._make_expert(seed, f"{prefix}.moe.experts.{j}", d, f, dtype)
                    for j in range(cfg.experts)
                ]
                # near-uniform initial routing without exact ties
                router_w = init_weight(seed, f"{prefix}.moe.router.weight", (d, cfg.experts), dtype, std=INIT_STD)
                ffn = MoELayer(experts=experts, router_w=router_w, topk=cfg.topk)
            else:
                ffn = self._make_expert(seed, f"{prefix}.ffn", d, f, dtype)
            self.blocks.append(
                Block(
                    prefix=prefix,
                    ln_attn_g=init_ones((d,), dtype),
                    ln_attn_b=init_zeros((d,), dtype),
                    wq=init_weight(seed, f"{prefix}.attn.wq", (d, d), dtype),
                    wk=init_weight(seed, f"{prefix}.attn.wk", (d, d), dtype),
                    wv=init_weight(seed, f"{prefix}.attn.wv", (d, d), dtype),
                    wo=init_weight(seed, f"{prefix}.attn.wo", (d, d), dtype),
                    ln_ffn_g=init_ones((d,), dtype),
                    ln_ffn_b=init_zeros((d,), dtype),
                    ffn=ffn,
                    ln_out_g=init_ones((d,), dtype),
                    ln_out_b=init_zeros((d,), dtype),
                    heads=cfg.heads,
                )
            )

    @staticmethod
    def _make_expert(seed: int, prefix: str, d: int, f: int, dtype) -> ExpertFFN:
        return ExpertFFN(
            w_gate=init_weight(seed, f"{prefix}.w_gate", (d, f), dtype),
            w_up=init_weight(seed, f"{prefix}.w_up", (d, f), dtype),
            w_down=init_weight(seed, f"{prefix}.w_down", (f, d), dtype),
            names=(f"{prefix}.w_gate", f"{prefix}.w_up", f"{prefix}.w_down"),
        )

    def embed_tokens(self, ids: np.ndarray) -> Tensor:
        ids = np.asarray(ids, dtype=np.int64)
        if ids.size and (ids.min() < 0 or ids.max() >= self.cfg.vocab):
            raise ShapeError(f"token id out of range for vocab {self.cfg.vocab}")
        return ag.row_gather(self.tok_emb, ids)

    def forward(self, x: Tensor) -> LMOutput:
        """Run assembled input embeddings through the stack."""
        t = x.shape[0]
        if t > self.cfg.max_seq:
            raise ConfigError(f"sequence length {t} exceeds max_seq {self.cfg.max_seq}")
        h = ag.add(x, ag.row_slice(self.pos_emb, 0, t))
        decisions: list[tuple[int, RoutingDecision]] = []
        for i, block in enumerate(self.blocks):
            h, decision = block_forward(h, block, causal=True)
            if decision is not None:
                decisions.append((i, decision))
        logits = ag.matmul(h, self.lm_head)
        aux: Optional[Tensor] = None
        if self.cfg.aux_loss_coeff > 0 and decisions:
            terms = [
                aux_balance_loss(dec, self.cfg.aux_loss_coeff, self.cfg.experts)
                for _, dec in decisions
            ]
            total = terms[0]
            for term in terms[1:]:
                total = ag.add(total, term)
            aux = ag.scale(total, 1.0 / len(terms))
        return LMOutput(logits=logits, decisions=decisions, aux_loss=aux)

    # -- parameter registry ------------------------------------------------

    def params(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {
            "llm.tok_emb.weight": self.tok_emb,
            "llm.pos_emb.weight": self.pos_emb,
            "llm.lm_head.weight": self.lm_head,
        }
        for i, block in enumerate(self.blocks):
            prefix = f"llm.blocks.{i}"
            out[f"{prefix}.ln_attn.gain"] = block.ln_attn_g
            out[f"{prefix}.ln_attn.bias"] = block.ln_attn_b
            out[f"{prefix}.attn.wq"] = block.wq
            out[f"{prefix}.attn.wk"] = block.wk
            out[f"{prefix}.attn.wv"] = block.wv
            out[f"{prefix}.attn.wo"] = block.wo
            out[f"{prefix}.ln_ffn.gain"] = block.ln_ffn_g
            out[f"{prefix}.ln_ffn.bias"] = block.ln_ffn_b
            out[f"{prefix}.ln_out.gain"] = block.ln_out_g
            out[f"{prefix}.ln_out.bias"] = block.ln_out_b
            if isinstance(block.ffn, MoELayer):
                out[f"{prefix}.moe.router.weight"] = block.ffn.router_w
                for expert in block.ffn.experts:
                    out.update(expert.weights())
            else:
                out.update(block.ffn.weights())
        return out

    def adapter_params(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for block in self.blocks:
            out.update(block.attn_adapters.params())
            ffns = block.ffn.experts if isinstance(block.ffn, MoELayer) else [block.ffn]
            for expert in ffns:
                out.update(expert.adapters.params())
        return out

    def router_params(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for i, block in enumerate(self.blocks):
            if isinstance(block.ffn, MoELayer):
                out[f"llm.blocks.{i}.moe.router.weight"] = block.ffn.router_w
        return out

    # -- adaptation ----------------------------------------------------------

    def attach_ffn_lora(self, rank: int, alpha: float, seed: int) -> dict[str, Tensor]:
        """Attach adapters to every FFN matrix (dense block or expert)."""
        from .lora import attach_adapters

        out: dict[str, Tensor] = {}
        for block in self.blocks:
            ffns = block.ffn.experts if isinstance(block.ffn, MoELayer) else [block.ffn]
            for expert in ffns:
                weights = expert.weights()
                expert.adapters = attach_adapters(
                    weights, list(weights), rank, alpha, seed, existing=expert.adapters
                )
                out.update(expert.adapters.params())
        return out

    def attach_attention_lora(self, rank: int, alpha: float, seed: int) -> dict[str, Tensor]:
        """Attach adapters to the q/k/v/o projections of every block."""
        from .lora import attach_adapters

        out: dict[str, Tensor] = {}
        for block in self.blocks:
            weights = block.attn_weights()
            block.attn_adapters = attach_adapters(
                weights, list(weights), rank, alpha, seed, existing=block.attn_adapters
            )
            out.update(block.attn_adapters.params())
        return out
