"""Deterministic in-process simulation of the two parallelism axes.

Expert-level model parallelism: experts are partitioned across logical
workers and routed token chunks travel through explicit message queues.
Modality-level data parallelism: batches are sharded per worker and
gradients are reduced in ascending worker order, which pins the floating
point result independent of scheduling.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .connectors import MODALITIES
from .errors import ConfigError, ShapeError
from .model import ExpertFFN, RoutingDecision, _combine_slots

ROUND_ROBIN = "round_robin"
BY_MODALITY = "by_modality"


@dataclass
class WorkerGroup:
    """Worker count plus the expert and data sharding policies."""

    workers: int = 1
    expert_map: dict[int, int] | str = ROUND_ROBIN
    data_shard: str = ROUND_ROBIN

    def __post_init__(self):
        if self.workers < 1:
            raise ConfigError(f"worker count must be >= 1, got {self.workers}")
        if self.data_shard not in (ROUND_ROBIN, BY_MODALITY):
            raise ConfigError(f"unknown data shard policy {self.data_shard!r}")

    def resolve_expert_map(self, num_experts: int) -> dict[int, int]:
        if self.expert_map == ROUND_ROBIN:
            return {e: e % self.workers for e in range(num_experts)}
        if isinstance(self.expert_map, dict):
            missing = [e for e in range(num_experts) if e not in self.expert_map]
            if missing:
                raise ConfigError(f"expert map leaves experts {missing} unmapped")
            bad = [w for w in self.expert_map.values() if not 0 <= w < self.workers]
            if bad:
                raise ConfigError(f"expert map references invalid workers {bad}")
            return dict(self.expert_map)
        raise ConfigError(f"bad expert_map {self.expert_map!r}")


def shard_experts(experts: list[ExpertFFN], group: WorkerGroup) -> dict[int, dict[int, ExpertFFN]]:
    """Partition experts across workers; every expert lives on exactly one."""
    mapping = group.resolve_expert_map(len(experts))
    stores: dict[int, dict[int, ExpertFFN]] = {w: {} for w in range(group.workers)}
    for e, expert in enumerate(experts):
        stores[mapping[e]][e] = expert
    return stores


@dataclass
class DispatchEntry:
    slot: int
    expert: int
    worker: int
    rows: np.ndarray


@dataclass
class DispatchPlan:
    """Chunked (token, slot) -> (worker, expert) assignments plus the
    per-slot permutation that restores original token order."""

    entries: list[DispatchEntry]
    inverse: dict[int, np.ndarray]


def build_dispatch_plan(decision: RoutingDecision, group: WorkerGroup) -> DispatchPlan:
    mapping = group.resolve_expert_map(decision.num_experts)
    t = decision.num_tokens
    entries: list[DispatchEntry] = []
    inverse: dict[int, np.ndarray] = {}
    for s in range(decision.topk):
        sel = decision.indices[:, s]
        order_parts = []
        for e in range(decision.num_experts):
            rows = np.nonzero(sel == e)[0]
            if rows.size == 0:
                continue
            entries.append(DispatchEntry(slot=s, expert=e, worker=mapping[e], rows=rows))
            order_parts.append(rows)
        order = np.concatenate(order_parts)
        inv = np.empty(t, dtype=np.int64)
        inv[order] = np.arange(t)
        inverse[s] = inv
    return DispatchPlan(entries=entries, inverse=inverse)


@dataclass
class ExpertWorker:
    """A logical worker owning an expert shard and a message inbox.

    Messages ask for one owned expert's forward pass over the token
    matrix; the load counter tracks how many (token, slot) assignments the
    worker's experts received.
    """

    wid: int
    experts: dict[int, ExpertFFN]
    inbox: deque = field(default_factory=deque)
    load: int = 0

    def process(self) -> dict[int, Tensor]:
        replies: dict[int, Tensor] = {}
        while self.inbox:
            expert_id, tokens, assignments = self.inbox.popleft()
            if expert_id not in self.experts:
                raise ConfigError(f"worker {self.wid} received expert {expert_id} it does not own")
            self.load += assignments
            replies[expert_id] = self.experts[expert_id].forward(tokens)
        return replies


def dispatch_and_combine(
    tokens: Tensor,
    decision: RoutingDecision,
    group: WorkerGroup,
    experts: list[ExpertFFN],
) -> tuple[Tensor, list[int]]:
    """Route tokens to the workers owning their selected experts, combine
    the gated outputs, and return (combined, per-worker load counters).

    Work is grouped per expert exactly as in the local moe_forward path,
    so the arithmetic is identical regardless of worker count; a worker
    whose experts receive no assignments computes nothing.
    """
    from .model import expert_slot_outputs

    t = tokens.shape[0]
    if decision.num_tokens != t:
        raise ShapeError(f"decision covers {decision.num_tokens} tokens, input has {t}")
    stores = shard_experts(experts, group)
    workers = [ExpertWorker(wid=w, experts=stores[w]) for w in range(group.workers)]
    plan = build_dispatch_plan(decision, group)
    mapping = group.resolve_expert_map(decision.num_experts)
    assignments = {e: 0 for e in range(decision.num_experts)}
    for entry in plan.entries:
        assignments[entry.expert] += entry.rows.size
    for e in sorted(assignments):
        if assignments[e] > 0:
            workers[mapping[e]].inbox.append((e, tokens, assignments[e]))
    outputs: dict[int, Tensor] = {}
    for worker in workers:
        outputs.update(worker.process())
    slot_outputs = expert_slot_outputs(tokens, decision, lambda e, _x: outputs[e])
    combined = _combine_slots(slot_outputs, decision)
    return combined, [w.load for w in workers]


# ---------------------------------------------------------------------------
# modality-level data parallelism
# ---------------------------------------------------------------------------

def _dominant_modality(bundle, sample) -> str:
    counts = bundle.token_counts(sample)
    best = max(counts.values())
    for m in MODALITIES:
        if counts.get(m, 0) == best:
            return m
    raise ConfigError("sample has no tokens")


def shard_samples(bundle, samples: list, group: WorkerGroup) -> list[list[int]]:
    """Sample indices per worker. By-modality assigns each sample to the
    worker owning its dominant modality; if that leaves any worker empty,
    the whole batch falls back to round-robin."""
    if group.workers == 1:
        return [list(range(len(samples)))]
    if group.data_shard == BY_MODALITY:
        shards: list[list[int]] = [[] for _ in range(group.workers)]
        for i, sample in enumerate(samples):
            m = _dominant_modality(bundle, sample)
            shards[MODALITIES.index(m) % group.workers].append(i)
        if all(shard for shard in shards):
            return shards
    return [list(range(w, len(samples), group.workers)) for w in range(group.workers)]


def data_parallel_step(
    bundle,
    samples: list,
    group: WorkerGroup,
    trainable: dict[str, Tensor],
) -> tuple[dict[str, np.ndarray], float, float]:
    """Per-worker forward/backward on batch shards, gradients summed in
    ascending worker order, then scaled by 1/batch. Returns the gradient
    dict plus mean loss and mean aux loss over the batch."""
    shards = shard_samples(bundle, samples, group)
    partials: list[dict[str, np.ndarray]] = []
    losses: list[float] = []
    auxes: list[float] = []
    for shard in shards:
        for p in trainable.values():
            p.zero_grad()
        for i in shard:
            total, ce, aux = bundle.sample_loss(samples[i])
            total.backward()
            losses.append(ce + aux)
            auxes.append(aux)
        partials.append({n: p.grad.copy() for n, p in trainable.items() if p.grad is not None})
    for p in trainable.values():
        p.zero_grad()
    reduced: dict[str, np.ndarray] = {}
    for partial in partials:
        for name, g in partial.items():
            if name in reduced:
                reduced[name] += g
            else:
                reduced[name] = g.copy()
    inv_batch = 1.0 / len(samples)
    for name in reduced:
        reduced[name] *= np.asarray(inv_batch, dtype=reduced[name].dtype)
    return reduced, float(np.mean(losses)), float(np.mean(auxes))
