import numpy as np
import pytest

from unimoe import autograd as ag
from unimoe.connectors import ConnectorConfig
from unimoe.errors import ConfigError
from unimoe.model import ExpertFFN, ModelConfig, init_weight, moe_forward, route
from unimoe.parallel import (
    WorkerGroup,
    build_dispatch_plan,
    data_parallel_step,
    dispatch_and_combine,
    shard_experts,
    shard_samples,
)
from unimoe.synthdata import SyntheticTask
from unimoe.training import StageSettings, apply_stage_mask, build_bundle, stage_trainable_groups


def make_experts(m, d=16, f=24, dtype=np.float32, seed=5):
    return [
        ExpertFFN(
            w_gate=init_weight(seed, f"e{j}.w_gate", (d, f), dtype),
            w_up=init_weight(seed, f"e{j}.w_up", (d, f), dtype),
            w_down=init_weight(seed, f"e{j}.w_down", (f, d), dtype),
        )
        for j in range(m)
    ]


def routed(t=12, m=4, k=2, d=16, seed=6, dtype=np.float32):
    rng = np.random.default_rng(seed)
    tokens = ag.Tensor(rng.standard_normal((t, d)).astype(dtype))
    router = ag.parameter(rng.standard_normal((d, m)).astype(dtype) * 0.5)
    return tokens, route(tokens, router, k)


# ---------------------------------------------------------------------------
# expert sharding
# ---------------------------------------------------------------------------

def test_shard_single_worker_holds_everything():
    experts = make_experts(4)
    stores = shard_experts(experts, WorkerGroup(workers=1))
    assert set(stores[0]) == {0, 1, 2, 3}


def test_shard_round_robin_two_workers():
    experts = make_experts(4)
    stores = shard_experts(experts, WorkerGroup(workers=2))
    assert set(stores[0]) == {0, 2}
    assert set(stores[1]) == {1, 3}


def test_shard_explicit_map_round_trips_bitwise():
    experts = make_experts(4)
    group = WorkerGroup(workers=3, expert_map={0: 2, 1: 0, 2: 2, 3: 1})
    stores = shard_experts(experts, group)
    rebuilt = {}
    for store in stores.values():
        rebuilt.update(store)
    assert set(rebuilt) == set(range(4))
    for e in range(4):
        assert rebuilt[e] is experts[e]
        assert np.array_equal(rebuilt[e].w_gate.data, experts[e].w_gate.data)


def test_shard_unmapped_expert_rejected():
    with pytest.raises(ConfigError, match="unmapped"):
        shard_experts(make_experts(3), WorkerGroup(workers=2, expert_map={0: 0, 1: 1}))


def test_dispatch_plan_inverse_is_identity_permutation():
    tokens, decision = routed()
    plan = build_dispatch_plan(decision, WorkerGroup(workers=2))
    for s, inv in plan.inverse.items():
        order_parts = [e.rows for e in plan.entries if e.slot == s]
        order = np.concatenate(order_parts)
        assert np.array_equal(order[inv], np.arange(tokens.shape[0]))


# ---------------------------------------------------------------------------
# dispatch and combine
# ---------------------------------------------------------------------------

def test_one_worker_byte_identical_to_moe_forward():
    tokens, decision = routed()
    experts = make_experts(4)
    local = moe_forward(tokens, experts, decision)
    combined, loads = dispatch_and_combine(tokens, decision, WorkerGroup(workers=1), experts)
    assert np.array_equal(local.data, combined.data)
    assert loads == [tokens.shape[0] * decision.topk]


@pytest.mark.parametrize("workers", [2, 4])
def test_multi_worker_matches_single_worker(workers):
    tokens, decision = routed()
    experts = make_experts(4)
    local = moe_forward(tokens, experts, decision)
    combined, loads = dispatch_and_combine(tokens, decision, WorkerGroup(workers=workers), experts)
    assert np.max(np.abs(local.data - combined.data)) <= 1e-6
    assert sum(loads) == tokens.shape[0] * decision.topk


def test_all_tokens_on_one_workers_experts_leaves_other_idle():
    tokens, _ = routed(m=4)
    experts = make_experts(4)
    # force every selection onto experts 0 and 2 (both owned by worker 0
    # under round robin with 2 workers)
    t = tokens.shape[0]
    probs = np.tile([0.5, 0.0, 0.5, 0.0], (t, 1)).astype(np.float32)
    from unimoe.model import RoutingDecision

    decision = RoutingDecision(
        probs=ag.Tensor(probs),
        indices=np.tile([0, 2], (t, 1)),
        gates=np.tile([0.5, 0.5], (t, 1)).astype(np.float32),
    )
    combined, loads = dispatch_and_combine(tokens, decision, WorkerGroup(workers=2), experts)
    assert loads[0] == t * 2
    assert loads[1] == 0


def test_dispatch_backward_matches_local_backward():
    dtype = np.float64
    rng = np.random.default_rng(7)
    d, m, k, t = 16, 4, 2, 10
    tokens_data = rng.standard_normal((t, d))
    router_data = rng.standard_normal((d, m)) * 0.5
    weight = rng.standard_normal((t, d))

    def run(workers):
        experts = make_experts(m, dtype=dtype, seed=9)
        tokens = ag.parameter(tokens_data.copy())
        router = ag.parameter(router_data.copy())
        decision = route(tokens, router, k)
        if workers == 0:
            out = moe_forward(tokens, experts, decision)
        else:
            out, _ = dispatch_and_combine(tokens, decision, WorkerGroup(workers=workers), experts)
        loss = ag.sum_all(ag.mul(out, ag.Tensor(weight)))
        loss.backward()
        grads = {"tokens": tokens.grad.copy(), "router": router.grad.copy()}
        for j, e in enumerate(experts):
            if e.w_gate.grad is not None:
                grads[f"e{j}"] = e.w_gate.grad.copy()
        return grads

    local = run(0)
    for workers in (1, 2, 4):
        sharded = run(workers)
        assert set(sharded) == set(local)
        for key in local:
            assert np.max(np.abs(sharded[key] - local[key])) <= 1e-12, key


# ---------------------------------------------------------------------------
# data parallelism
# ---------------------------------------------------------------------------

MODEL = ModelConfig(layers=2, width=32, ffn=48, heads=4, vocab=256,
                    experts=2, topk=2, moe_layout="interval", max_seq=64)
CONN = ConnectorConfig(d_model=32, num_queries=4, image_enc_dim=16, audio_enc_dim=16, speech_enc_dim=16)


def mixed_task():
    return SyntheticTask(name="mix", mixes=[("image",), ("audio",), ("speech",)],
                         conn=CONN, n_samples=24, n_eval=4, seed=12)


@pytest.fixture
def bundle():
    b = build_bundle(MODEL, CONN, seed=0)
    groups = stage_trainable_groups(b, StageSettings(stage=1))
    apply_stage_mask(b, groups)
    return b


def trainables(bundle):
    groups = stage_trainable_groups(bundle, StageSettings(stage=1))
    return {n: p for params in groups.values() for n, p in params.items()}


def test_data_parallel_one_worker_equals_plain_batch(bundle):
    task = mixed_task()
    samples = [task.sample(i) for i in range(6)]
    params = trainables(bundle)
    grads1, loss1, _ = data_parallel_step(bundle, samples, WorkerGroup(workers=1), params)

    # plain batched step: per-sample backward in order, then scale
    for p in params.values():
        p.zero_grad()
    losses = []
    for s in samples:
        total, ce, aux = bundle.sample_loss(s)
        total.backward()
        losses.append(ce + aux)
    expected = {n: p.grad * np.float32(1.0 / len(samples)) for n, p in params.items() if p.grad is not None}
    for p in params.values():
        p.zero_grad()

    assert set(grads1) == set(expected)
    for name in expected:
        assert np.array_equal(grads1[name], expected[name]), name
    assert loss1 == pytest.approx(np.mean(losses))


@pytest.mark.parametrize("workers,policy", [(2, "round_robin"), (2, "by_modality"), (4, "round_robin")])
def test_data_parallel_multi_worker_close_to_single(bundle, workers, policy):
    task = mixed_task()
    samples = [task.sample(i) for i in range(8)]
    params = trainables(bundle)
    grads1, _, _ = data_parallel_step(bundle, samples, WorkerGroup(workers=1), params)
    gradsN, _, _ = data_parallel_step(
        bundle, samples, WorkerGroup(workers=workers, data_shard=policy), params
    )
    assert set(grads1) == set(gradsN)
    for name in grads1:
        denom = max(np.abs(grads1[name]).max(), 1e-8)
        assert np.max(np.abs(grads1[name] - gradsN[name])) / denom <= 1e-4, name


def test_data_parallel_bitwise_deterministic(bundle):
    task = mixed_task()
    samples = [task.sample(i) for i in range(8)]
    params = trainables(bundle)
    group = WorkerGroup(workers=2, data_shard="by_modality")
    grads_a, loss_a, _ = data_parallel_step(bundle, samples, group, params)
    grads_b, loss_b, _ = data_parallel_step(bundle, samples, group, params)
    assert loss_a == loss_b
    for name in grads_a:
        assert np.array_equal(grads_a[name], grads_b[name])


def test_by_modality_shards_are_pure(bundle):
    task = SyntheticTask(name="two", mixes=[("image",), ("audio",)], conn=CONN,
                         n_samples=16, n_eval=4, seed=13)
    samples = [task.sample(i) for i in range(8)]
    shards = shard_samples(bundle, samples, WorkerGroup(workers=2, data_shard="by_modality"))
    for shard in shards:
        mods = {samples[i].segments[0].modality for i in shard}
        assert len(mods) == 1


def test_by_modality_missing_modality_falls_back_round_robin(bundle):
    task = SyntheticTask(name="solo", mixes=[("image",)], conn=CONN, n_samples=8, n_eval=2, seed=14)
    samples = [task.sample(i) for i in range(6)]
    shards = shard_samples(bundle, samples, WorkerGroup(workers=2, data_shard="by_modality"))
    # all samples are image-dominant; by-modality would starve a worker
    assert shards == [[0, 2, 4], [1, 3, 5]]


def test_shard_union_is_full_batch_disjoint(bundle):
    task = mixed_task()
    samples = [task.sample(i) for i in range(10)]
    shards = shard_samples(bundle, samples, WorkerGroup(workers=3, data_shard="by_modality"))
    flat = sorted(i for shard in shards for i in shard)
    assert flat == list(range(10))


def test_worker_group_validation():
    with pytest.raises(ConfigError):
        WorkerGroup(workers=0)
    with pytest.raises(ConfigError):
        WorkerGroup(workers=2, data_shard="by_color")
    with pytest.raises(ConfigError):
        WorkerGroup(workers=2, expert_map={0: 5}).resolve_expert_map(1)
