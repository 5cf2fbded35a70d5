"""Three-stage progressive training.

Stage 1 aligns connectors to the frozen LLM, stage 2 trains one LoRA
expert per modality task on the dense model and merges it, stage 3
assembles the experts into the MoE layers and tunes LoRA + router +
projections on mixed data. Each stage freezes everything outside its
trainable group; the freeze is bitwise.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from typing import Callable, Optional

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .connectors import ConnectorBank, ConnectorConfig, ModalitySequence, assemble_input, embed_text
from .errors import ConfigError, NumericError
from .lora import merge_adapter
from .model import LMOutput, ModelConfig, MoELayer, UniMoeModel
from .optim import AdamW, ParamGroup
from .synthdata import Sample, SyntheticTask, generate_synthetic_batch

log = logging.getLogger("unimoe")

STAGE_LRS = {1: 2e-5, 2: 4e-5, 3: 4e-5}


@dataclass
class StageSettings:
    """Trainable-group selection and optimizer settings for one stage."""

    stage: int
    steps: int = 200
    batch: int = 8
    lr: float = 0.0
    lora_rank: int = 0
    lora_alpha: float = 16.0
    train_qformer: bool = False
    lora_attention: bool = True

    def __post_init__(self):
        if self.stage not in (1, 2, 3):
            raise ConfigError(f"unknown training stage {self.stage}")
        if self.lr <= 0:
            self.lr = STAGE_LRS[self.stage]


@dataclass
class StepRecord:
    stage: int
    step: int
    loss: float
    aux_loss: float
    lr: float

    def to_json(self) -> dict:
        return {"stage": self.stage, "step": self.step, "loss": self.loss,
                "aux_loss": self.aux_loss, "lr": self.lr}


@dataclass
class Bundle:
    """Connectors plus the LLM stack, with a unified parameter registry."""

    connectors: ConnectorBank
    llm: UniMoeModel

    def all_params(self) -> dict[str, Tensor]:
        out = self.connectors.params()
        out.update(self.llm.params())
        out.update(self.llm.adapter_params())
        return out

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.all_params().items()}

    def load_state(self, arrays: dict[str, np.ndarray]) -> None:
        params = self.all_params()
        for name, value in arrays.items():
            if name not in params:
                raise ConfigError(f"checkpoint key {name!r} has no matching parameter")
            p = params[name]
            if tuple(p.shape) != tuple(value.shape):
                raise ConfigError(
                    f"shape mismatch for {name!r}: checkpoint {value.shape}, model {p.shape}"
                )
            p.data[...] = value.astype(p.data.dtype)

    # -- sample plumbing -----------------------------------------------------

    def sequences_for(self, sample: Sample) -> list[ModalitySequence]:
        dtype = self.llm.dtype
        seqs: list[ModalitySequence] = []
        for seg in sample.segments:
            feats = seg.features().astype(dtype)
            if seg.modality == "video":
                raw = [Tensor(np.ascontiguousarray(f)) for f in feats]
            else:
                raw = Tensor(feats)
            seqs.append(self.connectors.encode(seg.modality, raw))
        text_ids = np.concatenate([sample.prompt_ids, sample.answer_ids])
        seqs.append(embed_text(text_ids, self.llm.tok_emb))
        return seqs

    def forward_sample(self, sample: Sample) -> tuple[LMOutput, list[str], np.ndarray, np.ndarray]:
        """Returns (output, labels, targets, ignore_mask) for one sample."""
        embeds, labels = assemble_input(self.sequences_for(sample))
        out = self.llm.forward(embeds)
        t = embeds.shape[0]
        n_ans = len(sample.answer_ids)
        targets = np.zeros(t, dtype=np.int64)
        ignore = np.ones(t, dtype=bool)
        # answer token j sits at position t - n_ans + j and is predicted
        # from the previous position
        for j, tok in enumerate(sample.answer_ids):
            pos = t - n_ans + j - 1
            targets[pos] = tok
            ignore[pos] = False
        return out, labels, targets, ignore

    def sample_loss(self, sample: Sample) -> tuple[Tensor, float, float]:
        out, _, targets, ignore = self.forward_sample(sample)
        ce = ag.cross_entropy(out.logits, targets, ignore)
        if out.aux_loss is not None:
            total = ag.add(ce, out.aux_loss)
            return total, float(ce.data), float(out.aux_loss.data)
        return ce, float(ce.data), 0.0

    def token_counts(self, sample: Sample) -> dict[str, int]:
        """Token count per modality without running the connectors."""
        conn = self.connectors.cfg
        counts: dict[str, int] = {}
        for seg in sample.segments:
            n = conn.image_patches if seg.modality in ("image", "video") else conn.num_queries
            counts[seg.modality] = counts.get(seg.modality, 0) + n
        counts["text"] = counts.get("text", 0) + len(sample.prompt_ids) + len(sample.answer_ids)
        return counts


def build_bundle(model_cfg: ModelConfig, conn_cfg: ConnectorConfig, seed: int, dtype=np.float32) -> Bundle:
    if conn_cfg.d_model != model_cfg.width:
        raise ConfigError(
            f"connector width {conn_cfg.d_model} does not match model width {model_cfg.width}"
        )
    return Bundle(
        connectors=ConnectorBank(conn_cfg, seed=seed, dtype=dtype),
        llm=UniMoeModel(model_cfg, seed=seed, dtype=dtype),
    )


def dense_config(cfg: ModelConfig) -> ModelConfig:
    """Stage-1/2 architecture: the same stack with plain FFN layers."""
    return replace(cfg, experts=1, topk=1, moe_layout="none")


# ---------------------------------------------------------------------------
# freeze masks
# ---------------------------------------------------------------------------

def freeze_all(bundle: Bundle) -> None:
    for p in bundle.all_params().values():
        p.requires_grad = False


def stage_trainable_groups(bundle: Bundle, settings: StageSettings, modalities: tuple[str, ...] = ()) -> dict[str, dict[str, Tensor]]:
    """Named trainable parameter sets for a stage, per the freeze contract.

    Stage 1: q-formers and every projection layer. Stage 2: FFN LoRA plus
    the task modalities' projections (q-formers only when asked). Stage 3:
    LoRA, routers, and every projection layer.
    """
    groups: dict[str, dict[str, Tensor]] = {}
    if settings.stage == 1:
        groups["projections"] = bundle.connectors.projection_params()
        groups["qformers"] = bundle.connectors.qformer_params()
    elif settings.stage == 2:
        proj: dict[str, Tensor] = {}
        qf: dict[str, Tensor] = {}
        for m in modalities:
            proj.update(bundle.connectors.projection_params(m))
            if settings.train_qformer and m in ("audio", "speech"):
                qf.update(bundle.connectors.qformer_params(m))
        groups["projections"] = proj
        if qf:
            groups["qformers"] = qf
        groups["lora"] = bundle.llm.adapter_params()
    else:
        groups["projections"] = bundle.connectors.projection_params()
        groups["lora"] = bundle.llm.adapter_params()
        groups["router"] = bundle.llm.router_params()
    return {name: params for name, params in groups.items() if params}


def apply_stage_mask(bundle: Bundle, groups: dict[str, dict[str, Tensor]]) -> None:
    freeze_all(bundle)
    for params in groups.values():
        for p in params.values():
            p.requires_grad = True


# ---------------------------------------------------------------------------
# the optimization loop
# ---------------------------------------------------------------------------

def _mix_seed(run_seed: int, step: int) -> int:
    return (run_seed + 1) * 1_000_003 + step


def train_steps(
    bundle: Bundle,
    task: SyntheticTask,
    settings: StageSettings,
    groups: dict[str, dict[str, Tensor]],
    run_seed: int,
    step_callback: Optional[Callable[[StepRecord], None]] = None,
    group: "WorkerGroup | None" = None,
) -> list[StepRecord]:
    """Run the AdamW loop for one stage task; returns per-step records."""
    from .parallel import WorkerGroup, data_parallel_step

    if group is None:
        group = WorkerGroup(workers=1)
    opt = AdamW(
        groups=[ParamGroup(params=params, lr=settings.lr) for params in groups.values()],
        horizon=max(settings.steps, 1),
    )
    trainable = {name: p for params in groups.values() for name, p in params.items()}
    records: list[StepRecord] = []
    for step in range(settings.steps):
        samples = generate_synthetic_batch(task, settings.batch, _mix_seed(run_seed, step))
        grads, mean_loss, mean_aux = data_parallel_step(bundle, samples, group, trainable)
        if not math.isfinite(mean_loss):
            raise NumericError(
                f"stage {settings.stage} step {step}: non-finite loss {mean_loss}"
            )
        for name, p in trainable.items():
            g = grads.get(name)
            p.grad = None if g is None else g
        opt_lr = opt.current_lr(settings.lr)
        opt.step()
        record = StepRecord(stage=settings.stage, step=step, loss=mean_loss, aux_loss=mean_aux, lr=opt_lr)
        records.append(record)
        if step_callback is not None:
            step_callback(record)
        if step % 50 == 0 or step == settings.steps - 1:
            log.debug("stage %d step %d loss %.4f", settings.stage, step, mean_loss)
    return records


# ---------------------------------------------------------------------------
# stages
# ---------------------------------------------------------------------------

def stage1_align(
    bundle: Bundle,
    tasks: list[SyntheticTask],
    settings: StageSettings,
    run_seed: int,
    step_callback=None,
    group=None,
) -> list[StepRecord]:
    """Train only the connectors against the frozen LLM."""
    groups = stage_trainable_groups(bundle, settings)
    apply_stage_mask(bundle, groups)
    records: list[StepRecord] = []
    for i, task in enumerate(tasks):
        log.info("stage 1: aligning task %s (%d steps)", task.name, settings.steps)
        records.extend(
            train_steps(bundle, task, settings, groups, _mix_seed(run_seed, 7919 * (i + 1)),
                        step_callback=step_callback, group=group)
        )
    return records


@dataclass
class ExpertSource:
    """Where a stage-3 expert slot came from."""

    kind: str  # stage2 | base | random
    task: str = ""

    def tag(self) -> str:
        return f"stage2:{self.task}" if self.kind == "stage2" else self.kind


@dataclass
class Stage2Result:
    task_name: str
    state: dict[str, np.ndarray]
    records: list[StepRecord] = field(repr=False, default_factory=list)


def stage2_experts(
    bundle: Bundle,
    tasks: dict[str, SyntheticTask],
    settings: StageSettings,
    run_seed: int,
    step_callback=None,
    group=None,
) -> dict[str, Stage2Result]:
    """Train one LoRA-specialized FFN per task on the dense model.

    Each task starts from the same incoming (stage-1) state; its adapters
    are merged into the FFN weights before saving, so the result state is
    adapter-free. The bundle is restored to the incoming state afterwards.
    """
    if any(isinstance(b.ffn, MoELayer) for b in bundle.llm.blocks):
        raise ConfigError("stage 2 runs on the dense model, got MoE layers")
    base_state = bundle.state_arrays()
    results: dict[str, Stage2Result] = {}
    for i, (name, task) in enumerate(sorted(tasks.items())):
        bundle.load_state(base_state)
        _clear_adapters(bundle.llm)
        bundle.llm.attach_ffn_lora(settings.lora_rank, settings.lora_alpha, _mix_seed(run_seed, 31 * (i + 1)))
        modalities = tuple(sorted({m for mix in task.mixes for m in mix}))
        groups = stage_trainable_groups(bundle, settings, modalities)
        apply_stage_mask(bundle, groups)
        log.info("stage 2: expert task %s on %s (%d steps)", name, modalities, settings.steps)
        records = train_steps(bundle, task, settings, groups, _mix_seed(run_seed, 101 * (i + 1)),
                              step_callback=step_callback, group=group)
        _merge_all_ffn_adapters(bundle.llm)
        results[name] = Stage2Result(task_name=name, state=bundle.state_arrays(), records=records)
    bundle.load_state(base_state)
    _clear_adapters(bundle.llm)
    return results


def _clear_adapters(llm: UniMoeModel) -> None:
    from .lora import AdapterSet

    for block in llm.blocks:
        block.attn_adapters = AdapterSet()
        ffns = block.ffn.experts if isinstance(block.ffn, MoELayer) else [block.ffn]
        for expert in ffns:
            expert.adapters = AdapterSet()


def _merge_all_ffn_adapters(llm: UniMoeModel) -> None:
    for block in llm.blocks:
        ffns = block.ffn.experts if isinstance(block.ffn, MoELayer) else [block.ffn]
        for expert in ffns:
            for weight_name, w in expert.weights().items():
                ad = expert.adapters.get(weight_name)
                if ad is not None:
                    w.data[...] = merge_adapter(w.data, ad)
    _clear_adapters(llm)


def build_moe_bundle(
    model_cfg: ModelConfig,
    conn_cfg: ConnectorConfig,
    seed: int,
    base_state: dict[str, np.ndarray],
    sources: list[ExpertSource],
    stage2: dict[str, Stage2Result],
    dtype=np.float32,
) -> tuple[Bundle, dict[str, str]]:
    """Assemble the stage-3 model: base weights from the dense state,
    expert slots filled per source, fresh routers. Returns the bundle and
    the expert provenance map."""
    if len(sources) != model_cfg.experts:
        raise ConfigError(
            f"{len(sources)} expert sources for {model_cfg.experts} expert slots"
        )
    moe = build_bundle(model_cfg, conn_cfg, seed, dtype=dtype)
    provenance: dict[str, str] = {}
    dense_names = {}
    for i, is_moe in enumerate(moe.llm.layout):
        dense_names[i] = f"llm.blocks.{i}.ffn"
    # copy every base parameter that exists under the same name
    params = moe.all_params()
    for name, value in base_state.items():
        if name in params and tuple(params[name].shape) == tuple(value.shape):
            params[name].data[...] = value.astype(params[name].data.dtype)
    # fill expert slots
    for i, block in enumerate(moe.llm.blocks):
        if not isinstance(block.ffn, MoELayer):
            for suffix in ("w_gate", "w_up", "w_down"):
                key = f"llm.blocks.{i}.ffn.{suffix}"
                params[key].data[...] = base_state[key].astype(moe.llm.dtype)
            continue
        for j, (expert, source) in enumerate(zip(block.ffn.experts, sources)):
            provenance[f"llm.blocks.{i}.moe.experts.{j}"] = source.tag()
            if source.kind == "random":
                continue  # keep the fresh random init
            if source.kind == "base":
                state = base_state
            else:
                if source.task not in stage2:
                    raise ConfigError(f"expert source references unknown stage-2 task {source.task!r}")
                state = stage2[source.task].state
            for suffix, w in zip(("w_gate", "w_up", "w_down"), (expert.w_gate, expert.w_up, expert.w_down)):
                w.data[...] = state[f"llm.blocks.{i}.ffn.{suffix}"].astype(moe.llm.dtype)
    return moe, provenance


def stage3_moe(
    bundle: Bundle,
    task: SyntheticTask,
    settings: StageSettings,
    run_seed: int,
    step_callback=None,
    group=None,
) -> list[StepRecord]:
    """Tune LoRA + router + projections on mixed data; expert bases frozen."""
    if not any(isinstance(b.ffn, MoELayer) for b in bundle.llm.blocks):
        raise ConfigError("stage 3 needs MoE layers in the model")
    bundle.llm.attach_ffn_lora(settings.lora_rank, settings.lora_alpha, _mix_seed(run_seed, 13))
    if settings.lora_attention:
        bundle.llm.attach_attention_lora(settings.lora_rank, settings.lora_alpha, _mix_seed(run_seed, 17))
    groups = stage_trainable_groups(bundle, settings)
    apply_stage_mask(bundle, groups)
    log.info("stage 3: tuning MoE on task %s (%d steps)", task.name, settings.steps)
    return train_steps(bundle, task, settings, groups, _mix_seed(run_seed, 3), step_callback=step_callback, group=group)


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------

def greedy_decode(bundle: Bundle, sample: Sample) -> np.ndarray:
    """Autoregressive argmax decode of the answer tokens."""
    seqs = bundle.sequences_for(sample)
    prompt_only = replace_answer(seqs, bundle, sample, np.empty(0, dtype=np.int64))
    predicted: list[int] = []
    for _ in range(len(sample.answer_ids)):
        embeds, _ = assemble_input(prompt_only)
        out = bundle.llm.forward(embeds)
        next_id = int(np.argmax(out.logits.data[-1]))
        predicted.append(next_id)
        prompt_only = replace_answer(seqs, bundle, sample, np.asarray(predicted, dtype=np.int64))
    return np.asarray(predicted, dtype=np.int64)


def replace_answer(seqs: list[ModalitySequence], bundle: Bundle, sample: Sample, answer: np.ndarray) -> list[ModalitySequence]:
    text_ids = np.concatenate([sample.prompt_ids, answer])
    return seqs[:-1] + [embed_text(text_ids, bundle.llm.tok_emb)]


def evaluate(bundle: Bundle, task: SyntheticTask) -> dict[str, float]:
    """Mean cross-entropy and greedy exact-match over the eval split."""
    ces: list[float] = []
    hits = 0
    n = 0
    for idx in task.eval_indices():
        sample = task.sample(idx)
        out, _, targets, ignore = bundle.forward_sample(sample)
        ce = ag.cross_entropy(out.logits, targets, ignore)
        ces.append(float(ce.data))
        pred = greedy_decode(bundle, sample)
        hits += int(np.array_equal(pred, sample.answer_ids))
        n += 1
    return {"ce": float(np.mean(ces)), "em": hits / n}
