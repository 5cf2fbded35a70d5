"""Run configuration files.

INI-style text with sections [model], [task.<name>], [stage1],
[stage2.<task>], [stage3], [parallel], [analytics]. Flags on the CLI only
select stage, paths, and seed; every hyperparameter lives here so a run
manifest plus config reproduces the run.
"""

from __future__ import annotations

import configparser
import hashlib
from dataclasses import dataclass
from pathlib import Path

from .connectors import ConnectorConfig
from .errors import ConfigError
from .lora import LORA_ALPHA, STAGE2_RANK, STAGE3_RANK
from .model import ModelConfig
from .parallel import WorkerGroup
from .synthdata import SyntheticTask
from .training import StageSettings

_MODEL_KEYS = {
    "layers": int, "width": int, "ffn": int, "ffn_factor": int, "heads": int,
    "vocab": int, "experts": int, "topk": int, "moe_layout": str,
    "aux_loss_coeff": float, "max_seq": int,
}
_CONN_KEYS = {
    "num_queries": int, "qformer_heads": int,
    "image_raw_dim": int, "image_enc_dim": int, "image_patches": int,
    "audio_raw_dim": int, "audio_enc_dim": int,
    "speech_raw_dim": int, "speech_enc_dim": int,
}


@dataclass
class TaskSpec:
    name: str
    mixes: list[tuple[str, ...]]
    n_classes: int = 4
    answer_len: int = 3
    n_samples: int = 64
    n_eval: int = 16
    seed: int = 0


@dataclass
class Stage2TaskConfig:
    name: str
    task: str
    settings: StageSettings


@dataclass
class RunConfig:
    model: ModelConfig
    connectors: ConnectorConfig
    tasks: dict[str, TaskSpec]
    stage1_tasks: list[str]
    stage1: StageSettings
    stage2: dict[str, Stage2TaskConfig]
    stage3_task: str
    stage3_experts: list[str]
    stage3: StageSettings
    parallel: WorkerGroup
    analytics_samples: int = 200
    analytics_pathways: int = 10
    config_hash: str = ""

    def build_task(self, name: str) -> SyntheticTask:
        if name not in self.tasks:
            raise ConfigError(f"unknown task {name!r}; configured tasks: {sorted(self.tasks)}")
        spec = self.tasks[name]
        return SyntheticTask(
            name=spec.name,
            mixes=spec.mixes,
            conn=self.connectors,
            vocab=self.model.vocab,
            n_classes=spec.n_classes,
            answer_len=spec.answer_len,
            n_samples=spec.n_samples,
            n_eval=spec.n_eval,
            seed=spec.seed,
        )


def _get(section: configparser.SectionProxy, key: str, cast, default=None, where: str = ""):
    if key not in section:
        if default is not None:
            return default
        raise ConfigError(f"missing key {key!r} in section [{where}]")
    raw = section[key].strip()
    try:
        if cast is bool:
            if raw.lower() in ("true", "1", "yes", "on"):
                return True
            if raw.lower() in ("false", "0", "no", "off"):
                return False
            raise ValueError(raw)
        return cast(raw)
    except ValueError as exc:
        raise ConfigError(f"bad value for {key!r} in section [{where}]: {raw!r}") from exc


def _parse_mixes(raw: str, where: str) -> list[tuple[str, ...]]:
    mixes = []
    for part in raw.split(","):
        part = part.strip()
        if not part:
            continue
        mixes.append(tuple(m.strip() for m in part.split("+")))
    if not mixes:
        raise ConfigError(f"empty mixes in section [{where}]")
    return mixes


def _parse_stage_settings(section, stage: int, where: str) -> StageSettings:
    return StageSettings(
        stage=stage,
        steps=_get(section, "steps", int, where=where),
        batch=_get(section, "batch", int, default=8, where=where),
        lr=_get(section, "lr", float, default=0.0, where=where),
        lora_rank=_get(section, "lora_rank", int,
                       default=STAGE2_RANK if stage == 2 else STAGE3_RANK, where=where),
        lora_alpha=_get(section, "lora_alpha", float, default=LORA_ALPHA, where=where),
        train_qformer=_get(section, "train_qformer", bool, default=False, where=where),
        lora_attention=_get(section, "lora_attention", bool, default=True, where=where),
    )


def _parse_expert_map(raw: str) -> dict[int, int] | str:
    raw = raw.strip()
    if raw == "round_robin":
        return raw
    mapping: dict[int, int] = {}
    for pair in raw.split(","):
        try:
            e, w = pair.split(":")
            mapping[int(e)] = int(w)
        except ValueError as exc:
            raise ConfigError(f"bad expert_map entry {pair!r}") from exc
    return mapping


def load_run_config(path: str | Path) -> RunConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    text = path.read_text()
    parser = configparser.ConfigParser(interpolation=None)
    try:
        parser.read_string(text, source=str(path))
    except configparser.Error as exc:
        raise ConfigError(f"config parse error: {exc}") from exc

    if "model" not in parser:
        raise ConfigError("config is missing the [model] section")
    msec = parser["model"]
    model_kwargs = {k: _get(msec, k, cast, where="model") for k, cast in _MODEL_KEYS.items() if k in msec}
    model = ModelConfig(**model_kwargs)
    conn_kwargs = {k: _get(msec, k, cast, where="model") for k, cast in _CONN_KEYS.items() if k in msec}
    connectors = ConnectorConfig(d_model=model.width, **conn_kwargs)

    tasks: dict[str, TaskSpec] = {}
    stage2: dict[str, Stage2TaskConfig] = {}
    for section_name in parser.sections():
        if section_name.startswith("task."):
            name = section_name[len("task."):]
            sec = parser[section_name]
            tasks[name] = TaskSpec(
                name=name,
                mixes=_parse_mixes(_get(sec, "mixes", str, where=section_name), section_name),
                n_classes=_get(sec, "classes", int, default=4, where=section_name),
                answer_len=_get(sec, "answer_len", int, default=3, where=section_name),
                n_samples=_get(sec, "samples", int, default=64, where=section_name),
                n_eval=_get(sec, "eval_samples", int, default=16, where=section_name),
                seed=_get(sec, "seed", int, default=0, where=section_name),
            )
        elif section_name.startswith("stage2."):
            name = section_name[len("stage2."):]
            sec = parser[section_name]
            stage2[name] = Stage2TaskConfig(
                name=name,
                task=_get(sec, "task", str, where=section_name),
                settings=_parse_stage_settings(sec, 2, section_name),
            )

    for required in ("stage1", "stage3"):
        if required not in parser:
            raise ConfigError(f"config is missing the [{required}] section")
    s1 = parser["stage1"]
    stage1_tasks = [t.strip() for t in _get(s1, "tasks", str, where="stage1").split(",") if t.strip()]
    stage1 = _parse_stage_settings(s1, 1, "stage1")
    s3 = parser["stage3"]
    stage3_task = _get(s3, "task", str, where="stage3")
    stage3_experts = [e.strip() for e in _get(s3, "experts", str, where="stage3").split(",") if e.strip()]
    stage3 = _parse_stage_settings(s3, 3, "stage3")

    if "parallel" in parser:
        psec = parser["parallel"]
        parallel = WorkerGroup(
            workers=_get(psec, "workers", int, default=1, where="parallel"),
            expert_map=_parse_expert_map(_get(psec, "expert_map", str, default="round_robin", where="parallel")),
            data_shard=_get(psec, "data_shard", str, default="round_robin", where="parallel"),
        )
    else:
        parallel = WorkerGroup(workers=1)

    analytics_samples = 200
    analytics_pathways = 10
    if "analytics" in parser:
        asec = parser["analytics"]
        analytics_samples = _get(asec, "samples", int, default=200, where="analytics")
        analytics_pathways = _get(asec, "top_pathways", int, default=10, where="analytics")

    for name, cfg2 in stage2.items():
        if cfg2.task not in tasks:
            raise ConfigError(f"[stage2.{name}] references unknown task {cfg2.task!r}")
    for t in stage1_tasks:
        if t not in tasks:
            raise ConfigError(f"[stage1] references unknown task {t!r}")
    if stage3_task not in tasks:
        raise ConfigError(f"[stage3] references unknown task {stage3_task!r}")
    if len(stage3_experts) != model.experts:
        raise ConfigError(
            f"[stage3] lists {len(stage3_experts)} experts but the model has {model.experts}"
        )

    return RunConfig(
        model=model,
        connectors=connectors,
        tasks=tasks,
        stage1_tasks=stage1_tasks,
        stage1=stage1,
        stage2=stage2,
        stage3_task=stage3_task,
        stage3_experts=stage3_experts,
        stage3=stage3,
        parallel=parallel,
        analytics_samples=analytics_samples,
        analytics_pathways=analytics_pathways,
        config_hash=hashlib.sha256(text.encode("utf-8")).hexdigest(),
    )


# ---------------------------------------------------------------------------
# architecture table configs (count-params)
# ---------------------------------------------------------------------------

@dataclass
class ArchRow:
    name: str
    base_params: int
    cfg: ModelConfig
    dense: bool = False


def load_arch_table(path: str | Path) -> list[ArchRow]:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    parser = configparser.ConfigParser(interpolation=None)
    try:
        parser.read_string(path.read_text(), source=str(path))
    except configparser.Error as exc:
        raise ConfigError(f"config parse error: {exc}") from exc
    rows: list[ArchRow] = []
    for section_name in parser.sections():
        if not section_name.startswith("arch."):
            continue
        sec = parser[section_name]
        where = section_name
        experts = _get(sec, "experts", int, default=1, where=where)
        cfg = ModelConfig(
            layers=_get(sec, "layers", int, where=where),
            width=_get(sec, "width", int, where=where),
            ffn=_get(sec, "ffn", int, where=where),
            ffn_factor=_get(sec, "ffn_factor", int, where=where),
            heads=_get(sec, "heads", int, default=32, where=where),
            vocab=_get(sec, "vocab", int, default=32000, where=where),
            experts=experts,
            topk=_get(sec, "topk", int, default=1, where=where),
            moe_layout=_get(sec, "layout", str, default="none", where=where),
            max_seq=8,
        )
        rows.append(
            ArchRow(
                name=_get(sec, "name", str, where=where),
                base_params=_get(sec, "base_params", int, where=where),
                cfg=cfg,
                dense=experts <= 1,
            )
        )
    if not rows:
        raise ConfigError(f"no [arch.*] sections in {path}")
    return rows
