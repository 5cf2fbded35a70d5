"""Command-line entry point.

Subcommands: count-params, train, eval, analyze. Flags only select the
stage, paths, and seed; hyperparameters live in the config file so a
manifest plus config reproduces any run. Exit codes: 0 success, 1
user/config error, 2 numeric failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
from pathlib import Path

from . import __version__
from .analytics import (
    AnalyticsBundle,
    build_pathway_matrix,
    collect_routing_log,
    expert_load_distribution,
    modality_preference,
    top_pathways,
    export_analytics,
)
from .checkpoint import load_checkpoint, save_checkpoint
from .errors import CheckpointError, ConfigError, NumericError, UmoeError
from .model import build_layer_layout, count_parameters, format_param_count
from .runconfig import RunConfig, load_arch_table, load_run_config
from .training import (
    Bundle,
    ExpertSource,
    Stage2Result,
    StageSettings,
    build_bundle,
    build_moe_bundle,
    dense_config,
    evaluate,
    stage1_align,
    stage2_experts,
    stage3_moe,
)

log = logging.getLogger("unimoe")


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse defaults to exit code 2; we use 1
        self.print_usage(sys.stderr)
        raise ConfigError(message)


def _setup_logging() -> None:
    level = os.environ.get("UMOE_LOG", "info").lower()
    levels = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}
    if level not in levels:
        raise ConfigError(f"UMOE_LOG must be one of {sorted(levels)}, got {level!r}")
    logging.basicConfig(level=levels[level], format="%(levelname)s %(name)s: %(message)s")


def _write_manifest(out_dir: Path, payload: dict) -> None:
    payload = {"artifact_version": __version__, **payload}
    (out_dir / "manifest.json").write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


# ---------------------------------------------------------------------------
# count-params
# ---------------------------------------------------------------------------

def cmd_count_params(args) -> int:
    rows = load_arch_table(args.config)
    header = f"{'Name':<28} {'Experts':>7} {'Top-k':>5} {'MoE Layers':>10} {'Activated':>10} {'Total':>8}"
    print(header)
    print("-" * len(header))
    for row in rows:
        activated, total = count_parameters(row.cfg, row.base_params)
        moe_layers = sum(build_layer_layout(row.cfg)) if not row.dense else 0
        experts = "-" if row.dense else str(row.cfg.experts)
        topk = "-" if row.dense else str(row.cfg.topk)
        layers = "-" if row.dense else str(moe_layers)
        print(
            f"{row.name:<28} {experts:>7} {topk:>5} {layers:>10} "
            f"{format_param_count(activated):>10} {format_param_count(total):>8}"
        )
    return 0


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------

def _open_runlog(out_dir: Path):
    fh = open(out_dir / "runlog.jsonl", "w")

    def write(record) -> None:
        fh.write(json.dumps(record.to_json()) + "\n")

    return fh, write


def _apply_steps_override(settings: StageSettings, steps: int | None) -> StageSettings:
    if steps is None:
        return settings
    from dataclasses import replace

    return replace(settings, steps=steps)


def _save_bundle(bundle: Bundle, path: Path) -> None:
    save_checkpoint(path, {name: p.data for name, p in bundle.all_params().items()})


def cmd_train(args) -> int:
    cfg = load_run_config(args.config)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    seed = args.seed
    runlog, write_record = _open_runlog(out_dir)
    try:
        if args.stage == 1:
            bundle = build_bundle(dense_config(cfg.model), cfg.connectors, seed)
            tasks = [cfg.build_task(t) for t in cfg.stage1_tasks]
            settings = _apply_steps_override(cfg.stage1, args.steps)
            stage1_align(bundle, tasks, settings, seed, step_callback=write_record, group=cfg.parallel)
            _save_bundle(bundle, out_dir / "ckpt.umoe")
            _write_manifest(out_dir, {
                "stage": 1, "seed": seed, "config_hash": cfg.config_hash,
                "outputs": {"checkpoint": "ckpt.umoe", "runlog": "runlog.jsonl"},
            })
        elif args.stage == 2:
            if not args.prev:
                raise ConfigError("stage 2 needs --prev pointing at the stage-1 output directory")
            prev_ckpt = Path(args.prev) / "ckpt.umoe"
            if not prev_ckpt.exists():
                raise ConfigError(f"stage-1 checkpoint not found: {prev_ckpt}")
            bundle = build_bundle(dense_config(cfg.model), cfg.connectors, seed)
            bundle.load_state(load_checkpoint(prev_ckpt))
            base_state = bundle.state_arrays()
            tasks = {name: cfg.build_task(c.task) for name, c in cfg.stage2.items()}
            if not tasks:
                raise ConfigError("no [stage2.<task>] sections configured")
            settings = _apply_steps_override(
                next(iter(cfg.stage2.values())).settings, args.steps
            )
            results = stage2_experts(bundle, tasks, settings, seed, step_callback=write_record, group=cfg.parallel)
            outputs = {"runlog": "runlog.jsonl"}
            save_checkpoint(out_dir / "base.umoe", base_state)
            outputs["base"] = "base.umoe"
            for name, result in results.items():
                fname = f"expert_{name}.umoe"
                save_checkpoint(out_dir / fname, result.state)
                outputs[f"expert:{name}"] = fname
            _write_manifest(out_dir, {
                "stage": 2, "seed": seed, "config_hash": cfg.config_hash,
                "outputs": outputs,
                "provenance": {name: f"stage2:{name}" for name in results},
            })
        else:
            sources = _resolve_expert_sources(cfg, args)
            base_state, stage2_states = _load_stage3_inputs(cfg, args, sources)
            moe_bundle, provenance = build_moe_bundle(
                cfg.model, cfg.connectors, args.seed, base_state, sources, stage2_states
            )
            task = cfg.build_task(cfg.stage3_task)
            settings = _apply_steps_override(cfg.stage3, args.steps)
            stage3_moe(moe_bundle, task, settings, seed, step_callback=write_record, group=cfg.parallel)
            _save_bundle(moe_bundle, out_dir / "ckpt.umoe")
            _write_manifest(out_dir, {
                "stage": 3, "seed": seed, "config_hash": cfg.config_hash,
                "outputs": {"checkpoint": "ckpt.umoe", "runlog": "runlog.jsonl"},
                "provenance": provenance,
            })
    finally:
        runlog.close()
    log.info("stage %d complete; outputs in %s", args.stage, out_dir)
    return 0


def _resolve_expert_sources(cfg: RunConfig, args) -> list[ExpertSource]:
    if args.pure_experts:
        return [ExpertSource(kind="base") for _ in range(cfg.model.experts)]
    sources = []
    for raw in cfg.stage3_experts:
        if raw.startswith("stage2:"):
            sources.append(ExpertSource(kind="stage2", task=raw.split(":", 1)[1]))
        elif raw in ("base", "random"):
            sources.append(ExpertSource(kind=raw))
        else:
            raise ConfigError(f"bad expert source {raw!r}; use stage2:<task>, base, or random")
    return sources


def _load_stage3_inputs(cfg: RunConfig, args, sources) -> tuple[dict, dict]:
    needed = sorted({s.task for s in sources if s.kind == "stage2"})
    stage2_states: dict[str, Stage2Result] = {}
    if needed and not args.prev:
        raise ConfigError(
            "stage 3 with stage-2 expert sources needs --prev pointing at the "
            "stage-2 output directory (or pass --pure-experts to use identical base copies)"
        )
    if args.prev:
        prev = Path(args.prev)
        base_path = prev / "base.umoe"
        if not base_path.exists():
            base_path = prev / "ckpt.umoe"
        if not base_path.exists():
            raise ConfigError(f"no base checkpoint (base.umoe or ckpt.umoe) in {prev}")
        base_state = load_checkpoint(base_path)
        for task in needed:
            path = prev / f"expert_{task}.umoe"
            if not path.exists():
                raise ConfigError(f"stage-2 expert checkpoint not found: {path}")
            stage2_states[task] = Stage2Result(task_name=task, state=load_checkpoint(path))
    else:
        bundle = build_bundle(dense_config(cfg.model), cfg.connectors, args.seed)
        base_state = bundle.state_arrays()
    return base_state, stage2_states


# ---------------------------------------------------------------------------
# eval / analyze
# ---------------------------------------------------------------------------

def _load_eval_bundle(cfg: RunConfig, ckpt_path: Path, seed: int) -> Bundle:
    if not ckpt_path.exists():
        raise ConfigError(f"checkpoint not found: {ckpt_path}")
    tensors = load_checkpoint(ckpt_path)
    is_moe = any(".moe." in name for name in tensors)
    model_cfg = cfg.model if is_moe else dense_config(cfg.model)
    bundle = build_bundle(model_cfg, cfg.connectors, seed)
    lora_targets = sorted({n[: -len(".lora_A")] for n in tensors if n.endswith(".lora_A")})
    if lora_targets:
        rank = tensors[lora_targets[0] + ".lora_A"].shape[0]
        expert_targets = [t for t in lora_targets if ".attn." not in t]
        attn_targets = [t for t in lora_targets if ".attn." in t]
        if expert_targets:
            bundle.llm.attach_ffn_lora(rank, cfg.stage3.lora_alpha, seed)
        if attn_targets:
            bundle.llm.attach_attention_lora(rank, cfg.stage3.lora_alpha, seed)
    bundle.load_state(tensors)
    return bundle


def cmd_eval(args) -> int:
    cfg = load_run_config(args.config)
    bundle = _load_eval_bundle(cfg, Path(args.ckpt), args.seed)
    task = cfg.build_task(args.task)
    metrics = evaluate(bundle, task)
    payload = json.dumps(metrics, sort_keys=True)
    print(payload)
    if args.out:
        out_dir = Path(args.out)
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "metrics.json").write_text(payload + "\n")
        _write_manifest(out_dir, {
            "stage": "eval", "seed": args.seed, "config_hash": cfg.config_hash,
            "outputs": {"metrics": "metrics.json"},
        })
    return 0


def cmd_analyze(args) -> int:
    cfg = load_run_config(args.config)
    bundle = _load_eval_bundle(cfg, Path(args.ckpt), args.seed)
    task = cfg.build_task(args.task)
    routing_log = collect_routing_log(bundle, task, cfg.analytics_samples)
    matrix = build_pathway_matrix(routing_log)
    n_paths = min(cfg.analytics_pathways, matrix.data.shape[0])
    products = AnalyticsBundle(
        loads=expert_load_distribution(routing_log),
        prefs=modality_preference(routing_log),
        pathways=top_pathways(matrix, n_paths),
        run_id=f"{args.task}-seed{args.seed}",
        config_hash=cfg.config_hash,
    )
    written = export_analytics(products, args.out)
    log.info("analytics written: %s", ", ".join(str(p) for p in written.values()))
    return 0


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="umoe", description="Sparse-MoE multimodal LM workbench")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("count-params", help="print the parameter-count table")
    p.add_argument("--config", required=True)
    p.set_defaults(fn=cmd_count_params)

    p = sub.add_parser("train", help="run one training stage")
    p.add_argument("--stage", type=int, choices=(1, 2, 3), required=True)
    p.add_argument("--config", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--prev", help="output directory of the previous stage")
    p.add_argument("--pure-experts", action="store_true",
                   help="stage 3: fill every expert slot with the base FFN")
    p.add_argument("--steps", type=int, default=None, help="override the configured step count")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a task")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--config", required=True)
    p.add_argument("--task", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", help="also write metrics.json here")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("analyze", help="export routing analytics CSVs")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--config", required=True)
    p.add_argument("--task", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_analyze)
    return parser


def main(argv=None) -> int:
    try:
        _setup_logging()
        args = build_parser().parse_args(argv)
        return args.fn(args)
    except (ConfigError, CheckpointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 2
    except UmoeError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
