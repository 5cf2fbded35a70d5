import csv
import hashlib
import json
import subprocess
import sys

import numpy as np
import pytest

from unimoe.cli import main

FAST_CFG = """
[model]
layers = 2
width = 32
ffn = 48
ffn_factor = 3
heads = 4
vocab = 256
experts = 2
topk = 2
moe_layout = interval
aux_loss_coeff = 0.0
max_seq = 64
num_queries = 4
qformer_heads = 4
image_raw_dim = 12
image_enc_dim = 16
image_patches = 4
audio_raw_dim = 12
audio_enc_dim = 16
speech_raw_dim = 12
speech_enc_dim = 16

[task.img]
mixes = image
samples = 12
eval_samples = 4
seed = 1

[task.aud]
mixes = audio
samples = 12
eval_samples = 4
seed = 2

[task.mix]
mixes = image, audio
samples = 12
eval_samples = 4
seed = 3

[stage1]
tasks = aud
steps = 4
batch = 2
lr = 0.01

[stage2.img]
task = img
steps = 4
batch = 2
lr = 0.01
lora_rank = 4

[stage2.aud]
task = aud
steps = 4
batch = 2
lr = 0.01
lora_rank = 4

[stage3]
task = mix
experts = stage2:img, stage2:aud
steps = 4
batch = 2
lr = 0.01
lora_rank = 4
lora_alpha = 16

[parallel]
workers = 1

[analytics]
samples = 6
top_pathways = 4
"""


@pytest.fixture
def cfg_path(tmp_path):
    path = tmp_path / "fast.cfg"
    path.write_text(FAST_CFG)
    return path


def sha(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


def run_stages(cfg_path, tmp_path, seed=0):
    s1 = tmp_path / "s1"
    s2 = tmp_path / "s2"
    s3 = tmp_path / "s3"
    assert main(["train", "--stage", "1", "--config", str(cfg_path), "--seed", str(seed), "--out", str(s1)]) == 0
    assert main(["train", "--stage", "2", "--config", str(cfg_path), "--seed", str(seed),
                 "--out", str(s2), "--prev", str(s1)]) == 0
    assert main(["train", "--stage", "3", "--config", str(cfg_path), "--seed", str(seed),
                 "--out", str(s3), "--prev", str(s2)]) == 0
    return s1, s2, s3


# ---------------------------------------------------------------------------
# count-params
# ---------------------------------------------------------------------------

def test_count_params_matches_published_rows(capsys):
    assert main(["count-params", "--config", "configs/arch_table.cfg"]) == 0
    out = capsys.readouterr().out
    expected = {
        "Phi2-2.7B": ("2.7B", "2.7B"),
        "MoE-LLaVA-2.7Bx4-Top2": ("3.6B", "5.3B"),
        "MoE-LLaVA-2.7Bx4-Top2*": ("4.5B", "7.8B"),
        "OpenChat-7B": ("6.7B", "6.7B"),
        "MoE-LLaVA-7Bx4-Top2": ("9.6B", "15.2B"),
        "MoE-LLaVA-7Bx4-Top2*": ("12.4B", "23.7B"),
        "Vicuna-7B": ("6.7B", "6.7B"),
        "Uni-MoE-7Bx4-Top2": ("8.9B", "13.2B"),
        "Uni-MoE-7Bx4-Top2*": ("11.1B", "19.7B"),
        "Uni-MoE-7Bx8-Top2": ("8.9B", "21.9B"),
        "Uni-MoE-7Bx8-Top2*": ("11.1B", "37.0B"),
    }
    lines = {line.split()[0]: line.split() for line in out.splitlines() if line.startswith(("Phi", "MoE", "Open", "Vic", "Uni"))}
    assert set(lines) == set(expected)
    for name, (act, tot) in expected.items():
        assert lines[name][-2] == act, name
        assert lines[name][-1] == tot, name


def test_count_params_dense_row_shows_activated_equals_total(capsys):
    main(["count-params", "--config", "configs/arch_table.cfg"])
    out = capsys.readouterr().out
    row = next(l for l in out.splitlines() if l.startswith("Vicuna-7B"))
    parts = row.split()
    assert parts[-1] == parts[-2]
    assert parts[1] == "-"


def test_count_params_malformed_config(tmp_path, capsys):
    bad = tmp_path / "bad.cfg"
    bad.write_text("[arch.x]\nname = X\nbase_params = not_a_number\nwidth = 64\nffn = 128\n"
                   "ffn_factor = 3\nlayers = 2\nheads = 4\n")
    assert main(["count-params", "--config", str(bad)]) == 1
    assert "base_params" in capsys.readouterr().err


def test_count_params_missing_file():
    assert main(["count-params", "--config", "/nonexistent/x.cfg"]) == 1


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------

def test_full_lifecycle_and_outputs(cfg_path, tmp_path):
    s1, s2, s3 = run_stages(cfg_path, tmp_path)
    for out_dir in (s1, s2, s3):
        manifest = json.loads((out_dir / "manifest.json").read_text())
        assert manifest["config_hash"]
        assert (out_dir / "runlog.jsonl").exists()
    records = [json.loads(l) for l in (s1 / "runlog.jsonl").read_text().splitlines()]
    assert all(set(r) == {"stage", "step", "loss", "aux_loss", "lr"} for r in records)
    assert (s2 / "expert_img.umoe").exists()
    assert (s2 / "expert_aud.umoe").exists()
    assert (s2 / "base.umoe").exists()
    manifest3 = json.loads((s3 / "manifest.json").read_text())
    assert any(v == "stage2:img" for v in manifest3["provenance"].values())


def test_stage3_without_prev_or_pure_refused(cfg_path, tmp_path, capsys):
    rc = main(["train", "--stage", "3", "--config", str(cfg_path), "--seed", "0",
               "--out", str(tmp_path / "out")])
    assert rc == 1
    assert "--pure-experts" in capsys.readouterr().err


def test_stage3_pure_experts_without_prev_allowed(cfg_path, tmp_path):
    out = tmp_path / "pure"
    rc = main(["train", "--stage", "3", "--config", str(cfg_path), "--seed", "0",
               "--out", str(out), "--pure-experts"])
    assert rc == 0
    manifest = json.loads((out / "manifest.json").read_text())
    assert all(v == "base" for v in manifest["provenance"].values())


def test_stage2_without_prev_refused(cfg_path, tmp_path):
    assert main(["train", "--stage", "2", "--config", str(cfg_path), "--seed", "0",
                 "--out", str(tmp_path / "x")]) == 1


def test_train_determinism_same_seed_same_hash(cfg_path, tmp_path):
    a = tmp_path / "a"
    b = tmp_path / "b"
    for out in (a, b):
        assert main(["train", "--stage", "1", "--config", str(cfg_path), "--seed", "7",
                     "--out", str(out)]) == 0
    assert sha(a / "ckpt.umoe") == sha(b / "ckpt.umoe")


def test_train_different_seed_different_hash(cfg_path, tmp_path):
    a = tmp_path / "a"
    b = tmp_path / "b"
    main(["train", "--stage", "1", "--config", str(cfg_path), "--seed", "1", "--out", str(a)])
    main(["train", "--stage", "1", "--config", str(cfg_path), "--seed", "2", "--out", str(b)])
    assert sha(a / "ckpt.umoe") != sha(b / "ckpt.umoe")


def test_train_zero_steps_checkpoint_equals_init(cfg_path, tmp_path):
    from unimoe.checkpoint import load_checkpoint
    from unimoe.runconfig import load_run_config
    from unimoe.training import build_bundle, dense_config

    out = tmp_path / "zero"
    assert main(["train", "--stage", "1", "--config", str(cfg_path), "--seed", "3",
                 "--out", str(out), "--steps", "0"]) == 0
    cfg = load_run_config(cfg_path)
    init = build_bundle(dense_config(cfg.model), cfg.connectors, seed=3)
    saved = load_checkpoint(out / "ckpt.umoe")
    for name, p in init.all_params().items():
        assert np.array_equal(saved[name], p.data.astype(np.float32)), name


def test_malformed_run_config_exit_1(tmp_path, capsys):
    bad = tmp_path / "bad.cfg"
    bad.write_text("[model\nlayers = 2\n")
    rc = main(["train", "--stage", "1", "--config", str(bad), "--seed", "0",
               "--out", str(tmp_path / "o")])
    assert rc == 1
    err = capsys.readouterr().err
    assert "line" in err.lower() or "parse" in err.lower()


def test_bad_cli_usage_exit_1(capsys):
    assert main(["train", "--stage", "9", "--config", "x", "--out", "y"]) == 1


# ---------------------------------------------------------------------------
# eval / analyze
# ---------------------------------------------------------------------------

def test_eval_twice_identical_json(cfg_path, tmp_path, capsys):
    s1, s2, s3 = run_stages(cfg_path, tmp_path)
    outputs = []
    for _ in range(2):
        assert main(["eval", "--ckpt", str(s3 / "ckpt.umoe"), "--config", str(cfg_path),
                     "--task", "mix"]) == 0
        outputs.append(capsys.readouterr().out.strip())
    assert outputs[0] == outputs[1]
    metrics = json.loads(outputs[0])
    assert set(metrics) == {"ce", "em"}


def test_eval_writes_metrics_file(cfg_path, tmp_path):
    s1, _, s3 = run_stages(cfg_path, tmp_path)
    out = tmp_path / "evalout"
    assert main(["eval", "--ckpt", str(s3 / "ckpt.umoe"), "--config", str(cfg_path),
                 "--task", "mix", "--out", str(out)]) == 0
    assert (out / "metrics.json").exists()
    assert (out / "manifest.json").exists()


def test_eval_unknown_task_exit_1(cfg_path, tmp_path, capsys):
    s1, *_ = run_stages(cfg_path, tmp_path)
    assert main(["eval", "--ckpt", str(s1 / "ckpt.umoe"), "--config", str(cfg_path),
                 "--task", "nope"]) == 1


def test_eval_checkpoint_config_mismatch_exit_1(cfg_path, tmp_path, capsys):
    s1, *_ = run_stages(cfg_path, tmp_path)
    other = tmp_path / "other.cfg"
    other.write_text(FAST_CFG.replace("width = 32", "width = 64").replace("image_enc_dim = 16", "image_enc_dim = 64")
                     .replace("audio_enc_dim = 16", "audio_enc_dim = 64").replace("speech_enc_dim = 16", "speech_enc_dim = 64"))
    rc = main(["eval", "--ckpt", str(s1 / "ckpt.umoe"), "--config", str(other), "--task", "mix"])
    assert rc == 1
    assert "shape" in capsys.readouterr().err.lower()


def test_analyze_writes_valid_bundle(cfg_path, tmp_path):
    s1, s2, s3 = run_stages(cfg_path, tmp_path)
    out = tmp_path / "analysis"
    assert main(["analyze", "--ckpt", str(s3 / "ckpt.umoe"), "--config", str(cfg_path),
                 "--task", "mix", "--out", str(out)]) == 0
    for name in ("loads.csv", "prefs.csv", "pathways.csv", "manifest.json"):
        assert (out / name).exists()
    with open(out / "loads.csv") as fh:
        rows = list(csv.DictReader(fh))
    by_layer = {}
    for row in rows:
        by_layer.setdefault(row["layer"], 0.0)
        by_layer[row["layer"]] += float(row["fraction"])
    for total in by_layer.values():
        assert total == pytest.approx(1.0, abs=1e-9)


def test_analyze_single_expert_model_loads_all_one(tmp_path):
    cfg = tmp_path / "m1.cfg"
    cfg.write_text(FAST_CFG.replace("experts = 2\ntopk = 2", "experts = 1\ntopk = 1")
                   .replace("experts = stage2:img, stage2:aud", "experts = base"))
    out1 = tmp_path / "s1"
    assert main(["train", "--stage", "1", "--config", str(cfg), "--seed", "0", "--out", str(out1)]) == 0
    out3 = tmp_path / "s3"
    assert main(["train", "--stage", "3", "--config", str(cfg), "--seed", "0", "--out", str(out3),
                 "--pure-experts", "--prev", str(out1)]) == 0
    analysis = tmp_path / "an"
    assert main(["analyze", "--ckpt", str(out3 / "ckpt.umoe"), "--config", str(cfg),
                 "--task", "mix", "--out", str(analysis)]) == 0
    with open(analysis / "loads.csv") as fh:
        for row in csv.DictReader(fh):
            assert float(row["fraction"]) == 1.0


def test_analyze_idempotent(cfg_path, tmp_path):
    s1, s2, s3 = run_stages(cfg_path, tmp_path)
    a, b = tmp_path / "an1", tmp_path / "an2"
    for out in (a, b):
        assert main(["analyze", "--ckpt", str(s3 / "ckpt.umoe"), "--config", str(cfg_path),
                     "--task", "mix", "--out", str(out)]) == 0
    for name in ("loads.csv", "prefs.csv", "pathways.csv"):
        assert (a / name).read_bytes() == (b / name).read_bytes()


def test_console_entry_point_runs():
    proc = subprocess.run(
        [sys.executable, "-m", "unimoe.cli", "count-params", "--config", "configs/arch_table.cfg"],
        capture_output=True, text=True,
    )
    assert proc.returncode == 0
    assert "Uni-MoE-7Bx8-Top2*" in proc.stdout


def test_bad_umoe_log_env(monkeypatch):
    monkeypatch.setenv("UMOE_LOG", "verbose")
    assert main(["count-params", "--config", "configs/arch_table.cfg"]) == 1
