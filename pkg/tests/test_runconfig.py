import pytest

from unimoe.errors import ConfigError
from unimoe.runconfig import load_arch_table, load_run_config

GOOD = """
[model]
layers = 2
width = 32
ffn = 48
heads = 4
vocab = 256
experts = 2
topk = 2
moe_layout = interval
num_queries = 4
image_enc_dim = 16
audio_enc_dim = 16
speech_enc_dim = 16

[task.a]
mixes = image, audio+speech
samples = 8

[stage1]
tasks = a
steps = 5
lr = 0.5

[stage2.x]
task = a
steps = 5
train_qformer = true

[stage3]
task = a
experts = stage2:x, base
steps = 5
lora_attention = false

[parallel]
workers = 2
expert_map = 0:1,1:0
data_shard = by_modality

[analytics]
samples = 33
"""


def write(tmp_path, text):
    path = tmp_path / "run.cfg"
    path.write_text(text)
    return path


def test_full_round_trip(tmp_path):
    cfg = load_run_config(write(tmp_path, GOOD))
    assert cfg.model.experts == 2
    assert cfg.connectors.d_model == 32
    assert cfg.tasks["a"].mixes == [("image",), ("audio", "speech")]
    assert cfg.stage1.lr == 0.5
    assert cfg.stage2["x"].settings.train_qformer is True
    assert cfg.stage2["x"].settings.lora_rank == 64
    assert cfg.stage3.lora_rank == 8
    assert cfg.stage3.lora_attention is False
    assert cfg.stage3_experts == ["stage2:x", "base"]
    assert cfg.parallel.workers == 2
    assert cfg.parallel.resolve_expert_map(2) == {0: 1, 1: 0}
    assert cfg.parallel.data_shard == "by_modality"
    assert cfg.analytics_samples == 33
    assert len(cfg.config_hash) == 64


def test_paper_default_learning_rates(tmp_path):
    text = GOOD.replace("lr = 0.5\n", "")
    cfg = load_run_config(write(tmp_path, text))
    assert cfg.stage1.lr == 2e-5
    assert cfg.stage2["x"].settings.lr == 4e-5
    assert cfg.stage3.lr == 4e-5


def test_analytics_defaults(tmp_path):
    text = GOOD.split("[analytics]")[0]
    cfg = load_run_config(write(tmp_path, text))
    assert cfg.analytics_samples == 200
    assert cfg.analytics_pathways == 10


def test_expert_count_mismatch_rejected(tmp_path):
    text = GOOD.replace("experts = stage2:x, base", "experts = stage2:x")
    with pytest.raises(ConfigError, match="1 experts"):
        load_run_config(write(tmp_path, text))


def test_unknown_task_reference_rejected(tmp_path):
    text = GOOD.replace("[stage1]\ntasks = a", "[stage1]\ntasks = ghost")
    with pytest.raises(ConfigError, match="ghost"):
        load_run_config(write(tmp_path, text))


def test_missing_model_section_rejected(tmp_path):
    with pytest.raises(ConfigError, match="model"):
        load_run_config(write(tmp_path, "[stage1]\ntasks = a\nsteps = 1\n"))


def test_bad_expert_map_rejected(tmp_path):
    text = GOOD.replace("expert_map = 0:1,1:0", "expert_map = 0=1")
    with pytest.raises(ConfigError, match="expert_map"):
        load_run_config(write(tmp_path, text))


def test_build_task_uses_model_vocab(tmp_path):
    cfg = load_run_config(write(tmp_path, GOOD))
    task = cfg.build_task("a")
    assert task.vocab == 256
    assert task.conn is cfg.connectors


def test_arch_table_requires_rows(tmp_path):
    path = tmp_path / "arch.cfg"
    path.write_text("[other]\nx = 1\n")
    with pytest.raises(ConfigError, match="arch"):
        load_arch_table(path)


def test_config_hash_changes_with_content(tmp_path):
    cfg1 = load_run_config(write(tmp_path, GOOD))
    cfg2 = load_run_config(write(tmp_path, GOOD + "\n# trailing comment\n"))
    assert cfg1.config_hash != cfg2.config_hash
