import numpy as np
import pytest

from unimoe import autograd as ag
from unimoe.connectors import (
    ConnectorBank,
    ConnectorConfig,
    ModalitySequence,
    ProjectionLayer,
    StubEncoder,
    assemble_input,
    build_qformer,
    embed_text,
    encode_image,
    encode_video,
    qformer_forward,
)
from unimoe.errors import ConfigError, ShapeError


def t64(arr):
    return ag.Tensor(np.asarray(arr, dtype=np.float64))


@pytest.fixture
def setup():
    rng = np.random.default_rng(0)
    enc = StubEncoder.create("image", raw_dim=6, enc_dim=8, seed=3, dtype=np.float64)
    proj = ProjectionLayer(
        weight=ag.parameter(rng.standard_normal((8, 10))),
        bias=ag.parameter(rng.standard_normal(10)),
    )
    return rng, enc, proj


def test_encode_image_zero_features_zero_bias(setup):
    rng, enc, proj = setup
    proj.bias.data[...] = 0.0
    seq = encode_image(t64(np.zeros((4, 6))), enc, proj)
    assert seq.modality == "image"
    assert np.allclose(seq.embeddings.data, 0.0)


def test_encode_image_single_patch_identity_matrices():
    enc = StubEncoder.create("image", raw_dim=4, enc_dim=4, seed=0, dtype=np.float64)
    enc.weight.data[...] = np.eye(4)
    proj = ProjectionLayer(weight=ag.parameter(np.eye(4)), bias=ag.parameter(np.zeros(4)))
    raw = np.array([[1.0, 2.0, 3.0, 4.0]])
    seq = encode_image(t64(raw), enc, proj)
    assert np.array_equal(seq.embeddings.data, raw)


def test_encode_image_against_composed_matmul_oracle(setup):
    rng, enc, proj = setup
    raw = rng.standard_normal((16, 6))
    expected = raw @ enc.weight.data @ proj.weight.data + proj.bias.data
    seq = encode_image(t64(raw), enc, proj)
    assert np.max(np.abs(seq.embeddings.data - expected)) <= 1e-10
    assert len(seq) == 16


def test_encode_image_dim_mismatch(setup):
    _, enc, proj = setup
    with pytest.raises(ShapeError):
        encode_image(t64(np.zeros((4, 5))), enc, proj)


def test_encode_video_eight_identical_frames_equals_image(setup):
    rng, enc, proj = setup
    frame = rng.standard_normal((4, 6))
    video = encode_video([t64(frame)] * 8, enc, proj)
    image = encode_image(t64(frame), enc, proj)
    assert np.max(np.abs(video.embeddings.data - image.embeddings.data)) <= 1e-7
    assert video.modality == "video"


def test_encode_video_antisymmetric_frames_cancel(setup):
    rng, enc, proj = setup
    proj.bias.data[...] = 0.0
    f = rng.standard_normal((4, 6))
    frames = [t64(f)] * 4 + [t64(-f)] * 4
    video = encode_video(frames, enc, proj)
    assert np.allclose(video.embeddings.data, 0.0, atol=1e-12)


def test_encode_video_against_mean_then_project_oracle(setup):
    rng, enc, proj = setup
    frames = [rng.standard_normal((4, 6)) for _ in range(8)]
    mean_enc = np.mean([f @ enc.weight.data for f in frames], axis=0)
    expected = mean_enc @ proj.weight.data + proj.bias.data
    video = encode_video([t64(f) for f in frames], enc, proj)
    assert np.max(np.abs(video.embeddings.data - expected)) <= 1e-10


def test_encode_video_wrong_frame_count(setup):
    _, enc, proj = setup
    with pytest.raises(ConfigError, match="8"):
        encode_video([t64(np.zeros((4, 6)))] * 7, enc, proj)


# ---------------------------------------------------------------------------
# q-former
# ---------------------------------------------------------------------------

def make_qformer(num_queries=4, d_q=8, d_enc=8, d_model=10, heads=2, seed=5):
    return build_qformer("qf", num_queries, d_q, d_enc, d_model, heads, seed, dtype=np.float64)


@pytest.mark.parametrize("t_enc", [1, 7, 100])
def test_qformer_output_length_is_query_count(t_enc):
    rng = np.random.default_rng(6)
    qf = make_qformer()
    out = qformer_forward(t64(rng.standard_normal((t_enc, 8))), qf, "audio")
    assert len(out) == 4
    assert out.embeddings.shape == (4, 10)


def test_qformer_single_encoder_state_cross_attention_passthrough():
    # with one encoder state, every query's cross-attention weight is 1, so
    # the cross block adds state @ Wv @ Wo to the residual
    rng = np.random.default_rng(7)
    qf = make_qformer(num_queries=3)
    state = rng.standard_normal((1, 8))
    h = qf.queries
    for layer in qf.layers:
        hs = ag.layer_norm(h, layer.ln_self_g, layer.ln_self_b)
        q = ag.matmul(hs, layer.self_wq)
        k = ag.matmul(hs, layer.self_wk)
        v = ag.matmul(hs, layer.self_wv)
        h = ag.add(ag.matmul(ag.attention_concat(q, k, v, qf.heads), layer.self_wo), h)
        cross_add = (state @ layer.cross_wv.data) @ layer.cross_wo.data
        h = ag.Tensor(h.data + np.tile(cross_add, (3, 1)))
    expected = h.data @ qf.out_proj.weight.data + qf.out_proj.bias.data
    out = qformer_forward(t64(state), qf, "speech")
    assert np.max(np.abs(out.embeddings.data - expected)) <= 1e-10


def test_qformer_against_straight_line_oracle():
    rng = np.random.default_rng(8)
    qf = make_qformer(num_queries=4, heads=2)
    states = rng.standard_normal((3, 8))

    def mha(q, k, v, heads):
        t_q, d = q.shape
        dh = d // heads
        outs = []
        for hh in range(heads):
            qs = q[:, hh * dh:(hh + 1) * dh]
            ks = k[:, hh * dh:(hh + 1) * dh]
            vs = v[:, hh * dh:(hh + 1) * dh]
            s = qs @ ks.T / np.sqrt(dh)
            w = np.exp(s - s.max(axis=1, keepdims=True))
            w /= w.sum(axis=1, keepdims=True)
            outs.append(w @ vs)
        return np.concatenate(outs, axis=1)

    def ln(x, g, b):
        mu = x.mean(axis=1, keepdims=True)
        var = x.var(axis=1, keepdims=True)
        return (x - mu) / np.sqrt(var + 1e-5) * g + b

    h = qf.queries.data.copy()
    for layer in qf.layers:
        hs = ln(h, layer.ln_self_g.data, layer.ln_self_b.data)
        h = mha(hs @ layer.self_wq.data, hs @ layer.self_wk.data, hs @ layer.self_wv.data, 2) @ layer.self_wo.data + h
        hc = ln(h, layer.ln_cross_g.data, layer.ln_cross_b.data)
        h = mha(hc @ layer.cross_wq.data, states @ layer.cross_wk.data, states @ layer.cross_wv.data, 2) @ layer.cross_wo.data + h
    expected = h @ qf.out_proj.weight.data + qf.out_proj.bias.data
    out = qformer_forward(t64(states), qf, "audio")
    assert np.max(np.abs(out.embeddings.data - expected)) <= 1e-9


def test_qformer_has_four_layers():
    qf = make_qformer()
    assert len(qf.layers) == 4


def test_qformer_encoder_dim_mismatch():
    rng = np.random.default_rng(9)
    qf = make_qformer(d_enc=8)
    with pytest.raises(ShapeError):
        qformer_forward(t64(rng.standard_normal((3, 5))), qf, "audio")


# ---------------------------------------------------------------------------
# text embedding and assembly
# ---------------------------------------------------------------------------

def test_embed_text_row_zero():
    table = ag.parameter(np.arange(20, dtype=np.float64).reshape(5, 4))
    seq = embed_text(np.array([0]), table)
    assert np.array_equal(seq.embeddings.data, table.data[:1])


def test_embed_text_repeated_ids():
    table = ag.parameter(np.random.default_rng(1).standard_normal((5, 4)))
    seq = embed_text(np.array([2, 2, 2]), table)
    assert np.array_equal(seq.embeddings.data[0], seq.embeddings.data[1])
    assert np.array_equal(seq.embeddings.data[1], seq.embeddings.data[2])


def test_embed_text_gather_oracle():
    rng = np.random.default_rng(2)
    table = ag.parameter(rng.standard_normal((16, 4)))
    ids = rng.integers(0, 16, size=10)
    seq = embed_text(ids, table)
    assert np.array_equal(seq.embeddings.data, table.data[ids])


def test_embed_text_out_of_range():
    table = ag.parameter(np.zeros((4, 2)))
    with pytest.raises(ShapeError):
        embed_text(np.array([4]), table)


def test_assemble_single_text_sequence():
    seq = ModalitySequence("text", t64(np.ones((3, 4))))
    embeds, labels = assemble_input([seq])
    assert np.array_equal(embeds.data, np.ones((3, 4)))
    assert labels == ["text", "text", "text"]


def test_assemble_order_and_labels():
    rng = np.random.default_rng(3)
    video = ModalitySequence("video", t64(rng.standard_normal((4, 6))))
    text = ModalitySequence("text", t64(rng.standard_normal((3, 6))))
    audio = ModalitySequence("audio", t64(rng.standard_normal((2, 6))))
    embeds, labels = assemble_input([video, text, audio])
    assert embeds.shape == (9, 6)
    assert labels == ["video"] * 4 + ["text"] * 3 + ["audio"] * 2


def test_assemble_round_trip_slices_back():
    rng = np.random.default_rng(4)
    seqs = [
        ModalitySequence("image", t64(rng.standard_normal((5, 6)))),
        ModalitySequence("text", t64(rng.standard_normal((2, 6)))),
        ModalitySequence("speech", t64(rng.standard_normal((3, 6)))),
    ]
    embeds, labels = assemble_input(seqs)
    offset = 0
    for seq in seqs:
        n = len(seq)
        assert np.array_equal(embeds.data[offset:offset + n], seq.embeddings.data)
        assert labels[offset:offset + n] == [seq.modality] * n
        offset += n


def test_assemble_empty_list_rejected():
    with pytest.raises(ShapeError):
        assemble_input([])


def test_unknown_modality_rejected():
    with pytest.raises(ConfigError):
        ModalitySequence("smell", t64(np.zeros((1, 4))))


# ---------------------------------------------------------------------------
# connector bank contracts
# ---------------------------------------------------------------------------

def test_stub_encoders_are_frozen():
    bank = ConnectorBank(ConnectorConfig(), seed=0)
    for p in bank.frozen_params().values():
        assert p.requires_grad is False


def test_audio_and_speech_qformers_are_distinct():
    bank = ConnectorBank(ConnectorConfig(), seed=0)
    a = bank.audio_qformer.queries.data
    s = bank.speech_qformer.queries.data
    assert a.shape == s.shape
    assert not np.array_equal(a, s)


def test_connector_bank_widths_match_model():
    cfg = ConnectorConfig(d_model=32)
    bank = ConnectorBank(cfg, seed=0)
    rng = np.random.default_rng(5)
    img = bank.encode("image", ag.Tensor(rng.standard_normal((4, cfg.image_raw_dim)).astype(np.float32)))
    aud = bank.encode("audio", ag.Tensor(rng.standard_normal((6, cfg.audio_raw_dim)).astype(np.float32)))
    assert img.embeddings.shape[1] == 32
    assert aud.embeddings.shape == (cfg.num_queries, 32)
