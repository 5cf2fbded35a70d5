"""Modality connectors: map raw features into the LLM token space.

Frozen stub encoders stand in for pretrained feature extractors; images
and 8-frame videos go through a linear projection, audio and speech are
distilled to a fixed number of query tokens by a small 4-layer
self/cross-attention transformer before projection, and text is a plain
embedding gather.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .errors import ConfigError, ShapeError
from .model import init_weight, init_zeros, init_ones

MODALITIES = ("image", "video", "audio", "speech", "text")
VIDEO_FRAMES = 8
QFORMER_LAYERS = 4
STUB_STD = 0.02


@dataclass
class ModalitySequence:
    """Token embeddings for one modality, width equal to the model width."""

    modality: str
    embeddings: Tensor

    def __post_init__(self):
        if self.modality not in MODALITIES:
            raise ConfigError(f"unknown modality {self.modality!r}")

    def __len__(self) -> int:
        return self.embeddings.shape[0]


@dataclass
class StubEncoder:
    """Frozen Gaussian projection standing in for a pretrained encoder."""

    modality: str
    weight: Tensor
    seed: int

    @classmethod
    def create(cls, modality: str, raw_dim: int, enc_dim: int, seed: int, dtype=np.float32) -> "StubEncoder":
        rng = np.random.default_rng([seed, MODALITIES.index(modality)])
        w = ag.parameter(rng.normal(0.0, STUB_STD, size=(raw_dim, enc_dim)).astype(dtype), requires_grad=False)
        return cls(modality=modality, weight=w, seed=seed)

    def encode(self, raw: Tensor) -> Tensor:
        if raw.shape[1] != self.weight.shape[0]:
            raise ShapeError(f"raw feature dim {raw.shape[1]} does not match encoder input {self.weight.shape[0]}")
        return ag.matmul(raw, self.weight)


@dataclass
class ProjectionLayer:
    weight: Tensor
    bias: Tensor

    def apply(self, x: Tensor) -> Tensor:
        return ag.linear(x, self.weight, self.bias)

    def params(self, prefix: str) -> dict[str, Tensor]:
        return {f"{prefix}.weight": self.weight, f"{prefix}.bias": self.bias}


@dataclass
class QFormerLayer:
    ln_self_g: Tensor
    ln_self_b: Tensor
    self_wq: Tensor
    self_wk: Tensor
    self_wv: Tensor
    self_wo: Tensor
    ln_cross_g: Tensor
    ln_cross_b: Tensor
    cross_wq: Tensor
    cross_wk: Tensor
    cross_wv: Tensor
    cross_wo: Tensor


@dataclass
class QFormerParams:
    """Learnable queries plus 4 self/cross-attention layers and an output
    projection into the LLM width. Query count is fixed for the model's
    lifetime; the output length never depends on the input length."""

    queries: Tensor
    layers: list[QFormerLayer]
    out_proj: ProjectionLayer
    heads: int

    @property
    def num_queries(self) -> int:
        return self.queries.shape[0]


def build_qformer(prefix: str, num_queries: int, d_q: int, d_enc: int, d_model: int, heads: int, seed: int, dtype=np.float32) -> QFormerParams:
    if d_q % heads != 0:
        raise ConfigError(f"qformer width {d_q} not divisible by heads {heads}")
    layers = []
    for i in range(QFORMER_LAYERS):
        lp = f"{prefix}.layers.{i}"
        layers.append(
            QFormerLayer(
                ln_self_g=init_ones((d_q,), dtype),
                ln_self_b=init_zeros((d_q,), dtype),
                self_wq=init_weight(seed, f"{lp}.self.wq", (d_q, d_q), dtype),
                self_wk=init_weight(seed, f"{lp}.self.wk", (d_q, d_q), dtype),
                self_wv=init_weight(seed, f"{lp}.self.wv", (d_q, d_q), dtype),
                self_wo=init_weight(seed, f"{lp}.self.wo", (d_q, d_q), dtype),
                ln_cross_g=init_ones((d_q,), dtype),
                ln_cross_b=init_zeros((d_q,), dtype),
                cross_wq=init_weight(seed, f"{lp}.cross.wq", (d_q, d_q), dtype),
                cross_wk=init_weight(seed, f"{lp}.cross.wk", (d_enc, d_q), dtype),
                cross_wv=init_weight(seed, f"{lp}.cross.wv", (d_enc, d_q), dtype),
                cross_wo=init_weight(seed, f"{lp}.cross.wo", (d_q, d_q), dtype),
            )
        )
    out_proj = ProjectionLayer(
        weight=init_weight(seed, f"{prefix}.out_proj.weight", (d_q, d_model), dtype),
        bias=init_zeros((d_model,), dtype),
    )
    return QFormerParams(
        queries=init_weight(seed, f"{prefix}.queries", (num_queries, d_q), dtype),
        layers=layers,
        out_proj=out_proj,
        heads=heads,
    )


def qformer_forward(encoder_states: Tensor, qf: QFormerParams, modality: str) -> ModalitySequence:
    """Distill variable-length encoder states into the fixed query tokens.

    Each layer runs self-attention over the queries, then cross-attention
    with the queries attending over the encoder states; after four layers
    the output projection moves the queries into the LLM width.
    """
    if encoder_states.shape[0] < 1:
        raise ShapeError("qformer needs at least one encoder state")
    h = qf.queries
    for layer in qf.layers:
        hs = ag.layer_norm(h, layer.ln_self_g, layer.ln_self_b)
        q = ag.matmul(hs, layer.self_wq)
        k = ag.matmul(hs, layer.self_wk)
        v = ag.matmul(hs, layer.self_wv)
        h = ag.add(ag.matmul(ag.attention_concat(q, k, v, qf.heads), layer.self_wo), h)

        hc = ag.layer_norm(h, layer.ln_cross_g, layer.ln_cross_b)
        q = ag.matmul(hc, layer.cross_wq)
        k = ag.matmul(encoder_states, layer.cross_wk)
        v = ag.matmul(encoder_states, layer.cross_wv)
        h = ag.add(ag.matmul(ag.attention_concat(q, k, v, qf.heads), layer.cross_wo), h)
    return ModalitySequence(modality=modality, embeddings=qf.out_proj.apply(h))


def encode_image(raw: Tensor, enc: StubEncoder, proj: ProjectionLayer) -> ModalitySequence:
    """Project encoded patches into the token space; one token per patch."""
    return ModalitySequence(modality="image", embeddings=proj.apply(enc.encode(raw)))


def encode_video(frames: list[Tensor], enc: StubEncoder, proj: ProjectionLayer) -> ModalitySequence:
    """Mean of the 8 encoded frames per patch position, then projection."""
    if len(frames) != VIDEO_FRAMES:
        raise ConfigError(f"video needs exactly {VIDEO_FRAMES} frames, got {len(frames)}")
    shapes = {f.shape for f in frames}
    if len(shapes) != 1:
        raise ShapeError(f"video frames disagree on shape: {sorted(shapes)}")
    total = enc.encode(frames[0])
    for frame in frames[1:]:
        total = ag.add(total, enc.encode(frame))
    mean = ag.scale(total, 1.0 / VIDEO_FRAMES)
    return ModalitySequence(modality="video", embeddings=proj.apply(mean))


def embed_text(token_ids: np.ndarray, embedding: Tensor) -> ModalitySequence:
    """Row-gather from the embedding table."""
    ids = np.asarray(token_ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= embedding.shape[0]):
        raise ShapeError(f"token id out of range for vocab {embedding.shape[0]}")
    return ModalitySequence(modality="text", embeddings=ag.row_gather(embedding, ids))


def assemble_input(seqs: list[ModalitySequence]) -> tuple[Tensor, list[str]]:
    """Concatenate sequences in order; labels carry per-token modality."""
    if not seqs:
        raise ShapeError("assemble_input: empty sequence list")
    widths = {s.embeddings.shape[1] for s in seqs}
    if len(widths) != 1:
        raise ShapeError(f"assemble_input width mismatch: {sorted(widths)}")
    embeds = ag.concat_rows([s.embeddings for s in seqs])
    labels: list[str] = []
    for s in seqs:
        labels.extend([s.modality] * len(s))
    return embeds, labels


# ---------------------------------------------------------------------------
# the full connector bank
# ---------------------------------------------------------------------------

@dataclass
class ConnectorConfig:
    """Dimensions of the stub encoders and distillation front-ends."""

    d_model: int = 64
    num_queries: int = 32
    qformer_heads: int = 4
    image_raw_dim: int = 24
    image_enc_dim: int = 32
    image_patches: int = 4
    audio_raw_dim: int = 20
    audio_enc_dim: int = 32
    speech_raw_dim: int = 16
    speech_enc_dim: int = 32

    def __post_init__(self):
        for name in ("image_enc_dim", "audio_enc_dim", "speech_enc_dim"):
            if getattr(self, name) % self.qformer_heads != 0:
                raise ConfigError(f"{name} must be divisible by qformer_heads")


class ConnectorBank:
    """All modality connectors for one model instance.

    Video shares the visual encoder and projection with images; audio and
    speech keep separate encoders and separate distillation weights.
    """

    def __init__(self, cfg: ConnectorConfig, seed: int = 0, dtype=np.float32):
        self.cfg = cfg
        d = cfg.d_model
        self.image_encoder = StubEncoder.create("image", cfg.image_raw_dim, cfg.image_enc_dim, seed, dtype)
        self.audio_encoder = StubEncoder.create("audio", cfg.audio_raw_dim, cfg.audio_enc_dim, seed, dtype)
        self.speech_encoder = StubEncoder.create("speech", cfg.speech_raw_dim, cfg.speech_enc_dim, seed, dtype)
        self.image_proj = ProjectionLayer(
            weight=init_weight(seed, "connectors.image.proj.weight", (cfg.image_enc_dim, d), dtype),
            bias=init_zeros((d,), dtype),
        )
        self.audio_qformer = build_qformer(
            "connectors.audio.qformer", cfg.num_queries, cfg.audio_enc_dim, cfg.audio_enc_dim, d,
            cfg.qformer_heads, seed, dtype,
        )
        self.speech_qformer = build_qformer(
            "connectors.speech.qformer", cfg.num_queries, cfg.speech_enc_dim, cfg.speech_enc_dim, d,
            cfg.qformer_heads, seed, dtype,
        )

    def encode(self, modality: str, raw) -> ModalitySequence:
        if modality == "image":
            return encode_image(raw, self.image_encoder, self.image_proj)
        if modality == "video":
            return encode_video(raw, self.image_encoder, self.image_proj)
        if modality == "audio":
            return qformer_forward(self.audio_encoder.encode(raw), self.audio_qformer, "audio")
        if modality == "speech":
            return qformer_forward(self.speech_encoder.encode(raw), self.speech_qformer, "speech")
        raise ConfigError(f"connector cannot encode modality {modality!r}")

    # -- parameter registry --------------------------------------------------

    def frozen_params(self) -> dict[str, Tensor]:
        return {
            "connectors.image.encoder.weight": self.image_encoder.weight,
            "connectors.audio.encoder.weight": self.audio_encoder.weight,
            "connectors.speech.encoder.weight": self.speech_encoder.weight,
        }

    def projection_params(self, modality: str | None = None) -> dict[str, Tensor]:
        groups = {
            "image": self.image_proj.params("connectors.image.proj"),
            "audio": self.audio_qformer.out_proj.params("connectors.audio.qformer.out_proj"),
            "speech": self.speech_qformer.out_proj.params("connectors.speech.qformer.out_proj"),
        }
        groups["video"] = groups["image"]
        if modality is not None:
            return dict(groups[modality])
        out: dict[str, Tensor] = {}
        for m in ("image", "audio", "speech"):
            out.update(groups[m])
        return out

    def qformer_params(self, modality: str | None = None) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for m, qf in (("audio", self.audio_qformer), ("speech", self.speech_qformer)):
            if modality is not None and m != modality:
                continue
            prefix = f"connectors.{m}.qformer"
            out[f"{prefix}.queries"] = qf.queries
            for i, layer in enumerate(qf.layers):
                lp = f"{prefix}.layers.{i}"
                out[f"{lp}.ln_self.gain"] = layer.ln_self_g
                out[f"{lp}.ln_self.bias"] = layer.ln_self_b
                out[f"{lp}.self.wq"] = layer.self_wq
                out[f"{lp}.self.wk"] = layer.self_wk
                out[f"{lp}.self.wv"] = layer.self_wv
                out[f"{lp}.self.wo"] = layer.self_wo
                out[f"{lp}.ln_cross.gain"] = layer.ln_cross_g
                out[f"{lp}.ln_cross.bias"] = layer.ln_cross_b
                out[f"{lp}.cross.wq"] = layer.cross_wq
                out[f"{lp}.cross.wk"] = layer.cross_wk
                out[f"{lp}.cross.wv"] = layer.cross_wv
                out[f"{lp}.cross.wo"] = layer.cross_wo
        return out

    def params(self) -> dict[str, Tensor]:
        out = self.frozen_params()
        out.update(self.projection_params())
        out.update(self.qformer_params())
        return out

    def trainable_params(self) -> dict[str, Tensor]:
        out = self.projection_params()
        out.update(self.qformer_params())
        return out
