"""Synthetic multimodal tasks.

Each sample carries one or more raw-feature segments plus a text prompt
and an answer; the answer tokens are a deterministic function of the
first segment's features (a fixed random linear readout picks a class,
and each class owns a fixed answer template). Everything is reproducible
from (task, sample index).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .connectors import MODALITIES, VIDEO_FRAMES, ConnectorConfig
from .errors import ConfigError

# answer tokens start above the prompt id range so decodes are unambiguous
_ANSWER_TOKEN_BASE = 16


@dataclass
class Segment:
    modality: str
    seed: int
    shape: tuple[int, ...]

    def features(self) -> np.ndarray:
        rng = np.random.default_rng(self.seed)
        return rng.standard_normal(self.shape)


@dataclass
class Sample:
    segments: list[Segment]
    prompt_ids: np.ndarray
    answer_ids: np.ndarray

    def to_json(self) -> str:
        return json.dumps(
            {
                "segments": [
                    {"modality": s.modality, "seed": s.seed, "shape": list(s.shape)}
                    for s in self.segments
                ],
                "prompt_ids": self.prompt_ids.tolist(),
                "answer_ids": self.answer_ids.tolist(),
            }
        )

    @classmethod
    def from_json(cls, line: str) -> "Sample":
        obj = json.loads(line)
        return cls(
            segments=[
                Segment(modality=s["modality"], seed=s["seed"], shape=tuple(s["shape"]))
                for s in obj["segments"]
            ],
            prompt_ids=np.asarray(obj["prompt_ids"], dtype=np.int64),
            answer_ids=np.asarray(obj["answer_ids"], dtype=np.int64),
        )


@dataclass
class SyntheticTask:
    """A deterministic toy dataset over a fixed modality mix."""

    name: str
    mixes: list[tuple[str, ...]]
    conn: ConnectorConfig
    vocab: int = 256
    n_classes: int = 4
    answer_len: int = 3
    n_samples: int = 64
    n_eval: int = 16
    seed: int = 0
    _readouts: dict[str, np.ndarray] = field(default_factory=dict, repr=False)

    def __post_init__(self):
        if not self.mixes:
            raise ConfigError(f"task {self.name!r} has no modality mixes")
        for mix in self.mixes:
            for m in mix:
                if m not in MODALITIES or m == "text":
                    raise ConfigError(f"task {self.name!r} has invalid mix entry {m!r}")
        if _ANSWER_TOKEN_BASE + self.n_classes * self.answer_len > self.vocab:
            raise ConfigError("vocab too small for the answer token book")
        rng = np.random.default_rng([self.seed, 0xBEEF])
        self.prompt_ids = rng.integers(2, _ANSWER_TOKEN_BASE, size=4, dtype=np.int64)
        # caption-style answers: a shared task trigger token, then
        # class-specific tokens
        self.answer_book = rng.integers(
            _ANSWER_TOKEN_BASE, self.vocab, size=(self.n_classes, self.answer_len), dtype=np.int64
        )
        if self.answer_len > 1:
            self.answer_book[:, 0] = self.answer_book[0, 0]

    # -- target function -----------------------------------------------------

    def _raw_dim(self, modality: str) -> int:
        return {
            "image": self.conn.image_raw_dim,
            "video": self.conn.image_raw_dim,
            "audio": self.conn.audio_raw_dim,
            "speech": self.conn.speech_raw_dim,
        }[modality]

    def readout(self, modality: str) -> np.ndarray:
        if modality not in self._readouts:
            rng = np.random.default_rng([self.seed, 0xC1A55, MODALITIES.index(modality)])
            self._readouts[modality] = rng.standard_normal((self.n_classes, self._raw_dim(modality)))
        return self._readouts[modality]

    def target_class(self, segment: Segment) -> int:
        """Class of a segment: argmax of a fixed linear readout over the
        patch-mean features (frame- and patch-mean for video)."""
        feats = segment.features()
        pooled = feats.reshape(-1, feats.shape[-1]).mean(axis=0)
        return int(np.argmax(self.readout(segment.modality) @ pooled))

    def _segment_shape(self, modality: str, rng: np.random.Generator) -> tuple[int, ...]:
        if modality == "image":
            return (self.conn.image_patches, self.conn.image_raw_dim)
        if modality == "video":
            return (VIDEO_FRAMES, self.conn.image_patches, self.conn.image_raw_dim)
        if modality == "audio":
            return (int(rng.integers(2, 7)), self.conn.audio_raw_dim)
        if modality == "speech":
            return (int(rng.integers(2, 7)), self.conn.speech_raw_dim)
        raise ConfigError(f"no raw segment for modality {modality!r}")

    # -- sample generation ----------------------------------------------------

    def sample(self, index: int) -> Sample:
        rng = np.random.default_rng([self.seed, 0x5A0F1E, index])
        mix = self.mixes[index % len(self.mixes)]
        segments = [
            Segment(
                modality=m,
                seed=int(rng.integers(0, 2**31 - 1)),
                shape=self._segment_shape(m, rng),
            )
            for m in mix
        ]
        cls = self.target_class(segments[0])
        return Sample(
            segments=segments,
            prompt_ids=self.prompt_ids.copy(),
            answer_ids=self.answer_book[cls].copy(),
        )

    def train_indices(self) -> range:
        return range(self.n_samples)

    def eval_indices(self) -> range:
        return range(self.n_samples, self.n_samples + self.n_eval)


def generate_synthetic_batch(task: SyntheticTask, batch: int, seed: int) -> list[Sample]:
    """Draw a deterministic batch of training samples for (task, seed)."""
    rng = np.random.default_rng([task.seed, 0xBA7C4, seed])
    idxs = rng.integers(0, task.n_samples, size=batch)
    return [task.sample(int(i)) for i in idxs]


def dump_samples(samples: list[Sample]) -> str:
    return "\n".join(s.to_json() for s in samples) + "\n"


def load_samples(text: str) -> list[Sample]:
    return [Sample.from_json(line) for line in text.splitlines() if line.strip()]
