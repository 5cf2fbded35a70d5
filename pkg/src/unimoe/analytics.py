"""Routing analytics: expert loads, modality preferences, token pathways.

A RoutingLog accumulates (layer, token, modality, experts, gates) records
over an evaluation pass; the analyses are pure functions of the sorted
log, so they are independent of insertion order.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import ConfigError, NumericError, ShapeError

SCHEMA_VERSION = 1

LOADS_HEADER = ["layer", "expert", "fraction"]
PREFS_HEADER = ["layer", "expert", "modality", "fraction"]
PATHWAYS_HEADER = ["rank", "token", "layer", "expert", "is_top2"]


@dataclass
class RoutingRecord:
    layer: int
    token: int
    modality: str
    experts: tuple[int, ...]
    gates: tuple[float, ...]


@dataclass
class RoutingLog:
    """Append-only routing records from one evaluation pass."""

    num_experts: int
    records: list[RoutingRecord] = field(default_factory=list)

    def append(self, record: RoutingRecord) -> None:
        self.records.append(record)

    def add_decision(self, layer: int, decision, labels: list[str], token_offset: int = 0) -> None:
        if decision.num_tokens != len(labels):
            raise ShapeError(f"{decision.num_tokens} routed tokens vs {len(labels)} labels")
        for t in range(decision.num_tokens):
            self.records.append(
                RoutingRecord(
                    layer=layer,
                    token=token_offset + t,
                    modality=labels[t],
                    experts=tuple(int(e) for e in decision.indices[t]),
                    gates=tuple(float(g) for g in decision.gates[t]),
                )
            )

    def sorted_records(self) -> list[RoutingRecord]:
        return sorted(self.records, key=lambda r: (r.layer, r.token))

    def layers(self) -> list[int]:
        return sorted({r.layer for r in self.records})


def expert_load_distribution(log: RoutingLog) -> dict[int, np.ndarray]:
    """Fraction of assignment slots per expert, per layer; rows sum to 1."""
    if not log.records:
        raise ConfigError("expert_load_distribution over an empty log")
    counts: dict[int, np.ndarray] = {layer: np.zeros(log.num_experts) for layer in log.layers()}
    for r in log.sorted_records():
        for e in r.experts:
            counts[r.layer][e] += 1
    return {layer: c / c.sum() for layer, c in counts.items()}


def modality_preference(log: RoutingLog) -> dict[tuple[int, int], Optional[dict[str, float]]]:
    """Distribution over modalities of each expert's assigned slots.

    Experts with zero slots map to None (an explicit empty marker) rather
    than a NaN-filled row.
    """
    if not log.records:
        raise ConfigError("modality_preference over an empty log")
    counts: dict[tuple[int, int], dict[str, int]] = {}
    for layer in log.layers():
        for e in range(log.num_experts):
            counts[(layer, e)] = {}
    for r in log.sorted_records():
        for e in r.experts:
            slot_counts = counts[(r.layer, e)]
            slot_counts[r.modality] = slot_counts.get(r.modality, 0) + 1
    out: dict[tuple[int, int], Optional[dict[str, float]]] = {}
    for key, slot_counts in counts.items():
        total = sum(slot_counts.values())
        if total == 0:
            out[key] = None
        else:
            out[key] = {m: c / total for m, c in sorted(slot_counts.items())}
    return out


@dataclass
class PathwayMatrix:
    """Per-token concatenated multi-hot expert selections across MoE layers,
    plus each token's highest-gate expert per layer for export."""

    data: np.ndarray  # (tokens, moe_layers * num_experts)
    top_experts: np.ndarray  # (tokens, moe_layers), slot-0 expert ids
    layers: list[int]
    num_experts: int


def build_pathway_matrix(log: RoutingLog) -> PathwayMatrix:
    if not log.records:
        raise ConfigError("build_pathway_matrix over an empty log")
    layers = log.layers()
    tokens = sorted({r.token for r in log.records})
    token_pos = {t: i for i, t in enumerate(tokens)}
    layer_pos = {l: i for i, l in enumerate(layers)}
    m = log.num_experts
    data = np.zeros((len(tokens), len(layers) * m), dtype=np.float64)
    top = np.zeros((len(tokens), len(layers)), dtype=np.int64)
    seen = np.zeros((len(tokens), len(layers)), dtype=bool)
    for r in log.sorted_records():
        ti, li = token_pos[r.token], layer_pos[r.layer]
        for e in r.experts:
            data[ti, li * m + e] = 1.0
        top[ti, li] = r.experts[0]
        seen[ti, li] = True
    if not seen.all():
        raise ShapeError("pathway matrix is missing (token, layer) records")
    return PathwayMatrix(data=data, top_experts=top, layers=layers, num_experts=m)


def power_iteration_pc1(x: np.ndarray, iters: int = 1000, tol: float = 1e-13) -> np.ndarray:
    """First principal component of a centered matrix by power iteration.

    Deterministic: starts from the normalized all-ones vector and iterates
    v <- X^T (X v) until the direction stabilizes.
    """
    dim = x.shape[1]
    v = np.ones(dim, dtype=np.float64) / np.sqrt(dim)
    for _ in range(iters):
        w = x.T @ (x @ v)
        norm = np.linalg.norm(w)
        if norm == 0.0:
            return v
        w /= norm
        if abs(1.0 - abs(w @ v)) < tol:
            return w
        v = w
    return v


@dataclass
class PathwayEntry:
    rank: int
    token: int
    projection: float
    experts: list[tuple[int, int]]  # (layer, slot-0 expert)


def top_pathways(matrix: PathwayMatrix, n: int = 10) -> list[PathwayEntry]:
    """Rank tokens by |projection| onto the first principal component.

    A zero-variance matrix (identical pathways) ranks by token order.
    Returns the per-layer highest-gate expert sequence for each of the top
    n tokens.
    """
    tokens = matrix.data.shape[0]
    if n > tokens:
        raise ConfigError(f"asked for {n} pathways from {tokens} tokens")
    centered = matrix.data - matrix.data.mean(axis=0, keepdims=True)
    pc1 = power_iteration_pc1(centered)
    scores = np.abs(centered @ pc1)
    order = np.argsort(-scores, kind="stable")[:n]
    entries = []
    for rank, ti in enumerate(order):
        entries.append(
            PathwayEntry(
                rank=rank,
                token=int(ti),
                projection=float(scores[ti]),
                experts=[(layer, int(matrix.top_experts[ti, li])) for li, layer in enumerate(matrix.layers)],
            )
        )
    return entries


# ---------------------------------------------------------------------------
# export
# ---------------------------------------------------------------------------

@dataclass
class AnalyticsBundle:
    loads: Optional[dict[int, np.ndarray]] = None
    prefs: Optional[dict[tuple[int, int], Optional[dict[str, float]]]] = None
    pathways: Optional[list[PathwayEntry]] = None
    run_id: str = "run"
    config_hash: str = ""


def _write_csv(path: Path, header: list[str], rows: list[list]) -> None:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    writer.writerows(rows)
    path.write_text(buf.getvalue())


def export_analytics(products: AnalyticsBundle, out_dir: str | Path) -> dict[str, Path]:
    """Write loads/prefs/pathways CSVs plus the JSON manifest.

    Floats are written with repr (shortest round-trip), so parsing the CSV
    back recovers identical values. Empty products produce only the
    manifest.
    """
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise ConfigError(f"cannot create analytics dir {out}: {exc}") from exc
    written: dict[str, Path] = {}
    if products.loads is not None:
        rows = []
        for layer in sorted(products.loads):
            for e, frac in enumerate(products.loads[layer]):
                rows.append([layer, e, repr(float(frac))])
        path = out / "loads.csv"
        _write_csv(path, LOADS_HEADER, rows)
        written["loads"] = path
    if products.prefs is not None:
        rows = []
        for (layer, e), dist in sorted(products.prefs.items()):
            if dist is None:
                continue
            for modality, frac in sorted(dist.items()):
                rows.append([layer, e, modality, repr(float(frac))])
        path = out / "prefs.csv"
        _write_csv(path, PREFS_HEADER, rows)
        written["prefs"] = path
    if products.pathways is not None:
        rows = []
        for entry in products.pathways:
            for layer, expert in entry.experts:
                rows.append([entry.rank, entry.token, layer, expert, int(entry.rank < 2)])
        path = out / "pathways.csv"
        _write_csv(path, PATHWAYS_HEADER, rows)
        written["pathways"] = path
    manifest = {
        "run_id": products.run_id,
        "config_hash": products.config_hash,
        "schema_version": SCHEMA_VERSION,
    }
    manifest_path = out / "manifest.json"
    manifest_path.write_text(json.dumps(manifest, indent=2) + "\n")
    written["manifest"] = manifest_path
    return written


def collect_routing_log(bundle, task, num_samples: int) -> RoutingLog:
    """Run eval-split samples through the model and log every decision."""
    log = RoutingLog(num_experts=bundle.llm.cfg.experts)
    offset = 0
    for i in range(num_samples):
        sample = task.sample(task.n_samples + task.n_eval + i)
        out, labels, _, _ = bundle.forward_sample(sample)
        for layer, decision in out.decisions:
            log.add_decision(layer, decision, labels, token_offset=offset)
        offset += len(labels)
    if not log.records:
        raise NumericError("model produced no routing decisions (no MoE layers?)")
    return log
