"""Collection and aggregation of gate scores into score records.

A score record holds, per scored convolution, the arithmetic mean and the
standard deviation of the gate vector over every sample seen, plus
per-block and per-stage aggregates used when choosing stage-uniform
targets.  The record is the file contract between scoring and planning:
third-party trainers can produce the same JSON.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field

import numpy as np

from .bundle import ModelBundle, bundle_fingerprint
from .errors import PrunekitError
from .graph import ArchitectureGraph
from .network import GradTape, Network


@dataclass
class LayerScore:
    layer_id: str          # the conv whose output channels are scored
    gate_id: str
    channels: int
    mean: np.ndarray       # float64, entries in (0, 1)
    std: np.ndarray
    samples: int


@dataclass
class ScoreRecord:
    layers: list[LayerScore]
    blocks: list[dict] = field(default_factory=list)
    stages: list[dict] = field(default_factory=list)
    metadata: dict = field(default_factory=dict)

    def layer(self, layer_id: str) -> LayerScore:
        for ls in self.layers:
            if ls.layer_id == layer_id:
                return ls
        raise KeyError(layer_id)

    def has_layer(self, layer_id: str) -> bool:
        return any(ls.layer_id == layer_id for ls in self.layers)

    def to_dict(self) -> dict:
        return {
            "layers": [{
                "layer_id": ls.layer_id, "gate_id": ls.gate_id,
                "channels": ls.channels, "mean": ls.mean.tolist(),
                "std": ls.std.tolist(), "samples": ls.samples,
            } for ls in self.layers],
            "blocks": self.blocks,
            "stages": self.stages,
            "metadata": self.metadata,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ScoreRecord":
        layers = [LayerScore(e["layer_id"], e["gate_id"], e["channels"],
                             np.asarray(e["mean"], dtype=np.float64),
                             np.asarray(e["std"], dtype=np.float64),
                             e["samples"])
                  for e in d["layers"]]
        return cls(layers, list(d.get("blocks", [])), list(d.get("stages", [])),
                   dict(d.get("metadata", {})))

    def save(self, path: str) -> None:
        with open(path, "w") as f:
            json.dump(self.to_dict(), f, indent=1)

    @classmethod
    def load(cls, path: str) -> "ScoreRecord":
        with open(path) as f:
            return cls.from_dict(json.load(f))

    def fingerprint(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()


def scored_conv_for_gate(graph: ArchitectureGraph, gate_id: str) -> str:
    """Nearest convolution upstream of a gate: the layer whose channels it scores."""
    nid = gate_id
    while True:
        prods = graph.producers(nid)
        if not prods:
            raise PrunekitError(f"gate '{gate_id}' has no convolution upstream")
        nid = prods[0]
        if graph.node(nid).kind == "conv":
            return nid


def collect_scores(bundle: ModelBundle, batches, max_batches: int | None = None,
                   training: bool = False) -> ScoreRecord:
    """Run eval-mode forward passes and average each gate's outputs.

    ``batches`` yields (x, y) pairs; only x is used.  Per-layer accumulators
    are merged in batch order, so a fixed data order gives a deterministic
    record.
    """
    graph = bundle.graph
    gates = graph.nodes_of_kind("gate")
    if not gates:
        raise PrunekitError(
            "model has no gate nodes to score; build it with gates enabled")
    net = Network(graph)
    gate_to_conv = {g.id: scored_conv_for_gate(graph, g.id) for g in gates}

    acc = {g.id: {"sum": np.zeros(g.attrs["channels"], dtype=np.float64),
                  "sumsq": np.zeros(g.attrs["channels"], dtype=np.float64),
                  "n": 0} for g in gates}
    seen = 0
    for bi, (x, _y) in enumerate(batches):
        if max_batches is not None and bi >= max_batches:
            break
        tape = GradTape()
        net.forward(x, training=training, tape=tape)
        for g in gates:
            s = tape.caches[g.id][4].astype(np.float64)   # per-sample gate vectors
            acc[g.id]["sum"] += s.sum(axis=0)
            acc[g.id]["sumsq"] += (s * s).sum(axis=0)
            acc[g.id]["n"] += s.shape[0]
        seen += x.shape[0]
    if seen == 0:
        raise PrunekitError("score collection saw no data")

    layers = []
    for g in gates:
        a = acc[g.id]
        mean = a["sum"] / a["n"]
        if not ((mean > 0.0) & (mean < 1.0)).all():
            raise PrunekitError(
                f"gate '{g.id}': mean scores left the open interval (0,1); "
                "the sigmoid saturated, which happens when activations are "
                "far outside the trained operating range (e.g. scoring an "
                "untrained or diverged model in eval mode)")
        var = np.maximum(a["sumsq"] / a["n"] - mean * mean, 0.0)
        layers.append(LayerScore(gate_to_conv[g.id], g.id, g.attrs["channels"],
                                 mean, np.sqrt(var), a["n"]))

    record = ScoreRecord(layers, metadata={
        "model": bundle_fingerprint(bundle),
        "samples": seen,
        "mode": "train" if training else "eval",
    })
    _aggregate_blocks(record, graph)
    return record


def _aggregate_blocks(record: ScoreRecord, graph: ArchitectureGraph) -> None:
    by_layer = {ls.layer_id: ls for ls in record.layers}
    for b in graph.blocks:
        ls = None
        for conv_id in (b.last_conv, b.middle_conv, b.first_conv):
            if conv_id is not None and conv_id in by_layer:
                ls = by_layer[conv_id]
                break
        if ls is None:
            continue
        record.blocks.append({
            "block_id": b.id, "stage": b.stage, "layer_id": ls.layer_id,
            "mean": float(ls.mean.mean()), "min": float(ls.mean.min()),
            "max": float(ls.mean.max()), "mean_std": float(ls.std.mean()),
        })
    for st in graph.stages:
        rows = [r for r in record.blocks if r["stage"] == st.index]
        if not rows:
            continue
        record.stages.append({
            "index": st.index, "width": st.width, "blocks": len(rows),
            "mean": float(np.mean([r["mean"] for r in rows])),
            "min": float(min(r["min"] for r in rows)),
            "max": float(max(r["max"] for r in rows)),
            "mean_std": float(np.mean([r["mean_std"] for r in rows])),
        })


def attribute_scored_channels(bundle: ModelBundle, x_normal: np.ndarray,
                              x_muted: np.ndarray, layer_id: str | None = None):
    """Split a scored layer's channels into signal-driven and noise-driven.

    Runs the first scored convolution on a probe batch and on the same batch
    with the planted signal muted, measures the per-channel rise in mean
    absolute activation, and median-splits: channels whose activation drops
    most when the signal disappears are the signal-carrying half.  Returns
    (signal_indices, noise_indices).
    """
    graph = bundle.graph
    gates = graph.nodes_of_kind("gate")
    if not gates:
        raise PrunekitError("model has no gate nodes")
    if layer_id is None:
        layer_id = scored_conv_for_gate(graph, gates[0].id)
    net = Network(graph)

    def channel_energy(x):
        tape = GradTape()
        net.forward(x, training=False, tape=tape)
        return np.abs(tape.outputs[layer_id]).mean(axis=(0, 2, 3)).astype(np.float64)

    gap = channel_energy(x_normal) - channel_energy(x_muted)
    order = np.argsort(-gap, kind="stable")
    half = len(order) // 2
    signal = np.sort(order[:half])
    noise = np.sort(order[half:])
    return signal, noise
