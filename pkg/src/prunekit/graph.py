"""Architecture graph: an ordered DAG of layer nodes with block/stage annotations.

The graph is the object every other module operates on: builders emit it,
the network executor walks it, the planner reads its annotations, the
rewriter produces a new one, and the accounting module counts it.  Graphs
are treated as immutable after construction; transformations copy.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Iterable, Optional

import numpy as np

from .errors import GraphValidationError
from .gate import hidden_width
from .ops import conv_output_size

KINDS = (
    "conv", "batchnorm", "relu", "maxpool", "globalavgpool",
    "fullyconnected", "gate", "add", "softmax",
)

# kinds whose output channel set is exactly their input channel set
PASSTHROUGH_KINDS = ("batchnorm", "relu", "maxpool", "globalavgpool", "gate", "softmax")


@dataclass
class LayerNode:
    id: str
    kind: str
    attrs: dict[str, Any] = field(default_factory=dict)
    params: dict[str, np.ndarray] = field(default_factory=dict)

    def copy(self) -> "LayerNode":
        return LayerNode(self.id, self.kind, dict(self.attrs),
                         {k: v.copy() for k, v in self.params.items()})


@dataclass
class BlockInfo:
    """A residual block: member nodes plus the handles pruning needs."""
    id: str
    kind: str                     # basic | bottleneck | preact-bottleneck
    stage: int
    node_ids: list[str]
    first_conv: str
    middle_conv: Optional[str]    # bottlenecks only
    last_conv: str
    shortcut_conv: Optional[str]  # None for identity shortcuts
    gate_id: Optional[str] = None

    def copy(self) -> "BlockInfo":
        return BlockInfo(self.id, self.kind, self.stage, list(self.node_ids),
                         self.first_conv, self.middle_conv, self.last_conv,
                         self.shortcut_conv, self.gate_id)


@dataclass
class StageInfo:
    """Blocks sharing one input/output width."""
    index: int
    width: int
    block_ids: list[str]

    def copy(self) -> "StageInfo":
        return StageInfo(self.index, self.width, list(self.block_ids))


class ArchitectureGraph:
    def __init__(self, nodes: Iterable[LayerNode], edges: Iterable[tuple[str, str]],
                 input_shape: tuple[int, int, int], blocks=None, stages=None,
                 arch: str = "custom"):
        self.nodes: list[LayerNode] = list(nodes)
        self.edges: list[tuple[str, str]] = [tuple(e) for e in edges]
        self.input_shape = tuple(input_shape)   # (channels, height, width)
        self.blocks: list[BlockInfo] = list(blocks or [])
        self.stages: list[StageInfo] = list(stages or [])
        self.arch = arch
        self._index = {n.id: n for n in self.nodes}

    # -- structure access ---------------------------------------------------

    def node(self, node_id: str) -> LayerNode:
        return self._index[node_id]

    def has_node(self, node_id: str) -> bool:
        return node_id in self._index

    def producers(self, node_id: str) -> list[str]:
        return [s for s, d in self.edges if d == node_id]

    def consumers(self, node_id: str) -> list[str]:
        return [d for s, d in self.edges if s == node_id]

    def entry_nodes(self) -> list[str]:
        have_in = {d for _, d in self.edges}
        return [n.id for n in self.nodes if n.id not in have_in]

    def nodes_of_kind(self, kind: str) -> list[LayerNode]:
        return [n for n in self.nodes if n.kind == kind]

    def block(self, block_id: str) -> BlockInfo:
        for b in self.blocks:
            if b.id == block_id:
                return b
        raise KeyError(block_id)

    def topo_order(self) -> list[str]:
        """Kahn's algorithm, stable w.r.t. node declaration order."""
        indeg = {n.id: 0 for n in self.nodes}
        for _, d in self.edges:
            indeg[d] += 1
        order, ready = [], [n.id for n in self.nodes if indeg[n.id] == 0]
        while ready:
            nid = ready.pop(0)
            order.append(nid)
            for c in self.consumers(nid):
                indeg[c] -= 1
                if indeg[c] == 0:
                    ready.append(c)
        if len(order) != len(self.nodes):
            raise GraphValidationError(["graph contains a cycle"])
        return order

    def copy(self) -> "ArchitectureGraph":
        return ArchitectureGraph(
            [n.copy() for n in self.nodes], list(self.edges), self.input_shape,
            [b.copy() for b in self.blocks], [s.copy() for s in self.stages], self.arch)

    # -- shape inference ----------------------------------------------------

    def infer_shapes(self, input_shape=None) -> dict[str, tuple[int, int, int]]:
        """Per-node output (channels, height, width) for a single sample."""
        shape_in = tuple(input_shape or self.input_shape)
        shapes: dict[str, tuple[int, int, int]] = {}
        for nid in self.topo_order():
            node = self.node(nid)
            prods = self.producers(nid)
            if not prods:
                src = shape_in
            else:
                src = shapes[prods[0]]
            c, h, w = src
            k = node.kind
            if k == "conv":
                kh, kw = node.attrs["kernel"]
                s, p = node.attrs["stride"], node.attrs["padding"]
                shapes[nid] = (node.attrs["out_channels"],
                               conv_output_size(h, kh, s, p),
                               conv_output_size(w, kw, s, p))
            elif k == "maxpool":
                kk, s = node.attrs["kernel"], node.attrs["stride"]
                shapes[nid] = (c, conv_output_size(h, kk, s, 0), conv_output_size(w, kk, s, 0))
            elif k == "globalavgpool":
                shapes[nid] = (c, 1, 1)
            elif k == "fullyconnected":
                shapes[nid] = (node.attrs["out_features"], 1, 1)
            elif k == "add":
                shapes[nid] = src
            else:
                shapes[nid] = (c, h, w)
        return shapes

    # -- validation ----------------------------------------------------------

    def validate(self) -> list[str]:
        """Every invariant violation, as human-readable strings; [] means ok."""
        v: list[str] = []
        ids = [n.id for n in self.nodes]
        if len(set(ids)) != len(ids):
            v.append("duplicate node ids")
            return v
        known = set(ids)
        for s, d in self.edges:
            if s not in known or d not in known:
                v.append(f"edge ({s} -> {d}) references unknown node")
        if v:
            return v

        entries = self.entry_nodes()
        if len(entries) != 1:
            v.append(f"expected exactly one entry node, found {entries}")
        try:
            self.topo_order()
        except GraphValidationError:
            v.append("graph contains a cycle")
            return v

        sinks = [n for n in self.nodes if n.kind == "softmax"]
        if len(sinks) != 1:
            v.append(f"expected exactly one softmax sink, found {len(sinks)}")
        elif self.consumers(sinks[0].id):
            v.append(f"softmax node '{sinks[0].id}' is not a sink")

        for n in self.nodes:
            if n.kind not in KINDS:
                v.append(f"node '{n.id}': unknown kind '{n.kind}'")
            np_in = len(self.producers(n.id))
            if n.kind == "add" and np_in != 2:
                v.append(f"add node '{n.id}' has {np_in} inputs, needs exactly 2")
            if n.kind != "add" and np_in > 1:
                v.append(f"node '{n.id}' has {np_in} inputs, at most 1 allowed")

        try:
            shapes = self.infer_shapes()
        except Exception as exc:  # shape arithmetic failure is itself a violation
            v.append(f"shape inference failed: {exc}")
            return v

        def in_shape(nid):
            prods = self.producers(nid)
            return shapes[prods[0]] if prods else self.input_shape

        for n in self.nodes:
            c, h, w = in_shape(n.id)
            if n.kind == "conv":
                if n.attrs["in_channels"] != c:
                    v.append(f"conv '{n.id}': declares {n.attrs['in_channels']} input "
                             f"channels but receives {c}")
                if n.attrs["out_channels"] < 1 or n.attrs["in_channels"] < 1:
                    v.append(f"conv '{n.id}': channel widths must be positive")
                wt = n.params.get("weight")
                if wt is not None:
                    expect = (n.attrs["out_channels"], n.attrs["in_channels"],
                              *n.attrs["kernel"])
                    if wt.shape != expect:
                        v.append(f"conv '{n.id}': weight shape {wt.shape} != {expect}")
            elif n.kind == "batchnorm":
                if n.attrs["channels"] != c:
                    v.append(f"batchnorm '{n.id}': declares {n.attrs['channels']} "
                             f"channels but receives {c}")
                for pname in ("gamma", "beta", "running_mean", "running_var"):
                    p = n.params.get(pname)
                    if p is not None and p.shape != (n.attrs["channels"],):
                        v.append(f"batchnorm '{n.id}': {pname} shape {p.shape} != "
                                 f"({n.attrs['channels']},)")
            elif n.kind == "gate":
                if n.attrs["channels"] != c:
                    v.append(f"gate '{n.id}': declares {n.attrs['channels']} channels "
                             f"but receives {c}")
                hid = hidden_width(n.attrs["channels"], n.attrs["reduction"])
                if n.attrs.get("hidden", hid) != hid:
                    v.append(f"gate '{n.id}': hidden width {n.attrs.get('hidden')} != "
                             f"max(1, C // r) = {hid}")
                w1, w2 = n.params.get("w1"), n.params.get("w2")
                if w1 is not None and w1.shape != (hid, n.attrs["channels"]):
                    v.append(f"gate '{n.id}': w1 shape {w1.shape} != ({hid}, {n.attrs['channels']})")
                if w2 is not None and w2.shape != (n.attrs["channels"], hid):
                    v.append(f"gate '{n.id}': w2 shape {w2.shape} != ({n.attrs['channels']}, {hid})")
            elif n.kind == "fullyconnected":
                if (c, h, w) != (n.attrs["in_features"], 1, 1):
                    v.append(f"fullyconnected '{n.id}': expects ({n.attrs['in_features']},1,1) "
                             f"input, receives ({c},{h},{w})")
            elif n.kind == "add":
                prods = self.producers(n.id)
                if len(prods) == 2 and shapes[prods[0]] != shapes[prods[1]]:
                    v.append(f"add '{n.id}': input shapes differ "
                             f"{shapes[prods[0]]} vs {shapes[prods[1]]}")

        v.extend(self._validate_annotations(shapes))
        return v

    def _validate_annotations(self, shapes) -> list[str]:
        v = []
        block_ids = {b.id for b in self.blocks}
        for b in self.blocks:
            for nid in b.node_ids:
                if not self.has_node(nid):
                    v.append(f"block '{b.id}': member node '{nid}' does not exist")
        for st in self.stages:
            for bid in st.block_ids:
                if bid not in block_ids:
                    v.append(f"stage {st.index}: block '{bid}' does not exist")
        if v:
            return v
        prev_width = None
        for st in sorted(self.stages, key=lambda s: s.index):
            for i, bid in enumerate(st.block_ids):
                b = self.block(bid)
                out_w = shapes[b.last_conv][0]
                if out_w != st.width:
                    v.append(f"stage {st.index}: block '{bid}' output width {out_w} "
                             f"!= stage width {st.width}")
                in_w = self.node(b.first_conv).attrs["in_channels"]
                expect_in = st.width if i > 0 else (prev_width if prev_width is not None else in_w)
                if in_w != expect_in:
                    v.append(f"stage {st.index}: block '{bid}' input width {in_w} "
                             f"!= expected {expect_in}")
            prev_width = st.width
        return v

    def check_valid(self) -> None:
        violations = self.validate()
        if violations:
            raise GraphValidationError(violations)

    # -- manifest (parameter-free structural form) ---------------------------

    def to_manifest(self) -> dict:
        return {
            "arch": self.arch,
            "input_shape": list(self.input_shape),
            "nodes": [{"id": n.id, "kind": n.kind, "attrs": n.attrs} for n in self.nodes],
            "edges": [list(e) for e in self.edges],
            "blocks": [{
                "id": b.id, "kind": b.kind, "stage": b.stage, "node_ids": b.node_ids,
                "first_conv": b.first_conv, "middle_conv": b.middle_conv,
                "last_conv": b.last_conv, "shortcut_conv": b.shortcut_conv,
                "gate_id": b.gate_id,
            } for b in self.blocks],
            "stages": [{"index": s.index, "width": s.width, "block_ids": s.block_ids}
                       for s in self.stages],
        }

    @classmethod
    def from_manifest(cls, m: dict) -> "ArchitectureGraph":
        nodes = []
        for d in m["nodes"]:
            attrs = dict(d["attrs"])
            if "kernel" in attrs and isinstance(attrs["kernel"], list):
                attrs["kernel"] = tuple(attrs["kernel"])
            nodes.append(LayerNode(d["id"], d["kind"], attrs))
        blocks = [BlockInfo(d["id"], d["kind"], d["stage"], list(d["node_ids"]),
                            d["first_conv"], d["middle_conv"], d["last_conv"],
                            d["shortcut_conv"], d.get("gate_id"))
                  for d in m.get("blocks", [])]
        stages = [StageInfo(d["index"], d["width"], list(d["block_ids"]))
                  for d in m.get("stages", [])]
        return cls(nodes, [tuple(e) for e in m["edges"]], tuple(m["input_shape"]),
                   blocks, stages, m.get("arch", "custom"))
