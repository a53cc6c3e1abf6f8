"""Parameter and FLOP accounting, compression reports, epoch budgeting.

Two FLOP conventions are supported because published CIFAR baselines mix
them:

* ``mac``      -- one multiply-accumulate = one FLOP; convolutions and fully
                  connected layers only.  This matches the convention behind
                  the 3.14e8 VGG-16 / 1.27e8 ResNet-56 baselines.
* ``opcount``  -- multiply and add counted separately (2 per MAC) plus
                  elementwise work for batchnorm, activations, pooling and
                  residual adds.  This matches the convention behind the
                  7.99e8 VGG-19 / 5.14e8 pre-activation ResNet-164 baselines.

Ratios (compression / acceleration rates) are nearly identical under either
convention; ``mac`` is the default everywhere.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .graph import ArchitectureGraph

CONVENTIONS = ("mac", "opcount")


def node_param_count(node) -> int:
    """Parameters a node contributes; running statistics are excluded."""
    k = node.kind
    a = node.attrs
    if k == "conv":
        n = a["kernel"][0] * a["kernel"][1] * a["in_channels"] * a["out_channels"]
        if a.get("bias"):
            n += a["out_channels"]
        return n
    if k == "batchnorm":
        return 2 * a["channels"]
    if k == "fullyconnected":
        n = a["in_features"] * a["out_features"]
        if a.get("bias", True):
            n += a["out_features"]
        return n
    if k == "gate":
        return 2 * a["hidden"] * a["channels"]
    return 0


def count_params(graph: ArchitectureGraph, include_gates: bool = True) -> int:
    total = 0
    for node in graph.nodes:
        if node.kind == "gate" and not include_gates:
            continue
        total += node_param_count(node)
    return total


def node_flop_count(node, in_shape, out_shape, convention: str) -> int:
    """Per-sample FLOPs for one node given its inferred input/output shapes."""
    k = node.kind
    a = node.attrs
    cin, hin, win = in_shape
    cout, hout, wout = out_shape
    out_elems = cout * hout * wout
    in_elems = cin * hin * win

    if k == "conv":
        macs = out_elems * a["kernel"][0] * a["kernel"][1] * a["in_channels"]
        if convention == "mac":
            return macs
        return 2 * macs + (out_elems if a.get("bias") else 0)
    if k == "fullyconnected":
        macs = a["in_features"] * a["out_features"]
        if convention == "mac":
            return macs
        return 2 * macs + (a["out_features"] if a.get("bias", True) else 0)
    if convention == "mac":
        return 0
    # opcount extras: scale+shift for BN, compares for pooling, etc.
    if k == "batchnorm":
        return 2 * out_elems
    if k == "relu":
        return out_elems
    if k == "add":
        return out_elems
    if k == "maxpool":
        return out_elems * (a["kernel"] * a["kernel"] - 1)
    if k == "globalavgpool":
        return in_elems + cout
    if k == "softmax":
        return 3 * out_elems
    if k == "gate":
        hid = a["hidden"]
        return 2 * in_elems + 2 * 2 * a["channels"] * hid + a["channels"]
    return 0


def count_flops(graph: ArchitectureGraph, input_shape=None,
                convention: str = "mac") -> int:
    """Per-sample FLOPs for a whole graph under the given convention."""
    if convention not in CONVENTIONS:
        raise ValueError(f"unknown FLOP convention '{convention}'")
    shapes = graph.infer_shapes(input_shape)
    in_shape = tuple(input_shape or graph.input_shape)
    total = 0
    for node in graph.nodes:
        prods = graph.producers(node.id)
        src = shapes[prods[0]] if prods else in_shape
        total += node_flop_count(node, src, shapes[node.id], convention)
    return total


def breakdown(graph: ArchitectureGraph, input_shape=None,
              convention: str = "mac") -> list[dict]:
    """Per-node params/FLOPs rows; the totals equal the sums exactly."""
    shapes = graph.infer_shapes(input_shape)
    in_shape = tuple(input_shape or graph.input_shape)
    rows = []
    for node in graph.nodes:
        prods = graph.producers(node.id)
        src = shapes[prods[0]] if prods else in_shape
        rows.append({
            "id": node.id,
            "kind": node.kind,
            "out_shape": shapes[node.id],
            "params": node_param_count(node),
            "flops": node_flop_count(node, src, shapes[node.id], convention),
        })
    return rows


@dataclass
class CompressionReport:
    params_before: int
    params_after: int
    flops_before: int
    flops_after: int
    base_epochs: int | None = None
    epoch_mode: str = "flop-matched"
    convention: str = "mac"
    per_layer: list = field(default_factory=list)

    @property
    def pruned_params_pct(self) -> float:
        return round(100.0 * (1.0 - self.params_after / self.params_before), 1)

    @property
    def pruned_flops_pct(self) -> float:
        return round(100.0 * (1.0 - self.flops_after / self.flops_before), 1)

    @property
    def epoch_recommendation(self) -> int | None:
        """Retraining epochs.

        ``flop-matched`` scales the baseline epochs by FLOPs-before /
        FLOPs-after, keeping total training compute equal before and after
        pruning.  ``literal-fraction`` multiplies the baseline epochs by the
        pruned FLOP fraction instead.
        """
        if self.base_epochs is None:
            return None
        if self.epoch_mode == "literal-fraction":
            frac = 1.0 - self.flops_after / self.flops_before
            return max(1, round(self.base_epochs * frac))
        return max(1, round(self.base_epochs * self.flops_before / self.flops_after))

    def to_dict(self) -> dict:
        return {
            "params_before": self.params_before,
            "params_after": self.params_after,
            "flops_before": self.flops_before,
            "flops_after": self.flops_after,
            "pruned_params_pct": self.pruned_params_pct,
            "pruned_flops_pct": self.pruned_flops_pct,
            "base_epochs": self.base_epochs,
            "epoch_mode": self.epoch_mode,
            "epoch_recommendation": self.epoch_recommendation,
            "convention": self.convention,
            "per_layer": self.per_layer,
        }

    def to_text(self) -> str:
        lines = [
            f"{'metric':<12}{'before':>16}{'after':>16}{'pruned %':>10}",
            f"{'params':<12}{self.params_before:>16,}{self.params_after:>16,}"
            f"{self.pruned_params_pct:>10.1f}",
            f"{'flops':<12}{self.flops_before:>16,}{self.flops_after:>16,}"
            f"{self.pruned_flops_pct:>10.1f}",
        ]
        if self.base_epochs is not None:
            lines.append(f"retraining epochs: {self.epoch_recommendation} "
                         f"(base {self.base_epochs}, {self.epoch_mode})")
        return "\n".join(lines)


def report(before: ArchitectureGraph, after: ArchitectureGraph, input_shape=None,
           base_epochs: int | None = None, epoch_mode: str = "flop-matched",
           convention: str = "mac") -> CompressionReport:
    """Compare two graphs structurally and budget the retraining epochs."""
    rows_before = {r["id"]: r for r in breakdown(before, input_shape, convention)}
    per_layer = []
    for r in breakdown(after, input_shape, convention):
        b = rows_before.get(r["id"])
        if b is not None and (b["params"] or r["params"]):
            per_layer.append({
                "id": r["id"], "kind": r["kind"],
                "params_before": b["params"], "params_after": r["params"],
            })
    return CompressionReport(
        params_before=count_params(before),
        params_after=count_params(after),
        flops_before=count_flops(before, input_shape, convention),
        flops_after=count_flops(after, input_shape, convention),
        base_epochs=base_epochs,
        epoch_mode=epoch_mode,
        convention=convention,
        per_layer=per_layer,
    )
