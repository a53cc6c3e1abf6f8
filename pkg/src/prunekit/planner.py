"""Turns score records into deterministic pruning plans.

The selection rule: a layer's threshold is ``(1 +/- 10**-beta) * mean(scores)``
and channels scoring strictly below it are pruned.  The sign is coarse
control (minus keeps the threshold under the mean, plus pushes it above),
beta is fine control.  Two guards apply after thresholding:

* a floor: at least ``min_channels`` survive, filled by top score;
* the half-cut rule: a layer whose scores sit uniformly at the sigmoid
  plateau 0.5 carries no ranking information, so when the rule is enabled
  the layer is cut to the first ``ceil(C/2)`` channels outright.

Three policies produce whole-network plans: ``vgg-per-layer`` thresholds
every convolution independently and simultaneously; ``resnet-stage-uniform``
keeps one shared channel index set for all block inputs/outputs in a stage
(residual adds stay dimensionally consistent, intermediate block channels
are untouched); ``bottleneck-middle`` thresholds only the middle 3x3 conv of
each bottleneck, leaving block I/O widths intact.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field, asdict

import numpy as np

from .errors import PlanError
from .graph import ArchitectureGraph
from .scoring import ScoreRecord

POLICIES = ("vgg-per-layer", "resnet-stage-uniform", "bottleneck-middle")
SIGNS = ("minus", "plus")


@dataclass(frozen=True)
class PruneConfig:
    beta: int = 2
    sign: str = "minus"
    policy: str = "vgg-per-layer"
    min_channels: int = 1
    half_rule: bool = False
    half_rule_tolerance: float = 1e-6
    stage_targets: tuple[tuple[int, int], ...] | None = None  # ((stage, width), ...)

    def __post_init__(self):
        if self.beta < 1:
            raise ValueError(f"beta must be >= 1, got {self.beta}")
        if self.sign not in SIGNS:
            raise ValueError(f"sign must be one of {SIGNS}, got '{self.sign}'")
        if self.policy not in POLICIES:
            raise ValueError(f"policy must be one of {POLICIES}, got '{self.policy}'")
        if self.min_channels < 1:
            raise ValueError("min_channels must be >= 1")

    @property
    def stage_target_map(self) -> dict[int, int]:
        return dict(self.stage_targets or ())

    def to_dict(self) -> dict:
        d = asdict(self)
        d["stage_targets"] = ([list(t) for t in self.stage_targets]
                              if self.stage_targets else None)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "PruneConfig":
        d = dict(d)
        if d.get("stage_targets"):
            d["stage_targets"] = tuple(tuple(t) for t in d["stage_targets"])
        return cls(**d)


def threshold_factor(config: PruneConfig) -> float:
    lam = 10.0 ** (-config.beta)
    return (1.0 - lam) if config.sign == "minus" else (1.0 + lam)


def threshold(scores: np.ndarray, config: PruneConfig) -> float:
    """Pruning threshold: (1 +/- 10**-beta) times the mean score."""
    scores = np.asarray(scores, dtype=np.float64)
    if scores.size < 1:
        raise ValueError("empty score vector")
    return threshold_factor(config) * float(scores.mean())


def _is_plateau(scores: np.ndarray, tol: float) -> bool:
    return (float(scores.max() - scores.min()) <= tol
            and bool(np.all(np.abs(scores - 0.5) <= tol)))


def select_channels(scores: np.ndarray, config: PruneConfig) -> np.ndarray:
    """Sorted indices of surviving channels for one layer."""
    scores = np.asarray(scores, dtype=np.float64)
    c = scores.size
    if config.half_rule and _is_plateau(scores, config.half_rule_tolerance):
        return np.arange(math.ceil(c / 2))
    thre = threshold(scores, config)
    kept = np.flatnonzero(scores >= thre)
    floor = min(config.min_channels, c)
    if kept.size < floor:
        # top scores win; ties resolved to the lower index by stable sort
        order = np.argsort(-scores, kind="stable")
        kept = np.sort(order[:floor])
    return kept


def _top_k(scores: np.ndarray, k: int) -> np.ndarray:
    order = np.argsort(-np.asarray(scores, dtype=np.float64), kind="stable")
    return np.sort(order[:k])


@dataclass
class LayerPlan:
    layer_id: str
    original: int
    kept: tuple[int, ...]


@dataclass
class StagePlan:
    index: int
    target: int
    kept: tuple[int, ...]
    block_ids: tuple[str, ...]


@dataclass
class PruningPlan:
    config: PruneConfig
    layers: list[LayerPlan] = field(default_factory=list)
    stages: list[StagePlan] = field(default_factory=list)
    score_fingerprint: str = ""

    def layer(self, layer_id: str) -> LayerPlan:
        for lp in self.layers:
            if lp.layer_id == layer_id:
                return lp
        raise KeyError(layer_id)

    def layer_map(self) -> dict[str, LayerPlan]:
        return {lp.layer_id: lp for lp in self.layers}

    def validate(self) -> None:
        seen = set()
        for lp in self.layers:
            if lp.layer_id in seen:
                raise PlanError(f"duplicate plan entry for layer '{lp.layer_id}'")
            seen.add(lp.layer_id)
            k = len(lp.kept)
            if not (1 <= k <= lp.original):
                raise PlanError(f"layer '{lp.layer_id}': keeps {k} of {lp.original}")
            if list(lp.kept) != sorted(set(lp.kept)):
                raise PlanError(f"layer '{lp.layer_id}': indices not sorted unique")
            if lp.kept[0] < 0 or lp.kept[-1] >= lp.original:
                raise PlanError(f"layer '{lp.layer_id}': index out of range")

    def to_dict(self) -> dict:
        return {
            "config": self.config.to_dict(),
            "score_fingerprint": self.score_fingerprint,
            "layers": [{"layer_id": lp.layer_id, "original": lp.original,
                        "kept": list(lp.kept)} for lp in self.layers],
            "stages": [{"index": sp.index, "target": sp.target,
                        "kept": list(sp.kept), "block_ids": list(sp.block_ids)}
                       for sp in self.stages],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PruningPlan":
        plan = cls(PruneConfig.from_dict(d["config"]),
                   [LayerPlan(e["layer_id"], e["original"], tuple(e["kept"]))
                    for e in d["layers"]],
                   [StagePlan(e["index"], e["target"], tuple(e["kept"]),
                              tuple(e["block_ids"])) for e in d.get("stages", [])],
                   d.get("score_fingerprint", ""))
        plan.validate()
        return plan

    def save(self, path: str) -> None:
        with open(path, "w") as f:
            json.dump(self.to_dict(), f, indent=1)

    @classmethod
    def load(cls, path: str) -> "PruningPlan":
        with open(path) as f:
            return cls.from_dict(json.load(f))

    def fingerprint(self) -> str:
        return hashlib.sha256(
            json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()


# ---------------------------------------------------------------------------
# policies

def plan_vgg(record: ScoreRecord, graph: ArchitectureGraph,
             config: PruneConfig) -> PruningPlan:
    """Threshold every convolution independently, all layers at once."""
    plan = PruningPlan(config, score_fingerprint=record.fingerprint())
    for node in graph.nodes_of_kind("conv"):
        if not record.has_layer(node.id):
            raise PlanError(f"no score entry for conv layer '{node.id}'")
        ls = record.layer(node.id)
        if ls.channels != node.attrs["out_channels"]:
            raise PlanError(f"layer '{node.id}': scores cover {ls.channels} channels, "
                            f"layer has {node.attrs['out_channels']}")
        kept = select_channels(ls.mean, config)
        plan.layers.append(LayerPlan(node.id, ls.channels, tuple(int(i) for i in kept)))
    plan.validate()
    return plan


def plan_stage_uniform(record: ScoreRecord, graph: ArchitectureGraph,
                       config: PruneConfig) -> PruningPlan:
    """One shared kept-index set per stage, applied to every member block.

    Per-channel importance is the mean of the member blocks' score vectors;
    the top ``target`` indices survive (ties to the lower index).  The kept
    set rewrites every block's output conv, the stage's shortcut convs, and
    the stem feeding the first stage; intermediate block channels are left
    untouched.
    """
    targets = config.stage_target_map
    if not graph.stages:
        raise PlanError("graph has no stage annotations")
    plan = PruningPlan(config, score_fingerprint=record.fingerprint())
    for st in sorted(graph.stages, key=lambda s: s.index):
        if st.index not in targets:
            raise PlanError(f"no target width for stage {st.index}")
        target = targets[st.index]
        if not (1 <= target <= st.width):
            raise PlanError(f"stage {st.index}: target {target} exceeds width {st.width}")
        votes = []
        for bid in st.block_ids:
            b = graph.block(bid)
            if b.kind != "basic":
                raise PlanError(f"stage-uniform policy needs basic blocks, "
                                f"block '{bid}' is {b.kind}")
            if not record.has_layer(b.last_conv):
                raise PlanError(f"no score entry for block output conv '{b.last_conv}'")
            ls = record.layer(b.last_conv)
            if ls.channels != st.width:
                raise PlanError(f"block '{bid}': scores cover {ls.channels} channels, "
                                f"stage width is {st.width}")
            votes.append(ls.mean)
        kept = tuple(int(i) for i in _top_k(np.mean(votes, axis=0), target))
        plan.stages.append(StagePlan(st.index, target, kept, tuple(st.block_ids)))
        for bid in st.block_ids:
            b = graph.block(bid)
            plan.layers.append(LayerPlan(b.last_conv, st.width, kept))
            if b.shortcut_conv is not None:
                plan.layers.append(LayerPlan(b.shortcut_conv, st.width, kept))
    # the stem feeds the first stage through an identity shortcut and must
    # share its kept set; with a projection shortcut it may keep full width
    first = min(graph.stages, key=lambda s: s.index)
    first_block = graph.block(first.block_ids[0])
    stem_conv = _upstream_conv(graph, first_block.first_conv)
    if stem_conv is not None and first_block.shortcut_conv is None:
        stage_plan = plan.stages[0]
        stem_width = graph.node(stem_conv).attrs["out_channels"]
        if stem_width != first.width:
            raise PlanError(f"stem width {stem_width} != first stage width {first.width}")
        plan.layers.append(LayerPlan(stem_conv, stem_width, stage_plan.kept))
    plan.validate()
    return plan


def _upstream_conv(graph: ArchitectureGraph, node_id: str):
    nid = node_id
    while True:
        prods = graph.producers(nid)
        if not prods:
            return None
        nid = prods[0]
        if graph.node(nid).kind == "conv":
            return nid


def plan_bottleneck(record: ScoreRecord, graph: ArchitectureGraph,
                    config: PruneConfig) -> PruningPlan:
    """Threshold only each bottleneck block's middle 3x3 conv channels."""
    bottlenecks = [b for b in graph.blocks if b.kind in ("bottleneck", "preact-bottleneck")]
    if not bottlenecks:
        raise PlanError("graph has no bottleneck blocks")
    plan = PruningPlan(config, score_fingerprint=record.fingerprint())
    for b in bottlenecks:
        if b.middle_conv is None:
            raise PlanError(f"block '{b.id}' has no middle conv")
        if not record.has_layer(b.middle_conv):
            raise PlanError(f"no score entry for middle conv '{b.middle_conv}'")
        ls = record.layer(b.middle_conv)
        width = graph.node(b.middle_conv).attrs["out_channels"]
        if ls.channels != width:
            raise PlanError(f"block '{b.id}': scores cover {ls.channels} channels, "
                            f"middle conv has {width}")
        kept = select_channels(ls.mean, config)
        plan.layers.append(LayerPlan(b.middle_conv, width, tuple(int(i) for i in kept)))
    plan.validate()
    return plan


def make_plan(record: ScoreRecord, graph: ArchitectureGraph,
              config: PruneConfig) -> PruningPlan:
    if config.policy == "vgg-per-layer":
        return plan_vgg(record, graph, config)
    if config.policy == "resnet-stage-uniform":
        return plan_stage_uniform(record, graph, config)
    return plan_bottleneck(record, graph, config)


def identity_plan(graph: ArchitectureGraph, config: PruneConfig | None = None) -> PruningPlan:
    """Plan that keeps every channel of every convolution."""
    plan = PruningPlan(config or PruneConfig())
    for node in graph.nodes_of_kind("conv"):
        c = node.attrs["out_channels"]
        plan.layers.append(LayerPlan(node.id, c, tuple(range(c))))
    plan.validate()
    return plan


def stage_targets_from_dispersion(record: ScoreRecord, tau: float) -> dict[int, int]:
    """Experimental heuristic: halve stages whose per-block score spread is high.

    Published targets were chosen by inspecting the per-stage dispersion
    plots by hand; this automates one reading of that procedure (halve when
    the mean per-block std exceeds tau) and is not part of any contract.
    """
    targets = {}
    for row in record.stages:
        width = row["width"]
        targets[row["index"]] = max(1, width // 2) if row["mean_std"] > tau else width
    return targets
