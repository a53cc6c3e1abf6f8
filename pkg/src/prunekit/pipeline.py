"""End-to-end orchestration: train, score, plan, rewrite, retrain, report.

Every stage persists its artifact under the experiment directory and logs a
manifest row holding the stage name, wall time, and content hashes; each
stage's input hash is the previous stage's output hash, so a manifest is a
verifiable chain.  A failing stage persists the partial manifest before the
failure propagates.
"""

from __future__ import annotations

import hashlib
import json
import os
import time
from dataclasses import dataclass, field

from .accounting import report as make_report
from .builders import build, strip_gates
from .bundle import ModelBundle, bundle_fingerprint, load_bundle, save_bundle
from .data import DatasetSpec, load_dataset
from .errors import StageFailure
from .planner import PruneConfig, make_plan
from .rewriter import RewriteOptions, apply
from .scoring import collect_scores
from .trainer import TrainConfig, evaluate, train

PIPELINE_STAGES = ("build", "train", "score", "plan", "apply", "report", "retrain")


@dataclass
class PipelineConfig:
    arch: str = "tiny-vgg"
    num_classes: int = 4
    data: DatasetSpec = None
    train: TrainConfig = field(default_factory=lambda: TrainConfig(epochs=20, lr=0.05))
    prune: PruneConfig = field(default_factory=lambda: PruneConfig(beta=1, sign="minus"))
    rewrite_mode: str = "architecture-only"   # scratch; "inherit-weights" fine-tunes
    gate_placement: str | None = None
    reduction: int = 4      # desk-scale default; wide nets conventionally use 16
    score_batches: int | None = None
    seed: int = 0
    out: str = "experiment"

    def __post_init__(self):
        if self.data is None:
            self.data = DatasetSpec(source="synthetic-planted", classes=self.num_classes,
                                    seed=self.seed)

    def to_dict(self) -> dict:
        return {
            "arch": self.arch, "num_classes": self.num_classes,
            "data": self.data.to_dict(), "train": self.train.to_dict(),
            "prune": self.prune.to_dict(), "rewrite_mode": self.rewrite_mode,
            "gate_placement": self.gate_placement, "reduction": self.reduction,
            "score_batches": self.score_batches, "seed": self.seed, "out": self.out,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PipelineConfig":
        d = dict(d)
        d["data"] = DatasetSpec.from_dict(d["data"])
        d["train"] = TrainConfig.from_dict(d["train"])
        d["prune"] = PruneConfig.from_dict(d["prune"])
        return cls(**d)


def file_hash(path: str) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


class ExperimentManifest:
    def __init__(self, config: PipelineConfig):
        self.config = config
        self.rows: list[dict] = []
        self.outputs: dict[str, str] = {}

    def record(self, stage: str, input_hash: str, output_hash: str,
               path: str, seconds: float) -> None:
        self.rows.append({
            "stage": stage, "input": input_hash, "output": output_hash,
            "path": path, "seconds": round(seconds, 3),
        })
        self.outputs[stage] = output_hash

    def verify_chain(self) -> bool:
        for prev, cur in zip(self.rows, self.rows[1:]):
            if cur["input"] != prev["output"]:
                return False
        return True

    def to_dict(self) -> dict:
        return {"config": self.config.to_dict(), "stages": self.rows}

    def save(self, path: str) -> None:
        with open(path, "w") as f:
            json.dump(self.to_dict(), f, indent=1)


def run_pipeline(config: PipelineConfig) -> ExperimentManifest:
    """Execute the full prune-and-retrain cycle, persisting every artifact."""
    os.makedirs(config.out, exist_ok=True)
    manifest = ExperimentManifest(config)
    manifest_path = os.path.join(config.out, "manifest.json")
    state: dict = {}

    def run_stage(name, fn):
        start = time.monotonic()
        try:
            input_hash, output_hash, path = fn()
        except Exception as exc:
            manifest.rows.append({"stage": name, "error": str(exc)})
            manifest.save(manifest_path)
            raise StageFailure(name, exc) from exc
        manifest.record(name, input_hash, output_hash, path, time.monotonic() - start)
        manifest.save(manifest_path)

    def stage_build():
        graph = build(config.arch, config.num_classes, with_gates=True,
                      gate_placement=config.gate_placement, reduction=config.reduction,
                      input_shape=(config.data.channels, config.data.image_size,
                                   config.data.image_size)
                      if config.data.source.startswith("synthetic") else None,
                      seed=config.seed)
        state["gated"] = ModelBundle(graph, {"arch": config.arch, "seed": config.seed})
        path = os.path.join(config.out, "model-gated")
        save_bundle(state["gated"], path)
        cfg_hash = hashlib.sha256(
            json.dumps(config.to_dict(), sort_keys=True).encode()).hexdigest()
        return cfg_hash, bundle_fingerprint(state["gated"]), path

    def stage_train():
        ih = bundle_fingerprint(state["gated"])
        train_data = load_dataset(config.data)
        eval_spec = DatasetSpec.from_dict({**config.data.to_dict(), "split": "eval"})
        eval_data = load_dataset(eval_spec)
        state["train_data"], state["eval_data"] = train_data, eval_data
        with open(os.path.join(config.out, "data.json"), "w") as f:
            json.dump({"spec": config.data.to_dict(),
                       "normalization": train_data.normalization,
                       "train_samples": train_data.size,
                       "eval_samples": eval_data.size}, f, indent=1)
        trained, history = train(state["gated"], train_data, eval_data, config.train)
        state["trained"] = trained
        path = os.path.join(config.out, "model-trained")
        save_bundle(trained, path)
        with open(os.path.join(config.out, "history.json"), "w") as f:
            json.dump(history, f, indent=1)
        return ih, bundle_fingerprint(trained), path

    def stage_score():
        ih = bundle_fingerprint(state["trained"])
        record = collect_scores(state["trained"],
                                state["train_data"].batches(config.train.batch_size),
                                max_batches=config.score_batches)
        state["scores"] = record
        path = os.path.join(config.out, "scores.json")
        record.save(path)
        return ih, record.fingerprint(), path

    def stage_plan():
        plan = make_plan(state["scores"], state["trained"].graph, config.prune)
        state["plan"] = plan
        path = os.path.join(config.out, "plan.json")
        plan.save(path)
        return state["scores"].fingerprint(), plan.fingerprint(), path

    def stage_apply():
        opts = RewriteOptions(mode=config.rewrite_mode, strip_gates=True,
                              seed=config.seed + 1
                              if config.rewrite_mode == "architecture-only" else None)
        compact = apply(state["trained"], state["plan"], opts)
        state["compact"] = compact
        path = os.path.join(config.out, "model-compact")
        save_bundle(compact, path)
        return state["plan"].fingerprint(), bundle_fingerprint(compact), path

    def stage_report():
        ih = bundle_fingerprint(state["compact"])
        baseline = strip_gates(state["trained"].graph)
        rep = make_report(baseline, state["compact"].graph,
                          base_epochs=config.train.epochs)
        state["report"] = rep
        path = os.path.join(config.out, "report.json")
        with open(path, "w") as f:
            json.dump(rep.to_dict(), f, indent=1)
        state["report_hash"] = file_hash(path)
        return ih, state["report_hash"], path

    def stage_retrain():
        ih = state["report_hash"]
        epochs = state["report"].epoch_recommendation
        cfg = TrainConfig.from_dict({**config.train.to_dict(), "epochs": epochs})
        retrained, history = train(state["compact"], state["train_data"],
                                   state["eval_data"], cfg)
        state["retrained"] = retrained
        path = os.path.join(config.out, "model-retrained")
        save_bundle(retrained, path)
        with open(os.path.join(config.out, "retrain-history.json"), "w") as f:
            json.dump(history, f, indent=1)
        final_acc = evaluate(retrained, state["eval_data"])
        with open(os.path.join(config.out, "final.json"), "w") as f:
            json.dump({"eval_acc": final_acc, "epochs": epochs}, f, indent=1)
        return ih, bundle_fingerprint(retrained), path

    stage_fns = {
        "build": stage_build, "train": stage_train, "score": stage_score,
        "plan": stage_plan, "apply": stage_apply, "report": stage_report,
        "retrain": stage_retrain,
    }
    for name in PIPELINE_STAGES:
        run_stage(name, stage_fns[name])
    return manifest


def run_sweep(config: PipelineConfig, variants: list[tuple[str, int]]) -> list[dict]:
    """Plan + rewrite + report once per (sign, beta), sharing the trained model.

    Returns one row per variant with its compression/acceleration rates;
    rows come back in the order given.
    """
    base = os.path.join(config.out, "sweep-base")
    base_cfg = PipelineConfig.from_dict({**config.to_dict(), "out": base})
    os.makedirs(base, exist_ok=True)

    graph = build(base_cfg.arch, base_cfg.num_classes, with_gates=True,
                  gate_placement=base_cfg.gate_placement, reduction=base_cfg.reduction,
                  input_shape=(base_cfg.data.channels, base_cfg.data.image_size,
                               base_cfg.data.image_size)
                  if base_cfg.data.source.startswith("synthetic") else None,
                  seed=base_cfg.seed)
    gated = ModelBundle(graph, {"arch": base_cfg.arch})
    train_data = load_dataset(base_cfg.data)
    eval_data = load_dataset(DatasetSpec.from_dict(
        {**base_cfg.data.to_dict(), "split": "eval"}))
    trained, _ = train(gated, train_data, eval_data, base_cfg.train)
    record = collect_scores(trained, train_data.batches(base_cfg.train.batch_size),
                            max_batches=base_cfg.score_batches)

    baseline = strip_gates(trained.graph)
    rows = []
    for sign, beta in variants:
        cfg = PruneConfig.from_dict({**base_cfg.prune.to_dict(),
                                     "sign": sign, "beta": beta})
        plan = make_plan(record, trained.graph, cfg)
        compact = apply(trained, plan,
                        RewriteOptions(mode="architecture-only", seed=base_cfg.seed))
        rep = make_report(baseline, compact.graph, base_epochs=base_cfg.train.epochs)
        pruned_channels = sum(lp.original - len(lp.kept) for lp in plan.layers)
        rows.append({
            "sign": sign, "beta": beta,
            "pruned_channels": pruned_channels,
            "pruned_params_pct": rep.pruned_params_pct,
            "pruned_flops_pct": rep.pruned_flops_pct,
        })
    with open(os.path.join(config.out, "sweep.json"), "w") as f:
        json.dump(rows, f, indent=1)
    return rows


def load_stage_bundle(out_dir: str, stage: str) -> ModelBundle:
    names = {"build": "model-gated", "train": "model-trained",
             "apply": "model-compact", "retrain": "model-retrained"}
    return load_bundle(os.path.join(out_dir, names[stage]))
