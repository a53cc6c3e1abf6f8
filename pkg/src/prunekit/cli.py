"""Command-line interface.

Subcommands mirror the pipeline stages and can be chained by hand:
``build``, ``train``, ``score``, ``plan``, ``apply``, ``count``, ``report``,
``retrain``, ``pipeline``, ``sweep``.  Config-heavy commands read JSON files.
Exit codes: 0 success, 2 validation failure, 3 stage failure.
"""

from __future__ import annotations

import argparse
import json
import sys

from .accounting import count_flops, count_params, report as make_report
from .builders import ARCHITECTURES, build
from .bundle import ModelBundle, load_bundle, save_bundle
from .data import DatasetSpec, load_dataset
from .errors import (BundleIntegrityError, DataError, GraphValidationError,
                     PlanError, PrunekitError, StageFailure)
from .planner import PruneConfig, PruningPlan, make_plan
from .rewriter import RewriteOptions, apply as apply_plan
from .scoring import ScoreRecord, collect_scores
from .trainer import TrainConfig, evaluate, train

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_STAGE = 3


def _load_json(path):
    with open(path) as f:
        return json.load(f)


def _dataset_from_arg(path_or_json: str) -> DatasetSpec:
    return DatasetSpec.from_dict(_load_json(path_or_json))


def _train_config(path: str | None) -> TrainConfig:
    return TrainConfig.from_dict(_load_json(path)) if path else TrainConfig()


def cmd_build(args) -> int:
    graph = build(args.arch, args.classes, with_gates=args.with_gates,
                  gate_placement=args.placement, reduction=args.reduction,
                  seed=args.seed)
    save_bundle(ModelBundle(graph, {"arch": args.arch, "seed": args.seed}), args.out)
    print(f"built {args.arch} ({args.classes} classes) -> {args.out}")
    return EXIT_OK


def cmd_train(args) -> int:
    bundle = load_bundle(args.model)
    cfg = _train_config(args.config)
    train_data = load_dataset(_dataset_from_arg(args.data))
    eval_spec = _dataset_from_arg(args.data)
    eval_data = load_dataset(DatasetSpec.from_dict(
        {**eval_spec.to_dict(), "split": "eval"}))
    trained, history = train(bundle, train_data, eval_data, cfg)
    save_bundle(trained, args.out)
    if args.history:
        with open(args.history, "w") as f:
            json.dump(history, f, indent=1)
    print(f"trained {cfg.epochs} epochs; best eval acc "
          f"{max(h.get('eval_acc', 0) for h in history):.4f} -> {args.out}")
    return EXIT_OK


def cmd_score(args) -> int:
    bundle = load_bundle(args.model)
    data = load_dataset(_dataset_from_arg(args.data))
    record = collect_scores(bundle, data.batches(args.batch_size),
                            max_batches=args.max_batches)
    record.save(args.out)
    print(f"scored {len(record.layers)} layers over {record.metadata['samples']} "
          f"samples -> {args.out}")
    return EXIT_OK


def cmd_plan(args) -> int:
    record = ScoreRecord.load(args.scores)
    bundle = load_bundle(args.model)
    targets = None
    if args.stage_targets:
        widths = [int(t) for t in args.stage_targets.split(",")]
        targets = tuple((i + 1, w) for i, w in enumerate(widths))
    cfg = PruneConfig(beta=args.beta, sign=args.sign, policy=args.policy,
                      min_channels=args.min_channels,
                      half_rule=args.half_rule == "on",
                      stage_targets=targets)
    plan = make_plan(record, bundle.graph, cfg)
    plan.save(args.out)
    pruned = sum(lp.original - len(lp.kept) for lp in plan.layers)
    print(f"planned {len(plan.layers)} layers, {pruned} channels pruned -> {args.out}")
    return EXIT_OK


def cmd_apply(args) -> int:
    bundle = load_bundle(args.model)
    plan = PruningPlan.load(args.plan)
    mode = "architecture-only" if args.mode == "scratch" else "inherit-weights"
    opts = RewriteOptions(mode=mode, strip_gates=not args.keep_gates,
                          seed=args.seed if mode == "architecture-only" else None)
    compact = apply_plan(bundle, plan, opts)
    save_bundle(compact, args.out)
    print(f"rewrote model ({args.mode}) -> {args.out}")
    return EXIT_OK


def cmd_count(args) -> int:
    bundle = load_bundle(args.model)
    p = count_params(bundle.graph)
    f = count_flops(bundle.graph, convention=args.convention)
    print(f"params {p:,}")
    print(f"flops[{args.convention}] {f:,}")
    return EXIT_OK


def cmd_report(args) -> int:
    before = load_bundle(args.before)
    after = load_bundle(args.after)
    rep = make_report(before.graph, after.graph, base_epochs=args.base_epochs,
                      epoch_mode=args.epoch_mode, convention=args.convention)
    print(rep.to_text())
    if args.out:
        with open(args.out, "w") as f:
            json.dump(rep.to_dict(), f, indent=1)
    return EXIT_OK


def cmd_retrain(args) -> int:
    from .accounting import CompressionReport
    bundle = load_bundle(args.model)
    rep_d = _load_json(args.report)
    rep = CompressionReport(rep_d["params_before"], rep_d["params_after"],
                            rep_d["flops_before"], rep_d["flops_after"],
                            base_epochs=rep_d["base_epochs"],
                            epoch_mode=rep_d.get("epoch_mode", "flop-matched"))
    cfg = _train_config(args.config)
    train_data = load_dataset(_dataset_from_arg(args.data))
    eval_data = load_dataset(DatasetSpec.from_dict(
        {**_dataset_from_arg(args.data).to_dict(), "split": "eval"}))
    from .trainer import retrain_scratch
    retrained, history = retrain_scratch(bundle, train_data, eval_data, cfg, rep)
    save_bundle(retrained, args.out)
    acc = evaluate(retrained, eval_data)
    print(f"retrained {rep.epoch_recommendation} epochs; eval acc {acc:.4f} "
          f"-> {args.out}")
    return EXIT_OK


def cmd_pipeline(args) -> int:
    from .pipeline import PipelineConfig, run_pipeline
    cfg = PipelineConfig.from_dict(_load_json(args.config))
    if args.out:
        cfg.out = args.out
    manifest = run_pipeline(cfg)
    print(f"pipeline complete; manifest chain "
          f"{'ok' if manifest.verify_chain() else 'BROKEN'} -> {cfg.out}")
    return EXIT_OK


def cmd_sweep(args) -> int:
    from .pipeline import PipelineConfig, run_sweep
    cfg = PipelineConfig.from_dict(_load_json(args.config))
    if args.out:
        cfg.out = args.out
    variants = []
    for item in args.variants.split(","):
        sign, beta = item.split(":")
        variants.append((sign, int(beta)))
    rows = run_sweep(cfg, variants)
    for r in rows:
        print(f"({r['sign']},{r['beta']}): {r['pruned_channels']} channels, "
              f"params -{r['pruned_params_pct']}%, flops -{r['pruned_flops_pct']}%")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="prunekit",
                                description="channel pruning toolkit")
    sub = p.add_subparsers(dest="command", required=True)

    b = sub.add_parser("build", help="construct an architecture")
    b.add_argument("--arch", required=True, choices=ARCHITECTURES)
    b.add_argument("--classes", type=int, required=True)
    b.add_argument("--with-gates", action="store_true")
    b.add_argument("--placement", default=None)
    b.add_argument("--reduction", type=int, default=16)
    b.add_argument("--seed", type=int, default=0)
    b.add_argument("--out", required=True)
    b.set_defaults(fn=cmd_build)

    t = sub.add_parser("train", help="train a model")
    t.add_argument("--model", required=True)
    t.add_argument("--data", required=True, help="dataset spec JSON")
    t.add_argument("--config", default=None, help="train config JSON")
    t.add_argument("--history", default=None)
    t.add_argument("--out", required=True)
    t.set_defaults(fn=cmd_train)

    s = sub.add_parser("score", help="collect gate scores")
    s.add_argument("--model", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--batch-size", type=int, default=64)
    s.add_argument("--max-batches", type=int, default=None)
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_score)

    pl = sub.add_parser("plan", help="derive a pruning plan from scores")
    pl.add_argument("--scores", required=True)
    pl.add_argument("--model", required=True)
    pl.add_argument("--beta", type=int, default=2)
    pl.add_argument("--sign", choices=("minus", "plus"), default="minus")
    pl.add_argument("--policy", default="vgg-per-layer",
                    choices=("vgg-per-layer", "resnet-stage-uniform", "bottleneck-middle"))
    pl.add_argument("--stage-targets", default=None, help="e.g. 8,32,32")
    pl.add_argument("--half-rule", choices=("on", "off"), default="off")
    pl.add_argument("--min-channels", type=int, default=1)
    pl.add_argument("--out", required=True)
    pl.set_defaults(fn=cmd_plan)

    a = sub.add_parser("apply", help="rewrite a model per a plan")
    a.add_argument("--model", required=True)
    a.add_argument("--plan", required=True)
    a.add_argument("--mode", choices=("scratch", "finetune"), default="scratch")
    a.add_argument("--keep-gates", action="store_true")
    a.add_argument("--seed", type=int, default=0)
    a.add_argument("--out", required=True)
    a.set_defaults(fn=cmd_apply)

    c = sub.add_parser("count", help="count parameters and FLOPs")
    c.add_argument("--model", required=True)
    c.add_argument("--convention", choices=("mac", "opcount"), default="mac")
    c.set_defaults(fn=cmd_count)

    r = sub.add_parser("report", help="compression report for two models")
    r.add_argument("--before", required=True)
    r.add_argument("--after", required=True)
    r.add_argument("--base-epochs", type=int, default=None)
    r.add_argument("--epoch-mode", choices=("flop-matched", "literal-fraction"),
                   default="flop-matched")
    r.add_argument("--convention", choices=("mac", "opcount"), default="mac")
    r.add_argument("--out", default=None)
    r.set_defaults(fn=cmd_report)

    rt = sub.add_parser("retrain", help="retrain a compact model from scratch")
    rt.add_argument("--model", required=True)
    rt.add_argument("--data", required=True)
    rt.add_argument("--config", default=None)
    rt.add_argument("--report", required=True)
    rt.add_argument("--out", required=True)
    rt.set_defaults(fn=cmd_retrain)

    pp = sub.add_parser("pipeline", help="run the full prune-and-retrain cycle")
    pp.add_argument("--config", required=True)
    pp.add_argument("--out", default=None)
    pp.set_defaults(fn=cmd_pipeline)

    sw = sub.add_parser("sweep", help="plan/report across (sign,beta) variants")
    sw.add_argument("--config", required=True)
    sw.add_argument("--variants", default="minus:2,minus:8,plus:8,plus:2")
    sw.add_argument("--out", default=None)
    sw.set_defaults(fn=cmd_sweep)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except (GraphValidationError, PlanError, DataError, BundleIntegrityError,
            ValueError) as exc:
        print(f"validation error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except StageFailure as exc:
        print(f"stage failure: {exc}", file=sys.stderr)
        return EXIT_STAGE
    except PrunekitError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_STAGE


if __name__ == "__main__":
    sys.exit(main())
