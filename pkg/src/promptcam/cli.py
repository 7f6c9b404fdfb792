"""``promptcam`` command line: generate, train, visualize, evaluate.

Config precedence: defaults < ``--config`` JSON < flags.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from dataclasses import replace
from pathlib import Path

from . import pipeline
from .evaluation import write_csv, write_jsonl
from .pipeline import RunConfig
from .suites import (
    SUITES,
    Scorer,
    accuracy_suite,
    counterfactual_suite,
    faithfulness_suite,
    layer_sweep_suite,
    pointing_suite,
    taxonomy_suite,
    visualize_images,
)


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON file with RunConfig fields")
    common.add_argument("--seed", type=int)
    common.add_argument("--dataset", help="'synth8' or a generated dataset directory")
    common.add_argument("--out", help="output directory")
    common.add_argument("--variant", help="shallow | deep | at-layer=i")
    common.add_argument("--top-k", type=int, dest="top_k")
    common.add_argument("--prompt-isolation", action=argparse.BooleanOptionalAction, default=None,
                        dest="prompt_isolation", help="mask prompt-to-prompt attention")
    common.add_argument("--paper-literal-scaling", action="store_true", default=None,
                        dest="paper_literal_scaling", help="display maps with divisor D' instead of sqrt(D')")
    common.add_argument("--epochs", type=int, help="prompt-training epochs")
    common.add_argument("--pretrain-epochs", type=int, dest="pretrain_epochs")

    parser = argparse.ArgumentParser(prog="promptcam", description="Prompt-CAM on a from-scratch ViT")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("generate", parents=[common], help="write a SynthTraits dataset")
    sub.add_parser("train", parents=[common], help="pretrain backbone, freeze, train prompts")
    vis = sub.add_parser("visualize", parents=[common], help="per-head heatmaps and reports")
    vis.add_argument("--run", help="directory holding backbone.ckpt/prompts.ckpt (default: --out)")
    vis.add_argument("--images", nargs="+", required=True, help="test image ids")
    vis.add_argument("--class", dest="selector", default="true", help="true | predicted | class index")
    ev = sub.add_parser("evaluate", parents=[common], help="run an evaluation suite")
    ev.add_argument("--run", help="directory holding backbone.ckpt/prompts.ckpt (default: --out)")
    ev.add_argument("--suite", required=True, help=" | ".join(SUITES))
    return parser


def resolve_config(args, base: RunConfig | None = None) -> RunConfig:
    cfg = base or RunConfig()
    if args.config:
        cfg = RunConfig.from_dict(json.loads(Path(args.config).read_text()))
    for name in ("seed", "dataset", "out", "variant", "top_k", "prompt_isolation", "paper_literal_scaling"):
        v = getattr(args, name, None)
        if v is not None:
            cfg = replace(cfg, **{name: v})
    if args.epochs is not None:
        cfg = replace(cfg, prompt=replace(cfg.prompt, epochs=args.epochs,
                                          warmup_epochs=min(cfg.prompt.warmup_epochs, max(args.epochs - 1, 0))))
    if args.pretrain_epochs is not None:
        cfg = replace(cfg, pretrain=replace(cfg.pretrain, epochs=args.pretrain_epochs,
                                            warmup_epochs=min(cfg.pretrain.warmup_epochs,
                                                              max(args.pretrain_epochs - 1, 0))))
    return cfg


def cmd_generate(cfg: RunConfig) -> None:
    from .data import generate_synth_traits

    manifest, train, test = generate_synth_traits(cfg.synth, cfg.seed, out_dir=cfg.out)
    print(f"wrote {len(train)} train + {len(test)} test images to {cfg.out}")


def cmd_train(cfg: RunConfig) -> None:
    run = pipeline.train_run(cfg)
    pipeline.save_run(run, cfg.out)
    last = run.prompt_log[-1] if run.prompt_log else {}
    print(f"pretrain acc {run.pretrain_log[-1].get('train_acc')}; prompt test acc {last.get('test_acc')}; "
          f"{run.timing['total_s']:.1f}s -> {cfg.out}")


def _scorer_and_data(cfg: RunConfig, run_dir):
    _, model, prompts, variant = pipeline.load_run(run_dir, cfg)
    manifest, train, test = pipeline.load_data(cfg)
    return Scorer(model, prompts, variant, cfg.prompt_isolation), manifest, train, test


def cmd_visualize(cfg: RunConfig, args) -> None:
    scorer, manifest, train, test = _scorer_and_data(cfg, args.run or cfg.out)
    for image_id in args.images:
        test.index_of(image_id)  # fail early on unknown ids
    reports = visualize_images(scorer, test, args.images, args.selector, cfg.out, cfg.top_k,
                               cfg.paper_literal_scaling)
    pipeline.write_json(Path(cfg.out) / "visualize_report.json", reports)
    print(f"wrote heatmaps for {len(reports)} images to {cfg.out}")


def cmd_evaluate(cfg: RunConfig, suite: str, run_dir) -> None:
    if suite not in SUITES:
        raise ValueError(f"unknown suite {suite!r}; choose from {', '.join(SUITES)}")
    scorer, manifest, train, test = _scorer_and_data(cfg, run_dir)
    if suite == "faithfulness":
        rows, summary = faithfulness_suite(scorer, test, train, cfg.top_k)
    elif suite == "pointing":
        rows, summary = pointing_suite(scorer, test, cfg.top_k)
    elif suite == "accuracy":
        rows, summary = accuracy_suite(scorer, train, test, probe_recipe=cfg.prompt)
    elif suite == "layer-sweep":
        rows, summary = layer_sweep_suite(scorer.model, train, test, cfg.prompt, cfg.prompt_isolation)
    elif suite == "taxonomy":
        rows, summary = taxonomy_suite(scorer.model, scorer, manifest, train, test, cfg.prompt)
    else:
        rows, summary = counterfactual_suite(scorer, manifest, test)
    out = Path(cfg.out)
    write_jsonl(out / f"{suite}.jsonl", rows)
    write_csv(out / f"{suite}_summary.csv", [summary_flat(summary)])
    pipeline.write_json(out / f"{suite}_summary.json", summary)
    print(json.dumps(summary, indent=1, sort_keys=True))


def summary_flat(summary: dict) -> dict:
    out = {}
    for k, v in summary.items():
        if isinstance(v, dict):
            out.update({f"{k}.{kk}": vv for kk, vv in v.items()})
        else:
            out[k] = v
    return out


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        base = None
        run_dir = getattr(args, "run", None) or args.out
        if args.command in ("visualize", "evaluate") and run_dir and (Path(run_dir) / "run_config.json").exists():
            # start from the training run's settings so evaluation matches how prompts were trained
            saved = json.loads((Path(run_dir) / "run_config.json").read_text())["config"]
            base = replace(RunConfig.from_dict(saved), out=args.out or saved["out"])
        cfg = resolve_config(args, base)
        problems = cfg.validate()
        if problems:
            print("invalid configuration:\n  " + "\n  ".join(problems), file=sys.stderr)
            return 2
        out = Path(cfg.out)
        out.mkdir(parents=True, exist_ok=True)
        name = "run_config.json" if args.command == "train" else f"run_config_{args.command}.json"
        pipeline.write_run_config(cfg, out, args.command, name)
        t0 = time.perf_counter()
        if args.command == "generate":
            cmd_generate(cfg)
        elif args.command == "train":
            cmd_train(cfg)
        elif args.command == "visualize":
            cmd_visualize(cfg, args)
        else:
            cmd_evaluate(cfg, args.suite, args.run or run_dir or cfg.out)
        if args.command != "train":
            pipeline.write_json(out / f"timing_{args.command}.json", {"total_s": time.perf_counter() - t0})
    except (FileNotFoundError, KeyError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
