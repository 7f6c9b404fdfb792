"""Train the SynthTraits-8 acceptance configuration and run every evaluation suite.

Usage: python3 scripts/run_synth8.py [--config configs/synth8.json] [--seed 0] [--out runs/synth8]
"""

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from promptcam import pipeline
from promptcam.cli import summary_flat
from promptcam.evaluation import write_csv, write_jsonl
from promptcam.pipeline import RunConfig
from promptcam.suites import (
    Scorer,
    accuracy_suite,
    counterfactual_suite,
    faithfulness_suite,
    pointing_suite,
    taxonomy_suite,
    visualize_images,
)

ROOT = Path(__file__).resolve().parents[1]


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config", default=str(ROOT / "configs" / "synth8.json"))
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--out", default="runs/synth8")
    args = ap.parse_args(argv)
    cfg = replace(RunConfig.from_dict(json.loads(Path(args.config).read_text())), seed=args.seed, out=args.out)
    out = Path(args.out)
    run = pipeline.train_run(cfg)
    pipeline.save_run(run, out)
    pipeline.write_run_config(run.config, out, "run_synth8")
    print(f"pretrain acc {run.pretrain_log[-1]['train_acc']:.3f}, test acc {run.prompt_log[-1]['test_acc']:.3f}, "
          f"{run.timing['total_s']:.0f}s")
    scorer = Scorer(run.model, run.prompts, run.variant, cfg.prompt_isolation)
    suites = {
        "accuracy": lambda: accuracy_suite(scorer, run.train, run.test, probe_recipe=cfg.prompt),
        "pointing": lambda: pointing_suite(scorer, run.test, cfg.top_k),
        "faithfulness": lambda: faithfulness_suite(scorer, run.test, run.train, cfg.top_k),
        "counterfactual": lambda: counterfactual_suite(scorer, run.manifest, run.test),
        "taxonomy": lambda: taxonomy_suite(run.model, scorer, run.manifest, run.train, run.test, cfg.prompt),
    }
    for name, fn in suites.items():
        rows, summary = fn()
        write_jsonl(out / f"{name}.jsonl", rows)
        write_csv(out / f"{name}_summary.csv", [summary_flat(summary)])
        pipeline.write_json(out / f"{name}_summary.json", summary)
        print(name, json.dumps({k: v for k, v in summary.items() if not isinstance(v, dict)}))
    ids = [run.test.ids[int(np.flatnonzero(run.test.labels == c)[0])] for c in range(run.test.num_classes)]
    visualize_images(scorer, run.test, ids, "true", out / "heatmaps", cfg.top_k)
    return 0


if __name__ == "__main__":
    sys.exit(main())
