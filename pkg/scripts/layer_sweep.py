"""Test accuracy with class-specific prompts entering each layer, over several seeds.

Usage: python3 scripts/layer_sweep.py [--seeds 0 1 2] [--out runs/layer_sweep.csv]
"""

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

from promptcam.evaluation import write_csv
from promptcam.pipeline import RunConfig, build_backbone, load_data
from promptcam.suites import layer_sweep_suite

ROOT = Path(__file__).resolve().parents[1]


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config", default=str(ROOT / "configs" / "synth8.json"))
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    ap.add_argument("--out", default="runs/layer_sweep.csv")
    args = ap.parse_args(argv)
    base = RunConfig.from_dict(json.loads(Path(args.config).read_text()))
    rows = []
    for seed in args.seeds:
        cfg = replace(base, seed=seed).seeded()
        _, train, test = load_data(cfg)
        model, _ = build_backbone(cfg)
        sweep, summary = layer_sweep_suite(model, train, test, cfg.prompt, cfg.prompt_isolation)
        rows += [{"seed": seed, **r} for r in sweep]
        print(f"seed {seed}: " + "  ".join(f"L{r['layer']} {r['test_acc']:.3f}" for r in sweep))
    write_csv(args.out, rows)
    return 0


if __name__ == "__main__":
    sys.exit(main())
