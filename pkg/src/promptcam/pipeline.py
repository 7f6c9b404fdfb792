"""End-to-end stages shared by the CLI, the scripts and the acceptance suite.

A :class:`RunConfig` fixes everything that influences numeric outputs. All randomness
derives from ``RunConfig.seed`` through named streams, so two runs of the same
config produce identical checkpoints, metrics and heatmap bytes.
"""

from __future__ import annotations

import json
import subprocess
import time
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from .data import SYNTH8, CorpusSpec, Dataset, SynthSpec, generate_glyph_corpus, generate_synth_traits, load_dataset
from .optim import TrainRecipe
from .prompt import PromptSet, PromptVariant, train_prompts
from .vit import ViTConfig, ViTModel, backbone_accuracy, pretrain_backbone

PRETRAIN_RECIPE = TrainRecipe(lr=0.02, epochs=10, warmup_epochs=1, batch_size=32)
PROMPT_RECIPE = TrainRecipe(lr=0.05, epochs=10, warmup_epochs=1, batch_size=32)


@dataclass
class RunConfig:
    seed: int = 0
    dataset: str = "synth8"  # "synth8" (generated in memory) or a dataset directory
    out: str = "runs/default"
    variant: str = "deep"
    prompt_isolation: bool = False  # VPT-style full attention; acceptance config enables isolation
    paper_literal_scaling: bool = False
    top_k: int = 4
    vit: ViTConfig = field(default_factory=ViTConfig)
    synth: SynthSpec = SYNTH8
    corpus: CorpusSpec = field(default_factory=CorpusSpec)
    pretrain: TrainRecipe = PRETRAIN_RECIPE
    prompt: TrainRecipe = PROMPT_RECIPE

    def validate(self) -> list[str]:
        problems = []
        try:
            PromptVariant.parse(self.variant).injection_layer(self.vit.depth)
        except ValueError as exc:
            problems.append(f"variant: {exc}")
        if not 1 <= self.top_k <= self.vit.heads:
            problems.append(f"top_k must be in 1..{self.vit.heads}, got {self.top_k}")
        if self.synth.image_size != self.vit.image_size or self.synth.patch_size != self.vit.patch_size:
            problems.append("dataset image/patch size differs from the ViT config")
        if self.corpus.image_size != self.vit.image_size or self.corpus.patch_size != self.vit.patch_size:
            problems.append("pretraining corpus image/patch size differs from the ViT config")
        problems += [f"pretrain: {p}" for p in self.pretrain.validate()]
        problems += [f"prompt: {p}" for p in self.prompt.validate()]
        if self.dataset != "synth8" and not (Path(self.dataset) / "manifest.json").exists() \
                and not Path(self.dataset).is_file():
            problems.append(f"dataset {self.dataset!r} not found (expected 'synth8' or a directory with manifest.json)")
        return problems

    def to_dict(self) -> dict:
        d = asdict(self)
        d["synth"]["occlude_splits"] = list(self.synth.occlude_splits)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        """Build from a (possibly partial) dict; nested sections override field by field."""
        base = cls()
        kw = {}
        nested = {"vit": ViTConfig, "synth": SynthSpec, "corpus": CorpusSpec,
                  "pretrain": TrainRecipe, "prompt": TrainRecipe}
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        for k, v in d.items():
            if k in nested:
                allowed = {f.name for f in fields(nested[k])}
                bad = set(v) - allowed
                if bad:
                    raise ValueError(f"unknown keys in {k}: {sorted(bad)}")
                v = dict(v)
                if "occlude_splits" in v:
                    v["occlude_splits"] = tuple(v["occlude_splits"])
                kw[k] = replace(getattr(base, k), **v)
            else:
                kw[k] = v
        return replace(base, **kw)

    def seeded(self) -> "RunConfig":
        """Propagate ``seed`` into both training recipes."""
        return replace(self, pretrain=replace(self.pretrain, seed=self.seed), prompt=replace(self.prompt, seed=self.seed))


def git_describe() -> str:
    try:
        out = subprocess.run(["git", "describe", "--always", "--dirty"], capture_output=True, text=True,
                             cwd=Path(__file__).parent, timeout=10)
        return out.stdout.strip() or "unknown"
    except (OSError, subprocess.SubprocessError):
        return "unknown"


def write_json(path, obj) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=1, sort_keys=True, default=_json_default) + "\n")


def _json_default(x):
    if isinstance(x, np.generic):
        return x.item()
    if isinstance(x, np.ndarray):
        return x.tolist()
    raise TypeError(f"cannot serialise {type(x).__name__}")


def write_run_config(cfg: RunConfig, out_dir, subcommand: str, name: str = "run_config.json") -> None:
    write_json(Path(out_dir) / name,
               {"subcommand": subcommand, "config": cfg.to_dict(), "seed": cfg.seed, "git_describe": git_describe()})


def load_data(cfg: RunConfig) -> tuple[dict, Dataset, Dataset]:
    if cfg.dataset == "synth8":
        return generate_synth_traits(cfg.synth, cfg.seed)
    return load_dataset(cfg.dataset)


def build_backbone(cfg: RunConfig) -> tuple[ViTModel, list[dict]]:
    """Pretrain a fresh ViT on the held-out glyph corpus and freeze it."""
    cfg = cfg.seeded()
    corpus = generate_glyph_corpus(cfg.corpus, seed=cfg.seed)
    model = ViTModel.init(replace(cfg.vit, num_classes=corpus.num_classes), seed=cfg.seed)
    log = pretrain_backbone(model, corpus, cfg.pretrain)
    if not log:
        log = [{"epoch": -1, "train_acc": backbone_accuracy(model, corpus.float_images(), corpus.labels)}]
    return model.freeze(), log


@dataclass
class TrainedRun:
    config: RunConfig
    manifest: dict
    train: Dataset
    test: Dataset
    model: ViTModel
    prompts: PromptSet
    variant: PromptVariant
    pretrain_log: list[dict]
    prompt_log: list[dict]
    timing: dict


def train_run(cfg: RunConfig) -> TrainedRun:
    """Pretrain, freeze and train prompts for ``cfg`` (nothing written to disk)."""
    problems = cfg.validate()
    if problems:
        raise ValueError("invalid config:\n  " + "\n  ".join(problems))
    cfg = cfg.seeded()
    t0 = time.perf_counter()
    manifest, train, test = load_data(cfg)
    t1 = time.perf_counter()
    model, pre_log = build_backbone(cfg)
    t2 = time.perf_counter()
    variant = PromptVariant.parse(cfg.variant)
    prompts, log = train_prompts(model, train, variant, cfg.prompt, test=test, prompt_isolation=cfg.prompt_isolation)
    t3 = time.perf_counter()
    timing = {"data_s": t1 - t0, "pretrain_s": t2 - t1, "prompt_s": t3 - t2, "total_s": t3 - t0}
    return TrainedRun(cfg, manifest, train, test, model, prompts, variant, pre_log, log, timing)


def save_run(run: TrainedRun, out_dir) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    run.model.save(out / "backbone.ckpt", {"pretrain_corpus": asdict(run.config.corpus)})
    run.prompts.save(out / "prompts.ckpt", run.variant, run.config.prompt,
                     {"prompt_isolation": run.config.prompt_isolation})
    write_json(out / "metrics.json", {"pretrain": run.pretrain_log, "prompt": run.prompt_log})
    write_json(out / "timing.json", run.timing)


def load_run(run_dir, cfg: RunConfig | None = None) -> tuple[RunConfig, ViTModel, PromptSet, PromptVariant]:
    run_dir = Path(run_dir)
    missing = [n for n in ("backbone.ckpt", "prompts.ckpt") if not (run_dir / n).exists()]
    if missing:
        raise FileNotFoundError(f"{run_dir} lacks {', '.join(missing)}; run `promptcam train` first")
    if cfg is None:
        rc = run_dir / "run_config.json"
        cfg = RunConfig.from_dict(json.loads(rc.read_text())["config"]) if rc.exists() else RunConfig()
    model = ViTModel.load(run_dir / "backbone.ckpt").freeze()
    prompts, variant, _ = PromptSet.load(run_dir / "prompts.ckpt")
    return cfg, model, prompts, variant
