"""Class-specific prompts on a frozen ViT, scored by one shared vector.

A :class:`PromptVariant` fixes the layer ``i`` where the ``C`` class-specific prompts
enter. Layers before ``i`` receive class-agnostic prompts whose outputs are dropped
after each layer; from layer ``i`` on, the class-specific tokens propagate and their
final (normalised) outputs ``z^c`` are scored as ``s[c] = w . z^c``.
``shallow`` is ``i = 1``; ``deep`` is ``i = N``.
"""

from __future__ import annotations

import hashlib
import re
from dataclasses import dataclass

import numpy as np

from . import checkpoint
from .optim import TrainRecipe, run_sgd
from .seeding import stream
from .tensor import Tensor, add, cross_entropy, matmul, reshape
from .vit import (
    AttnEdit,
    LayerActivations,
    ViTModel,
    cls_tokens,
    final_norm,
    patch_embed,
    transformer_layer_forward,
)

EVAL_CHUNK = 256


@dataclass(frozen=True)
class PromptVariant:
    kind: str  # "shallow" | "deep" | "at_layer"
    layer: int | None = None

    def __post_init__(self):
        if self.kind not in ("shallow", "deep", "at_layer"):
            raise ValueError(f"unknown prompt variant {self.kind!r}")
        if self.kind == "at_layer" and (self.layer is None or self.layer < 1):
            raise ValueError("at_layer variant needs a layer index >= 1")

    @classmethod
    def parse(cls, text: str) -> "PromptVariant":
        text = text.strip().lower()
        if text in ("shallow", "deep"):
            return cls(text)
        m = re.fullmatch(r"at[-_]layer[=:](\d+)", text)
        if not m:
            raise ValueError(f"cannot parse variant {text!r}; use shallow, deep or at-layer=i")
        return cls("at_layer", int(m.group(1)))

    def injection_layer(self, depth: int) -> int:
        """1-based layer receiving the class-specific prompts."""
        i = {"shallow": 1, "deep": depth}.get(self.kind, self.layer)
        if not 1 <= i <= depth:
            raise ValueError(f"injection layer {i} outside 1..{depth}")
        return i

    def __str__(self) -> str:
        return self.kind if self.kind != "at_layer" else f"at-layer={self.layer}"


class PromptSet:
    """Learnable prompts (rows are tokens, ``(C, D)``) and the scoring vector ``w``."""

    def __init__(self, class_specific: Tensor, class_agnostic: list[Tensor], w: Tensor):
        self.class_specific = class_specific
        self.class_agnostic = class_agnostic
        self.w = w

    @classmethod
    def init(cls, dim: int, num_classes: int, agnostic_layers: int, seed: int = 0) -> "PromptSet":
        rng = stream(seed, "prompt_init")
        spec = Tensor(rng.normal(0.0, 0.02, size=(num_classes, dim)), requires_grad=True, name="class_specific")
        agn = [
            Tensor(rng.normal(0.0, 0.02, size=(num_classes, dim)), requires_grad=True, name=f"class_agnostic.{k}")
            for k in range(agnostic_layers)
        ]
        return cls(spec, agn, Tensor(np.zeros(dim), requires_grad=True, name="w"))

    @classmethod
    def for_variant(cls, model: ViTModel, num_classes: int, variant: PromptVariant, seed: int = 0) -> "PromptSet":
        i = variant.injection_layer(model.config.depth)
        return cls.init(model.config.dim, num_classes, i - 1, seed)

    @property
    def num_classes(self) -> int:
        return self.class_specific.shape[0]

    def params(self) -> list[Tensor]:
        return [self.class_specific, *self.class_agnostic, self.w]

    def arrays(self) -> dict[str, np.ndarray]:
        return {p.name: p.data for p in self.params()}

    def checksum(self) -> str:
        h = hashlib.sha256()
        for name, arr in self.arrays().items():
            h.update(name.encode())
            h.update(np.ascontiguousarray(arr, dtype="<f8").tobytes())
        return h.hexdigest()

    def copy(self) -> "PromptSet":
        return PromptSet(
            Tensor(self.class_specific.data.copy(), True, "class_specific"),
            [Tensor(a.data.copy(), True, a.name) for a in self.class_agnostic],
            Tensor(self.w.data.copy(), True, "w"),
        )

    def save(self, path, variant: PromptVariant, recipe: TrainRecipe | None = None, extra: dict | None = None) -> None:
        meta = {"kind": "prompts", "variant": str(variant), "recipe": recipe.to_dict() if recipe else None}
        meta.update(extra or {})
        checkpoint.save(path, self.arrays(), meta)

    @classmethod
    def load(cls, path) -> tuple["PromptSet", PromptVariant, dict]:
        arrays, meta = checkpoint.load(path)
        if meta.get("kind") != "prompts":
            raise checkpoint.CheckpointError(f"{path} is not a prompt checkpoint")
        n_agn = sum(1 for k in arrays if k.startswith("class_agnostic."))
        ps = cls(
            Tensor(arrays["class_specific"], True, "class_specific"),
            [Tensor(arrays[f"class_agnostic.{k}"], True, f"class_agnostic.{k}") for k in range(n_agn)],
            Tensor(arrays["w"], True, "w"),
        )
        return ps, PromptVariant.parse(meta["variant"]), meta


def _broadcast_prompts(p: Tensor, batch: int) -> Tensor:
    return add(Tensor(np.zeros((batch,) + p.shape)), p)


def prompted_forward(
    images,
    model: ViTModel,
    prompts: PromptSet,
    variant: PromptVariant,
    prompt_isolation: bool = False,
    attn_edit: AttnEdit | None = None,
) -> tuple[Tensor, LayerActivations]:
    """Return normalised class-token outputs ``Z_N`` ``(B, C, D)`` and activations.

    ``attn_edit`` (inference only) rewrites the final layer's attention weights.
    """
    cfg = model.config
    inject = variant.injection_layer(cfg.depth)
    if len(prompts.class_agnostic) != inject - 1:
        raise ValueError(
            f"variant {variant} injects at layer {inject} and needs {inject - 1} class-agnostic "
            f"prompt blocks, got {len(prompts.class_agnostic)}"
        )
    for p in prompts.params()[:-1]:
        if p.shape != (prompts.num_classes, cfg.dim):
            raise ValueError(f"prompt block {p.name} has shape {p.shape}, expected ({prompts.num_classes}, {cfg.dim})")
    if prompts.w.shape != (cfg.dim,):
        raise ValueError(f"scoring vector has shape {prompts.w.shape}, expected ({cfg.dim},)")
    e = patch_embed(images, model)
    b = e.shape[0]
    x = cls_tokens(model, b)
    z = None
    acts = LayerActivations(patches=[e.data], cls=[x.data[:, 0]], prompts=[None], num_prompts=prompts.num_classes)
    rec: dict = {}
    for li in range(cfg.depth):
        layer_no = li + 1
        last = li == cfg.depth - 1
        if layer_no < inject:
            block = _broadcast_prompts(prompts.class_agnostic[li], b)
            iso = False
        elif layer_no == inject:
            block = _broadcast_prompts(prompts.class_specific, b)
            iso = prompt_isolation
        else:
            block = z
            iso = prompt_isolation
        z_out, e, x, _ = transformer_layer_forward(
            block, e, x, model.layer(li), cfg.heads, cfg.ln_eps,
            prompt_isolation=iso,
            attn_edit=attn_edit if last else None,
            record=rec if last else None,
        )
        z = z_out if layer_no >= inject else None
        acts.patches.append(e.data)
        acts.cls.append(x.data[:, 0])
        acts.prompts.append(None if z is None else z.data)
    acts.final_attn, acts.final_scores = rec["attn"], rec["scores"]
    acts.final_q, acts.final_k, acts.final_input = rec["q"], rec["k"], rec["input"]
    return final_norm(z, model), acts


def class_scores(z: Tensor, w: Tensor) -> Tensor:
    """``s[b, c] = w . z[b, c]``."""
    if z.shape[-1] != w.shape[0]:
        raise ValueError(f"class tokens of width {z.shape[-1]} vs scoring vector {w.shape}")
    b, c, d = z.shape
    return reshape(matmul(z, reshape(w, (d, 1))), (b, c))


def predict(scores) -> np.ndarray:
    """Canonical argmax over classes; ties go to the lowest index."""
    s = scores.data if isinstance(scores, Tensor) else np.asarray(scores)
    return np.argmax(s, axis=-1)


def prompt_cam_loss(scores: Tensor, labels) -> Tensor:
    return cross_entropy(scores, labels)


def score_images(images, model, prompts, variant, prompt_isolation=False, chunk: int = EVAL_CHUNK) -> np.ndarray:
    out = []
    for start in range(0, len(images), chunk):
        z, _ = prompted_forward(images[start : start + chunk], model, prompts, variant, prompt_isolation)
        out.append(class_scores(z, prompts.w).data)
    return np.concatenate(out, axis=0)


def accuracy(scores: np.ndarray, labels) -> float:
    return float(np.mean(predict(scores) == np.asarray(labels)))


def train_prompts(
    model: ViTModel,
    train,
    variant: PromptVariant,
    recipe: TrainRecipe,
    test=None,
    prompt_isolation: bool = False,
    prompts: PromptSet | None = None,
) -> tuple[PromptSet, list[dict]]:
    """Optimise prompts and ``w`` with the backbone frozen.

    Returns the trained :class:`PromptSet` and a per-epoch log with train/test accuracy.
    """
    if not model.frozen:
        raise ValueError("train_prompts requires a frozen backbone; call model.freeze() first")
    if len(train) == 0:
        raise ValueError("cannot train prompts on an empty dataset")
    before = model.checksum()
    if prompts is None:
        prompts = PromptSet.for_variant(model, train.num_classes, variant, seed=recipe.seed)
    images = train.float_images()
    labels = np.asarray(train.labels)
    test_images = test.float_images() if test is not None else None

    def batch_loss(idx):
        z, _ = prompted_forward(images[idx], model, prompts, variant, prompt_isolation)
        return prompt_cam_loss(class_scores(z, prompts.w), labels[idx])

    def on_epoch(epoch, loss):
        row = {"train_acc": accuracy(score_images(images, model, prompts, variant, prompt_isolation), labels)}
        if test is not None:
            row["test_acc"] = accuracy(score_images(test_images, model, prompts, variant, prompt_isolation), test.labels)
        return row

    log = run_sgd(prompts.params(), len(train), batch_loss, recipe, on_epoch=on_epoch)
    if model.checksum() != before:
        raise AssertionError("frozen backbone was modified during prompt training")
    return prompts, log


def layer_sweep(model: ViTModel, train, test, recipe: TrainRecipe, prompt_isolation: bool = False) -> list[dict]:
    """Test accuracy with class-specific prompts injected at each layer ``1..N``."""
    rows = []
    for i in range(1, model.config.depth + 1):
        variant = PromptVariant("at_layer", i)
        prompts, log = train_prompts(model, train, variant, recipe, test=None, prompt_isolation=prompt_isolation)
        scores = score_images(test.float_images(), model, prompts, variant, prompt_isolation)
        rows.append({
            "layer": i,
            "variant": str(variant),
            "test_acc": accuracy(scores, test.labels),
            "final_loss": log[-1]["loss"] if log else None,
            "prompts_checksum": prompts.checksum(),
        })
    return rows
