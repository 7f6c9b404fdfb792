"""A small pre-norm Vision Transformer built on :mod:`promptcam.tensor`.

Token sequences are ``(batch, tokens, dim)``. Within a layer the token order is
``[prompts, patches, cls]``; a plain ViT simply has no prompt block.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np

from . import checkpoint
from .images import patchify, to_float
from .seeding import stream, trunc_normal
from .tensor import (
    ShapeError,
    Tensor,
    add,
    concat,
    gelu,
    layer_norm,
    matmul,
    reshape,
    scale,
    softmax,
    take,
    transpose,
)

LAYER_FIELDS = (
    "ln1.gamma", "ln1.beta",
    "attn.wq", "attn.bq", "attn.wk", "attn.bk", "attn.wv", "attn.bv", "attn.wo", "attn.bo",
    "ln2.gamma", "ln2.beta",
    "mlp.w1", "mlp.b1", "mlp.w2", "mlp.b2",
)  # fmt: skip
PIXEL_MEAN = 0.5
PIXEL_STD = 0.25


@dataclass(frozen=True)
class ViTConfig:
    depth: int = 4  # N
    dim: int = 64  # D
    heads: int = 4  # R
    patch_size: int = 8
    image_size: int = 32
    num_classes: int = 8  # pretraining head only
    channels: int = 3
    mlp_ratio: int = 2
    ln_eps: float = 1e-6
    init_std: float | None = None  # None: 1/sqrt(fan_in) per projection

    def __post_init__(self):
        problems = []
        if self.depth < 1:
            problems.append(f"depth must be >= 1, got {self.depth}")
        if self.heads < 1 or self.dim % self.heads:
            problems.append(f"dim {self.dim} not divisible by heads {self.heads}")
        if self.patch_size < 1 or self.image_size % self.patch_size:
            problems.append(f"image_size {self.image_size} not divisible by patch_size {self.patch_size}")
        if self.num_classes < 1:
            problems.append("num_classes must be >= 1")
        if problems:
            raise ValueError("; ".join(problems))

    @property
    def head_dim(self) -> int:
        return self.dim // self.heads

    @property
    def grid(self) -> int:
        return self.image_size // self.patch_size

    @property
    def num_patches(self) -> int:
        return self.grid**2

    @property
    def patch_dim(self) -> int:
        return self.patch_size * self.patch_size * self.channels

    def to_dict(self) -> dict:
        return asdict(self)


class ViTModel:
    """Backbone parameters keyed by dotted name, plus a ``frozen`` flag."""

    def __init__(self, config: ViTConfig, params: dict[str, Tensor]):
        self.config = config
        self.params = params
        self.frozen = False

    @classmethod
    def init(cls, config: ViTConfig, seed: int = 0) -> "ViTModel":
        rng = stream(seed, "init")
        d, hidden = config.dim, config.dim * config.mlp_ratio

        def proj(fan_in: int, fan_out: int) -> np.ndarray:
            std = config.init_std if config.init_std is not None else fan_in**-0.5
            return trunc_normal(rng, (fan_in, fan_out), std)

        arrays: dict[str, np.ndarray] = {
            "patch_proj.weight": proj(config.patch_dim, d),
            "patch_proj.bias": np.zeros(d),
            "pos_embed": rng.normal(0.0, 0.02, size=(config.num_patches, d)),
            "cls_token": trunc_normal(rng, (d,)),
        }
        for i in range(config.depth):
            p = f"layers.{i}."
            arrays[p + "ln1.gamma"] = np.ones(d)
            arrays[p + "ln1.beta"] = np.zeros(d)
            for w in ("q", "k", "v", "o"):
                arrays[p + f"attn.w{w}"] = proj(d, d)
                arrays[p + f"attn.b{w}"] = np.zeros(d)
            arrays[p + "ln2.gamma"] = np.ones(d)
            arrays[p + "ln2.beta"] = np.zeros(d)
            arrays[p + "mlp.w1"] = proj(d, hidden)
            arrays[p + "mlp.b1"] = np.zeros(hidden)
            arrays[p + "mlp.w2"] = proj(hidden, d)
            arrays[p + "mlp.b2"] = np.zeros(d)
        arrays["norm.gamma"] = np.ones(d)
        arrays["norm.beta"] = np.zeros(d)
        arrays["head.weight"] = proj(d, config.num_classes)
        arrays["head.bias"] = np.zeros(config.num_classes)
        return cls.from_arrays(config, arrays)

    @classmethod
    def from_arrays(cls, config: ViTConfig, arrays: dict[str, np.ndarray], frozen: bool = False) -> "ViTModel":
        params = {k: Tensor(v, requires_grad=not frozen, name=k) for k, v in arrays.items()}
        model = cls(config, params)
        model.frozen = frozen
        return model

    def layer(self, i: int) -> dict[str, Tensor]:
        p = f"layers.{i}."
        return {f: self.params[p + f] for f in LAYER_FIELDS}

    def freeze(self) -> "ViTModel":
        for t in self.params.values():
            t.requires_grad = False
            t.grad = None
        self.frozen = True
        return self

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: t.data for k, t in self.params.items()}

    def checksum(self) -> str:
        h = hashlib.sha256()
        for k, t in self.params.items():
            h.update(k.encode())
            h.update(np.ascontiguousarray(t.data, dtype="<f8").tobytes())
        return h.hexdigest()

    def save(self, path, extra_meta: dict | None = None) -> None:
        meta = {"kind": "vit", "config": self.config.to_dict(), "frozen": self.frozen}
        meta.update(extra_meta or {})
        checkpoint.save(path, self.arrays(), meta)

    @classmethod
    def load(cls, path) -> "ViTModel":
        arrays, meta = checkpoint.load(path)
        if meta.get("kind") != "vit":
            raise checkpoint.CheckpointError(f"{path} is not a ViT checkpoint")
        return cls.from_arrays(ViTConfig(**meta["config"]), arrays, frozen=meta.get("frozen", False))


@dataclass
class LayerActivations:
    """Per-layer outputs (numpy copies) and the final layer's attention internals.

    ``patches[i]``/``cls[i]`` are the inputs to layer ``i`` (index 0 = embeddings,
    index N = final outputs). ``final_*`` arrays are ``(batch, heads, tokens, ...)``.
    """

    patches: list[np.ndarray] = field(default_factory=list)
    cls: list[np.ndarray] = field(default_factory=list)
    prompts: list[np.ndarray | None] = field(default_factory=list)
    final_attn: np.ndarray | None = None
    final_scores: np.ndarray | None = None
    final_q: np.ndarray | None = None
    final_k: np.ndarray | None = None
    final_input: np.ndarray | None = None
    num_prompts: int = 0


def patch_embed(images, model: ViTModel) -> Tensor:
    """Project row-major patches to ``(batch, M, D)`` and add positional encodings."""
    cfg = model.config
    images = to_float(images)
    if images.ndim == 3:
        images = images[None]
    if images.ndim != 4 or images.shape[1:] != (cfg.image_size, cfg.image_size, cfg.channels):
        raise ShapeError(
            f"expected images of shape (*, {cfg.image_size}, {cfg.image_size}, {cfg.channels}), "
            f"got {images.shape}"
        )
    patches = Tensor((patchify(images, cfg.patch_size) - PIXEL_MEAN) / PIXEL_STD)
    p = model.params
    return add(add(matmul(patches, p["patch_proj.weight"]), p["patch_proj.bias"]), p["pos_embed"])


AttnEdit = Callable[[np.ndarray], np.ndarray]


def msa_forward(
    tokens: Tensor,
    layer: dict[str, Tensor],
    heads: int,
    mask: np.ndarray | None = None,
    attn_edit: AttnEdit | None = None,
    record: dict | None = None,
) -> tuple[Tensor, Tensor]:
    """Multi-head self-attention. Returns ``(out, attn)`` with ``attn`` ``(B, R, T, T)``.

    ``attn[b, r, i, j]`` is query token ``i``'s weight on key token ``j`` (softmax over
    ``j``). ``mask`` is an additive ``(T, T)`` array of 0 / -inf. ``attn_edit`` rewrites
    the attention weights before they mix values; it is inference-only.
    """
    b, t, d = tokens.shape
    dh = d // heads

    def split(w: str) -> Tensor:
        proj = add(matmul(tokens, layer[f"attn.w{w}"]), layer[f"attn.b{w}"])
        return transpose(reshape(proj, (b, t, heads, dh)), (0, 2, 1, 3))

    q, k, v = split("q"), split("k"), split("v")
    scores = scale(matmul(q, transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(dh))
    if mask is not None:
        scores = add(scores, Tensor(mask))
    attn = softmax(scores, axis=-1)
    if record is not None:
        record.update(q=q.data, k=k.data, scores=scores.data, attn=attn.data)
    if attn_edit is not None:
        if attn.requires_grad:
            raise RuntimeError("attention edits are inference-only; run outside a gradient tape")
        attn = Tensor(attn_edit(attn.data.copy()))
    mixed = transpose(matmul(attn, v), (0, 2, 1, 3))
    out = add(matmul(reshape(mixed, (b, t, d)), layer["attn.wo"]), layer["attn.bo"])
    return out, attn


def prompt_isolation_mask(num_prompts: int, total: int) -> np.ndarray:
    """Block prompt -> prompt attention (including self) so each prompt sees patches and [CLS] only."""
    mask = np.zeros((total, total))
    mask[:num_prompts, :num_prompts] = -np.inf
    return mask


def transformer_layer_forward(
    prompts: Tensor | None,
    patches: Tensor,
    cls: Tensor,
    layer: dict[str, Tensor],
    heads: int,
    eps: float = 1e-6,
    prompt_isolation: bool = False,
    attn_edit: AttnEdit | None = None,
    record: dict | None = None,
) -> tuple[Tensor | None, Tensor, Tensor, Tensor]:
    """One pre-norm layer over ``[prompts, patches, cls]``; returns ``(Z, E, x, attn)``."""
    parts = [patches, cls] if prompts is None else [prompts, patches, cls]
    d = patches.shape[-1]
    for part in parts:
        if part.shape[-1] != d or part.shape[0] != patches.shape[0]:
            raise ShapeError(f"token block {part.shape} inconsistent with patches {patches.shape}")
    tokens = concat(parts, axis=1)
    n_p = 0 if prompts is None else prompts.shape[1]
    m = patches.shape[1]
    mask = None
    if prompt_isolation and n_p > 0:
        mask = prompt_isolation_mask(n_p, tokens.shape[1])
    if record is not None:
        record["input"] = tokens.data
    attn_out, attn = msa_forward(
        layer_norm(tokens, layer["ln1.gamma"], layer["ln1.beta"], eps),
        layer, heads, mask=mask, attn_edit=attn_edit, record=record,
    )
    h = add(tokens, attn_out)
    z = layer_norm(h, layer["ln2.gamma"], layer["ln2.beta"], eps)
    z = add(matmul(gelu(add(matmul(z, layer["mlp.w1"]), layer["mlp.b1"])), layer["mlp.w2"]), layer["mlp.b2"])
    out = add(h, z)
    z_out = take(out, (slice(None), slice(0, n_p))) if n_p else None
    e_out = take(out, (slice(None), slice(n_p, n_p + m)))
    x_out = take(out, (slice(None), slice(n_p + m, n_p + m + 1)))
    return z_out, e_out, x_out, attn


def cls_tokens(model: ViTModel, batch: int) -> Tensor:
    """Broadcast the learnable [CLS] vector to ``(batch, 1, D)`` (differentiable)."""
    cls = model.params["cls_token"]
    return add(Tensor(np.zeros((batch, 1, model.config.dim))), cls)


def final_norm(tokens: Tensor, model: ViTModel) -> Tensor:
    p = model.params
    return layer_norm(tokens, p["norm.gamma"], p["norm.beta"], model.config.ln_eps)


def vit_forward(images, model: ViTModel) -> tuple[Tensor, LayerActivations]:
    """Plain ViT: logits from the pretraining head on the normalised final [CLS]."""
    cfg = model.config
    e = patch_embed(images, model)
    x = cls_tokens(model, e.shape[0])
    acts = LayerActivations(patches=[e.data], cls=[x.data[:, 0]], prompts=[None])
    for i in range(cfg.depth):
        rec: dict | None = {} if i == cfg.depth - 1 else None
        _, e, x, attn = transformer_layer_forward(None, e, x, model.layer(i), cfg.heads, cfg.ln_eps, record=rec)
        acts.patches.append(e.data)
        acts.cls.append(x.data[:, 0])
        acts.prompts.append(None)
    acts.final_attn = rec["attn"]
    acts.final_scores = rec["scores"]
    acts.final_q, acts.final_k = rec["q"], rec["k"]
    acts.final_input = rec["input"]
    feats = reshape(final_norm(x, model), (e.shape[0], cfg.dim))
    p = model.params
    logits = add(matmul(feats, p["head.weight"]), p["head.bias"])
    return logits, acts


def cls_features(images, model: ViTModel) -> np.ndarray:
    """Normalised final [CLS] features ``(batch, D)`` for linear probing."""
    cfg = model.config
    e = patch_embed(images, model)
    x = cls_tokens(model, e.shape[0])
    for i in range(cfg.depth):
        _, e, x, _ = transformer_layer_forward(None, e, x, model.layer(i), cfg.heads, cfg.ln_eps)
    return final_norm(x, model).data[:, 0]


def pretrain_backbone(model: ViTModel, train, recipe, test=None) -> list[dict]:
    """Supervised cross-entropy on the final [CLS] through the throwaway linear head."""
    from .optim import run_sgd
    from .tensor import cross_entropy

    if model.frozen:
        raise ValueError("cannot pretrain a frozen backbone")
    images = train.float_images()
    labels = np.asarray(train.labels)

    def batch_loss(idx):
        logits, _ = vit_forward(images[idx], model)
        return cross_entropy(logits, labels[idx])

    def on_epoch(epoch, loss):
        row = {"train_acc": backbone_accuracy(model, images, labels)}
        if test is not None:
            row["test_acc"] = backbone_accuracy(model, test.float_images(), test.labels)
        return row

    return run_sgd(list(model.params.values()), len(train), batch_loss, recipe, stream_name="pretrain", on_epoch=on_epoch)


def backbone_logits(model: ViTModel, images, chunk: int = 256) -> np.ndarray:
    return np.concatenate(
        [vit_forward(images[s : s + chunk], model)[0].data for s in range(0, len(images), chunk)], axis=0
    )


def backbone_accuracy(model: ViTModel, images, labels) -> float:
    return float(np.mean(np.argmax(backbone_logits(model, images), axis=1) == np.asarray(labels)))
