"""Faithfulness (insertion/deletion), pointing game, linear probing and report writers."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
from scipy.ndimage import uniform_filter

from .images import to_float, upsample_nearest
from .interpret import AttentionStack, TraitRanking
from .optim import TrainRecipe, run_sgd
from .seeding import stream, trunc_normal
from .tensor import Tensor, add, cross_entropy, matmul
from .vit import ViTModel, cls_features, vit_forward

Classifier = Callable[[np.ndarray], np.ndarray]  # float images (B, H, W, 3) -> scores (B, C)


@dataclass
class SaliencyMap:
    scores: np.ndarray  # (H, W)
    provenance: str = "prompt_cam_top_heads"
    heads: list[int] = field(default_factory=list)

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64)
        if self.scores.ndim != 2:
            raise ValueError(f"saliency must be (H, W), got {self.scores.shape}")
        if not np.all(np.isfinite(self.scores)):
            raise ValueError("saliency contains non-finite values")

    def pixel_order(self) -> np.ndarray:
        """Flat pixel indices by descending score, row-major index breaking ties."""
        flat = self.scores.ravel()
        return np.lexsort((np.arange(flat.size), -flat))


@dataclass
class FaithfulnessResult:
    insertion_auc: float
    deletion_auc: float
    fractions: np.ndarray
    insertion_curve: np.ndarray
    deletion_curve: np.ndarray

    @property
    def gap(self) -> float:
        return self.insertion_auc - self.deletion_auc


def build_saliency(stack: AttentionStack, ranking: TraitRanking | None, top_k: int = 4, patch_size: int = 1,
                   order: str = "greedy") -> SaliencyMap:
    """Mean of the ``top_k`` most important heads' maps, upsampled to pixels.

    ``order="greedy"`` takes survivors first, then blurred heads from last blurred to
    first; ``order="mass"`` ranks by peak attention instead.
    """
    if top_k < 1:
        raise ValueError("top_k must be >= 1")
    if top_k > stack.heads:
        raise ValueError(f"top_k={top_k} exceeds the {stack.heads} available heads")
    if order == "greedy":
        if ranking is None:
            raise ValueError("greedy ordering needs a TraitRanking")
        heads = ranking.importance_order()[:top_k]
    elif order == "mass":
        peak = stack.maps.max(axis=1)
        heads = [int(h) for h in np.lexsort((np.arange(stack.heads), -peak))[:top_k]]
    else:
        raise ValueError(f"unknown head order {order!r}")
    g = int(round(np.sqrt(stack.maps.shape[1])))
    mean = stack.maps[heads].mean(axis=0).reshape(g, g)
    return SaliencyMap(upsample_nearest(mean, patch_size), "prompt_cam_top_heads", list(heads))


def uniform_saliency(shape: tuple[int, int]) -> SaliencyMap:
    return SaliencyMap(np.ones(shape), "uniform")


def softmax_np(scores: np.ndarray) -> np.ndarray:
    s = scores - scores.max(axis=-1, keepdims=True)
    e = np.exp(s)
    return e / e.sum(axis=-1, keepdims=True)


def blurred_baseline(image: np.ndarray, patch_size: int) -> np.ndarray:
    return uniform_filter(to_float(image), size=(patch_size, patch_size, 1), mode="nearest")


def _patch_ranking(saliency: SaliencyMap, patch_size: int) -> np.ndarray:
    h, w = saliency.scores.shape
    blocks = saliency.scores.reshape(h // patch_size, patch_size, w // patch_size, patch_size).mean(axis=(1, 3))
    flat = blocks.ravel()
    return np.lexsort((np.arange(flat.size), -flat))


def _trapezoid(y: np.ndarray, x: np.ndarray) -> float:
    return float(np.sum((y[1:] + y[:-1]) * np.diff(x)) / 2.0)


def insertion_deletion(image, saliency: SaliencyMap, classifier: Classifier, class_id: int, steps: int | None = None,
                       patch_size: int = 8, mean_color: np.ndarray | None = None) -> FaithfulnessResult:
    """Patch-block insertion and deletion curves for class ``class_id``.

    Deletion paints ranked patches with ``mean_color``; insertion reveals them into a
    box-blurred copy (kernel = ``patch_size``). ``steps`` defaults to one patch per step.
    """
    img = to_float(image)
    h, w = img.shape[:2]
    if saliency.scores.shape != (h, w):
        raise ValueError(f"saliency {saliency.scores.shape} does not match image {(h, w)}")
    if h % patch_size or w % patch_size:
        raise ValueError("image size must be a multiple of the patch size")
    gw = w // patch_size
    m = (h // patch_size) * gw
    steps = m if steps is None else steps
    if steps < 1:
        raise ValueError("steps must be >= 1")
    order = _patch_ranking(saliency, patch_size)
    counts = [int(round(k * m / steps)) for k in range(steps + 1)]
    base_del = np.broadcast_to(np.asarray(mean_color if mean_color is not None else img.mean(axis=(0, 1))), img.shape)
    base_ins = blurred_baseline(img, patch_size)

    def block_mask(n: int) -> np.ndarray:
        mask = np.zeros((h, w), dtype=bool)
        for idx in order[:n]:
            r, c = divmod(int(idx), gw)
            mask[r * patch_size : (r + 1) * patch_size, c * patch_size : (c + 1) * patch_size] = True
        return mask

    dels, ins = [], []
    for n in counts:
        mask = block_mask(n)[..., None]
        dels.append(np.where(mask, base_del, img))
        ins.append(np.where(mask, img, base_ins))
    probs = softmax_np(classifier(np.stack(dels + ins)))[:, class_id]
    fr = np.asarray(counts, dtype=np.float64) / m
    d, i = probs[: steps + 1], probs[steps + 1 :]
    return FaithfulnessResult(_trapezoid(i, fr), _trapezoid(d, fr), fr, i, d)


def pointing_game(saliency: SaliencyMap, mask: np.ndarray) -> tuple[int, float]:
    """``(hit, mass_in_mask)``; the argmax is the first maximal pixel in row-major order."""
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != saliency.scores.shape:
        raise ValueError(f"mask {mask.shape} does not match saliency {saliency.scores.shape}")
    if not mask.any():
        raise ValueError("empty mask")
    flat = saliency.scores.ravel()
    hit = int(mask.ravel()[int(np.argmax(flat))])
    total = flat.sum()
    mass = float(saliency.scores[mask].sum() / total) if total != 0 else float(mask.mean())
    return hit, mass


@dataclass
class LinearProbe:
    weight: Tensor
    bias: Tensor

    def scores(self, feats: np.ndarray) -> np.ndarray:
        return feats @ self.weight.data + self.bias.data


def linear_probe_baseline(model: ViTModel, train, test, recipe: TrainRecipe) -> tuple[float, list[AttentionStack], LinearProbe]:
    """Train a C-way head on frozen final [CLS] features; return test accuracy and [CLS] maps."""
    if not model.frozen:
        raise ValueError("linear probing requires a frozen backbone")
    d, c = model.config.dim, train.num_classes
    rng = stream(recipe.seed, "probe_init")
    probe = LinearProbe(Tensor(trunc_normal(rng, (d, c), 0.02), True, "probe.weight"), Tensor(np.zeros(c), True, "probe.bias"))
    feats = cls_features(train.float_images(), model)
    labels = np.asarray(train.labels)

    def batch_loss(idx):
        return cross_entropy(add(matmul(Tensor(feats[idx]), probe.weight), probe.bias), labels[idx])

    run_sgd([probe.weight, probe.bias], len(train), batch_loss, recipe, stream_name="probe")
    test_images = test.float_images()
    acc = float(np.mean(np.argmax(probe.scores(cls_features(test_images, model)), axis=1) == np.asarray(test.labels)))
    return acc, cls_attention_stacks(model, test_images), probe


def cls_attention_stacks(model: ViTModel, images, chunk: int = 256) -> list[AttentionStack]:
    """Final-layer [CLS]-query attention over patches (the conventional model's map)."""
    m = model.config.num_patches
    out = []
    for s in range(0, len(images), chunk):
        logits, acts = vit_forward(images[s : s + chunk], model)
        pred = np.argmax(logits.data, axis=1)
        raw = acts.final_attn[:, :, m, :m]  # [CLS] is the last token
        for b in range(raw.shape[0]):
            out.append(AttentionStack(int(pred[b]), raw[b] / raw[b].sum(axis=-1, keepdims=True), raw[b].copy(), "cls"))
    return out


# --- report writers ------------------------------------------------------------------


def _jsonable(x):
    if isinstance(x, dict):
        return {k: _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, np.ndarray):
        return x.tolist()
    if isinstance(x, np.generic):
        return x.item()
    return x


def write_jsonl(path, rows) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w") as fh:
        for row in rows:
            fh.write(json.dumps(_jsonable(row), sort_keys=True) + "\n")


def write_csv(path, rows: list[dict]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    keys = sorted({k for r in rows for k in r})
    with path.open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=keys)
        w.writeheader()
        for r in rows:
            w.writerow({k: _jsonable(r.get(k)) for k in keys})
