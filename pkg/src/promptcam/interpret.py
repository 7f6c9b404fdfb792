"""Per-head class attention maps, greedy head blurring, and trait manipulation.

All maps come from the final layer, with the query of class prompt ``c`` and the
``M`` patch keys. ``maps`` are renormalised over patches (the default display);
``raw`` keeps the slice of the full-sequence softmax the classifier actually used.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .images import upsample_nearest
from .prompt import PromptSet, PromptVariant, class_scores, predict, prompted_forward
from .tensor import Tensor
from .vit import ViTModel, final_norm, transformer_layer_forward


class NotCorrectlyClassified(ValueError):
    """Greedy ranking needs ``predict == c``; use :func:`explain_misclassification` instead."""


@dataclass
class AttentionStack:
    class_id: int
    maps: np.ndarray  # (R, M), each row sums to 1
    raw: np.ndarray  # (R, M), slice of the full softmax, rows sum to <= 1
    source: str = "forward-consistent"

    @property
    def heads(self) -> int:
        return self.maps.shape[0]

    def upsampled(self, patch_size: int) -> np.ndarray:
        g = int(round(np.sqrt(self.maps.shape[1])))
        return upsample_nearest(self.maps.reshape(-1, g, g), patch_size)


@dataclass
class TraitRanking:
    class_id: int
    blur_order: list[int]  # least important first
    surviving: list[int]  # most important first
    base_score: float
    steps: list[dict] = field(default_factory=list)  # per greedy step: {"candidates": {head: s_c}, "chosen"}
    ties: list[dict] = field(default_factory=list)

    @property
    def blurred(self) -> set[int]:
        return set(self.blur_order)

    def importance_order(self) -> list[int]:
        """Heads from most to least important: survivors, then blurred heads last-in first."""
        return list(self.surviving) + list(reversed(self.blur_order))


@dataclass
class SimplifiedLayer:
    """Single-head attention layer without norms/MLP/residuals.

    ``values`` is ``(M, D)`` (row ``j`` is patch ``j``'s value feature).
    """

    values: np.ndarray
    alpha_star: np.ndarray  # (M,)
    alpha: np.ndarray  # (C, M)
    w_fc: np.ndarray  # (C, D)
    w_shared: np.ndarray  # (D,)


def _patch_slice(num_prompts: int, num_patches: int) -> slice:
    return slice(num_prompts, num_prompts + num_patches)


def extract_class_attention(
    acts, class_id: int, image_index: int = 0, paper_literal_scaling: bool = False, num_patches: int | None = None
) -> AttentionStack:
    """Class ``class_id``'s per-head attention over the patches of one image."""
    c_total = acts.num_prompts
    if not 0 <= class_id < c_total:
        raise IndexError(f"class {class_id} out of range for {c_total} prompts")
    m = num_patches if num_patches is not None else acts.patches[-1].shape[1]
    sl = _patch_slice(c_total, m)
    raw = acts.final_attn[image_index, :, class_id, sl]
    if paper_literal_scaling:
        q = acts.final_q[image_index, :, class_id]  # (R, D')
        k = acts.final_k[image_index, :, sl]  # (R, M, D')
        logits = np.einsum("rd,rmd->rm", q, k) / q.shape[-1]
        source = "paper-literal"
    else:
        logits = acts.final_scores[image_index, :, class_id, sl]
        source = "forward-consistent"
    logits = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(logits)
    return AttentionStack(class_id, e / e.sum(axis=-1, keepdims=True), raw.copy(), source)


def class_attention(image, model: ViTModel, prompts: PromptSet, variant: PromptVariant, class_id: int,
                    prompt_isolation: bool = False, paper_literal_scaling: bool = False) -> AttentionStack:
    _, acts = prompted_forward(image, model, prompts, variant, prompt_isolation)
    return extract_class_attention(acts, class_id, 0, paper_literal_scaling, model.config.num_patches)


def cross_class_attention(image, model, prompts, variant, other_class: int, prompt_isolation: bool = False,
                          paper_literal_scaling: bool = False) -> AttentionStack:
    """Maps queried by another class's prompt (common-trait analysis)."""
    return class_attention(image, model, prompts, variant, other_class, prompt_isolation, paper_literal_scaling)


# --- blurring ---------------------------------------------------------------


def uniform_blur_edit(class_id: int, heads, num_prompts: int, num_patches: int):
    """Attention edit giving prompt ``class_id`` uniform patch attention in ``heads``.

    The patch mass of the row is kept and spread evenly, so attention to [CLS] and
    prompt tokens is untouched and the renormalised map becomes exactly ``1/M``.
    """
    heads = sorted(heads)
    sl = _patch_slice(num_prompts, num_patches)

    def edit(attn: np.ndarray) -> np.ndarray:
        for r in heads:
            row = attn[:, r, class_id, sl]
            attn[:, r, class_id, sl] = row.sum(axis=-1, keepdims=True) / num_patches
        return attn

    return edit


class FinalLayerScorer:
    """Re-runs only the last layer from cached inputs to score attention edits."""

    def __init__(self, model: ViTModel, prompts: PromptSet, acts, prompt_isolation: bool = False):
        self.model = model
        self.prompts = prompts
        self.iso = prompt_isolation
        self.num_prompts = acts.num_prompts
        self.num_patches = model.config.num_patches
        self.tokens = acts.final_input  # (B, T, D)

    def scores(self, attn_edit=None) -> np.ndarray:
        cfg = self.model.config
        c, m = self.num_prompts, self.num_patches
        t = self.tokens
        z, _, _, _ = transformer_layer_forward(
            Tensor(t[:, :c]), Tensor(t[:, c : c + m]), Tensor(t[:, c + m :]),
            self.model.layer(cfg.depth - 1), cfg.heads, cfg.ln_eps,
            prompt_isolation=self.iso, attn_edit=attn_edit,
        )
        return class_scores(final_norm(z, self.model), self.prompts.w).data

    def blurred_scores(self, class_id: int, heads) -> np.ndarray:
        if not heads:
            return self.scores()
        return self.scores(uniform_blur_edit(class_id, heads, self.num_prompts, self.num_patches))


def greedy_trait_ranking(image, model: ViTModel, prompts: PromptSet, variant: PromptVariant, class_id: int,
                         prompt_isolation: bool = False) -> TraitRanking:
    """Blur the least important head (highest blurred ``s[c]``) until any further blur flips the label."""
    z, acts = prompted_forward(image, model, prompts, variant, prompt_isolation)
    base = class_scores(z, prompts.w).data
    if base.shape[0] != 1:
        raise ValueError("greedy_trait_ranking works on a single image")
    if predict(base)[0] != class_id:
        raise NotCorrectlyClassified(
            f"image is predicted as {int(predict(base)[0])}, not {class_id}; "
            "use explain_misclassification for wrong predictions"
        )
    scorer = FinalLayerScorer(model, prompts, acts, prompt_isolation)
    heads = model.config.heads
    blurred: list[int] = []
    steps, ties = [], []
    while len(blurred) < heads:
        cand = {}
        keeps = {}
        for r in range(heads):
            if r in blurred:
                continue
            s = scorer.blurred_scores(class_id, blurred + [r])
            cand[r] = float(s[0, class_id])
            keeps[r] = bool(predict(s)[0] == class_id)
        best = max(cand.values())
        tied = [r for r, v in cand.items() if v == best]
        chosen = min(tied)
        if len(tied) > 1:
            ties.append({"step": len(steps), "heads": tied})
        if not keeps[chosen]:
            steps.append({"candidates": cand, "keeps": keeps, "chosen": None})
            break
        steps.append({"candidates": cand, "keeps": keeps, "chosen": chosen})
        blurred.append(chosen)
    survivors = [r for r in range(heads) if r not in blurred]
    if survivors:
        last = steps[-1]["candidates"]
        survivors.sort(key=lambda r: (last[r], r))  # lowest blurred score = most important
    return TraitRanking(class_id, blurred, survivors, float(base[0, class_id]), steps, ties)


# --- reports -------------------------------------------------------------------


def mass_on_mask(stack: AttentionStack, mask: np.ndarray, patch_size: int) -> np.ndarray:
    """Per-head attention mass falling inside a pixel mask (nearest-neighbour upsampled maps)."""
    up = stack.upsampled(patch_size) / float(patch_size * patch_size)
    return (up * mask[None]).sum(axis=(1, 2))


def head_report(stack: AttentionStack, ranking: TraitRanking | None, mask: np.ndarray | None, patch_size: int,
                image_id: str = "", scores=None) -> dict:
    mass = mass_on_mask(stack, mask, patch_size) if mask is not None else [None] * stack.heads
    order = ranking.importance_order() if ranking is not None else list(range(stack.heads))
    rank = {h: i for i, h in enumerate(order)}
    return {
        "image_id": image_id,
        "class": int(stack.class_id),
        "per_head": [
            {"head": r, "mass_on_trait": None if mass[r] is None else float(mass[r]), "rank": rank[r]}
            for r in range(stack.heads)
        ],
        "blur_order": list(ranking.blur_order) if ranking else [],
        "surviving": list(ranking.surviving) if ranking else [],
        "scores": None if scores is None else [float(v) for v in np.ravel(scores)],
    }


def explain_misclassification(image, true_class: int, model: ViTModel, prompts: PromptSet, variant: PromptVariant,
                              trait_mask: np.ndarray | None = None, prompt_isolation: bool = False,
                              image_id: str = "") -> tuple[AttentionStack, AttentionStack, dict]:
    """Maps for the true and the predicted class of a misclassified image, plus a JSON-ready report."""
    z, acts = prompted_forward(image, model, prompts, variant, prompt_isolation)
    s = class_scores(z, prompts.w).data[0]
    pred = int(predict(s))
    if pred == true_class:
        raise ValueError(f"image is correctly classified as {true_class}; nothing to explain")
    m = model.config.num_patches
    st_true = extract_class_attention(acts, true_class, 0, num_patches=m)
    st_pred = extract_class_attention(acts, pred, 0, num_patches=m)
    p = model.config.patch_size
    report = {
        "image_id": image_id,
        "true_class": int(true_class),
        "predicted_class": pred,
        "score_gap": float(s[pred] - s[true_class]),
        "scores": [float(v) for v in s],
        "true": head_report(st_true, None, trait_mask, p, image_id),
        "predicted": head_report(st_pred, None, trait_mask, p, image_id),
    }
    return st_true, st_pred, report


# --- counterfactual edits ----------------------------------------------------------


def manipulate_trait_region(image: np.ndarray, mask: np.ndarray, mode: str, source: np.ndarray,
                            allow_empty: bool = False) -> np.ndarray:
    """Overwrite ``mask`` pixels with ``source`` (a background render or a donor image).

    ``mode`` is ``"erase-to-background"`` or ``"copy-from-donor"``; both copy pixels
    from ``source``, the name records intent in reports.
    """
    if mode not in ("erase-to-background", "copy-from-donor"):
        raise ValueError(f"unknown manipulation mode {mode!r}")
    image = np.asarray(image)
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != image.shape[:2]:
        raise ValueError(f"mask {mask.shape} does not match image {image.shape[:2]}")
    if not mask.any():
        if allow_empty:
            return image.copy()
        raise ValueError("empty mask: nothing to manipulate")
    source = np.asarray(source)
    if source.shape != image.shape:
        raise ValueError(f"source {source.shape} does not match image {image.shape}")
    out = image.copy()
    out[mask] = source.astype(image.dtype)[mask]
    return out


# --- simplified layer ---------------------------------------------------------------


def simplified_layer_scores(layer: SimplifiedLayer, rule: str) -> np.ndarray:
    """Class scores of a one-head linear attention layer.

    ``conventional``: ``s[c] = w_c . sum_j alpha*[j] v_j``;
    ``prompt_cam``: ``s[c] = w . sum_j alpha_c[j] v_j``.
    """
    if rule == "conventional":
        pooled = layer.alpha_star @ layer.values  # (D,)
        return layer.w_fc @ pooled
    if rule == "prompt_cam":
        pooled = layer.alpha @ layer.values  # (C, D)
        return pooled @ layer.w_shared
    raise ValueError(f"unknown rule {rule!r}; use 'conventional' or 'prompt_cam'")


# --- rendering ------------------------------------------------------------------------


def heatmap_pixels(grid_map: np.ndarray, patch_size: int) -> np.ndarray:
    """Per-map min-max normalised, nearest-upsampled map in [0, 1]."""
    g = int(round(np.sqrt(np.size(grid_map))))
    m = np.asarray(grid_map, dtype=np.float64).reshape(g, g)
    lo, hi = m.min(), m.max()
    norm = (m - lo) / (hi - lo) if hi > lo else np.zeros_like(m)
    return upsample_nearest(norm, patch_size)


def heatmap_image(grid_map: np.ndarray, patch_size: int) -> np.ndarray:
    """Grey RGB ``uint8`` rendering of :func:`heatmap_pixels`."""
    v = np.rint(heatmap_pixels(grid_map, patch_size) * 255.0).astype(np.uint8)
    return np.repeat(v[..., None], 3, axis=-1)
