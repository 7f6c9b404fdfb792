"""Evaluation suites over a trained run: rows per image plus an aggregate summary."""

from __future__ import annotations

import math
from dataclasses import replace
from pathlib import Path

import numpy as np
from scipy.stats import binomtest

from .data import Dataset, glyph_mask, mean_color, render_background, spec_from_manifest
from .evaluation import (
    SaliencyMap,
    build_saliency,
    insertion_deletion,
    linear_probe_baseline,
    pointing_game,
    uniform_saliency,
)
from .images import save_image, upsample_nearest
from .interpret import (
    NotCorrectlyClassified,
    class_attention,
    explain_misclassification,
    greedy_trait_ranking,
    head_report,
    heatmap_image,
    manipulate_trait_region,
)
from .optim import TrainRecipe
from .prompt import PromptVariant, predict, score_images, train_prompts
from .seeding import stream
from .taxonomy import TaxonomyTree, relabel_taxonomy

SUITES = ("faithfulness", "pointing", "accuracy", "layer-sweep", "taxonomy", "counterfactual")


class Scorer:
    """Binds a frozen model and prompts into ``images -> scores``."""

    def __init__(self, model, prompts, variant: PromptVariant, prompt_isolation: bool):
        self.model, self.prompts, self.variant, self.iso = model, prompts, variant, prompt_isolation

    def __call__(self, images) -> np.ndarray:
        return score_images(images, self.model, self.prompts, self.variant, self.iso)

    def attention(self, image, class_id: int, paper_literal_scaling: bool = False):
        return class_attention(image, self.model, self.prompts, self.variant, class_id, self.iso, paper_literal_scaling)

    def ranking(self, image, class_id: int):
        return greedy_trait_ranking(image, self.model, self.prompts, self.variant, class_id, self.iso)


def _mean(xs) -> float | None:
    return float(np.mean(xs)) if len(xs) else None


def _map_pixels(stack, head: int, patch_size: int) -> SaliencyMap:
    g = int(round(math.sqrt(stack.maps.shape[1])))
    return SaliencyMap(upsample_nearest(stack.maps[head].reshape(g, g), patch_size), "prompt_cam_top_heads", [head])


def pointing_suite(scorer: Scorer, test: Dataset, top_k: int = 4) -> tuple[list[dict], dict]:
    """Pointing game on correctly classified, unoccluded test images.

    ``hit``/``mass`` use the top greedy-surviving head. Images whose ranking has no
    survivor (blurring every head keeps the prediction) have no such head; they are
    reported through ``coverage`` and scored with the last-blurred head in the
    ``*_all`` fields. ``topk_*`` use the top-k composite.
    """
    p = scorer.model.config.patch_size
    images = test.float_images()
    pred = predict(scorer(images))
    rows = []
    for i in range(len(test)):
        c = int(test.labels[i])
        if pred[i] != c or test.occluded[i]:
            continue
        ranking = scorer.ranking(images[i], c)
        stack = scorer.attention(images[i], c)
        top = ranking.importance_order()[0]
        hit, mass = pointing_game(_map_pixels(stack, top, p), test.trait_masks[i])
        k_hit, k_mass = pointing_game(build_saliency(stack, ranking, top_k, p), test.trait_masks[i])
        rows.append({
            "image_id": test.ids[i], "class": c, "top_head": top, "has_survivor": bool(ranking.surviving),
            "hit": hit, "mass_in_mask": mass,
            "topk_hit": k_hit, "topk_mass_in_mask": k_mass, "uniform_mass": float(test.trait_masks[i].mean()),
            "blur_order": ranking.blur_order, "surviving": ranking.surviving,
        })
    surv = [r for r in rows if r["has_survivor"]]
    summary = {
        "images": len(rows),
        "images_with_survivor": len(surv),
        "coverage": len(surv) / len(rows) if rows else None,
        "hit_rate": _mean([r["hit"] for r in surv]),
        "mean_mass_in_mask": _mean([r["mass_in_mask"] for r in surv]),
        "hit_rate_all": _mean([r["hit"] for r in rows]),
        "mean_mass_in_mask_all": _mean([r["mass_in_mask"] for r in rows]),
        "topk_hit_rate": _mean([r["topk_hit"] for r in rows]),
        "topk_mean_mass_in_mask": _mean([r["topk_mass_in_mask"] for r in rows]),
        "uniform_mass": _mean([r["uniform_mass"] for r in rows]),
        "per_class_hit_all": {int(c): _mean([r["hit"] for r in rows if r["class"] == c])
                              for c in sorted({r["class"] for r in rows})},
    }
    return rows, summary


def faithfulness_suite(scorer: Scorer, test: Dataset, train: Dataset, top_k: int = 4,
                       steps: int | None = None) -> tuple[list[dict], dict]:
    """Insertion/deletion AUCs for every test image, explaining the predicted class.

    Each row also carries the uniform-saliency control on the same image.
    """
    p = scorer.model.config.patch_size
    baseline = mean_color(train)
    images = test.float_images()
    pred = predict(scorer(images))
    shape = images.shape[1:3]
    rows = []
    for i in range(len(test)):
        c = int(pred[i])
        ranking = scorer.ranking(images[i], c)
        sal = build_saliency(scorer.attention(images[i], c), ranking, top_k, p)
        f = insertion_deletion(images[i], sal, scorer, c, steps, p, baseline)
        u = insertion_deletion(images[i], uniform_saliency(shape), scorer, c, steps, p, baseline)
        rows.append({
            "image_id": test.ids[i], "label": int(test.labels[i]), "class": c, "correct": bool(c == test.labels[i]),
            "heads": sal.heads, "insertion_auc": f.insertion_auc, "deletion_auc": f.deletion_auc,
            "uniform_insertion_auc": u.insertion_auc, "uniform_deletion_auc": u.deletion_auc,
        })
    ins, dele = [r["insertion_auc"] for r in rows], [r["deletion_auc"] for r in rows]
    uins, udel = [r["uniform_insertion_auc"] for r in rows], [r["uniform_deletion_auc"] for r in rows]
    summary = {
        "images": len(rows),
        "insertion_auc": _mean(ins), "deletion_auc": _mean(dele), "gap": _mean(ins) - _mean(dele),
        "uniform_insertion_auc": _mean(uins), "uniform_deletion_auc": _mean(udel),
        "uniform_gap": _mean(uins) - _mean(udel),
        "protocol": {"unit": "patch", "steps": steps or scorer.model.config.num_patches,
                     "deletion_baseline": "dataset mean colour", "insertion_baseline": f"box blur {p}x{p}",
                     "auc": "trapezoid over fraction in [0, 1]", "top_k": top_k},
    }
    return rows, summary


def accuracy_suite(scorer: Scorer, train: Dataset, test: Dataset, probe_recipe: TrainRecipe | None = None,
                   split: str = "test") -> tuple[list[dict], dict]:
    ds = test if split == "test" else train
    scores = scorer(ds.float_images())
    pred = predict(scores)
    rows = [{"image_id": ds.ids[i], "label": int(ds.labels[i]), "pred": int(pred[i]),
             "occluded": bool(ds.occluded[i])} for i in range(len(ds))]
    summary = {"split": split, "prompt_cam_acc": float(np.mean(pred == ds.labels))}
    if ds.occluded.any():
        summary["acc_unoccluded"] = float(np.mean(pred[~ds.occluded] == ds.labels[~ds.occluded]))
        summary["acc_occluded"] = float(np.mean(pred[ds.occluded] == ds.labels[ds.occluded]))
    if probe_recipe is not None:
        acc, _, _ = linear_probe_baseline(scorer.model, train, test, probe_recipe)
        summary["linear_probe_acc"] = acc
    return rows, summary


def layer_sweep_suite(model, train: Dataset, test: Dataset, recipe: TrainRecipe,
                      prompt_isolation: bool) -> tuple[list[dict], dict]:
    """Test accuracy with class-specific prompts entering at each layer (1 = shallow, N = deep)."""
    rows = []
    for i in range(1, model.config.depth + 1):
        variant = PromptVariant("at_layer", i)
        prompts, log = train_prompts(model, train, variant, recipe, prompt_isolation=prompt_isolation)
        acc = float(np.mean(predict(score_images(test.float_images(), model, prompts, variant, prompt_isolation))
                            == test.labels))
        rows.append({"layer": i, "variant": str(variant), "test_acc": acc,
                     "final_loss": log[-1]["loss"] if log else None})
    return rows, {"best_layer": max(rows, key=lambda r: (r["test_acc"], r["layer"]))["layer"],
                  "shallow_acc": rows[0]["test_acc"], "deep_acc": rows[-1]["test_acc"]}


def _mass(stack, mask: np.ndarray, patch_size: int) -> float:
    """Mean over heads of the map mass inside ``mask``."""
    g = int(round(math.sqrt(stack.maps.shape[1])))
    up = upsample_nearest(stack.maps.mean(axis=0).reshape(g, g), patch_size)
    return float(up[mask].sum() / up.sum())


def taxonomy_suite(model, species_scorer: Scorer, manifest: dict, train: Dataset, test: Dataset,
                   recipe: TrainRecipe) -> tuple[list[dict], dict]:
    """Train genus-level prompts at the family node and compare glyph masses with species prompts."""
    tree = TaxonomyTree.from_dict(manifest["taxonomy"])
    mapping = tree.group_labels(tree.root)
    genus_train = relabel_taxonomy(train, tree, tree.root)
    genus_prompts, _ = train_prompts(model, genus_train, species_scorer.variant, recipe,
                                     prompt_isolation=species_scorer.iso)
    genus_scorer = Scorer(model, genus_prompts, species_scorer.variant, species_scorer.iso)
    p = model.config.patch_size
    images = test.float_images()
    genus_pred = predict(genus_scorer(images))
    rows = []
    for i in range(len(test)):
        s = int(test.species[i])
        g = mapping[s]
        shared = glyph_mask(manifest, s, "shared")
        trait = glyph_mask(manifest, s, "trait")
        gs = genus_scorer.attention(images[i], g)
        ss = species_scorer.attention(images[i], s)
        rows.append({
            "image_id": test.ids[i], "species": s, "genus": g, "genus_correct": bool(genus_pred[i] == g),
            "genus_mass_shared": _mass(gs, shared, p), "species_mass_shared": _mass(ss, shared, p),
            "genus_mass_trait": _mass(gs, trait, p), "species_mass_trait": _mass(ss, trait, p),
        })
    wins = sum(r["genus_mass_shared"] > r["species_mass_shared"] for r in rows)
    losses = sum(r["genus_mass_shared"] < r["species_mass_shared"] for r in rows)
    summary = {
        "images": len(rows),
        "genus_acc": float(np.mean([r["genus_correct"] for r in rows])),
        "genus_mass_shared": _mean([r["genus_mass_shared"] for r in rows]),
        "species_mass_shared": _mean([r["species_mass_shared"] for r in rows]),
        "genus_mass_trait": _mean([r["genus_mass_trait"] for r in rows]),
        "species_mass_trait": _mean([r["species_mass_trait"] for r in rows]),
        "genus_wins": int(wins), "genus_losses": int(losses),
        "win_fraction": wins / len(rows),
        "sign_test_p": float(binomtest(wins, wins + losses, 0.5, alternative="greater").pvalue) if wins + losses else 1.0,
    }
    return rows, summary


def sibling(manifest: dict, class_id: int) -> int:
    genus = manifest["classes"][class_id]["genus"]
    sibs = [c["class_id"] for c in manifest["classes"] if c["genus"] == genus and c["class_id"] != class_id]
    if not sibs:
        raise ValueError(f"class {class_id} has no sibling species")
    return sibs[0]


def glyph_swap(image: np.ndarray, manifest: dict, class_a: int, class_b: int, donor: np.ndarray, seed: int = 0) -> np.ndarray:
    """Erase class A's trait glyph to fresh background and paste class B's from ``donor``."""
    spec = spec_from_manifest(manifest)
    bg = render_background(spec, stream(seed, "eval"))
    bg = np.clip(np.rint(bg * 255.0), 0, 255).astype(np.uint8) if image.dtype == np.uint8 else bg
    out = manipulate_trait_region(image, glyph_mask(manifest, class_a, "trait"), "erase-to-background", bg)
    return manipulate_trait_region(out, glyph_mask(manifest, class_b, "trait"), "copy-from-donor", donor)


def counterfactual_suite(scorer: Scorer, manifest: dict, test: Dataset) -> tuple[list[dict], dict]:
    """Swap each image's trait for its sibling species' trait and re-classify."""
    p = scorer.model.config.patch_size
    rows = []
    donors = {}
    for c in range(test.num_classes):
        idx = np.flatnonzero((test.labels == c) & ~test.occluded)
        donors[c] = int(idx[0])
    for i in range(len(test)):
        if test.occluded[i]:
            continue
        a = int(test.labels[i])
        b = sibling(manifest, a)
        d = donors[b]
        edited = glyph_swap(test.images[i], manifest, a, b, test.images[d], seed=i)
        x = np.stack([test.images[i], edited]).astype(np.float64) / 255.0
        pred = predict(scorer(x))
        mask = glyph_mask(manifest, a, "trait")
        before = _mass(scorer.attention(x[0], a), mask, p)
        after = _mass(scorer.attention(x[1], a), mask, p)
        rows.append({"image_id": test.ids[i], "class_a": a, "class_b": b, "donor": test.ids[d],
                     "pred_before": int(pred[0]), "pred_after": int(pred[1]),
                     "flipped": bool(pred[0] == a and pred[1] == b),
                     "mass_before": before, "mass_after": after})
    mb, ma = _mean([r["mass_before"] for r in rows]), _mean([r["mass_after"] for r in rows])
    summary = {"images": len(rows), "flip_rate": _mean([r["flipped"] for r in rows]),
               "mass_before": mb, "mass_after": ma, "relative_drop": (mb - ma) / mb if mb else None}
    return rows, summary


# --- visualisation ----------------------------------------------------------------------


def write_heatmaps(out_dir, image_id: str, stack, ranking, top_k: int, patch_size: int) -> list[Path]:
    """``R`` per-head heatmaps plus the top-k composite, as grey P6 PPMs."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    for r in range(stack.heads):
        path = out / f"{image_id}_c{stack.class_id}_head{r}.ppm"
        save_image(path, heatmap_image(stack.maps[r], patch_size))
        paths.append(path)
    if ranking is not None:
        heads = ranking.importance_order()[:top_k]
    else:
        heads = list(range(top_k))
    composite = stack.maps[heads].mean(axis=0)
    path = out / f"{image_id}_c{stack.class_id}_top{top_k}.ppm"
    save_image(path, heatmap_image(composite, patch_size))
    paths.append(path)
    return paths


def visualize_images(scorer: Scorer, test: Dataset, image_ids: list[str], selector: str, out_dir,
                     top_k: int = 4, paper_literal_scaling: bool = False) -> list[dict]:
    """Heatmaps and JSON-ready reports for ``image_ids``.

    ``selector`` is ``"true"``, ``"predicted"`` or a class index (cross-class mode).
    Misclassified images also get the paired true/predicted report.
    """
    p = scorer.model.config.patch_size
    reports = []
    for image_id in image_ids:
        i = test.index_of(image_id)
        x = test.float_images()[i]
        s = scorer(x[None])[0]
        pred, y = int(predict(s)), int(test.labels[i])
        if selector == "true":
            c = y
        elif selector == "predicted":
            c = pred
        else:
            c = int(selector)
            if not 0 <= c < test.num_classes:
                raise ValueError(f"class selector {c} out of range")
        stack = scorer.attention(x, c, paper_literal_scaling)
        try:
            ranking = scorer.ranking(x, c)
        except NotCorrectlyClassified:
            ranking = None
        write_heatmaps(out_dir, image_id, stack, ranking, top_k, p)
        mask = test.trait_masks[i] if test.trait_masks[i].any() else None
        report = head_report(stack, ranking, mask, p, image_id, s)
        report.update({"label": y, "predicted": pred, "selector": str(selector)})
        if pred != y:
            _, _, report["misclassification"] = explain_misclassification(
                x, y, scorer.model, scorer.prompts, scorer.variant, mask, scorer.iso, image_id)
        reports.append(report)
    return reports
