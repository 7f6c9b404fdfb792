import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import TINY, tiny_prompts
from oracle import prompted_scores
from promptcam.data import Dataset
from promptcam.optim import TrainRecipe
from promptcam.prompt import (
    PromptSet,
    PromptVariant,
    class_scores,
    layer_sweep,
    predict,
    prompt_cam_loss,
    prompted_forward,
    score_images,
    train_prompts,
)
from promptcam.tensor import GradTape, Tensor, reverse_mode_gradient
from promptcam.vit import ViTConfig, ViTModel


def test_variant_parsing_and_layers():
    assert PromptVariant.parse("Deep").injection_layer(4) == 4
    assert PromptVariant.parse("shallow").injection_layer(4) == 1
    assert PromptVariant.parse("at-layer=3").injection_layer(4) == 3
    assert str(PromptVariant.parse("at_layer:2")) == "at-layer=2"
    with pytest.raises(ValueError):
        PromptVariant.parse("at-layer=5").injection_layer(4)
    with pytest.raises(ValueError):
        PromptVariant.parse("medium")


@pytest.mark.parametrize("variant,agn", [("shallow", 0), ("deep", 1), ("at-layer=2", 1), ("at-layer=1", 0)])
def test_prompt_set_shapes_follow_variant(tiny_model, variant, agn):
    ps = PromptSet.for_variant(tiny_model, 3, PromptVariant.parse(variant))
    assert len(ps.class_agnostic) == agn
    assert ps.class_specific.shape == (3, TINY.dim)
    np.testing.assert_array_equal(ps.w.data, 0.0)


def test_shape_mismatch_rejected(tiny_model):
    ps, _ = tiny_prompts(tiny_model, variant="shallow")
    with pytest.raises(ValueError, match="class-agnostic"):
        prompted_forward(np.zeros((8, 8, 3)), tiny_model, ps, PromptVariant.parse("deep"))


def test_single_class_gives_one_column(tiny_model, rng):
    ps, v = tiny_prompts(tiny_model, num_classes=1)
    z, _ = prompted_forward(rng.random((8, 8, 3)), tiny_model, ps, v)
    assert z.shape == (1, 1, TINY.dim)


@pytest.mark.parametrize("variant", ["shallow", "deep"])
@pytest.mark.parametrize("iso", [False, True])
def test_forward_matches_tape_free_oracle(tiny_model, rng, variant, iso):
    ps, v = tiny_prompts(tiny_model, variant=variant)
    img = rng.random((8, 8, 3))
    got = score_images(img[None], tiny_model, ps, v, iso)[0]
    ref = prompted_scores(img, tiny_model, ps, v.injection_layer(TINY.depth), iso)
    np.testing.assert_allclose(got, ref, atol=1e-10)


def test_deep_patch_path_with_zero_prompts_and_keys(rng):
    # D=2 toy: zero class-agnostic prompt and zeroed key projection, so every score is equal
    # and attention to the zero-prompt key is exp(0) against exp(0): the patch path equals
    # a plain ViT with one extra zero-valued key.
    cfg = ViTConfig(depth=2, dim=2, heads=1, patch_size=1, image_size=1, num_classes=1)
    arrays = ViTModel.init(cfg, 0).arrays()
    for i in range(2):
        arrays[f"layers.{i}.attn.wk"] = np.zeros((2, 2))
        arrays[f"layers.{i}.attn.bk"] = np.zeros(2)
        arrays[f"layers.{i}.attn.bv"] = np.zeros(2)
    model = ViTModel.from_arrays(cfg, arrays).freeze()
    ps = PromptSet.init(2, 1, 1)
    ps.class_agnostic[0].data[:] = 0.0
    img = rng.random((1, 1, 3))
    _, acts = prompted_forward(img, model, ps, PromptVariant.parse("deep"))
    # hand computation of layer 1 for the patch token: uniform attention over
    # [prompt(0), patch, cls] with zero value bias -> mean of the projected values
    from oracle import embed, gelu, ln
    a = {k: t.data for k, t in model.layer(0).items()}
    e = embed(img, model)[0]
    x = model.arrays()["cls_token"]
    toks = np.stack([np.zeros(2), e, x])
    v = ln(toks, a["ln1.gamma"], a["ln1.beta"], cfg.ln_eps) @ a["attn.wv"]
    h = e + v.mean(0) @ a["attn.wo"] + a["attn.bo"]
    z = ln(h, a["ln2.gamma"], a["ln2.beta"], cfg.ln_eps)
    out = h + gelu(z @ a["mlp.w1"] + a["mlp.b1"]) @ a["mlp.w2"] + a["mlp.b2"]
    np.testing.assert_allclose(acts.patches[1][0, 0], out, atol=1e-12)


def test_shallow_and_deep_differ(tiny_model, rng):
    ps, _ = tiny_prompts(tiny_model, variant="deep")
    img = rng.random((8, 8, 3))
    zd, _ = prompted_forward(img, tiny_model, ps, PromptVariant.parse("deep"))
    shallow = PromptSet(ps.class_specific, [], ps.w)
    zs, _ = prompted_forward(img, tiny_model, shallow, PromptVariant.parse("shallow"))
    assert not np.allclose(zd.data, zs.data)


def test_class_scores_examples(rng):
    z = Tensor(np.array([[[1.0, 0.0], [0.0, 1.0]]]))
    s = class_scores(z, Tensor([2.0, 3.0])).data[0]
    assert s.tolist() == [2.0, 3.0]
    assert predict(s) == 1  # 0-based index of the second class
    np.testing.assert_array_equal(class_scores(z, Tensor(np.zeros(2))).data, 0.0)
    zr, w = rng.normal(size=(1, 5, 8)), rng.normal(size=8)
    loop = [sum(w[d] * zr[0, c, d] for d in range(8)) for c in range(5)]
    np.testing.assert_allclose(class_scores(Tensor(zr), Tensor(w)).data[0], loop, atol=1e-12)


@given(st.lists(st.floats(-50, 50), min_size=2, max_size=8), st.floats(-1e3, 1e3))
def test_argmax_shift_invariant_and_lowest_index_ties(s, c):
    s = np.array(s)
    assert predict(s) == predict(s + c) or np.isclose(np.sort(s)[-1], np.sort(s)[-2])
    assert predict(np.zeros(len(s))) == 0


def test_loss_examples(rng):
    assert prompt_cam_loss(Tensor(np.zeros((1, 4))), [1]).data[0] == pytest.approx(math.log(4), abs=1e-12)
    s = np.full((1, 3), -30.0)
    s[0, 2] = 30.0
    assert prompt_cam_loss(Tensor(s), [2]).data[0] < 1e-10
    r = rng.normal(size=(1, 6)) * 4
    oracle = np.log(np.sum(np.exp(r[0] - r.max()))) + r.max() - r[0, 4]
    assert prompt_cam_loss(Tensor(r), [4]).data[0] == pytest.approx(oracle, abs=1e-12)
    with pytest.raises(ValueError):
        prompt_cam_loss(Tensor(r), [6])


def test_backbone_gradients_structurally_absent(tiny_model, rng):
    model = tiny_model.freeze()
    ps, v = tiny_prompts(model)
    with GradTape() as tape:
        z, _ = prompted_forward(rng.random((2, 8, 8, 3)), model, ps, v)
        loss = prompt_cam_loss(class_scores(z, ps.w), [0, 2])
    reverse_mode_gradient(tape, loss)
    assert all(p.grad is not None for p in ps.params())
    assert all(t.grad is None and not t.requires_grad for t in model.params.values())


def test_isolated_deep_prompt_only_moves_own_class(tiny_model, rng):
    ps, v = tiny_prompts(tiny_model)
    img = rng.random((8, 8, 3))
    base = score_images(img[None], tiny_model, ps, v, True)[0]
    ps.class_specific.data[1] += rng.normal(size=TINY.dim)
    moved = score_images(img[None], tiny_model, ps, v, True)[0]
    assert moved[1] != base[1]
    np.testing.assert_array_equal(moved[[0, 2]], base[[0, 2]])
    # a class-agnostic column perturbation reaches every class through the patch tokens
    ps.class_agnostic[0].data[1] += rng.normal(size=TINY.dim)  # a constant shift would vanish in LayerNorm
    again = score_images(img[None], tiny_model, ps, v, True)[0]
    assert not np.any(again == moved)


def _toy_set(n, classes, seed):
    r = np.random.default_rng(seed)
    labels = np.arange(n) % classes
    images = r.integers(0, 256, size=(n, 8, 8, 3), dtype=np.uint8)
    return Dataset(images=images, labels=labels, ids=[f"t{i}" for i in range(n)],
                   trait_masks=np.zeros((n, 8, 8), bool), occluded=np.zeros(n, bool), num_classes=classes)


def test_lr_zero_is_a_no_op(tiny_model):
    model = tiny_model.freeze()
    data = _toy_set(6, 3, 0)
    init = PromptSet.for_variant(model, 3, PromptVariant.parse("deep"), seed=0)
    ps, _ = train_prompts(model, data, PromptVariant.parse("deep"), TrainRecipe(lr=0.0, epochs=2, warmup_epochs=1, batch_size=4))
    assert ps.checksum() == init.checksum()


def test_one_class_loss_is_zero(tiny_model):
    model = tiny_model.freeze()
    _, log = train_prompts(model, _toy_set(4, 1, 1), PromptVariant.parse("deep"),
                           TrainRecipe(lr=0.1, epochs=2, warmup_epochs=1, batch_size=2))
    assert all(row["loss"] == 0.0 for row in log)


def test_training_requires_frozen_backbone_and_data(tiny_model):
    with pytest.raises(ValueError, match="frozen"):
        train_prompts(tiny_model, _toy_set(3, 3, 0), PromptVariant.parse("deep"), TrainRecipe())
    with pytest.raises(ValueError, match="empty"):
        train_prompts(tiny_model.freeze(), _toy_set(3, 3, 0).subset([]), PromptVariant.parse("deep"), TrainRecipe())


def test_training_is_deterministic_and_fits_a_toy(tiny_model):
    model = tiny_model.freeze()
    data = _toy_set(9, 3, 2)
    recipe = TrainRecipe(lr=0.1, epochs=30, warmup_epochs=1, batch_size=3, seed=4)
    a, log = train_prompts(model, data, PromptVariant.parse("deep"), recipe, test=data)
    b, _ = train_prompts(model, data, PromptVariant.parse("deep"), recipe)
    assert a.checksum() == b.checksum()
    assert log[-1]["loss"] < log[0]["loss"]
    assert "test_acc" in log[-1]


def test_checkpoint_round_trip(tiny_model, tmp_path):
    ps, v = tiny_prompts(tiny_model, variant="at-layer=2")
    ps.save(tmp_path / "p.ckpt", v, TrainRecipe())
    back, v2, meta = PromptSet.load(tmp_path / "p.ckpt")
    assert back.checksum() == ps.checksum() and v2 == v and meta["recipe"]["lr"] == TrainRecipe().lr


def test_layer_sweep_depth_one_matches_deep():
    cfg = ViTConfig(depth=1, dim=8, heads=2, patch_size=4, image_size=8, num_classes=3)
    model = ViTModel.init(cfg, 0).freeze()
    data = _toy_set(6, 3, 3)
    recipe = TrainRecipe(lr=0.05, epochs=2, warmup_epochs=1, batch_size=3)
    rows = layer_sweep(model, data, data, recipe)
    assert len(rows) == 1
    deep, _ = train_prompts(model, data, PromptVariant.parse("deep"), recipe)
    assert rows[0]["prompts_checksum"] == deep.checksum()
    assert layer_sweep(model, data, data, recipe) == rows
