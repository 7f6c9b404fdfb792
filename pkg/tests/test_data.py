import json

import numpy as np
import pytest

from promptcam.data import (
    SYNTH8,
    CorpusSpec,
    ManifestError,
    SynthSpec,
    generate_glyph_corpus,
    generate_synth_traits,
    glyph_mask,
    load_dataset,
    mean_color,
    patch_mask,
    spec_from_manifest,
)
from promptcam.taxonomy import TaxonomyTree, relabel_taxonomy

SMALL = SynthSpec(num_classes=4, train_per_class=5, test_per_class=4, image_size=16, patch_size=4)


@pytest.fixture(scope="module")
def synth8():
    return generate_synth_traits(SynthSpec(train_per_class=100, test_per_class=30), seed=0)


def test_same_seed_same_bytes(tmp_path):
    a = generate_synth_traits(SMALL, 3, out_dir=tmp_path / "a")
    b = generate_synth_traits(SMALL, 3, out_dir=tmp_path / "b")
    assert a[0] == b[0]
    for f in sorted((tmp_path / "a").rglob("*")):
        if f.is_file():
            assert f.read_bytes() == (tmp_path / "b" / f.relative_to(tmp_path / "a")).read_bytes()
    c = generate_synth_traits(SMALL, 4)
    assert not np.array_equal(a[1].images, c[1].images)


def test_no_occlusion_by_default(synth8):
    m, train, test = synth8
    assert not train.occluded.any() and not test.occluded.any()
    assert not any(r["occlusion_flag"] for r in m["images"])


def test_occlusion_flags_hide_trait():
    spec = SynthSpec(num_classes=4, train_per_class=2, test_per_class=30, image_size=16, patch_size=4,
                     occlusion_rate=0.5)
    m, train, test = generate_synth_traits(spec, 1)
    assert not train.occluded.any()
    assert 0 < test.occluded.sum() < len(test)
    ref = generate_synth_traits(SynthSpec(**{**spec.__dict__, "occlusion_rate": 0.0}), 1)[2]
    i = int(np.flatnonzero(test.occluded)[0])
    # the occluded trait patch differs from the same class's glyph-bearing version
    assert test.trait_masks[i].any()
    assert not np.array_equal(test.images[i][test.trait_masks[i]], ref.images[i][ref.trait_masks[i]])


def test_pixel_audit_and_separability(synth8):
    m, train, test = synth8
    spec = spec_from_manifest(m)
    x_train = train.float_images()
    for c in range(8):
        mask = glyph_mask(m, c)
        with_glyph = x_train[train.labels == c][:, mask].mean(0)
        without = x_train[train.labels != c][:, mask].mean(0)
        for ds in (train, test):
            x = ds.float_images()[:, mask]
            present = np.linalg.norm(x - with_glyph, axis=(1, 2)) < np.linalg.norm(x - without, axis=(1, 2))
            # per image: the trait is there in all own-class images and in no other image
            np.testing.assert_array_equal(present, ds.labels == c)
    assert spec.grid == 4
    # nearest-template classifier on trait patches: 100% on unoccluded test images
    templates = []
    for c in range(8):
        templates.append([train.float_images()[train.labels == c][:, glyph_mask(m, k)].mean(0) for k in range(8)])
    x = test.float_images()
    for i in range(len(test)):
        dists = [sum(np.linalg.norm(x[i][glyph_mask(m, k)] - templates[c][k]) for k in range(8)) for c in range(8)]
        assert int(np.argmin(dists)) == test.labels[i]


def test_every_class_has_unique_trait(synth8):
    m = synth8[0]
    positions = [c["trait_glyphs"][0]["patch_position"] for c in m["classes"]]
    shared = {c["shared_glyphs"][0]["patch_position"] for c in m["classes"]}
    assert len(set(positions)) == 8 and not set(positions) & shared
    assert len({c["trait_glyphs"][0]["glyph_id"] for c in m["classes"]}) == 8


def test_split_balance_and_disjointness(synth8):
    m, train, test = synth8
    assert not set(train.ids) & set(test.ids)
    for ds, n in ((train, 100), (test, 30)):
        counts = np.bincount(ds.labels, minlength=8)
        assert counts.max() - counts.min() <= 1 and counts.sum() == 8 * n


def test_infeasible_and_invalid_specs():
    with pytest.raises(ValueError, match="infeasible"):
        generate_synth_traits(SynthSpec(num_classes=14, image_size=16, patch_size=4))
    with pytest.raises(ValueError):
        generate_synth_traits(SynthSpec(num_classes=1))
    with pytest.raises(ValueError):
        generate_synth_traits(SynthSpec(image_size=30, patch_size=8))


def test_written_dataset_round_trips(tmp_path):
    m, train, test = generate_synth_traits(SMALL, 2, out_dir=tmp_path)
    m2, train2, test2 = load_dataset(tmp_path)
    assert m2 == json.loads(json.dumps(m))
    np.testing.assert_array_equal(train2.images, train.images)
    np.testing.assert_array_equal(test2.trait_masks, test.trait_masks)
    assert train2.ids == train.ids


def test_manifest_integrity_errors(tmp_path):
    generate_synth_traits(SMALL, 2, out_dir=tmp_path)
    (tmp_path / "images" / "train_00_0000.ppm").unlink()
    with pytest.raises(ManifestError, match="missing file"):
        load_dataset(tmp_path)
    man = json.loads((tmp_path / "manifest.json").read_text())
    man["schema"] = "other"
    (tmp_path / "manifest.json").write_text(json.dumps(man))
    with pytest.raises(ManifestError, match="schema"):
        load_dataset(tmp_path)


def test_masks_and_mean_colour(synth8):
    m, train, test = synth8
    for i in (0, 17, 101):
        c = int(test.labels[i])
        np.testing.assert_array_equal(test.trait_masks[i], glyph_mask(m, c))
    assert glyph_mask(m, 0, "shared").sum() == 64
    np.testing.assert_array_equal(glyph_mask(m, 0, "shared"), glyph_mask(m, 3, "shared"))
    assert not np.array_equal(glyph_mask(m, 0, "shared"), glyph_mask(m, 4, "shared"))
    assert patch_mask(5, SYNTH8)[8:16, 8:16].all()
    np.testing.assert_allclose(mean_color(train), train.images.reshape(-1, 3).mean(0) / 255)


def test_taxonomy_tree_and_relabel(synth8):
    m, train, _ = synth8
    tree = TaxonomyTree.from_dict(m["taxonomy"])
    assert tree.group_labels("genus0") == {0: 0, 1: 1, 2: 2, 3: 3}
    genus = relabel_taxonomy(train, tree, tree.root)
    assert genus.num_classes == 2
    assert set(genus.labels[genus.species == 0]) == set(genus.labels[genus.species == 3]) == {0}
    # relabel at the root, keep genus 1, relabel inside it: the species-level subset exactly
    g1_ids = {genus.ids[i] for i in np.flatnonzero(genus.labels == 1)}
    species = relabel_taxonomy(train, tree, "genus1")
    assert set(species.ids) == g1_ids
    assert set(species.ids) == {train.ids[i] for i in np.flatnonzero(np.isin(train.labels, [4, 5, 6, 7]))}
    assert species.num_classes == 4
    with pytest.raises(ValueError, match="children"):
        relabel_taxonomy(train, tree, "species3")


def test_taxonomy_validation():
    tree = TaxonomyTree.from_genera([0, 0, 1])
    assert [a.level for a in tree.ancestors("species2")] == ["genus", "family"]
    assert tree.species_under("family") == [0, 1, 2]
    tree.nodes["species0"].parent = "family"
    with pytest.raises(ValueError, match="ancestry"):
        tree.validate()


def test_glyph_corpus_is_deterministic_and_balanced():
    spec = CorpusSpec(num_classes=4, per_class=3)
    a, b = generate_glyph_corpus(spec, 1), generate_glyph_corpus(spec, 1)
    np.testing.assert_array_equal(a.images, b.images)
    assert np.bincount(a.labels).tolist() == [3, 3, 3, 3]
    assert not np.array_equal(a.images, generate_glyph_corpus(spec, 2).images)
