"""SynthTraits: a synthetic fine-grained dataset with planted, masked traits.

Every image is a textured grey background with patch-sized glyphs on it:

* the class's species glyph at a class-consistent patch (the discriminative trait),
* its genus glyph at a genus-consistent patch (shared by the sibling species),
* ``distractors`` copies of one glyph common to all classes at random free patches.

Glyphs are two-colour high-frequency tiles whose mean equals the background mean, so
a box blur of one patch width erases them. Trait masks cover the species glyph.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .images import load_image, save_image
from .seeding import stream
from .taxonomy import TaxonomyTree

SCHEMA = "synthtraits/1"
BACKGROUND = 0.5
PATTERNS = ("checker1", "checker2", "hstripe", "vstripe", "diag", "ring", "cross", "dots")


@dataclass(frozen=True)
class SynthSpec:
    num_classes: int = 8
    train_per_class: int = 100
    test_per_class: int = 30
    image_size: int = 32
    patch_size: int = 8
    noise_level: float = 0.06
    occlusion_rate: float = 0.0
    occlude_splits: tuple[str, ...] = ("test",)
    species_per_genus: int = 4
    distractors: int = 1
    glyph_contrast: float = 0.3
    shared_contrast: float = 0.06  # genus glyphs are much fainter than species traits
    distractor_anywhere: bool = False  # distractors may cover other classes' glyph patches

    @property
    def grid(self) -> int:
        return self.image_size // self.patch_size

    @property
    def num_genera(self) -> int:
        return -(-self.num_classes // self.species_per_genus)


SYNTH8 = SynthSpec()


@dataclass
class Dataset:
    """Images plus labels and ground-truth masks, all index-aligned."""

    images: np.ndarray  # (n, H, W, 3) uint8
    labels: np.ndarray  # (n,)
    ids: list[str]
    trait_masks: np.ndarray  # (n, H, W) bool
    occluded: np.ndarray  # (n,) bool
    num_classes: int
    species: np.ndarray | None = None  # original species label, survives relabelling
    manifest: dict | None = field(default=None, repr=False)

    def __post_init__(self):
        if self.species is None:
            self.species = np.asarray(self.labels, dtype=np.int64).copy()

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx, dtype=np.int64)
        return Dataset(
            images=self.images[idx],
            labels=np.asarray(self.labels)[idx].copy(),
            ids=[self.ids[i] for i in idx],
            trait_masks=self.trait_masks[idx],
            occluded=self.occluded[idx],
            num_classes=self.num_classes,
            species=self.species[idx].copy(),
            manifest=self.manifest,
        )

    def float_images(self) -> np.ndarray:
        return self.images.astype(np.float64) / 255.0

    def index_of(self, image_id: str) -> int:
        try:
            return self.ids.index(image_id)
        except ValueError:
            raise KeyError(f"unknown image id {image_id!r}") from None


# --- glyphs --------------------------------------------------------------------


def glyph_tile(pattern: str, delta: np.ndarray, size: int) -> np.ndarray:
    """Two-colour ``size x size`` tile, ``BACKGROUND +- delta``, balanced to mean zero offset."""
    yy, xx = np.mgrid[0:size, 0:size]
    if pattern == "checker1":
        sign = (yy + xx) % 2
    elif pattern == "checker2":
        sign = (yy // 2 + xx // 2) % 2
    elif pattern == "hstripe":
        sign = (yy // 2) % 2
    elif pattern == "vstripe":
        sign = (xx // 2) % 2
    elif pattern == "diag":
        sign = ((yy + xx) // 2) % 2
    elif pattern == "ring":
        c = (size - 1) / 2
        sign = (np.maximum(np.abs(yy - c), np.abs(xx - c)).astype(int) % 2)
    elif pattern == "cross":
        sign = ((yy % 4 < 2) ^ (xx % 4 < 2)).astype(int)
    elif pattern == "dots":
        sign = ((yy % 2 == 0) & (xx % 2 == 0)) | ((yy % 2 == 1) & (xx % 2 == 1) & ((yy + xx) % 4 == 2))
        sign = sign.astype(int)
    else:
        raise ValueError(f"unknown glyph pattern {pattern!r}")
    s = np.where(sign == 1, 1.0, -1.0)
    s = s - s.mean()  # exact zero mean keeps the blurred glyph at background level
    s = s / np.abs(s).max()
    return BACKGROUND + s[..., None] * delta[None, None, :]


def _glyph_colors(rng: np.random.Generator, n: int, contrast: float) -> list[np.ndarray]:
    """``n`` well-separated unit-ish colour offsets scaled to ``contrast``."""
    out = []
    for _ in range(n):
        best, best_d = None, -1.0
        for _ in range(64):
            v = rng.normal(size=3)
            v /= np.linalg.norm(v)
            d = min((min(np.linalg.norm(v - u), np.linalg.norm(v + u)) for u in out), default=2.0)
            if d > best_d:
                best, best_d = v, d
        out.append(best)
    return [contrast * v for v in out]


def _mirror_layout(grid: int, rng: np.random.Generator) -> list[int]:
    """Patch indices ordered as point-mirrored pairs ``(j, M-1-j)`` in random pair order.

    Assigning glyphs pairwise keeps the mean glyph index at the grid centre, so
    row-major tie-breaking in saliency ranking carries no positional bias.
    """
    m = grid * grid
    pairs = [(j, m - 1 - j) for j in range(m // 2)]
    order = rng.permutation(len(pairs))
    out = [p for k in order for p in pairs[k]]
    if m % 2:
        out.append(m // 2)
    return out


def build_classes(spec: SynthSpec, seed: int) -> list[dict]:
    """Glyph identities and positions for every class (deterministic per seed)."""
    m = spec.grid**2
    need = spec.num_classes + spec.num_genera + max(spec.distractors, 1 if spec.distractors else 0)
    if need > m:
        raise ValueError(
            f"infeasible spec: {spec.num_classes} species + {spec.num_genera} genus glyphs + "
            f"distractor slots need {need} patches, only {m} available"
        )
    rng = stream(seed, "datagen.layout")
    layout = _mirror_layout(spec.grid, rng)
    species_pos = layout[: spec.num_classes]
    genus_pos = layout[spec.num_classes : spec.num_classes + spec.num_genera]
    free = sorted(layout[spec.num_classes + spec.num_genera :])
    n_glyphs = spec.num_classes + spec.num_genera + 1
    colors = _glyph_colors(rng, n_glyphs, spec.glyph_contrast)
    patterns = [PATTERNS[i % len(PATTERNS)] for i in rng.permutation(n_glyphs)]
    for g in range(spec.num_genera):
        colors[spec.num_classes + g] = colors[spec.num_classes + g] * (spec.shared_contrast / spec.glyph_contrast)
    classes = []
    for c in range(spec.num_classes):
        g = c // spec.species_per_genus
        gid = spec.num_classes + g
        classes.append({
            "class_id": c,
            "name": f"species{c}",
            "genus": g,
            "trait_glyphs": [{"glyph_id": c, "pattern": patterns[c], "color": colors[c].round(6).tolist(),
                              "patch_position": int(species_pos[c])}],
            "shared_glyphs": [{"glyph_id": gid, "pattern": patterns[gid],
                               "color": colors[gid].round(6).tolist(), "patch_position": int(genus_pos[g])}],
        })
    classes.append({
        "distractor": {"glyph_id": n_glyphs - 1, "pattern": patterns[-1],
                       "color": colors[-1].round(6).tolist(), "free_positions": free},
    })
    return classes


def render_background(spec: SynthSpec, rng: np.random.Generator) -> np.ndarray:
    """Grey background with a smooth low-frequency texture and pixel noise, in [0, 1]."""
    s = spec.image_size
    coarse = rng.normal(0.0, 0.04, size=(spec.grid + 1, spec.grid + 1, 3))
    t = np.linspace(0, spec.grid, s)
    i0 = np.minimum(t.astype(int), spec.grid - 1)
    f = (t - i0)[:, None, None]
    rows = coarse[i0] * (1 - f) + coarse[i0 + 1] * f  # (s, grid+1, 3)
    fx = (t - i0)[None, :, None]
    tex = rows[:, i0] * (1 - fx) + rows[:, i0 + 1] * fx
    return BACKGROUND + tex + rng.normal(0.0, spec.noise_level, size=(s, s, 3))


def _place(img: np.ndarray, tile: np.ndarray, pos: int, spec: SynthSpec) -> None:
    r, c = divmod(pos, spec.grid)
    p = spec.patch_size
    img[r * p : (r + 1) * p, c * p : (c + 1) * p] += tile - BACKGROUND


def patch_mask(pos: int, spec: SynthSpec) -> np.ndarray:
    mask = np.zeros((spec.image_size, spec.image_size), dtype=bool)
    r, c = divmod(pos, spec.grid)
    p = spec.patch_size
    mask[r * p : (r + 1) * p, c * p : (c + 1) * p] = True
    return mask


def quantize(img: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8)


def render_image(spec: SynthSpec, classes: list[dict], label: int, rng, occluded: bool = False,
                 distractor_positions: list[int] | None = None) -> np.ndarray:
    info = classes[label]
    img = render_background(spec, rng)
    dis = classes[-1]["distractor"]
    if distractor_positions is None:
        distractor_positions = _distractor_positions(spec, classes, label, rng)
    for pos in distractor_positions:
        _place(img, glyph_tile(dis["pattern"], np.array(dis["color"]), spec.patch_size), pos, spec)
    for g in info["shared_glyphs"]:
        _place(img, glyph_tile(g["pattern"], np.array(g["color"]), spec.patch_size), g["patch_position"], spec)
    if not occluded:
        for g in info["trait_glyphs"]:
            _place(img, glyph_tile(g["pattern"], np.array(g["color"]), spec.patch_size), g["patch_position"], spec)
    return quantize(img)


def _distractor_positions(spec: SynthSpec, classes: list[dict], label: int, rng) -> list[int]:
    if spec.distractor_anywhere:
        own = {classes[label]["trait_glyphs"][0]["patch_position"], classes[label]["shared_glyphs"][0]["patch_position"]}
        pool = [p for p in range(spec.grid**2) if p not in own]
    else:
        pool = classes[-1]["distractor"]["free_positions"]
    k = min(spec.distractors, len(pool))
    return sorted(rng.choice(pool, size=k, replace=False).tolist())


def generate_synth_traits(spec: SynthSpec = SYNTH8, seed: int = 0, out_dir=None) -> tuple[dict, Dataset, Dataset]:
    """Generate train/test splits; optionally write PPM images, PGM masks and manifest.json.

    Output is byte-deterministic per ``(spec, seed)``.
    """
    if spec.num_classes < 2:
        raise ValueError("SynthTraits needs at least 2 classes")
    if spec.image_size % spec.patch_size:
        raise ValueError(f"image_size {spec.image_size} not divisible by patch_size {spec.patch_size}")
    classes = build_classes(spec, seed)
    rng = stream(seed, "datagen")
    splits: dict[str, list] = {}
    records = []
    arrays: dict[str, tuple] = {}
    for split, per_class in (("train", spec.train_per_class), ("test", spec.test_per_class)):
        imgs, labels, ids, masks, occ = [], [], [], [], []
        for k in range(per_class):
            for c in range(spec.num_classes):
                occluded = split in spec.occlude_splits and rng.random() < spec.occlusion_rate
                dpos = _distractor_positions(spec, classes, c, rng)
                img = render_image(spec, classes, c, rng, occluded=occluded, distractor_positions=dpos)
                image_id = f"{split}_{c:02d}_{k:04d}"
                mask = patch_mask(classes[c]["trait_glyphs"][0]["patch_position"], spec)
                imgs.append(img)
                labels.append(c)
                ids.append(image_id)
                masks.append(mask)
                occ.append(occluded)
                records.append({
                    "id": image_id, "split": split, "label": c,
                    "path": f"images/{image_id}.ppm", "trait_mask_path": f"masks/{image_id}.pgm",
                    "occlusion_flag": bool(occluded), "distractor_positions": dpos,
                })
        splits[split] = ids
        arrays[split] = (np.stack(imgs), np.array(labels), ids, np.stack(masks), np.array(occ))
    tree = TaxonomyTree.from_genera([c["genus"] for c in classes[:-1]])
    spec_d = asdict(spec)
    spec_d["occlude_splits"] = list(spec.occlude_splits)
    manifest = {
        "schema": SCHEMA,
        "version": 1,
        "seed": int(seed),
        "image_size": spec.image_size,
        "patch_size": spec.patch_size,
        "spec": spec_d,
        "classes": classes[:-1],
        "distractor": classes[-1]["distractor"],
        "taxonomy": tree.to_dict(),
        "splits": splits,
        "images": records,
    }
    train = Dataset(*arrays["train"][:2], arrays["train"][2], *arrays["train"][3:], spec.num_classes, manifest=manifest)
    test = Dataset(*arrays["test"][:2], arrays["test"][2], *arrays["test"][3:], spec.num_classes, manifest=manifest)
    if out_dir is not None:
        write_dataset(out_dir, manifest, train, test)
    return manifest, train, test


def write_dataset(out_dir, manifest: dict, train: Dataset, test: Dataset) -> None:
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "masks").mkdir(parents=True, exist_ok=True)
    for ds in (train, test):
        for i, image_id in enumerate(ds.ids):
            save_image(out / "images" / f"{image_id}.ppm", ds.images[i])
            save_image(out / "masks" / f"{image_id}.pgm", ds.trait_masks[i].astype(np.uint8) * 255)
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))


class ManifestError(ValueError):
    pass


def load_dataset(path) -> tuple[dict, Dataset, Dataset]:
    """Read ``manifest.json`` (or a directory holding it) with integrity checks."""
    path = Path(path)
    if path.is_dir():
        path = path / "manifest.json"
    root = path.parent
    manifest = json.loads(path.read_text())
    if manifest.get("schema") != SCHEMA:
        raise ManifestError(f"unsupported manifest schema {manifest.get('schema')!r}")
    n_classes = len(manifest["classes"])
    size = manifest["image_size"]
    by_split: dict[str, list] = {"train": [], "test": []}
    problems = []
    for rec in manifest["images"]:
        img_path, mask_path = root / rec["path"], root / rec["trait_mask_path"]
        if not img_path.exists() or not mask_path.exists():
            problems.append(f"missing file for {rec['id']}")
            continue
        if not 0 <= rec["label"] < n_classes:
            problems.append(f"label {rec['label']} out of range for {rec['id']}")
            continue
        img, mask = load_image(img_path), load_image(mask_path)
        if img.shape != (size, size, 3) or mask.shape != (size, size):
            problems.append(f"shape mismatch for {rec['id']}: {img.shape} / {mask.shape}")
            continue
        by_split[rec["split"]].append((rec, img, mask > 127))
    if problems:
        raise ManifestError("; ".join(problems[:10]))
    out = []
    for split in ("train", "test"):
        rows = by_split[split]
        out.append(Dataset(
            images=np.stack([r[1] for r in rows]),
            labels=np.array([r[0]["label"] for r in rows], dtype=np.int64),
            ids=[r[0]["id"] for r in rows],
            trait_masks=np.stack([r[2] for r in rows]),
            occluded=np.array([r[0]["occlusion_flag"] for r in rows], dtype=bool),
            num_classes=n_classes,
            manifest=manifest,
        ))
    return manifest, out[0], out[1]


def glyph_mask(manifest: dict, class_id: int, kind: str = "trait") -> np.ndarray:
    """Pixel mask of a class's species (``trait``) or genus (``shared``) glyph patch."""
    spec = SynthSpec(image_size=manifest["image_size"], patch_size=manifest["patch_size"],
                     num_classes=len(manifest["classes"]))
    key = "trait_glyphs" if kind == "trait" else "shared_glyphs"
    return patch_mask(manifest["classes"][class_id][key][0]["patch_position"], spec)


def mean_color(dataset: Dataset) -> np.ndarray:
    """Per-channel mean in [0, 1] (the deletion baseline colour)."""
    return dataset.images.reshape(-1, 3).mean(axis=0) / 255.0


def spec_from_manifest(manifest: dict) -> SynthSpec:
    d = dict(manifest["spec"])
    d["occlude_splits"] = tuple(d.get("occlude_splits", ("test",)))
    return SynthSpec(**d)


@dataclass(frozen=True)
class CorpusSpec:
    """Held-out pretraining corpus: glyph classes unrelated to any SynthTraits label set.

    Each image holds its class glyph plus ``distractors`` glyphs drawn from a separate
    distractor bank, all at random patches, so a classifier must find the class glyph
    by appearance rather than position.
    """

    num_classes: int = 16
    per_class: int = 60
    distractor_types: int = 8
    distractors: int = 2
    image_size: int = 32
    patch_size: int = 8
    noise_level: float = 0.06
    glyph_contrast: float = 0.3


def generate_glyph_corpus(spec: CorpusSpec = CorpusSpec(), seed: int = 1000) -> Dataset:
    grid = spec.image_size // spec.patch_size
    if 1 + spec.distractors > grid * grid:
        raise ValueError("more glyphs per image than patches")
    layout_spec = SynthSpec(image_size=spec.image_size, patch_size=spec.patch_size, noise_level=spec.noise_level)
    rng = stream(seed, "corpus.glyphs")
    n = spec.num_classes + spec.distractor_types
    colors = _glyph_colors(rng, n, spec.glyph_contrast)
    patterns = [PATTERNS[int(k)] for k in rng.integers(len(PATTERNS), size=n)]
    tiles = [glyph_tile(patterns[i], colors[i], spec.patch_size) for i in range(n)]
    rng = stream(seed, "corpus")
    imgs, labels = [], []
    for _ in range(spec.per_class):
        for c in range(spec.num_classes):
            img = render_background(layout_spec, rng)
            pos = rng.choice(grid * grid, size=1 + spec.distractors, replace=False)
            _place(img, tiles[c], int(pos[0]), layout_spec)
            for p in pos[1:]:
                _place(img, tiles[spec.num_classes + int(rng.integers(spec.distractor_types))], int(p), layout_spec)
            imgs.append(quantize(img))
            labels.append(c)
    images = np.stack(imgs)
    return Dataset(
        images=images,
        labels=np.array(labels, dtype=np.int64),
        ids=[f"corpus_{i:05d}" for i in range(len(labels))],
        trait_masks=np.zeros(images.shape[:3], dtype=bool),
        occluded=np.zeros(len(labels), dtype=bool),
        num_classes=spec.num_classes,
    )
