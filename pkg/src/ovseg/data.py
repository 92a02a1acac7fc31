"""Synthetic "shapes world" dataset: generation, vocabularies, splits, disk IO.

A scene is one stuff background plus 1-5 colored thing shapes drawn in order
(later shapes occlude earlier ones). Class names are the background names
(stuff) followed by every "color shape" combination (things). All geometry is
drawn as integers from SplitMix64 so generated datasets are byte-identical
across runs.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .pnm import read_pgm, read_ppm, write_pgm, write_ppm
from .rng import SplitMix64

IGNORE_LABEL = 255

SHAPE_KINDS = ("circle", "square", "triangle", "stripes")

DEFAULT_COLORS = (
    ("red", (220, 40, 40)),
    ("green", (40, 200, 40)),
    ("blue", (40, 40, 220)),
    ("yellow", (230, 220, 40)),
)
DEFAULT_BACKGROUNDS = (
    ("grass", (60, 110, 45)),
    ("sand", (205, 180, 140)),
)
# Domain "B" stand-in for a dataset shift: same class names, shifted palette,
# smaller shapes, noisy textured backgrounds.
DOMAIN_B_COLORS = (
    ("red", (216, 44, 37)),
    ("green", (44, 196, 44)),
    ("blue", (44, 44, 216)),
    ("yellow", (226, 216, 44)),
)
DOMAIN_B_BACKGROUNDS = (
    ("grass", (57, 113, 44)),
    ("sand", (208, 177, 143)),
)


class InvalidConfigError(ValueError):
    """Generation config that cannot produce a scene."""


class EmptyPartitionError(ValueError):
    """Requested dataset with an empty train or val partition."""


class DatasetIntegrityError(ValueError):
    """On-disk dataset whose pieces do not agree."""


@dataclass
class Image:
    """8-bit RGB pixel grid; numerics interpret channels as value/255."""

    pixels: np.ndarray  # (H, W, 3) uint8

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels, dtype=np.uint8)
        if self.pixels.ndim != 3 or self.pixels.shape[2] != 3:
            raise ValueError(f"expected (H, W, 3) pixels, got {self.pixels.shape}")

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    def as_float(self) -> np.ndarray:
        return self.pixels.astype(np.float64) / 255.0


@dataclass
class GroundTruthSeg:
    """Per-pixel class indices; 255 marks ignored pixels."""

    labels: np.ndarray  # (H, W) uint8
    ignore_label: int = IGNORE_LABEL

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.uint8)
        if self.labels.ndim != 2:
            raise ValueError(f"expected (H, W) labels, got {self.labels.shape}")

    @property
    def height(self) -> int:
        return self.labels.shape[0]

    @property
    def width(self) -> int:
        return self.labels.shape[1]


@dataclass(frozen=True)
class VocabEntry:
    name: str
    kind: str  # "thing" | "stuff"


@dataclass
class Vocabulary:
    """Ordered class list; a class index is its position."""

    entries: tuple[VocabEntry, ...]

    def __post_init__(self):
        self.entries = tuple(self.entries)
        names = [e.name for e in self.entries]
        if len(set(names)) != len(names):
            raise ValueError("class names must be unique")
        for e in self.entries:
            if e.kind not in ("thing", "stuff"):
                raise ValueError(f"bad kind {e.kind!r} for {e.name!r}")
            if e.name != e.name.lower() or not all(w.isalpha() for w in e.name.split(" ")):
                raise ValueError(f"class names are lowercase space-separated words, got {e.name!r}")

    def __len__(self) -> int:
        return len(self.entries)

    @property
    def names(self) -> list[str]:
        return [e.name for e in self.entries]

    def index(self, name: str) -> int:
        return self.names.index(name)

    def indices_of_kind(self, kind: str) -> list[int]:
        return [i for i, e in enumerate(self.entries) if e.kind == kind]


@dataclass(frozen=True)
class SplitSpec:
    """Disjoint seen/unseen class-index sets covering the vocabulary."""

    seen: tuple[int, ...]
    unseen: tuple[int, ...]

    def validate(self, vocab_size: int) -> None:
        seen, unseen = set(self.seen), set(self.unseen)
        if seen & unseen:
            raise ValueError("seen and unseen overlap")
        if seen | unseen != set(range(vocab_size)):
            raise ValueError("split does not cover the vocabulary")


@dataclass
class Scene:
    scene_id: str
    image: Image
    gt: GroundTruthSeg
    caption: str


@dataclass
class GenConfig:
    """Knobs for the procedural scene generator."""

    image_size: int = 64
    shape_count: tuple[int, int] = (1, 5)
    radius_range: tuple[int, int] = (6, 14)
    shape_kinds: tuple[str, ...] = SHAPE_KINDS
    colors: tuple[tuple[str, tuple[int, int, int]], ...] = DEFAULT_COLORS
    backgrounds: tuple[tuple[str, tuple[int, int, int]], ...] = DEFAULT_BACKGROUNDS
    noise_amplitude: int = 0
    domain: str = "A"
    caption_template: str = "a scene with {}"

    def validate(self) -> None:
        if not self.colors or not self.backgrounds:
            raise InvalidConfigError("palettes must be non-empty")
        if not self.shape_kinds:
            raise InvalidConfigError("need at least one shape kind")
        lo, hi = self.shape_count
        if lo < 0 or hi < lo:
            raise InvalidConfigError(f"bad shape count range {self.shape_count}")
        rlo, rhi = self.radius_range
        if rlo < 1 or rhi < rlo:
            raise InvalidConfigError(f"bad radius range {self.radius_range}")
        if 2 * rlo + 1 > self.image_size:
            raise InvalidConfigError(
                f"minimum shape size {2 * rlo + 1} exceeds image size {self.image_size}"
            )
        for kind in self.shape_kinds:
            if kind not in SHAPE_KINDS:
                raise InvalidConfigError(f"unknown shape kind {kind!r}")

    def vocabulary(self) -> Vocabulary:
        """Stuff classes first (background names), then color x shape things."""
        entries = [VocabEntry(name, "stuff") for name, _ in self.backgrounds]
        for color, _ in self.colors:
            for kind in self.shape_kinds:
                entries.append(VocabEntry(f"{color} {kind}", "thing"))
        return Vocabulary(tuple(entries))


def domain_b_config(base: GenConfig) -> GenConfig:
    """The cross-dataset companion config: shifted palette, smaller noisy shapes."""
    return replace(
        base,
        radius_range=(4, 10),
        noise_amplitude=12,
        colors=DOMAIN_B_COLORS,
        backgrounds=DOMAIN_B_BACKGROUNDS,
        domain="B",
    )


@dataclass
class Dataset:
    vocab: Vocabulary
    split: SplitSpec
    train: list[Scene]
    val: list[Scene]
    domain: str
    config: GenConfig


def _shape_mask(kind: str, r: int) -> np.ndarray:
    """Integer rasterization of one shape on its (2r+1)^2 bounding grid."""
    dy, dx = np.mgrid[-r : r + 1, -r : r + 1]
    if kind == "circle":
        return dx * dx + dy * dy <= r * r
    if kind == "square":
        return np.ones((2 * r + 1, 2 * r + 1), dtype=bool)
    if kind == "triangle":
        return np.abs(dx) <= (dy + r) // 2
    if kind == "stripes":
        return (dy + r) % 3 < 2
    raise InvalidConfigError(f"unknown shape kind {kind!r}")


def _try_generate(config: GenConfig, rng: SplitMix64, n_shapes: int):
    """One generation attempt; None if a shape cannot be placed in 20 tries."""
    size = config.image_size
    bg_idx = rng.randint(len(config.backgrounds))
    bg_rgb = config.backgrounds[bg_idx][1]
    pixels = np.empty((size, size, 3), dtype=np.int32)
    pixels[:, :] = bg_rgb
    if config.noise_amplitude > 0:
        amp = config.noise_amplitude
        draws = rng.next_u64_array(size * size) % np.uint64(2 * amp + 1)
        noise = draws.astype(np.int32).reshape(size, size) - amp
        pixels += noise[:, :, None]
        pixels = np.clip(pixels, 0, 255)
    labels = np.full((size, size), bg_idx, dtype=np.uint8)

    n_stuff = len(config.backgrounds)
    n_kinds = len(config.shape_kinds)
    draw_order = [bg_idx]
    for _ in range(n_shapes):
        kind_idx = rng.randint(n_kinds)
        color_idx = rng.randint(len(config.colors))
        r = rng.randrange(*config.radius_range)
        placed = False
        for _ in range(20):
            cx = rng.randint(size)
            cy = rng.randint(size)
            if cx - r >= 0 and cx + r < size and cy - r >= 0 and cy + r < size:
                placed = True
                break
        if not placed:
            return None
        mask = _shape_mask(config.shape_kinds[kind_idx], r)
        class_idx = n_stuff + color_idx * n_kinds + kind_idx
        region = (slice(cy - r, cy + r + 1), slice(cx - r, cx + r + 1))
        pixels[region][mask] = config.colors[color_idx][1]
        labels[region][mask] = class_idx
        draw_order.append(class_idx)
    return pixels.astype(np.uint8), labels, draw_order, bg_idx


def _caption(config: GenConfig, vocab: Vocabulary, labels: np.ndarray, draw_order: list[int], bg_idx: int) -> str:
    """Caption listing present thing classes in draw order, background last."""
    present = set(np.unique(labels).tolist())
    phrases = []
    mentioned = set()
    for cls in draw_order[1:]:
        if cls in present and cls not in mentioned:
            phrases.append(f"a {vocab.entries[cls].name}")
            mentioned.add(cls)
    if bg_idx in present:
        phrases.append(vocab.entries[bg_idx].name)
    return config.caption_template.format(" and ".join(phrases))


def generate_scene(config: GenConfig, rng: SplitMix64, scene_id: str = "scene") -> Scene:
    """Generate one scene; placement failures retry with one shape fewer."""
    config.validate()
    vocab = config.vocabulary()
    n_shapes = rng.randrange(*config.shape_count)
    while True:
        result = _try_generate(config, rng, n_shapes)
        if result is not None:
            break
        n_shapes -= 1
    pixels, labels, draw_order, bg_idx = result
    caption = _caption(config, vocab, labels, draw_order, bg_idx)
    return Scene(scene_id, Image(pixels), GroundTruthSeg(labels), caption)


def mask_unseen(gt: GroundTruthSeg, unseen: tuple[int, ...]) -> GroundTruthSeg:
    """Replace unseen-class labels with the ignore label (zero-shot training)."""
    labels = gt.labels.copy()
    labels[np.isin(labels, list(unseen))] = IGNORE_LABEL
    return GroundTruthSeg(labels)


def generate_dataset(
    config: GenConfig,
    split: SplitSpec,
    n_train: int,
    n_val: int,
    seed: int,
    mask_train: bool = True,
) -> Dataset:
    """Generate a dataset; train ground truths hide unseen classes, captions do not."""
    config.validate()
    vocab = config.vocabulary()
    split.validate(len(vocab))
    if n_train <= 0 or n_val <= 0:
        raise EmptyPartitionError(f"need non-empty partitions, got {n_train}/{n_val}")
    root = SplitMix64(seed)
    train = []
    for i in range(n_train):
        scene = generate_scene(config, root.split(i), f"train_{i:05d}")
        if mask_train:
            scene.gt = mask_unseen(scene.gt, split.unseen)
        train.append(scene)
    val = [generate_scene(config, root.split(n_train + i), f"val_{i:05d}") for i in range(n_val)]
    return Dataset(vocab, split, train, val, config.domain, config)


def make_split(vocab: Vocabulary, n_unseen: int, thing_stuff_ratio: float, seed: int) -> SplitSpec:
    """Random seen/unseen split with a target unseen thing:stuff count ratio."""
    if n_unseen <= 0:
        raise ValueError("the zero-shot setting needs at least one unseen class")
    if n_unseen >= len(vocab):
        raise ValueError("at least one class must stay seen")
    things = vocab.indices_of_kind("thing")
    stuffs = vocab.indices_of_kind("stuff")
    if thing_stuff_ratio < 0:
        raise ValueError("ratio must be non-negative")
    # Target counts, then clamp to what the vocabulary can actually supply.
    n_things = round(n_unseen * thing_stuff_ratio / (1.0 + thing_stuff_ratio))
    n_things = min(n_things, len(things))
    n_stuff = n_unseen - n_things
    if n_stuff > len(stuffs):
        n_stuff = len(stuffs)
        n_things = n_unseen - n_stuff
    if n_things > len(things) or n_things < 0 or n_stuff < 0:
        raise ValueError(f"cannot draw {n_unseen} unseen classes from this vocabulary")
    rng = SplitMix64(seed)
    pool_t, pool_s = list(things), list(stuffs)
    rng.shuffle(pool_t)
    rng.shuffle(pool_s)
    unseen = sorted(pool_t[:n_things] + pool_s[:n_stuff])
    seen = sorted(set(range(len(vocab))) - set(unseen))
    return SplitSpec(tuple(seen), tuple(unseen))


def _canonical_json(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def _config_to_dict(config: GenConfig) -> dict:
    return {
        "image_size": config.image_size,
        "shape_count": list(config.shape_count),
        "radius_range": list(config.radius_range),
        "shape_kinds": list(config.shape_kinds),
        "colors": [[name, list(rgb)] for name, rgb in config.colors],
        "backgrounds": [[name, list(rgb)] for name, rgb in config.backgrounds],
        "noise_amplitude": config.noise_amplitude,
        "domain": config.domain,
        "caption_template": config.caption_template,
    }


def _config_from_dict(d: dict) -> GenConfig:
    return GenConfig(
        image_size=d["image_size"],
        shape_count=tuple(d["shape_count"]),
        radius_range=tuple(d["radius_range"]),
        shape_kinds=tuple(d["shape_kinds"]),
        colors=tuple((name, tuple(rgb)) for name, rgb in d["colors"]),
        backgrounds=tuple((name, tuple(rgb)) for name, rgb in d["backgrounds"]),
        noise_amplitude=d["noise_amplitude"],
        domain=d["domain"],
        caption_template=d["caption_template"],
    )


def save_dataset(dataset: Dataset, directory: str | Path) -> None:
    """Write images/<id>.ppm, labels/<id>.pgm, captions/vocab/split/config JSON."""
    root = Path(directory)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "labels").mkdir(parents=True, exist_ok=True)
    captions = []
    for scene in dataset.train + dataset.val:
        write_ppm(root / "images" / f"{scene.scene_id}.ppm", scene.image.pixels)
        write_pgm(root / "labels" / f"{scene.scene_id}.pgm", scene.gt.labels)
        captions.append({"id": scene.scene_id, "caption": scene.caption})
    (root / "captions.json").write_text(_canonical_json(captions))
    vocab_doc = [{"name": e.name, "kind": e.kind} for e in dataset.vocab.entries]
    (root / "vocab.json").write_text(_canonical_json(vocab_doc))
    split_doc = {"seen": list(dataset.split.seen), "unseen": list(dataset.split.unseen)}
    (root / "split.json").write_text(_canonical_json(split_doc))
    (root / "gen_config.json").write_text(_canonical_json(_config_to_dict(dataset.config)))


def load_dataset(directory: str | Path) -> Dataset:
    """Inverse of save_dataset; validates labels against the vocabulary."""
    root = Path(directory)
    config = _config_from_dict(json.loads((root / "gen_config.json").read_text()))
    vocab_doc = json.loads((root / "vocab.json").read_text())
    vocab = Vocabulary(tuple(VocabEntry(e["name"], e["kind"]) for e in vocab_doc))
    split_doc = json.loads((root / "split.json").read_text())
    split = SplitSpec(tuple(split_doc["seen"]), tuple(split_doc["unseen"]))
    split.validate(len(vocab))
    captions = {e["id"]: e["caption"] for e in json.loads((root / "captions.json").read_text())}

    train, val = [], []
    for ppm in sorted((root / "images").glob("*.ppm")):
        scene_id = ppm.stem
        pixels = read_ppm(ppm)
        labels = read_pgm(root / "labels" / f"{scene_id}.pgm")
        if labels.shape != pixels.shape[:2]:
            raise DatasetIntegrityError(f"{scene_id}: image {pixels.shape[:2]} vs labels {labels.shape}")
        bad = labels[(labels != IGNORE_LABEL) & (labels >= len(vocab))]
        if bad.size:
            raise DatasetIntegrityError(f"{scene_id}: label {int(bad[0])} outside vocabulary of {len(vocab)}")
        if scene_id not in captions:
            raise DatasetIntegrityError(f"{scene_id}: missing caption")
        scene = Scene(scene_id, Image(pixels), GroundTruthSeg(labels), captions[scene_id])
        (train if scene_id.startswith("train_") else val).append(scene)
    if not train and not val:
        raise DatasetIntegrityError(f"{root}: no scenes found")
    return Dataset(vocab, split, train, val, config.domain, config)
