"""Procedural shape scenes, the word vocabulary, and seeded dataset generation."""

import hashlib
from dataclasses import dataclass
from enum import IntEnum
from typing import Dict, Iterable, List, Optional, Sequence

import numpy as np
from scipy import ndimage

from langneck.errors import ArgumentError
from langneck.parallel import run_ordered

PAD, BOS, UNK = 0, 1, 2
SPECIAL_TOKENS = ["<pad>", "<bos>", "<unk>"]

DEFAULT_IMAGE_SIZE = 32
SUPERSAMPLE = 4
SPLIT_CODES = {"train": 0, "val": 1}


class Shape(IntEnum):
    CIRCLE = 0
    SQUARE = 1
    TRIANGLE = 2
    CROSS = 3


class Color(IntEnum):
    RED = 0
    GREEN = 1
    BLUE = 2
    YELLOW = 3


class Size(IntEnum):
    SMALL = 0
    LARGE = 1


class Position(IntEnum):
    TOP_LEFT = 0
    TOP_RIGHT = 1
    BOTTOM_LEFT = 2
    BOTTOM_RIGHT = 3


def _word(member: IntEnum) -> str:
    return member.name.lower().replace("_", "-")


SHAPE_WORDS = [_word(s) for s in Shape]
COLOR_WORDS = [_word(c) for c in Color]
SIZE_WORDS = [_word(s) for s in Size]
POSITION_WORDS = [_word(p) for p in Position]

DISTRACTOR_WORDS = [
    "apple", "river", "music", "garden", "window", "coffee", "mountain",
    "pencil", "winter", "bridge", "candle", "forest", "letter", "market",
    "ocean", "pillow", "rocket", "silver", "thunder", "violin", "wagon",
    "basket", "camera", "desert", "engine", "feather", "guitar", "harbor",
    "island", "jacket", "kettle", "lemon", "mirror", "needle", "orchard",
    "planet", "quilt", "saddle", "ticket", "tunnel", "valley", "whistle",
]

COLOR_RGB = {
    Color.RED: (0.90, 0.12, 0.10),
    Color.GREEN: (0.12, 0.78, 0.20),
    Color.BLUE: (0.15, 0.25, 0.95),
    Color.YELLOW: (0.95, 0.88, 0.10),
}

# radius as a fraction of the grid cell
SIZE_RADIUS = {Size.SMALL: 0.22, Size.LARGE: 0.40}

NUM_CLASSES = len(Shape) * len(Color)


class Vocabulary:
    """Bijective token <-> id map; ids 0..2 are PAD, BOS, UNK."""

    def __init__(self, tokens: Sequence[str]):
        tokens = list(tokens)
        if tokens[: len(SPECIAL_TOKENS)] != SPECIAL_TOKENS:
            raise ArgumentError(f"Vocabulary must start with {SPECIAL_TOKENS}")
        if len(set(tokens)) != len(tokens):
            raise ArgumentError("Vocabulary tokens must be unique")
        self.tokens = tokens
        self._ids: Dict[str, int] = {t: i for i, t in enumerate(tokens)}

    def __len__(self) -> int:
        return len(self.tokens)

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocabulary) and self.tokens == other.tokens

    @property
    def special_ids(self) -> List[int]:
        return [PAD, BOS, UNK]

    def token(self, idx: int) -> str:
        return self.tokens[idx]

    def id(self, token: str) -> int:
        return self._ids.get(token, UNK)

    def encode(self, words: Iterable[str]) -> List[int]:
        return [self.id(w) for w in words]

    def decode(self, ids: Iterable[int]) -> List[str]:
        return [self.tokens[int(i)] for i in ids]

    def hash(self) -> str:
        return hashlib.sha256("\n".join(self.tokens).encode("utf-8")).hexdigest()

    def checksum16(self) -> int:
        return int(self.hash()[:4], 16)


def build_vocabulary() -> Vocabulary:
    return Vocabulary(SPECIAL_TOKENS + SHAPE_WORDS + COLOR_WORDS + SIZE_WORDS + POSITION_WORDS + DISTRACTOR_WORDS)


@dataclass(frozen=True)
class SceneSpec:
    shape: Shape
    color: Color
    size: Size
    position: Position

    @property
    def label(self) -> int:
        return class_label(self.shape, self.color)


@dataclass(eq=False)
class ImageSample:
    pixels: np.ndarray
    label: int
    spec: SceneSpec


@dataclass(frozen=True)
class PlannedSample:
    spec: SceneSpec
    seed: int


def class_label(shape: Shape, color: Color) -> int:
    return int(shape) * len(Color) + int(color)


def class_name(label: int) -> str:
    shape, color = divmod(label, len(Color))
    return f"{COLOR_WORDS[color]} {SHAPE_WORDS[shape]}"


def caption_tokens(spec: SceneSpec) -> List[str]:
    """Attribute words in the fixed caption order: color, shape, size, position."""
    return [_word(spec.color), _word(spec.shape), _word(spec.size), _word(spec.position)]


def _inside(shape: Shape, dx: np.ndarray, dy: np.ndarray, r: float) -> np.ndarray:
    if shape == Shape.CIRCLE:
        return dx * dx + dy * dy <= r * r
    if shape == Shape.SQUARE:
        return np.maximum(np.abs(dx), np.abs(dy)) <= 0.8 * r
    if shape == Shape.TRIANGLE:
        # apex up at -r, base at +0.8r
        height = (dy + r) / (1.8 * r)
        return (dy >= -r) & (dy <= 0.8 * r) & (np.abs(dx) <= height * r)
    arm = 0.3 * r
    return ((np.abs(dx) <= arm) & (np.abs(dy) <= r)) | ((np.abs(dy) <= arm) & (np.abs(dx) <= r))


def _coverage(spec: SceneSpec, size: int) -> np.ndarray:
    cell = size / 2.0
    row, col = divmod(int(spec.position), 2)
    cx, cy = (col + 0.5) * cell, (row + 0.5) * cell
    r = SIZE_RADIUS[spec.size] * cell
    sub = (np.arange(size * SUPERSAMPLE) + 0.5) / SUPERSAMPLE
    ys, xs = np.meshgrid(sub, sub, indexing="ij")
    hits = _inside(spec.shape, xs - cx, ys - cy, r).astype(np.float64)
    return hits.reshape(size, SUPERSAMPLE, size, SUPERSAMPLE).mean(axis=(1, 3))


def _background(rng: np.random.Generator, size: int) -> np.ndarray:
    base = rng.uniform(0.30, 0.55)
    tint = rng.uniform(-0.04, 0.04, size=3)
    texture = ndimage.gaussian_filter(rng.normal(0.0, 0.08, size=(size, size, 3)), sigma=(1.5, 1.5, 0))
    return base + tint + texture


def render_scene(spec: SceneSpec, seed: int, size: int = DEFAULT_IMAGE_SIZE) -> ImageSample:
    """Rasterize the antialiased shape over a seeded texture; pixels are float32-exact in [0, 1]."""
    rng = np.random.default_rng(seed)
    alpha = _coverage(spec, size)[..., None]
    color = np.asarray(COLOR_RGB[spec.color])
    pixels = _background(rng, size) * (1.0 - alpha) + color * alpha
    pixels = np.clip(pixels, 0.0, 1.0).astype(np.float32).astype(np.float64)
    return ImageSample(pixels=pixels, label=spec.label, spec=spec)


def dataset_plan(seed: int, count: int, split: str = "train") -> List[PlannedSample]:
    """The (spec, render seed) pairs a dataset renders; classes cycle by index."""
    if count <= 0:
        raise ArgumentError(f"Dataset size must be positive, got {count}")
    if split not in SPLIT_CODES:
        raise ArgumentError(f"Unknown split '{split}'. Use: {', '.join(SPLIT_CODES)}")
    plan = []
    for index in range(count):
        rng = np.random.default_rng(np.random.SeedSequence([seed, SPLIT_CODES[split], index]))
        shape, color = divmod(index % NUM_CLASSES, len(Color))
        spec = SceneSpec(
            shape=Shape(shape),
            color=Color(color),
            size=Size(int(rng.integers(len(Size)))),
            position=Position(int(rng.integers(len(Position)))),
        )
        plan.append(PlannedSample(spec=spec, seed=int(rng.integers(2**62))))
    return plan


def generate_dataset(
    seed: int,
    count: int,
    split: str = "train",
    image_size: int = DEFAULT_IMAGE_SIZE,
    workers: Optional[int] = None,
) -> List[ImageSample]:
    plan = dataset_plan(seed, count, split)
    return run_ordered(lambda p: render_scene(p.spec, p.seed, image_size), plan, workers)


def stack_pixels(samples: Sequence[ImageSample]) -> np.ndarray:
    return np.stack([s.pixels for s in samples])


def labels_of(samples: Sequence[ImageSample]) -> np.ndarray:
    return np.array([s.label for s in samples], dtype=np.int64)
