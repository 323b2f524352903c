from collections import Counter

import numpy as np
import pytest

from langneck.data import (
    BOS,
    NUM_CLASSES,
    PAD,
    SIZE_RADIUS,
    UNK,
    Color,
    Position,
    SceneSpec,
    Shape,
    Size,
    Vocabulary,
    build_vocabulary,
    caption_tokens,
    class_label,
    class_name,
    dataset_plan,
    generate_dataset,
    render_scene,
)
from langneck.errors import ArgumentError


def test_vocabulary_is_a_bijection(vocab):
    for i in range(len(vocab)):
        assert vocab.id(vocab.token(i)) == i
    assert sorted(vocab.special_ids) == [PAD, BOS, UNK]
    assert all(i < 3 for i in vocab.special_ids)


def test_vocabulary_size_and_determinism():
    first, second = build_vocabulary(), build_vocabulary()
    assert first == second
    assert first.hash() == second.hash()
    assert len(first) == 3 + 4 + 4 + 2 + 4 + 42 == 59


def test_vocabulary_encode_decode(vocab):
    ids = vocab.encode(["red", "circle", "not-a-word"])
    assert ids[-1] == UNK
    assert vocab.decode(ids[:2]) == ["red", "circle"]


def test_vocabulary_rejects_duplicates():
    with pytest.raises(ArgumentError):
        Vocabulary(["<pad>", "<bos>", "<unk>", "red", "red"])


def test_checksum_is_sixteen_bits(vocab):
    assert 0 <= vocab.checksum16() < 2**16


def test_class_label_is_injective():
    labels = {class_label(s, c) for s in Shape for c in Color}
    assert labels == set(range(NUM_CLASSES))
    assert class_name(class_label(Shape.CROSS, Color.YELLOW)) == "yellow cross"


def test_caption_order():
    spec = SceneSpec(Shape.SQUARE, Color.GREEN, Size.SMALL, Position.BOTTOM_RIGHT)
    assert caption_tokens(spec) == ["green", "square", "small", "bottom-right"]


def test_render_is_deterministic_and_in_range():
    spec = SceneSpec(Shape.TRIANGLE, Color.RED, Size.LARGE, Position.TOP_RIGHT)
    a = render_scene(spec, seed=11)
    b = render_scene(spec, seed=11)
    assert a.pixels.tobytes() == b.pixels.tobytes()
    assert a.pixels.shape == (32, 32, 3)
    assert a.pixels.min() >= 0.0 and a.pixels.max() <= 1.0
    np.testing.assert_array_equal(a.pixels, a.pixels.astype(np.float32).astype(np.float64))


def test_colors_differ_only_around_the_shape():
    size = 32
    red = render_scene(SceneSpec(Shape.CIRCLE, Color.RED, Size.SMALL, Position.TOP_LEFT), seed=3, size=size)
    blue = render_scene(SceneSpec(Shape.CIRCLE, Color.BLUE, Size.SMALL, Position.TOP_LEFT), seed=3, size=size)
    rows, cols = np.nonzero(np.any(red.pixels != blue.pixels, axis=-1))
    assert len(rows) > 0
    cell = size / 2
    center, radius = 0.5 * cell, SIZE_RADIUS[Size.SMALL] * cell
    low, high = int(np.floor(center - radius)) - 2, int(np.ceil(center + radius)) + 2
    assert rows.min() >= low and rows.max() <= high
    assert cols.min() >= low and cols.max() <= high


def test_dataset_is_class_balanced():
    samples = generate_dataset(seed=5, count=160, split="train", image_size=16, workers=1)
    counts = Counter(s.label for s in samples)
    assert len(counts) == NUM_CLASSES
    assert set(counts.values()) == {10}


def test_train_and_val_plans_are_disjoint():
    train = {(p.spec, p.seed) for p in dataset_plan(7, 200, "train")}
    val = {(p.spec, p.seed) for p in dataset_plan(7, 200, "val")}
    assert not train & val


def test_generation_is_identical_serial_and_threaded():
    serial = generate_dataset(seed=2, count=12, image_size=16, workers=1)
    threaded = generate_dataset(seed=2, count=12, image_size=16, workers=4)
    assert [s.pixels.tobytes() for s in serial] == [s.pixels.tobytes() for s in threaded]
    assert [s.spec for s in serial] == [s.spec for s in threaded]


@pytest.mark.parametrize("count", [0, -3])
def test_dataset_size_must_be_positive(count):
    with pytest.raises(ArgumentError):
        dataset_plan(0, count)


def test_unknown_split():
    with pytest.raises(ArgumentError):
        dataset_plan(0, 4, "test")
