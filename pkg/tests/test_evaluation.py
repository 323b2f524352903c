from unittest import mock

import numpy as np
import pytest

from langneck.corruptions import Corruption
from langneck.data import generate_dataset, stack_pixels
from langneck.errors import ArgumentError
from langneck.evaluation import (
    PATHS,
    corruption_seed,
    emit_tokens,
    evaluate,
    evaluate_grid,
    pairwise_cosine,
)
from langneck.model import HEAD_BIAS, HEAD_WEIGHT


def test_empty_dataset(tiny_params, vocab):
    with pytest.raises(ArgumentError):
        evaluate(tiny_params, [], "hard", vocab.special_ids)


def test_unknown_path(tiny_params, tiny_val_set, vocab):
    with pytest.raises(ArgumentError):
        evaluate(tiny_params, tiny_val_set, "beam", vocab.special_ids)


@pytest.mark.parametrize("path", PATHS)
def test_every_path_reports_sane_numbers(path, tiny_params, tiny_val_set, vocab):
    result = evaluate(tiny_params, tiny_val_set, path, vocab.special_ids, batch_size=5)
    assert result.count == 16
    assert 0.0 <= result.accuracy <= 1.0
    assert -1.0 - 1e-9 <= result.cosine <= 1.0 + 1e-9
    assert np.isfinite(result.llm_nll)
    assert 1.0 <= result.distinct_tokens <= 4.0
    assert (result.corruption, result.severity) == ("clean", 0)


def test_no_repetition_path_never_repeats(tiny_params, tiny_val_set, vocab):
    result = evaluate(tiny_params, tiny_val_set, "no_rep", vocab.special_ids)
    assert result.duplicate_violations == 0
    assert result.distinct_tokens == 4.0


def test_uniform_head_scores_chance(tiny_params, vocab):
    images = generate_dataset(seed=2, count=64, split="val", image_size=16, workers=1)
    tiny_params[HEAD_WEIGHT].data[...] = 0.0
    tiny_params[HEAD_BIAS].data[...] = 0.0
    sigma = np.sqrt((1 / 16) * (15 / 16) / 64)
    for path in ("soft", "hard", "no_rep"):
        result = evaluate(tiny_params, images, path, vocab.special_ids)
        assert abs(result.accuracy - 1 / 16) <= 3 * sigma


def test_serial_and_threaded_agree(tiny_params, tiny_val_set, vocab):
    c = Corruption("shot_noise", 2)
    serial = evaluate(tiny_params, tiny_val_set, "hard", vocab.special_ids, c, seed=3, batch_size=4, workers=1)
    threaded = evaluate(tiny_params, tiny_val_set, "hard", vocab.special_ids, c, seed=3, batch_size=4, workers=4)
    assert serial == threaded


def test_env_thread_count_does_not_change_results(tiny_params, tiny_val_set, vocab):
    with mock.patch.dict("os.environ", {"LANGNECK_THREADS": "1"}):
        one = evaluate(tiny_params, tiny_val_set, "soft", vocab.special_ids, batch_size=4)
    with mock.patch.dict("os.environ", {"LANGNECK_THREADS": "3"}):
        three = evaluate(tiny_params, tiny_val_set, "soft", vocab.special_ids, batch_size=4)
    assert one == three


def test_oracle_head_scores_perfectly(tiny_params, tiny_val_set, vocab):
    labels = np.array([s.label for s in tiny_val_set])
    eye = np.eye(16)
    stacked = stack_pixels(tiny_val_set)

    def oracle(params, images, path, special_ids):
        index = [int(np.flatnonzero((stacked == img).all(axis=(1, 2, 3)))[0]) for img in images]
        return eye[labels[index]], np.zeros((len(images), 4, 8)), np.tile([3, 4, 5, 6], (len(images), 1))

    with mock.patch("langneck.evaluation._emit", side_effect=oracle):
        result = evaluate(tiny_params, tiny_val_set, "hard", vocab.special_ids, batch_size=4)
    assert result.accuracy == 1.0


def test_corruption_seed_depends_on_every_part():
    c = Corruption("impulse_noise", 3)
    base = corruption_seed(0, 5, c)
    assert base == corruption_seed(0, 5, c)
    assert base != corruption_seed(1, 5, c)
    assert base != corruption_seed(0, 6, c)
    assert base != corruption_seed(0, 5, Corruption("impulse_noise", 4))


def test_pairwise_cosine():
    vectors = np.array([[[1.0, 0.0], [0.0, 1.0]], [[1.0, 0.0], [2.0, 0.0]]])
    np.testing.assert_allclose(pairwise_cosine(vectors), [0.0, 1.0])


def test_emit_tokens_shapes(tiny_params, tiny_val_set, vocab):
    pred, tokens = emit_tokens(tiny_params, stack_pixels(tiny_val_set[:3]), "no_rep", vocab.special_ids)
    assert pred.shape == (3,)
    assert tokens.shape == (3, 4)


def test_grid_has_clean_plus_twenty(tiny_params, tiny_val_set, vocab):
    results = evaluate_grid(tiny_params, tiny_val_set[:4], "hard", vocab.special_ids, workers=1)
    assert len(results) == 21
    assert (results[0].corruption, results[0].severity) == ("clean", 0)
    assert {r.severity for r in results[1:]} == {1, 2, 3, 4, 5}
