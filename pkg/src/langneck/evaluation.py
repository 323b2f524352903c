"""Accuracy and word statistics along the soft, hard, no-repetition and caption paths."""

import logging
from dataclasses import dataclass
from typing import List, Optional, Sequence

import numpy as np

from langneck.corruptions import CORRUPTION_KINDS, Corruption, apply_corruption, corruption_grid
from langneck.data import ImageSample, labels_of, stack_pixels
from langneck.errors import ArgumentError
from langneck.model import (
    ModelParams,
    classify_tokens,
    encode_image,
    forward_hard,
    forward_soft,
    greedy_caption,
    sample_no_repetition,
)
from langneck.objectives import sequence_nll
from langneck.parallel import run_ordered
from langneck.tensor import NORM_EPS, no_grad

logger = logging.getLogger(__name__)

PATHS = ["soft", "hard", "no_rep", "caption"]
CAPTION_LENGTH = 4
EVAL_BATCH_SIZE = 64


@dataclass
class EvalResult:
    path: str
    corruption: str
    severity: int
    accuracy: float
    cosine: float
    llm_nll: float
    distinct_tokens: float
    duplicate_violations: int
    count: int
    method: str = ""


@dataclass
class _Partial:
    correct: int
    cosine: float
    nll: float
    distinct: int
    violations: int
    count: int


def pairwise_cosine(vectors: np.ndarray) -> np.ndarray:
    """Mean cosine over pairs i < j of each B x n x d sequence."""
    norms = np.maximum(np.linalg.norm(vectors, axis=-1, keepdims=True), NORM_EPS)
    unit = vectors / norms
    gram = unit @ np.swapaxes(unit, -1, -2)
    n = vectors.shape[-2]
    upper = np.triu_indices(n, k=1)
    return gram[:, upper[0], upper[1]].mean(axis=-1)


def corruption_seed(seed: int, index: int, c: Corruption) -> int:
    entropy = [seed, index, CORRUPTION_KINDS.index(c.kind), c.severity]
    return int(np.random.SeedSequence(entropy).generate_state(1)[0])


def _emit(params: ModelParams, images: np.ndarray, path: str, special_ids: Sequence[int]):
    """Class logits, the vectors the head consumed, and the emitted token ids."""
    emb = encode_image(params, images)
    if path == "soft":
        class_logits, bottleneck = forward_soft(params, None, special_ids, image_emb=emb)
        return class_logits.data, bottleneck.soft_words.data, bottleneck.hard_tokens
    if path == "hard":
        class_logits, tokens = forward_hard(params, None, special_ids, image_emb=emb)
        return class_logits.data, params.embedding.data[tokens], tokens
    if path == "no_rep":
        tokens = sample_no_repetition(params, emb, params.config.n_prompt, special_ids)
    else:
        tokens = greedy_caption(params, emb, CAPTION_LENGTH, special_ids)
    return classify_tokens(params, tokens).data, params.embedding.data[tokens], tokens


def emit_tokens(params: ModelParams, images: np.ndarray, path: str, special_ids: Sequence[int]):
    """Predicted classes and emitted token ids for a batch of images."""
    with no_grad():
        class_logits, _, tokens = _emit(params, images, path, special_ids)
    return np.argmax(class_logits, axis=-1), tokens


def _evaluate_batch(
    params: ModelParams,
    samples: Sequence[ImageSample],
    start: int,
    path: str,
    special_ids: Sequence[int],
    corruption: Optional[Corruption],
    seed: int,
) -> _Partial:
    if corruption is not None:
        samples = [apply_corruption(s, corruption, corruption_seed(seed, start + i, corruption)) for i, s in enumerate(samples)]
    with no_grad():
        class_logits, vectors, tokens = _emit(params, stack_pixels(samples), path, special_ids)
        nll = sequence_nll(params, tokens) if tokens.shape[1] >= 2 else np.zeros(len(samples))
    cosine = pairwise_cosine(vectors) if vectors.shape[-2] >= 2 else np.ones(len(samples))
    specials = np.isin(tokens, list(special_ids)).any(axis=1)
    distinct = [len(set(row.tolist())) for row in tokens]
    duplicates = np.array([d < tokens.shape[1] for d in distinct])
    return _Partial(
        correct=int(np.sum(np.argmax(class_logits, axis=-1) == labels_of(samples))),
        cosine=float(np.sum(cosine)),
        nll=float(np.sum(nll)),
        distinct=int(np.sum(distinct)),
        violations=int(np.sum(specials | duplicates)),
        count=len(samples),
    )


def evaluate(
    params: ModelParams,
    dataset: Sequence[ImageSample],
    path: str,
    special_ids: Sequence[int],
    corruption: Optional[Corruption] = None,
    seed: int = 0,
    batch_size: int = EVAL_BATCH_SIZE,
    workers: Optional[int] = None,
) -> EvalResult:
    """Accuracy plus mean pairwise cosine, sequence NLL and distinct-token count.

    Batches may run on worker threads; partial sums are reduced in index order.
    """
    if not dataset:
        raise ArgumentError("Cannot evaluate on an empty dataset")
    if path not in PATHS:
        raise ArgumentError(f"Unknown path '{path}'. Use: {', '.join(PATHS)}")
    starts = list(range(0, len(dataset), batch_size))
    partials: List[_Partial] = run_ordered(
        lambda s: _evaluate_batch(params, dataset[s : s + batch_size], s, path, special_ids, corruption, seed),
        starts,
        workers,
    )
    total = len(dataset)
    correct = cosine = nll = 0.0
    distinct = violations = 0
    for p in partials:
        correct += p.correct
        cosine += p.cosine
        nll += p.nll
        distinct += p.distinct
        violations += p.violations
    result = EvalResult(
        path=path,
        corruption=corruption.kind if corruption else "clean",
        severity=corruption.severity if corruption else 0,
        accuracy=correct / total,
        cosine=cosine / total,
        llm_nll=nll / total,
        distinct_tokens=distinct / total,
        duplicate_violations=violations,
        count=total,
    )
    logger.debug("%s/%s/%d accuracy %.4f", path, result.corruption, result.severity, result.accuracy)
    return result


def evaluate_grid(
    params: ModelParams,
    dataset: Sequence[ImageSample],
    path: str,
    special_ids: Sequence[int],
    seed: int = 0,
    batch_size: int = EVAL_BATCH_SIZE,
    workers: Optional[int] = None,
) -> List[EvalResult]:
    """Clean evaluation followed by every corruption kind at severities 1..5."""
    results = [evaluate(params, dataset, path, special_ids, None, seed, batch_size, workers)]
    for c in corruption_grid():
        results.append(evaluate(params, dataset, path, special_ids, c, seed, batch_size, workers))
        logger.info("%s %s severity %d: accuracy %.4f", path, c.kind, c.severity, results[-1].accuracy)
    return results
