"""Classification loss plus the token-similarity and language-model auxiliaries."""

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from langneck.errors import ArgumentError
from langneck.model import BottleneckOutput, ModelParams, run_decoder
from langneck.tensor import (
    Tensor,
    add,
    cross_entropy,
    embedding_lookup,
    matmul,
    mean,
    mul,
    normalize,
    reshape,
    scale,
    slice_,
    sum_,
    transpose,
)


@dataclass
class LossWeights:
    lambda_sim: float = 0.1
    lambda_llm: float = 0.1

    def __post_init__(self):
        for name in ("lambda_sim", "lambda_llm"):
            value = float(getattr(self, name))
            if not math.isfinite(value) or value < 0:
                raise ArgumentError(f"{name} must be finite and non-negative, got {value}")
            setattr(self, name, value)


def classification_loss(class_logits: Tensor, labels) -> Tensor:
    return cross_entropy(class_logits, labels)


def _swap_last_two(x: Tensor) -> Tensor:
    axes = list(range(x.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(x, axes)


def token_similarity_loss(soft_words: Tensor) -> Tensor:
    """Mean cosine similarity over unordered token pairs i < j, averaged over the batch.

    Accepts n x d or B x n x d.
    """
    n = soft_words.shape[-2] if soft_words.ndim >= 2 else 0
    if n < 2:
        raise ArgumentError(f"token similarity needs at least 2 tokens, got {n}")
    unit = normalize(soft_words)
    cosines = matmul(unit, _swap_last_two(unit))
    pairs = np.triu(np.ones((n, n)), k=1)
    per_sequence = scale(sum_(mul(cosines, Tensor(pairs)), axis=(-2, -1)), 2.0 / (n * (n - 1)))
    return mean(per_sequence)


def llm_loss(
    params: ModelParams,
    bottleneck: BottleneckOutput,
    image_emb: Optional[Tensor] = None,
    soft_inputs: bool = True,
) -> Tensor:
    """Mean -log p(hard_i | words before i) for i = 2..n as the decoder re-reads the sequence.

    The inputs are the soft words (gradient flows through them) unless
    `soft_inputs` is False. Image cross-attention is used only when `image_emb`
    is given.
    """
    words = bottleneck.soft_words
    tokens = np.asarray(bottleneck.hard_tokens)
    n = words.shape[-2]
    if n < 2:
        raise ArgumentError(f"LLM loss needs at least 2 tokens, got {n}")
    if words.ndim == 2:
        words = reshape(words, (1,) + words.shape)
        tokens = tokens[None, :]
    batch = words.shape[0]
    inputs = words if soft_inputs else embedding_lookup(params.embedding, tokens)
    logits = run_decoder(params, inputs, image_emb)
    vocab = logits.shape[-1]
    predictions = slice_(logits, (slice(None), slice(0, n - 1)))
    return cross_entropy(reshape(predictions, (batch * (n - 1), vocab)), tokens[:, 1:].reshape(-1))


def sequence_nll(params: ModelParams, tokens: np.ndarray) -> np.ndarray:
    """Per-sequence mean NLL of B x n hard token sequences read as text (no image)."""
    tokens = np.asarray(tokens)
    batch, n = tokens.shape
    if n < 2:
        raise ArgumentError(f"sequence NLL needs at least 2 tokens, got {n}")
    logits = run_decoder(params, embedding_lookup(params.embedding, tokens), None).data[:, :-1, :]
    shifted = logits - logits.max(axis=-1, keepdims=True)
    log_probs = shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    targets = tokens[:, 1:]
    picked = np.take_along_axis(log_probs, targets[..., None], axis=-1)[..., 0]
    return -picked.mean(axis=1)


def total_loss(class_loss: Tensor, sim_loss: Optional[Tensor], llm_loss_val: Optional[Tensor], w: LossWeights) -> Tensor:
    """class + lambda_sim * sim + lambda_llm * llm; zero-weight terms are left out entirely."""
    total = class_loss
    if w.lambda_sim:
        total = add(total, scale(sim_loss, w.lambda_sim))
    if w.lambda_llm:
        total = add(total, scale(llm_loss_val, w.lambda_llm))
    return total
