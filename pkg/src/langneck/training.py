"""Warm-up pretraining of the backbone, then prompt + head training on a frozen backbone."""

import logging
import math
import os
import shutil
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np

from langneck.data import BOS, ImageSample, Vocabulary, caption_tokens, labels_of, stack_pixels
from langneck.errors import ArgumentError, ConfigError, NumericalError
from langneck.evaluation import CAPTION_LENGTH, evaluate
from langneck.model import (
    HEAD_BIAS,
    HEAD_WEIGHT,
    SOFT_PROMPT,
    ModelParams,
    classify_tokens,
    encode_image,
    forward_soft,
    greedy_caption,
    save_model,
    teacher_forced_logits,
)
from langneck.objectives import LossWeights, classification_loss, llm_loss, token_similarity_loss, total_loss
from langneck.optim import OPTIMIZERS, Adam, ParamGroup, build_optimizer
from langneck.report import EpochStats, MetricsReport
from langneck.storage import CHECKPOINT_DTYPES
from langneck.tensor import Tape, cross_entropy, no_grad, reshape

logger = logging.getLogger(__name__)

VARIANTS = ["plain", "token_sim", "llm_loss", "no_rep_eval", "caption_baseline"]
BEST_CHECKPOINT = "best.lbck"


@dataclass
class TrainConfig:
    epochs: int = 5
    lr_prompt: float = 1e-1
    lr_head: float = 5e-3
    batch_size: int = 32
    seed: int = 0
    weights: LossWeights = field(default_factory=LossWeights)
    warmup_epochs: int = 3
    warmup_lr: float = 3e-3
    optimizer: str = "sgd"
    llm_soft_inputs: bool = True
    llm_image_conditioning: bool = False
    checkpoint_dtype: str = "f4"

    def __post_init__(self):
        if isinstance(self.weights, dict):
            self.weights = LossWeights(**self.weights)
        if self.epochs < 1:
            raise ArgumentError(f"epochs must be at least 1, got {self.epochs}")
        if self.warmup_epochs < 0:
            raise ArgumentError("warmup_epochs must be non-negative")
        if self.batch_size < 1:
            raise ArgumentError("batch_size must be at least 1")
        for name in ("lr_prompt", "lr_head", "warmup_lr"):
            value = getattr(self, name)
            if not math.isfinite(value) or value < 0:
                raise ArgumentError(f"{name} must be a finite non-negative number, got {value}")
        if self.optimizer not in OPTIMIZERS:
            raise ArgumentError(f"Unknown optimizer '{self.optimizer}'. Use: {', '.join(OPTIMIZERS)}")
        if self.checkpoint_dtype not in CHECKPOINT_DTYPES:
            raise ArgumentError(f"checkpoint_dtype must be one of: {', '.join(CHECKPOINT_DTYPES)}")


def variant_weights(variant: str, weights: LossWeights) -> LossWeights:
    """Loss weights a variant trains with: each variant adds one mechanism to plain."""
    if variant not in VARIANTS:
        raise ArgumentError(f"Unknown variant '{variant}'. Use: {', '.join(VARIANTS)}")
    if variant == "token_sim":
        return LossWeights(lambda_sim=weights.lambda_sim, lambda_llm=0.0)
    if variant == "llm_loss":
        return LossWeights(lambda_sim=0.0, lambda_llm=weights.lambda_llm)
    return LossWeights(0.0, 0.0)


def variant_path(variant: str) -> str:
    return {"no_rep_eval": "no_rep", "caption_baseline": "caption"}.get(variant, "hard")


def _value(loss) -> float:
    return loss.item() if loss is not None else 0.0


def _batches(count: int, batch_size: int, rng: np.random.Generator) -> List[np.ndarray]:
    order = rng.permutation(count)
    return [order[i : i + batch_size] for i in range(0, count, batch_size)]


def warmup_pretrain(
    params: ModelParams,
    dataset: Sequence[ImageSample],
    epochs: int,
    vocab: Vocabulary,
    lr: float = 3e-3,
    batch_size: int = 32,
    seed: int = 0,
) -> Tuple[ModelParams, List[float]]:
    """Teacher-forced attribute-word captioning for encoder, decoder and E; frozen afterwards.

    Returns the params and the mean caption loss of each epoch.
    """
    if not dataset:
        raise ArgumentError("Warm-up needs a non-empty dataset")
    losses: List[float] = []
    if epochs == 0:
        return params, losses

    captions = np.array([vocab.encode(caption_tokens(s.spec)) for s in dataset], dtype=np.int64)
    inputs = np.concatenate([np.full((len(dataset), 1), BOS), captions[:, :-1]], axis=1)
    params.unfreeze_backbone()
    optimizer = Adam([ParamGroup(params.trainable(), lr, "backbone")])
    rng = np.random.default_rng(seed)
    try:
        for epoch in range(1, epochs + 1):
            total, batches = 0.0, 0
            for idx in _batches(len(dataset), batch_size, rng):
                images = stack_pixels([dataset[i] for i in idx])
                with Tape() as tape:
                    logits = teacher_forced_logits(params, encode_image(params, images), inputs[idx])
                    batch, length, vocab_size = logits.shape
                    loss = cross_entropy(reshape(logits, (batch * length, vocab_size)), captions[idx].reshape(-1))
                    tape.backward(loss)
                optimizer.step()
                optimizer.zero_grad()
                total += loss.item()
                batches += 1
            losses.append(total / batches)
            logger.info("warm-up epoch %d/%d caption loss %.4f", epoch, epochs, losses[-1])
    finally:
        params.freeze_backbone()
    return params, losses


def _check_vocabulary(params: ModelParams, vocab: Vocabulary, vocab_hash: Optional[str]):
    if params.config.vocab_size != len(vocab):
        raise ConfigError(f"Model has {params.config.vocab_size} embedding rows but the vocabulary has {len(vocab)} tokens")
    if vocab_hash is not None and vocab_hash != vocab.hash():
        raise ConfigError("Checkpoint and dataset vocabularies differ")


def _link_best(checkpoint_dir: Path, target: Path):
    best = checkpoint_dir / BEST_CHECKPOINT
    if best.is_symlink() or best.exists():
        best.unlink()
    try:
        os.symlink(target.name, best)
    except OSError:
        shutil.copyfile(target, best)


def _epoch_checkpoint(checkpoint_dir: Optional[Path], params: ModelParams, epoch: int, meta: Dict[str, Any], dtype: str) -> Optional[Path]:
    if checkpoint_dir is None:
        return None
    path = checkpoint_dir / f"epoch-{epoch}.lbck"
    save_model(path, params, {**meta, "epoch": epoch}, dtype=dtype)
    logger.info("wrote checkpoint %s", path)
    return path


def train(
    params: ModelParams,
    config: TrainConfig,
    train_set: Sequence[ImageSample],
    val_set: Sequence[ImageSample],
    vocab: Vocabulary,
    variant: str = "plain",
    checkpoint_dir=None,
    vocab_hash: Optional[str] = None,
    metadata: Optional[Dict[str, Any]] = None,
) -> Tuple[ModelParams, MetricsReport]:
    """Train soft prompt (lr_prompt) and head (lr_head) on the frozen backbone.

    Writes `epoch-<k>.lbck` per epoch and points `best.lbck` at the best
    hard-path validation accuracy when `checkpoint_dir` is given.
    """
    if variant == "caption_baseline":
        return train_caption_baseline(params, config, train_set, val_set, vocab, checkpoint_dir, vocab_hash, metadata)
    _check_vocabulary(params, vocab, vocab_hash)
    if not train_set or not val_set:
        raise ArgumentError("Training needs non-empty train and validation sets")
    weights = variant_weights(variant, config.weights)
    specials = vocab.special_ids
    meta = {**(metadata or {}), "vocab_hash": vocab.hash(), "variant": variant}
    checkpoint_dir = Path(checkpoint_dir) if checkpoint_dir is not None else None

    params.freeze_backbone()
    optimizer = build_optimizer(
        config.optimizer,
        [
            ParamGroup([params[SOFT_PROMPT]], config.lr_prompt, "prompt"),
            ParamGroup([params[HEAD_WEIGHT], params[HEAD_BIAS]], config.lr_head, "head"),
        ],
    )
    rng = np.random.default_rng(config.seed)
    report = MetricsReport(method=variant, metadata=dict(meta))
    best_accuracy = -1.0

    for epoch in range(1, config.epochs + 1):
        sums = np.zeros(4)
        batches = 0
        for b, idx in enumerate(_batches(len(train_set), config.batch_size, rng)):
            samples = [train_set[i] for i in idx]
            labels = labels_of(samples)
            emb = encode_image(params, stack_pixels(samples))
            try:
                with Tape() as tape:
                    class_logits, bottleneck = forward_soft(params, None, specials, image_emb=emb)
                    cls = classification_loss(class_logits, labels)
                    sim = token_similarity_loss(bottleneck.soft_words) if weights.lambda_sim else None
                    llm = (
                        llm_loss(params, bottleneck, emb if config.llm_image_conditioning else None, config.llm_soft_inputs)
                        if weights.lambda_llm
                        else None
                    )
                    total = total_loss(cls, sim, llm, weights)
                    tape.backward(total)
            except NumericalError as e:
                raise NumericalError(f"Training diverged at epoch {epoch}, batch {b}: {e}", op=e.op)
            optimizer.step()
            optimizer.zero_grad()

            with no_grad():
                if sim is None and params.config.n_prompt >= 2:
                    sim = token_similarity_loss(bottleneck.soft_words)
                if llm is None and params.config.n_prompt >= 2:
                    llm = llm_loss(params, bottleneck, None, config.llm_soft_inputs)
            sums += [cls.item(), _value(sim), _value(llm), total.item()]
            logger.debug("epoch %d batch %d loss %.4f", epoch, b, total.item())
            batches += 1

        val = evaluate(params, val_set, "hard", specials)
        means = sums / batches
        stats = EpochStats(epoch, *[float(m) for m in means], val_hard_accuracy=val.accuracy)
        report.epochs.append(stats)
        logger.info(
            "epoch %d/%d loss %.4f (class %.4f, sim %.4f, llm %.4f) val hard acc %.4f",
            epoch, config.epochs, stats.total_loss, stats.class_loss, stats.sim_loss, stats.llm_loss, val.accuracy,
        )
        path = _epoch_checkpoint(checkpoint_dir, params, epoch, {**meta, "val_hard_accuracy": val.accuracy}, config.checkpoint_dtype)
        if path is not None and val.accuracy > best_accuracy:
            best_accuracy = val.accuracy
            _link_best(checkpoint_dir, path)

    for path_name in ("soft", "hard", "no_rep"):
        report.add(evaluate(params, val_set, path_name, specials))
    return params, report


def caption_dataset(params: ModelParams, dataset: Sequence[ImageSample], special_ids: Sequence[int], batch_size: int = 64) -> np.ndarray:
    """Greedy captions of every image: N x CAPTION_LENGTH token ids."""
    chunks = []
    for start in range(0, len(dataset), batch_size):
        images = stack_pixels(dataset[start : start + batch_size])
        with no_grad():
            chunks.append(greedy_caption(params, encode_image(params, images), CAPTION_LENGTH, special_ids))
    return np.concatenate(chunks, axis=0)


def train_caption_baseline(
    params: ModelParams,
    config: TrainConfig,
    train_set: Sequence[ImageSample],
    val_set: Sequence[ImageSample],
    vocab: Vocabulary,
    checkpoint_dir=None,
    vocab_hash: Optional[str] = None,
    metadata: Optional[Dict[str, Any]] = None,
) -> Tuple[ModelParams, MetricsReport]:
    """Head-only training on mean-pooled embeddings of the captioner's greedy captions."""
    _check_vocabulary(params, vocab, vocab_hash)
    if not train_set or not val_set:
        raise ArgumentError("Training needs non-empty train and validation sets")
    specials = vocab.special_ids
    meta = {**(metadata or {}), "vocab_hash": vocab.hash(), "variant": "caption_baseline"}
    checkpoint_dir = Path(checkpoint_dir) if checkpoint_dir is not None else None
    params.set_trainable([HEAD_WEIGHT, HEAD_BIAS])
    optimizer = build_optimizer(config.optimizer, [ParamGroup([params[HEAD_WEIGHT], params[HEAD_BIAS]], config.lr_head, "head")])
    captions = caption_dataset(params, train_set, specials)
    labels = labels_of(train_set)
    rng = np.random.default_rng(config.seed)
    report = MetricsReport(method="caption_baseline", metadata=dict(meta))
    best_accuracy = -1.0

    try:
        for epoch in range(1, config.epochs + 1):
            total, batches = 0.0, 0
            for idx in _batches(len(train_set), config.batch_size, rng):
                with Tape() as tape:
                    loss = classification_loss(classify_tokens(params, captions[idx]), labels[idx])
                    tape.backward(loss)
                optimizer.step()
                optimizer.zero_grad()
                total += loss.item()
                batches += 1
            val = evaluate(params, val_set, "caption", specials)
            stats = EpochStats(epoch, total / batches, 0.0, 0.0, total / batches, val_hard_accuracy=val.accuracy)
            report.epochs.append(stats)
            logger.info("caption baseline epoch %d/%d loss %.4f val acc %.4f", epoch, config.epochs, stats.total_loss, val.accuracy)
            path = _epoch_checkpoint(checkpoint_dir, params, epoch, {**meta, "val_hard_accuracy": val.accuracy}, config.checkpoint_dtype)
            if path is not None and val.accuracy > best_accuracy:
                best_accuracy = val.accuracy
                _link_best(checkpoint_dir, path)
    finally:
        params.freeze_backbone()

    report.add(evaluate(params, val_set, "caption", specials))
    return params, report


def frozen_snapshot(params: ModelParams) -> Dict[str, bytes]:
    """Bytes of every backbone array, for before/after comparisons."""
    return {name: params[name].data.tobytes() for name in params.backbone_names}
