"""Orchestration shared by the CLI: backbone preparation, run metadata and the variant x corruption grid."""

import logging
from dataclasses import asdict
from pathlib import Path
from typing import Any, Dict, Optional, Sequence

from langneck.config import RunConfig, config_hash, config_to_dict
from langneck.data import ImageSample, Vocabulary
from langneck.errors import ConfigError
from langneck.evaluation import evaluate_grid
from langneck.model import ModelParams, init_params, load_model
from langneck.report import MetricsReport
from langneck.training import VARIANTS, train, variant_path, warmup_pretrain
from langneck.version import describe_version

logger = logging.getLogger(__name__)


def run_metadata(run_config: RunConfig, **extra: Any) -> Dict[str, Any]:
    """Seed, config hash and version string stamped on every artifact."""
    return {
        "seed": run_config.train.seed,
        "config_hash": config_hash(run_config),
        "config": config_to_dict(run_config),
        "version": describe_version(),
        **extra,
    }


def prepare_backbone(
    run_config: RunConfig,
    train_set: Sequence[ImageSample],
    vocab: Vocabulary,
    backbone_path=None,
) -> ModelParams:
    """Load a warmed-up checkpoint, or initialize from the seed and run warm-up."""
    if backbone_path is not None:
        params, _ = load_model(backbone_path, expected_vocab_hash=vocab.hash())
        if params.config.vocab_size != len(vocab):
            raise ConfigError(f"Backbone {backbone_path} expects {params.config.vocab_size} tokens, vocabulary has {len(vocab)}")
        params.freeze_backbone()
        return params
    cfg = run_config.train
    params = init_params(run_config.model, cfg.seed)
    params, _ = warmup_pretrain(params, train_set, cfg.warmup_epochs, vocab, cfg.warmup_lr, cfg.batch_size, cfg.seed)
    return params


def run_grid(
    backbone: ModelParams,
    run_config: RunConfig,
    train_set: Sequence[ImageSample],
    val_set: Sequence[ImageSample],
    vocab: Vocabulary,
    variants: Sequence[str] = VARIANTS,
    checkpoint_root=None,
    metadata: Optional[Dict[str, Any]] = None,
) -> MetricsReport:
    """Train every variant from the same frozen backbone; evaluate each on clean plus every corruption."""
    report = MetricsReport(method="grid", metadata={**(metadata or {}), "variants": list(variants), "epochs": {}})
    for variant in variants:
        logger.info("training variant %s", variant)
        checkpoint_dir = Path(checkpoint_root) / variant if checkpoint_root is not None else None
        params, trained = train(
            backbone.copy(),
            run_config.train,
            train_set,
            val_set,
            vocab,
            variant=variant,
            checkpoint_dir=checkpoint_dir,
            metadata=metadata,
        )
        report.metadata["epochs"][variant] = [asdict(e) for e in trained.epochs]
        for result in evaluate_grid(
            params,
            val_set,
            variant_path(variant),
            vocab.special_ids,
            seed=run_config.eval.corruption_seed,
            batch_size=run_config.eval.batch_size,
        ):
            report.add(result, method=variant)
    return report
