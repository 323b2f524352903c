import logging
import sys
from pathlib import Path
from typing import Any, Dict, Optional

import click
import numpy as np
from rich.console import Console
from rich.logging import RichHandler
from rich.table import Table
from rich.text import Text

from langneck.config import RunConfig, del_config, get_config, get_config_path_str, list_configs, lookup, set_configs
from langneck.data import build_vocabulary, class_name, generate_dataset, stack_pixels
from langneck.errors import ArgumentError, ConfigError, KnownError
from langneck.evaluation import PATHS, emit_tokens, evaluate_grid
from langneck.experiments import prepare_backbone, run_grid, run_metadata
from langneck.gradcheck import DEFAULT_SABOTAGE_OP, DEFAULT_STEP, run_grad_check
from langneck.model import init_params, load_model, save_model
from langneck.optim import OPTIMIZERS
from langneck.report import MetricsReport, emit_report
from langneck.storage import load_dataset, load_vocabulary, save_dataset, save_vocabulary
from langneck.training import VARIANTS, train, warmup_pretrain

console = Console(soft_wrap=True)

TRAIN_FILE = "train.lbds"
VAL_FILE = "val.lbds"
VOCAB_FILE = "vocab.lbvc"

BANNER_LINES = [
    r"    __                                   __  ",
    r"   / /___ _____  ____ _____  ___  _____/ /__",
    r"  / / __ `/ __ \/ __ `/ __ \/ _ \/ ___/ //_/",
    r" / / /_/ / / / / /_/ / / / /  __/ /__/ ,<   ",
    r"/_/\__,_/_/ /_/\__, /_/ /_/\___/\___/_/|_|  ",
    r"              /____/                         ",
]

# Gradient colors for each line of the banner (purple → cyan → green)
BANNER_COLORS = [
    "#b06cff",
    "#9b6cff",
    "#6c9bff",
    "#6cccff",
    "#6cffc8",
    "#6cff8c",
]


def print_banner():
    """Print a colorful ASCII art banner for langneck."""
    console.print()
    for line, color in zip(BANNER_LINES, BANNER_COLORS):
        console.print(Text(line, style=f"bold {color}"))
    console.print()


def _fail(e: KnownError):
    console.print(Text.assemble(("Error: ", "red"), str(e)))
    sys.exit(e.exit_code)


def _setup_logging(verbose: bool):
    logger = logging.getLogger("langneck")
    logger.handlers = [RichHandler(console=console, show_path=False)]
    logger.setLevel(logging.DEBUG if verbose else logging.INFO)
    logger.propagate = False


def _resolve(config_path: Optional[str], verbose: bool, overrides: Dict[str, Any]) -> RunConfig:
    _setup_logging(verbose)
    return get_config({k: v for k, v in overrides.items() if v is not None}, path=config_path)


def _load_data(data_dir: str, splits=("train", "val")):
    """Vocabulary plus the requested splits, refusing datasets built for another vocabulary."""
    root = Path(data_dir)
    files = {"train": root / TRAIN_FILE, "val": root / VAL_FILE}
    for path in [root / VOCAB_FILE] + [files[s] for s in splits]:
        if not path.exists():
            raise ArgumentError(f"Dataset file not found: {path}")
    vocab = load_vocabulary(root / VOCAB_FILE)
    datasets = {s: load_dataset(files[s], expected_checksum=vocab.checksum16()) for s in splits}
    return vocab, datasets


def _check_image_size(run_config: RunConfig, dataset):
    size = dataset[0].pixels.shape[0]
    if size != run_config.model.image_size:
        raise ConfigError(f"Dataset images are {size}px but the model expects {run_config.model.image_size}px")


def _results_table(title: str, report: MetricsReport) -> Table:
    table = Table(title=title)
    for column in ("method", "corruption", "severity", "accuracy", "cosine", "llm_nll", "distinct", "violations"):
        table.add_column(column, justify="left" if column in ("method", "corruption") else "right")
    for r in report.evaluations:
        table.add_row(
            r.method,
            r.corruption,
            str(r.severity),
            f"{r.accuracy:.4f}",
            f"{r.cosine:.4f}",
            f"{r.llm_nll:.4f}",
            f"{r.distinct_tokens:.2f}",
            str(r.duplicate_violations),
        )
    return table


def run_options(fn):
    fn = click.option("--verbose", "-v", is_flag=True, help="Show per-batch debug logging")(fn)
    fn = click.option("--seed", type=int, help="Random seed for this run")(fn)
    fn = click.option("--config", "config_path", type=click.Path(dir_okay=False), help="Read settings from this INI file")(fn)
    return fn


@click.group(invoke_without_command=True)
@click.pass_context
def cli(ctx):
    """langneck: image classification through a bottleneck of words."""
    if ctx.invoked_subcommand is not None:
        return

    print_banner()
    console.print(ctx.get_help())


@cli.command("gen-data")
@click.option("--train", "train_count", type=int, help="Number of training images")
@click.option("--val", "val_count", type=int, help="Number of validation images")
@click.option("--image-size", type=int, help="Image side length in pixels")
@click.option("--out", "-o", help="Output directory")
@run_options
def gen_data(train_count, val_count, image_size, out, config_path, seed, verbose):
    """Render the synthetic shapes dataset and its vocabulary."""
    try:
        cfg = _resolve(
            config_path,
            verbose,
            {"data.train_count": train_count, "data.val_count": val_count, "data.image_size": image_size, "data.seed": seed, "data.data_dir": out},
        )
        out_dir = Path(cfg.data.data_dir)
        vocab = build_vocabulary()
        with console.status("[bold green]Rendering images..."):
            train_set = generate_dataset(cfg.data.seed, cfg.data.train_count, "train", cfg.data.image_size)
            val_set = generate_dataset(cfg.data.seed, cfg.data.val_count, "val", cfg.data.image_size)
        save_dataset(out_dir / TRAIN_FILE, train_set, vocab)
        save_dataset(out_dir / VAL_FILE, val_set, vocab)
        save_vocabulary(out_dir / VOCAB_FILE, vocab)
        console.print(f"[green]✓[/green] {len(train_set)} train and {len(val_set)} val images, {len(vocab)} tokens in {out_dir}")
    except KnownError as e:
        _fail(e)


@cli.command()
@click.option("--data", "data_dir", help="Directory written by gen-data")
@click.option("--epochs", type=int, help="Warm-up epochs")
@click.option("--lr", type=float, help="Warm-up learning rate (Adam)")
@click.option("--out", "-o", default="runs/backbone.lbck", show_default=True, help="Checkpoint to write")
@run_options
def warmup(data_dir, epochs, lr, out, config_path, seed, verbose):
    """Pretrain the captioning backbone, then freeze it."""
    try:
        cfg = _resolve(
            config_path,
            verbose,
            {"data.data_dir": data_dir, "train.warmup_epochs": epochs, "train.warmup_lr": lr, "train.seed": seed},
        )
        vocab, data = _load_data(cfg.data.data_dir, splits=("train",))
        _check_image_size(cfg, data["train"])
        params = init_params(cfg.model, cfg.train.seed)
        with console.status("[bold green]Warming up the backbone..."):
            params, losses = warmup_pretrain(
                params, data["train"], cfg.train.warmup_epochs, vocab, cfg.train.warmup_lr, cfg.train.batch_size, cfg.train.seed
            )
        save_model(out, params, run_metadata(cfg, vocab_hash=vocab.hash(), stage="warmup", warmup_losses=losses))
        for epoch, loss in enumerate(losses, start=1):
            console.print(f"  epoch {epoch}: caption loss {loss:.4f}")
        console.print(f"[green]✓[/green] Frozen backbone written to {out}")
    except KnownError as e:
        _fail(e)


@cli.command("train")
@click.option("--data", "data_dir", help="Directory written by gen-data")
@click.option("--backbone", type=click.Path(dir_okay=False), help="Warm-up checkpoint; warm-up runs first when omitted")
@click.option("--variant", type=click.Choice(VARIANTS), help="Training variant")
@click.option("--epochs", type=int, help="Training epochs")
@click.option("--lr-prompt", type=float, help="Soft-prompt learning rate")
@click.option("--lr-head", type=float, help="Head learning rate")
@click.option("--lambda-sim", type=float, help="Token-similarity loss weight")
@click.option("--lambda-llm", type=float, help="LLM loss weight")
@click.option("--optimizer", type=click.Choice(OPTIMIZERS), help="Optimizer for prompt and head")
@click.option("--batch-size", type=int, help="Training batch size")
@click.option("--out", "-o", help="Run directory (checkpoints and report)")
@run_options
def train_cmd(data_dir, backbone, variant, epochs, lr_prompt, lr_head, lambda_sim, lambda_llm, optimizer, batch_size, out, config_path, seed, verbose):
    """Train the soft prompt and linear head on the frozen backbone."""
    try:
        cfg = _resolve(
            config_path,
            verbose,
            {
                "data.data_dir": data_dir,
                "train.variant": variant,
                "train.epochs": epochs,
                "train.lr_prompt": lr_prompt,
                "train.lr_head": lr_head,
                "train.optimizer": optimizer,
                "train.batch_size": batch_size,
                "train.seed": seed,
                "loss.lambda_sim": lambda_sim,
                "loss.lambda_llm": lambda_llm,
            },
        )
        vocab, data = _load_data(cfg.data.data_dir)
        _check_image_size(cfg, data["train"])
        run_dir = Path(out or Path("runs") / cfg.variant)
        meta = run_metadata(cfg)
        with console.status("[bold green]Preparing backbone..."):
            params = prepare_backbone(cfg, data["train"], vocab, backbone)
        with console.status(f"[bold green]Training {cfg.variant}..."):
            params, report = train(
                params, cfg.train, data["train"], data["val"], vocab, cfg.variant, checkpoint_dir=run_dir, metadata=meta
            )
        csv_path, _ = emit_report(report, run_dir / "report")
        for stats in report.epochs:
            console.print(f"  epoch {stats.epoch}: loss {stats.total_loss:.4f}, val accuracy {stats.val_hard_accuracy:.4f}")
        console.print(_results_table(f"{cfg.variant} (validation)", report))
        console.print(f"[green]✓[/green] Checkpoints and report in {run_dir} (config {meta['config_hash']}, {csv_path.name})")
    except KnownError as e:
        _fail(e)


@cli.command("eval")
@click.option("--checkpoint", required=True, type=click.Path(dir_okay=False), help="Trained checkpoint")
@click.option("--data", "data_dir", help="Directory written by gen-data")
@click.option("--path", "path_name", type=click.Choice(PATHS), help="Decoding path to evaluate")
@click.option("--out", "-o", help="Report path without extension")
@run_options
def eval_cmd(checkpoint, data_dir, path_name, out, config_path, seed, verbose):
    """Evaluate on clean data and every corruption kind at severities 1-5."""
    try:
        cfg = _resolve(config_path, verbose, {"data.data_dir": data_dir, "eval.path": path_name, "eval.corruption_seed": seed})
        vocab, data = _load_data(cfg.data.data_dir, splits=("val",))
        if not Path(checkpoint).exists():
            raise ArgumentError(f"Checkpoint not found: {checkpoint}")
        params, meta = load_model(checkpoint, expected_vocab_hash=vocab.hash())
        path = cfg.eval.path
        report = MetricsReport(
            method=meta.get("variant", path),
            metadata=run_metadata(cfg, checkpoint=str(checkpoint), checkpoint_config_hash=meta.get("config_hash"), path=path),
        )
        with console.status(f"[bold green]Evaluating the {path} path..."):
            for result in evaluate_grid(params, data["val"], path, vocab.special_ids, cfg.eval.corruption_seed, cfg.eval.batch_size):
                report.add(result)
        csv_path, json_path = emit_report(report, out or Path(checkpoint).parent / f"eval-{path}")
        console.print(_results_table(f"{report.method}: {path} path", report))
        console.print(f"[green]✓[/green] Wrote {csv_path} and {json_path}")
    except KnownError as e:
        _fail(e)


@cli.command()
@click.option("--checkpoint", required=True, type=click.Path(dir_okay=False), help="Trained checkpoint")
@click.option("--data", "data_dir", help="Directory written by gen-data")
@click.option("--path", "path_name", type=click.Choice(PATHS), default="hard", show_default=True, help="Decoding path")
@click.option("--count", "-n", type=int, default=8, show_default=True, help="Number of validation images")
@run_options
def sample(checkpoint, data_dir, path_name, count, config_path, seed, verbose):
    """Print the words each image is described by, with predicted and true class."""
    try:
        cfg = _resolve(config_path, verbose, {"data.data_dir": data_dir})
        if count < 1:
            raise ArgumentError(f"--count must be positive, got {count}")
        vocab, data = _load_data(cfg.data.data_dir, splits=("val",))
        if not Path(checkpoint).exists():
            raise ArgumentError(f"Checkpoint not found: {checkpoint}")
        params, _ = load_model(checkpoint, expected_vocab_hash=vocab.hash())
        val_set = data["val"]
        rng = np.random.default_rng(seed or 0)
        indices = np.sort(rng.choice(len(val_set), size=min(count, len(val_set)), replace=False))
        chosen = [val_set[i] for i in indices]
        predictions, tokens = emit_tokens(params, stack_pixels(chosen), path_name, vocab.special_ids)
        for index, s, predicted, row in zip(indices, chosen, predictions, tokens):
            mark = "[green]✓[/green]" if predicted == s.label else "[red]✗[/red]"
            console.print(
                f"{mark} #{index} true={class_name(s.label)} predicted={class_name(int(predicted))}: {' '.join(vocab.decode(row.tolist()))}"
            )
    except KnownError as e:
        _fail(e)


@cli.command("grad-check")
@click.option("--h", "step", type=float, default=DEFAULT_STEP, show_default=True, help="Finite-difference step")
@click.option("--sabotage", is_flag=True, help="Corrupt one backward rule (the check must then fail)")
@click.option("--sabotage-op", default=DEFAULT_SABOTAGE_OP, show_default=True, help="Primitive whose backward rule --sabotage corrupts")
@click.option("--seed", type=int, default=0, show_default=True, help="Seed of the tiny model")
@click.option("--verbose", "-v", is_flag=True, help="Show debug logging")
def grad_check_cmd(step, sabotage, sabotage_op, seed, verbose):
    """Check end-to-end gradients against central finite differences on a tiny model."""
    _setup_logging(verbose)
    try:
        console.print(f"h = {step:g}")
        with console.status("[bold green]Comparing gradients..."):
            report = run_grad_check(step, seed, sabotage_op if sabotage else None)
        for name, error in report.errors.items():
            console.print(f"  {name}: max relative error {error:.3e}")
        if report.passed:
            console.print(f"[green]✓[/green] PASS max relative error {report.max_error:.3e} < {report.tolerance:g}")
        else:
            console.print(f"[red]✗[/red] FAIL max relative error {report.max_error:.3e} >= {report.tolerance:g}")
            sys.exit(1)
    except KnownError as e:
        _fail(e)


@cli.command()
@click.option("--data", "data_dir", help="Directory written by gen-data")
@click.option("--backbone", type=click.Path(dir_okay=False), help="Warm-up checkpoint; warm-up runs first when omitted")
@click.option("--variant", "variants", type=click.Choice(VARIANTS), multiple=True, help="Variants to run (default: all)")
@click.option("--epochs", type=int, help="Training epochs per variant")
@click.option("--out", "-o", default="runs/grid", show_default=True, help="Grid directory")
@run_options
def grid(data_dir, backbone, variants, epochs, out, config_path, seed, verbose):
    """Train every variant and evaluate each on clean and corrupted data."""
    try:
        cfg = _resolve(config_path, verbose, {"data.data_dir": data_dir, "train.epochs": epochs, "train.seed": seed})
        vocab, data = _load_data(cfg.data.data_dir)
        _check_image_size(cfg, data["train"])
        meta = run_metadata(cfg)
        with console.status("[bold green]Preparing backbone..."):
            params = prepare_backbone(cfg, data["train"], vocab, backbone)
        with console.status("[bold green]Running the variant grid..."):
            report = run_grid(params, cfg, data["train"], data["val"], vocab, list(variants) or VARIANTS, out, meta)
        csv_path, json_path = emit_report(report, Path(out) / "grid")
        console.print(_results_table("variant grid", report))
        console.print(f"[green]✓[/green] Wrote {csv_path} and {json_path}")
    except KnownError as e:
        _fail(e)


@cli.group()
def config():
    """Manage configuration settings."""
    pass


@config.command("set")
@click.argument("key_values", nargs=-1, required=True)
def config_set(key_values):
    """Set configuration values (e.g. train.epochs=5)."""
    try:
        parsed = []
        for kv in key_values:
            if "=" not in kv:
                raise ArgumentError(f"Invalid format for '{kv}'. Use: section.key=VALUE")
            k, v = kv.split("=", 1)
            parsed.append((k.strip(), v.strip()))
        set_configs(parsed)
        console.print("[green]Configuration saved successfully.[/green]")
    except KnownError as e:
        _fail(e)


@config.command("get")
@click.argument("keys", nargs=-1)
def config_get(keys):
    """Retrieve resolved configuration values by key."""
    try:
        conf = get_config()
        for k in keys or ("model", "data", "train", "loss", "eval"):
            console.print(f"{k} = {lookup(conf, k)}", markup=False)
    except KnownError as e:
        _fail(e)


@config.command("list")
def config_list():
    """Display all configuration keys and their values."""
    try:
        console.print(list_configs(), markup=False)
    except KnownError as e:
        _fail(e)


@config.command("del")
@click.argument("key")
def config_del(key):
    """Delete a configuration setting or section."""
    try:
        del_config(key)
        console.print(f"[green]Successfully deleted config: {key}[/green]")
    except KnownError as e:
        _fail(e)


@config.command("path")
def config_path():
    """Display the path of the loaded configuration file."""
    console.print(get_config_path_str(), markup=False)


def main():
    cli()


if __name__ == "__main__":
    main()
