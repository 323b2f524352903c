import configparser
import hashlib
import json
import os
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple

from langneck.errors import ArgumentError, KnownError
from langneck.evaluation import EVAL_BATCH_SIZE, PATHS
from langneck.model import ModelConfig
from langneck.objectives import LossWeights
from langneck.training import VARIANTS, TrainConfig

SECTIONS = ["model", "data", "train", "loss", "eval"]
ENV_PREFIX = "LANGNECK_"
CONFIG_HASH_LENGTH = 16


@dataclass
class DataConfig:
    seed: int = 0
    train_count: int = 2048
    val_count: int = 512
    image_size: int = 32
    data_dir: str = "data"


@dataclass
class EvalConfig:
    path: str = "hard"
    batch_size: int = EVAL_BATCH_SIZE
    corruption_seed: int = 0

    def __post_init__(self):
        if self.path not in PATHS:
            raise ArgumentError(f"Unknown path '{self.path}'. Use: {', '.join(PATHS)}")
        if self.batch_size < 1:
            raise ArgumentError("eval batch_size must be at least 1")


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    data: DataConfig = field(default_factory=DataConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    variant: str = "plain"

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ArgumentError(f"Unknown variant '{self.variant}'. Use: {', '.join(VARIANTS)}")


def _get_config_path() -> Path:
    """Get the path to the langneck configuration file."""
    if "LANGNECK_CONFIG_PATH" in os.environ:
        return Path(os.environ["LANGNECK_CONFIG_PATH"])

    xdg_config_home = os.environ.get("XDG_CONFIG_HOME", str(Path.home() / ".config"))
    return Path(xdg_config_home) / "langneck" / "config.ini"


def read_config_file(path=None, required: bool = True) -> configparser.ConfigParser:
    """Read and return the ConfigParser instance for the config file.

    An explicitly given path must exist unless `required` is False.
    """
    config_path = Path(path) if path else _get_config_path()
    parser = configparser.ConfigParser()

    # Do not convert keys to lowercase
    parser.optionxform = str

    if config_path.exists():
        try:
            parser.read(config_path, encoding="utf-8")
        except configparser.Error as e:
            raise ArgumentError(f"Could not parse config file {config_path}: {e}")
    elif path and required:
        raise ArgumentError(f"Config file not found: {config_path}")

    return parser


def _defaults() -> Dict[str, Dict[str, Any]]:
    """Flat `section -> key -> default` table; [loss] and the variant live beside [train]."""
    train = asdict(TrainConfig())
    weights = train.pop("weights")
    train["variant"] = RunConfig().variant
    return {
        "model": asdict(ModelConfig()),
        "data": asdict(DataConfig()),
        "train": train,
        "loss": weights,
        "eval": asdict(EvalConfig()),
    }


def _coerce(section: str, key: str, value: Any, default: Any) -> Any:
    try:
        if isinstance(default, bool):
            if isinstance(value, bool):
                return value
            normalized = str(value).strip().lower()
            if normalized not in configparser.ConfigParser.BOOLEAN_STATES:
                raise ValueError(f"not a boolean: {value!r}")
            return configparser.ConfigParser.BOOLEAN_STATES[normalized]
        if isinstance(default, int):
            if isinstance(value, float) and not value.is_integer():
                raise ValueError(f"not an integer: {value!r}")
            return int(value)
        if isinstance(default, float):
            return float(value)
        return str(value)
    except (TypeError, ValueError) as e:
        raise ArgumentError(f"Invalid value for {section}.{key}: {e}")


def _split_key(key: str) -> Tuple[str, str]:
    if "." not in key:
        raise ArgumentError(f"Config keys look like section.key, got '{key}'")
    section, prop = key.split(".", 1)
    if section not in SECTIONS:
        raise ArgumentError(f"Unknown config section '{section}'. Use: {', '.join(SECTIONS)}")
    if prop not in _defaults()[section]:
        raise ArgumentError(f"Unknown config key '{key}'")
    return section, prop


def get_config(cli_overrides: Optional[Dict[str, Any]] = None, path=None) -> RunConfig:
    """
    Get the fully resolved configuration, combining defaults, config file,
    environment variables (LANGNECK_<SECTION>_<KEY>), and CLI overrides
    given as `section.key` entries.
    """
    cli_overrides = cli_overrides or {}
    parser = read_config_file(path)
    table = _defaults()
    for key in cli_overrides:
        _split_key(key)

    # Priority: CLI > Env > File > Default
    for section, values in table.items():
        for key, default in values.items():
            raw: Any = default
            if parser.has_option(section, key):
                raw = parser.get(section, key)
            env_value = os.environ.get(f"{ENV_PREFIX}{section}_{key}".upper())
            if env_value is not None:
                raw = env_value
            override = cli_overrides.get(f"{section}.{key}")
            if override is not None:
                raw = override
            values[key] = _coerce(section, key, raw, default)

    train = table["train"]
    variant = train.pop("variant")
    return RunConfig(
        model=ModelConfig(**table["model"]),
        data=DataConfig(**table["data"]),
        train=TrainConfig(**train, weights=LossWeights(**table["loss"])),
        eval=EvalConfig(**table["eval"]),
        variant=variant,
    )


def config_to_dict(run_config: RunConfig) -> Dict[str, Any]:
    return asdict(run_config)


def config_hash(run_config: RunConfig) -> str:
    """First 16 hex chars of sha256 over the sort-keys JSON of the config."""
    payload = json.dumps(config_to_dict(run_config), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()[:CONFIG_HASH_LENGTH]


def with_variant(run_config: RunConfig, variant: str) -> RunConfig:
    return replace(run_config, variant=variant)


def lookup(run_config: RunConfig, key: str) -> Any:
    """Resolved value of `section.key` (or a whole section)."""
    as_dict = config_to_dict(run_config)
    flat = {
        "model": as_dict["model"],
        "data": as_dict["data"],
        "train": {**{k: v for k, v in as_dict["train"].items() if k != "weights"}, "variant": as_dict["variant"]},
        "loss": as_dict["train"]["weights"],
        "eval": as_dict["eval"],
    }
    if "." not in key:
        if key not in flat:
            raise KnownError(f"Config not found: {key}")
        return flat[key]
    section, prop = _split_key(key)
    return flat[section][prop]


def set_configs(key_values: List[tuple[str, str]], path=None):
    """Set configuration key-value pairs and write to config file."""
    parser = read_config_file(path, required=False)
    table = _defaults()

    for key, value in key_values:
        section, prop = _split_key(key)
        _coerce(section, prop, value, table[section][prop])
        if not parser.has_section(section):
            parser.add_section(section)
        parser.set(section, prop, value)

    config_path = Path(path) if path else _get_config_path()
    config_path.parent.mkdir(parents=True, exist_ok=True)

    with open(config_path, "w", encoding="utf-8") as f:
        parser.write(f)


def del_config(key: str, path=None):
    """Delete a configuration setting or section."""
    parser = read_config_file(path)

    if "." in key:
        section, prop = key.split(".", 1)
        if parser.has_section(section):
            if not parser.remove_option(section, prop):
                raise KnownError(f"Config not found: {key}")
            if not parser.items(section):
                parser.remove_section(section)
        else:
            raise KnownError(f"Config section not found: {section}")
    else:
        if parser.has_section(key):
            parser.remove_section(key)
        else:
            raise KnownError(f"Config not found: {key}")

    config_path = Path(path) if path else _get_config_path()
    if config_path.exists():
        with open(config_path, "w", encoding="utf-8") as f:
            parser.write(f)


def list_configs(path=None) -> str:
    """List all configurations in INI format."""
    parser = read_config_file(path, required=False)

    config_str = ""
    for section in parser.sections():
        config_str += f"[{section}]\n"
        for key, value in parser.items(section):
            config_str += f"{key} = {value}\n"
        config_str += "\n"

    return config_str.strip()


def get_config_path_str(path=None) -> str:
    """Return the absolute path of the configuration file."""
    return str((Path(path) if path else _get_config_path()).absolute())

