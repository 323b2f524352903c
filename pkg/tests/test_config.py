import os
from unittest import mock

import pytest

from langneck.config import (
    config_hash,
    del_config,
    get_config,
    get_config_path_str,
    list_configs,
    lookup,
    set_configs,
    with_variant,
)
from langneck.errors import ArgumentError, KnownError


def test_default_config():
    with mock.patch("langneck.config.Path.exists") as mock_exists:
        # Mock empty config
        mock_exists.return_value = False

        config = get_config()

        assert config.model.d_model == 64
        assert config.model.n_prompt == 8
        assert config.train.lr_prompt == 0.1
        assert config.train.lr_head == 5e-3
        assert config.train.weights.lambda_sim == 0.1
        assert config.data.train_count == 2048
        assert config.eval.path == "hard"
        assert config.variant == "plain"


def test_cli_overrides():
    with mock.patch("langneck.config.Path.exists") as mock_exists:
        mock_exists.return_value = False

        config = get_config({"model.n_prompt": "4", "loss.lambda_llm": 0.5, "train.variant": "llm_loss"})

        assert config.model.n_prompt == 4
        assert config.train.weights.lambda_llm == 0.5
        assert config.variant == "llm_loss"


def test_env_vars():
    with mock.patch.dict(os.environ, {"LANGNECK_TRAIN_EPOCHS": "7", "LANGNECK_MODEL_PROMPT_BOS": "yes"}):
        with mock.patch("langneck.config.Path.exists") as mock_exists:
            mock_exists.return_value = False

            config = get_config()
            assert config.train.epochs == 7
            assert config.model.prompt_bos is True

            # CLI beats the environment
            assert get_config({"train.epochs": 2}).train.epochs == 2


def test_file_then_env_then_cli(tmp_path):
    path = tmp_path / "config.ini"
    path.write_text("[train]\nepochs = 3\nbatch_size = 8\n[loss]\nlambda_sim = 0.25\n")

    with mock.patch.dict(os.environ, {"LANGNECK_TRAIN_BATCH_SIZE": "4"}):
        config = get_config({"loss.lambda_sim": "0.5"}, path=path)

    assert config.train.epochs == 3
    assert config.train.batch_size == 4
    assert config.train.weights.lambda_sim == 0.5


def test_bad_values_are_argument_errors():
    with mock.patch("langneck.config.Path.exists") as mock_exists:
        mock_exists.return_value = False

        with pytest.raises(ArgumentError):
            get_config({"model.d_model": "wide"})
        with pytest.raises(ArgumentError):
            get_config({"model.nope": "1"})
        with pytest.raises(ArgumentError):
            get_config({"nosection.key": "1"})
        with pytest.raises(ArgumentError):
            get_config({"train.variant": "ensemble"})
        with pytest.raises(ArgumentError):
            get_config({"loss.lambda_sim": "-1"})


def test_missing_explicit_config_file(tmp_path):
    with pytest.raises(ArgumentError):
        get_config(path=tmp_path / "absent.ini")


def test_config_hash_is_stable():
    with mock.patch("langneck.config.Path.exists") as mock_exists:
        mock_exists.return_value = False

        first = config_hash(get_config())
        assert first == config_hash(get_config())
        assert len(first) == 16
        assert int(first, 16) >= 0
        assert config_hash(get_config({"train.seed": 1})) != first
        assert config_hash(with_variant(get_config(), "token_sim")) != first


def test_lookup():
    with mock.patch("langneck.config.Path.exists") as mock_exists:
        mock_exists.return_value = False

        config = get_config()
        assert lookup(config, "loss.lambda_llm") == 0.1
        assert lookup(config, "train.variant") == "plain"
        assert lookup(config, "eval")["batch_size"] == 64
        with pytest.raises(KnownError):
            lookup(config, "nothing")


def test_set_list_and_delete(tmp_path):
    path = tmp_path / "nested" / "config.ini"
    set_configs([("train.epochs", "9"), ("model.prompt_bos", "true")], path=path)

    assert get_config(path=path).train.epochs == 9
    listing = list_configs(path=path)
    assert "[train]" in listing
    assert "epochs = 9" in listing

    del_config("train.epochs", path=path)
    assert get_config(path=path).train.epochs == 5
    assert "[train]" not in list_configs(path=path)

    with pytest.raises(KnownError):
        del_config("train.epochs", path=path)
    del_config("model", path=path)
    assert list_configs(path=path) == ""


def test_set_rejects_bad_values(tmp_path):
    path = tmp_path / "config.ini"
    with pytest.raises(ArgumentError):
        set_configs([("train.epochs", "many")], path=path)
    assert not path.exists()


def test_config_path_from_env(tmp_path):
    with mock.patch.dict(os.environ, {"LANGNECK_CONFIG_PATH": str(tmp_path / "c.ini")}):
        assert get_config_path_str() == str((tmp_path / "c.ini").absolute())
