import logging

import pytest
from unittest.mock import patch

from seal.utils import ConfigFileError, _setup_logging, load_json_config, stable_hash


def test_stable_hash():
    assert stable_hash("core_gen", "prompt") == stable_hash("core_gen", "prompt")
    assert stable_hash("core_gen", "prompt") != stable_hash("coref", "prompt")
    assert len(stable_hash("x")) == 16
    assert len(stable_hash("x", length=8)) == 8


def test_load_json_config(tmp_path):
    path = tmp_path / "run.json"
    path.write_text('{"max_retries": 2, "memory": {"min_link_score": 0.5}}')
    assert load_json_config(str(path)) == {"max_retries": 2,
                                           "memory": {"min_link_score": 0.5}}


def test_load_json_config_errors(tmp_path):
    missing = tmp_path / "missing.json"
    with pytest.raises(ConfigFileError, match="Cannot read config file"):
        load_json_config(str(missing))
    broken = tmp_path / "broken.json"
    broken.write_text("{max_retries: 2")
    with pytest.raises(ConfigFileError, match="is not valid JSON"):
        load_json_config(str(broken))
    listed = tmp_path / "list.json"
    listed.write_text("[1, 2]")
    with pytest.raises(ConfigFileError, match="must contain a JSON object"):
        load_json_config(str(listed))


@patch("seal.utils.logging.basicConfig")
def test_setup_logging_level(mock_basic_config, monkeypatch):
    monkeypatch.setenv("LOG_LEVEL", "debug")
    _setup_logging()
    assert mock_basic_config.call_args.kwargs["level"] == logging.DEBUG
    monkeypatch.setenv("LOG_LEVEL", "chatty")
    _setup_logging()
    assert mock_basic_config.call_args.kwargs["level"] == logging.WARNING
