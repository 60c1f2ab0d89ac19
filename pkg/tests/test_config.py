import config


def test_env_file_keeps_only_toolkit_keys(tmp_path):
    path = tmp_path / ".env"
    path.write_text("# local\nHTK_THREADS=4\nHTK_LOG_LEVEL='DEBUG'\nOTHER=1\nHTK_BROKEN\n")
    assert config._read_env_settings(path) == {"HTK_THREADS": "4", "HTK_LOG_LEVEL": "DEBUG"}


def test_unreadable_env_file_is_ignored(tmp_path):
    assert config._read_env_settings(tmp_path / "missing.env") == {}


def test_worker_threads(monkeypatch, caplog):
    monkeypatch.setenv("HTK_THREADS", "3")
    assert config.worker_threads() == 3
    monkeypatch.setenv("HTK_THREADS", "0")
    assert config.worker_threads() == 1
    monkeypatch.setenv("HTK_THREADS", "many")
    assert config.worker_threads() == 1
    assert "not an integer" in caplog.text


def test_slow_tests_flag(monkeypatch):
    monkeypatch.setenv("HTK_RUN_SLOW", "yes")
    assert config.run_slow_tests()
    monkeypatch.delenv("HTK_RUN_SLOW")
    assert not config.run_slow_tests()
