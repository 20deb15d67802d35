import numpy as np
import pytest

from unidd import config
from unidd.errors import InvalidConfig
from unidd.harness import generate_gaussian_mixture, save_dataset


@pytest.fixture(autouse=True)
def no_env_seed(monkeypatch):
    monkeypatch.delenv(config.SEED_ENV, raising=False)


def test_empty_file_gives_defaults(tmp_path):
    (tmp_path / "c.toml").write_text("")
    cfg = config.load(tmp_path / "c.toml")
    assert cfg == config.resolve({})
    assert cfg["seed"] == 0 and cfg["distill"]["lr"] == 0.01
    assert config.cfm_config(cfg).iterations == 200


def test_override_merges(tmp_path):
    (tmp_path / "c.toml").write_text("seed = 4\n[distill]\nipc = 3\n[dataset]\nclasses = 5\n")
    cfg = config.load(tmp_path / "c.toml")
    assert cfg["seed"] == 4 and cfg["distill"]["ipc"] == 3 and cfg["dataset"]["classes"] == 5
    assert cfg["dataset"]["dim"] == 32


@pytest.mark.parametrize("raw", [
    {"sede": 1},
    {"distill": {"learning_rate": 0.1}},
    {"net": {"depth": 3}},
    {"compare": {"entries": [{"name": "x", "filter": "band-pass"}]}},
    {"compare": {"entries": [{"name": "x", "filter": "constant", "alpha": 1}]}},
    {"distill": {"eta": -1.0}},
    {"eval": {"method": "svm"}},
    {"net": 3},
])
def test_rejects_bad_keys_and_values(raw):
    with pytest.raises(InvalidConfig):
        config.resolve(raw)


def test_malformed_toml(tmp_path):
    (tmp_path / "c.toml").write_text("seed = = 1\n")
    with pytest.raises(InvalidConfig):
        config.load(tmp_path / "c.toml")


def test_seed_precedence(monkeypatch):
    raw = {"seed": 3}
    assert config.resolve(raw)["seed"] == 3
    monkeypatch.setenv(config.SEED_ENV, "7")
    assert config.resolve(raw)["seed"] == 7
    assert config.resolve(raw, seed=11)["seed"] == 11
    monkeypatch.setenv(config.SEED_ENV, "seven")
    with pytest.raises(InvalidConfig):
        config.resolve(raw)


def test_hashes():
    a = config.resolve({})
    b = config.resolve({"distill": {"ipc": 2}})
    assert config.squeeze_hash(a) == config.squeeze_hash(b)
    assert config.run_hash(a) != config.run_hash(b)
    c = config.resolve({"squeeze": {"ridge_beta": 2.0}})
    assert config.squeeze_hash(a) != config.squeeze_hash(c)
    assert config.run_hash(a) == config.run_hash(config.resolve({}))


def test_compare_entries():
    cfg = config.resolve({})
    entries = config.compare_entries(cfg)
    assert [n for n, _ in entries] == ["random-real", "cfm", "beta=1e-1", "beta=1e-2", "beta=1e-3",
                                       "beta=1e-4", "low-pass"]
    assert entries[0][1] is None
    assert entries[1][1].schedule == "cosine" and entries[1][1].beta == 0.1
    assert entries[3][1].schedule == "constant" and entries[3][1].beta == 1e-2
    assert entries[-1][1].filter == "low-pass"
    off = config.resolve({"compare": {"baseline": False}})
    assert config.compare_entries(off)[0][0] == "cfm"


def test_file_dataset(tmp_path):
    s = generate_gaussian_mixture(2, 4, 10, 1.0, 0)
    save_dataset(tmp_path / "tr.uds", s.train)
    save_dataset(tmp_path / "te.uds", s.test)
    cfg = config.resolve({"dataset": {"kind": "file", "train_path": str(tmp_path / "tr.uds"),
                                      "test_path": str(tmp_path / "te.uds")}})
    back = config.datasets(cfg)
    np.testing.assert_array_equal(back.train.H, s.train.H)
    with pytest.raises(InvalidConfig):
        config.datasets(config.resolve({"dataset": {"kind": "file"}}))
    with pytest.raises(InvalidConfig):
        config.datasets(config.resolve({"dataset": {"kind": "images"}}))
