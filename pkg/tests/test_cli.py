import csv
import json

import numpy as np
import pytest

from unidd import cli
from unidd.config import SEED_ENV
from unidd.harness import load_dataset

SMALL = """\
seed = 1
[dataset]
classes = 3
dim = 8
n_per_class = 20
separation = 4.0
[net]
widths = [2, 4]
spatial_size = 2
[distill]
iterations = 4
ipc = 2
batch_size = 3
[compare]
seeds = [0, 1]
jobs = 1
"""


@pytest.fixture(autouse=True)
def no_env_seed(monkeypatch):
    monkeypatch.delenv(SEED_ENV, raising=False)


@pytest.fixture()
def small(tmp_path):
    path = tmp_path / "small.toml"
    path.write_text(SMALL)
    return path


@pytest.fixture()
def squeezed(tmp_path, small):
    sq = tmp_path / "sq"
    assert cli.main(["squeeze", str(small), "--out", str(sq)]) == 0
    return sq


def test_no_command_is_usage_error():
    assert cli.main([]) == 2
    assert cli.main(["frobnicate"]) == 2


def test_verify_report(tmp_path, capsys):
    report = tmp_path / "v.json"
    assert cli.main(["verify", "--seeds", "1", "--report", str(report)]) == 0
    doc = json.loads(report.read_text())
    assert doc["passed"] and doc["n_checks"] >= 12
    assert all(c["passed"] for c in doc["checks"])
    assert "checks passed" in capsys.readouterr().out


def test_verify_unwritable_report(tmp_path):
    assert cli.main(["verify", "--seeds", "1", "--report", str(tmp_path / "no" / "dir" / "v.json")]) == 2


def test_filters_csv(tmp_path):
    out = tmp_path / "f.csv"
    assert cli.main(["filters", "--beta", "0.1,1", "--grid", "0:2:21", "--out", str(out)]) == 0
    rows = list(csv.reader(out.open()))
    header, body = rows[0], np.array(rows[1:], dtype=float)
    assert header[0] == "lambda" and len(header) == 5 and body.shape == (21, 5)
    np.testing.assert_allclose(body[:, 1], 1.0)
    np.testing.assert_allclose(body[:, 2], body[:, 0])
    assert body[0, 3] == pytest.approx(10.0)
    assert body[0, 4] == pytest.approx(1.0)


def test_filters_stdout_matches_file(tmp_path, capsys):
    out = tmp_path / "f.csv"
    cli.main(["filters", "--alpha", "0.5", "--power", "2", "--grid", "0:1:5", "--out", str(out)])
    capsys.readouterr()
    assert cli.main(["filters", "--alpha", "0.5", "--power", "2", "--grid", "0:1:5"]) == 0
    printed = np.array([r.split(",") for r in capsys.readouterr().out.split()[1:]], dtype=float)
    np.testing.assert_allclose(printed, np.array(list(csv.reader(out.open()))[1:], dtype=float))


def test_filters_unstable_power_exits_one():
    assert cli.main(["filters", "--alpha", "1.5", "--grid", "0:2:5"]) == 1


@pytest.mark.parametrize("grid", ["0:2", "2:0:5", "0:2:1", "a:b:c"])
def test_filters_bad_grid(grid):
    assert cli.main(["filters", "--grid", grid]) == 2


def test_pipeline(tmp_path, small, squeezed):
    syn = tmp_path / "syn.uds"
    assert cli.main(["distill", str(small), "--squeeze", str(squeezed), "--out", str(syn)]) == 0
    assert load_dataset(syn).H.shape == (6, 8)
    side = json.loads((tmp_path / "syn.uds.json").read_text())
    assert side["config"]["seed"] == 1 and side["provenance"]
    loss = (tmp_path / "syn.loss.csv").read_text().splitlines()
    assert len(loss) == 1 + 4 * 2  # iterations x batches
    res = tmp_path / "eval.json"
    assert cli.main(["eval", str(small), "--squeeze", str(squeezed), "--synthetic", str(syn), "--out", str(res)]) == 0
    doc = json.loads(res.read_text())
    assert 0.0 <= doc["accuracy"] <= 1.0 and len(doc["per_class"]) == 3
    assert doc["synthetic_config_hash"] == side["config_hash"]


def test_distill_byte_identical(tmp_path, small, squeezed):
    a, b = tmp_path / "a.uds", tmp_path / "b.uds"
    for out in (a, b):
        assert cli.main(["distill", str(small), "--squeeze", str(squeezed), "--out", str(out)]) == 0
    assert a.read_bytes() == b.read_bytes()


def test_seed_flag_and_env(tmp_path, small, squeezed, monkeypatch):
    def run(name, *extra):
        out = tmp_path / name
        assert cli.main(["distill", str(small), "--squeeze", str(squeezed), "--out", str(out), *extra]) == 0
        return out.read_bytes()

    base = run("base.uds")
    monkeypatch.setenv(SEED_ENV, "9")
    env = run("env.uds")
    flag = run("flag.uds", "--seed", "9")
    assert env == flag and env != base
    assert run("back.uds", "--seed", "1") == base


def test_missing_squeeze_exits_two(tmp_path, small):
    assert cli.main(["distill", str(small), "--squeeze", str(tmp_path / "none"), "--out", str(tmp_path / "o")]) == 2


def test_missing_config_exits_two(tmp_path):
    assert cli.main(["squeeze", str(tmp_path / "none.toml"), "--out", str(tmp_path / "sq")]) == 2


def test_unknown_key_exits_two(tmp_path):
    bad = tmp_path / "bad.toml"
    bad.write_text("[distill]\nlearning_rate = 1\n")
    assert cli.main(["squeeze", str(bad), "--out", str(tmp_path / "sq")]) == 2


def test_eval_refuses_other_squeeze(tmp_path, small, squeezed):
    syn = tmp_path / "syn.uds"
    cli.main(["distill", str(small), "--squeeze", str(squeezed), "--out", str(syn)])
    other = tmp_path / "other.toml"
    other.write_text(SMALL.replace("separation = 4.0", "separation = 5.0"))
    sq2 = tmp_path / "sq2"
    assert cli.main(["squeeze", str(other), "--out", str(sq2)]) == 0
    out = tmp_path / "e.json"
    assert cli.main(["eval", str(small), "--squeeze", str(sq2), "--synthetic", str(syn), "--out", str(out)]) == 2
    assert cli.main(["eval", str(other), "--squeeze", str(sq2), "--synthetic", str(syn), "--out", str(out)]) == 2
    assert not out.exists()


def test_corrupt_synthetic_exits_two(tmp_path, small, squeezed):
    syn = tmp_path / "syn.uds"
    cli.main(["distill", str(small), "--squeeze", str(squeezed), "--out", str(syn)])
    data = bytearray(syn.read_bytes())
    data[30] ^= 1
    syn.write_bytes(bytes(data))
    out = tmp_path / "e.json"
    assert cli.main(["eval", str(small), "--squeeze", str(squeezed), "--synthetic", str(syn), "--out", str(out)]) == 2


def test_compare_duplicate_entries(tmp_path, small):
    cfg = tmp_path / "dup.toml"
    cfg.write_text(SMALL + 'entries = [ { name = "a", filter = "constant", beta = 0.01 },'
                           ' { name = "b", filter = "constant", beta = 0.01 } ]\n')
    prefix = tmp_path / "cmp"
    assert cli.main(["compare", str(cfg), "--out", str(prefix)]) == 0
    rows = list(csv.DictReader((tmp_path / "cmp.csv").open()))
    assert [r["name"] for r in rows] == ["random-real", "a", "b"]
    assert rows[1]["mean"] == rows[2]["mean"]
    doc = json.loads((tmp_path / "cmp.json").read_text())
    assert len(doc["rows"]) == 3 and doc["squeeze_hash"]


def test_ablation_from_squeeze_dir(tmp_path, small, squeezed):
    prefix = tmp_path / "abl"
    assert cli.main(["ablation", str(small), "--squeeze", str(squeezed), "--out", str(prefix), "--jobs", "1"]) == 0
    rows = list(csv.DictReader((tmp_path / "abl.csv").open()))
    assert [r["name"] for r in rows] == ["filter", "filter+signal", "filter+signal+cls"]
    assert all(r["n_seeds"] == "2" for r in rows)


def test_negative_jobs(tmp_path, small):
    assert cli.main(["compare", str(small), "--out", str(tmp_path / "c"), "--jobs", "-1"]) == 2
