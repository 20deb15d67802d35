"""Run configuration (TOML) with defaults and strict key checking.

Every key below has a default, so an empty file is a valid configuration::

    seed = 0                      # run seed: init sampling, baselines

    [dataset]
    kind = "gaussian-mixture"     # or "file"
    classes = 10
    dim = 32
    n_per_class = 625             # 500 train + 125 test per class
    separation = 6.0
    seed = 0
    train_path = ""               # kind = "file"
    test_path = ""

    [net]
    widths = [2, 8, 16]
    mode = "spatial"
    spatial_size = 4
    seed = 0

    [squeeze]
    ridge_beta = 1.0

    [distill]                     # any CfmConfig field; lr defaults to 0.01 here

    [eval]                        # any EvalConfig field

    [compare]
    seeds = [0, 1, 2, 3, 4]
    jobs = 0                      # 0: one worker per core
    baseline = true               # add the random real-subset row
    entries = [ { name = "cfm", filter = "curriculum", beta = 0.1 }, ... ]
"""

from __future__ import annotations

import copy
import os
import sys
from dataclasses import fields
from pathlib import Path

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover
    import tomli as tomllib

from .cfm import CfmConfig
from .errors import InvalidConfig
from .harness import (
    EvalConfig,
    Splits,
    constant_beta_config,
    curriculum_config,
    generate_gaussian_mixture,
    load_dataset,
    low_pass_config,
    stable_hash,
)

SEED_ENV = "UNIDD_SEED"

DEFAULT_ENTRIES = [
    {"name": "cfm", "filter": "curriculum", "beta": 0.1},
    {"name": "beta=1e-1", "filter": "constant", "beta": 1e-1},
    {"name": "beta=1e-2", "filter": "constant", "beta": 1e-2},
    {"name": "beta=1e-3", "filter": "constant", "beta": 1e-3},
    {"name": "beta=1e-4", "filter": "constant", "beta": 1e-4},
    {"name": "low-pass", "filter": "low-pass"},
]

DEFAULTS = {
    "seed": 0,
    "dataset": {
        "kind": "gaussian-mixture",
        "classes": 10,
        "dim": 32,
        "n_per_class": 625,
        "separation": 6.0,
        "seed": 0,
        "train_path": "",
        "test_path": "",
    },
    "net": {"widths": [2, 8, 16], "mode": "spatial", "spatial_size": 4, "seed": 0},
    "squeeze": {"ridge_beta": 1.0},
    # desk-scale inputs are unit-variance; 0.1 steps overshoot them
    "distill": {**{f.name: f.default for f in fields(CfmConfig)}, "lr": 0.01},
    "eval": {f.name: f.default for f in fields(EvalConfig)},
    "compare": {"seeds": [0, 1, 2, 3, 4], "jobs": 0, "baseline": True, "entries": DEFAULT_ENTRIES},
}

ENTRY_KEYS = {"name", "filter", "beta"}
ENTRY_FILTERS = ("curriculum", "constant", "low-pass")


def _merge(defaults: dict, given: dict, where: str) -> dict:
    out = copy.deepcopy(defaults)
    for key, value in given.items():
        if key not in defaults:
            raise InvalidConfig(f"unknown key {where}{key!r}")
        if isinstance(defaults[key], dict):
            if not isinstance(value, dict):
                raise InvalidConfig(f"{where}{key} must be a table")
            out[key] = _merge(defaults[key], value, f"{where}{key}.")
        else:
            out[key] = value
    return out


def _check_entries(entries) -> None:
    if not isinstance(entries, list):
        raise InvalidConfig("compare.entries must be an array of tables")
    for e in entries:
        extra = set(e) - ENTRY_KEYS
        if extra:
            raise InvalidConfig(f"unknown compare entry keys {sorted(extra)}")
        if "name" not in e or e.get("filter") not in ENTRY_FILTERS:
            raise InvalidConfig(f"compare entry needs a name and filter in {ENTRY_FILTERS}: {e}")


def resolve(raw: dict, seed: int | None = None) -> dict:
    """Merge ``raw`` over the defaults; seed precedence is argument, then env var, then file."""
    cfg = _merge(DEFAULTS, raw, "")
    env = os.environ.get(SEED_ENV)
    if seed is not None:
        cfg["seed"] = int(seed)
    elif env not in (None, ""):
        try:
            cfg["seed"] = int(env)
        except ValueError as exc:
            raise InvalidConfig(f"{SEED_ENV} must be an integer, got {env!r}") from exc
    _check_entries(cfg["compare"]["entries"])
    cfm_config(cfg)
    eval_config(cfg)
    return cfg


def load(path, seed: int | None = None) -> dict:
    try:
        raw = tomllib.loads(Path(path).read_text())
    except tomllib.TOMLDecodeError as exc:
        raise InvalidConfig(f"{path}: {exc}") from exc
    return resolve(raw, seed)


def cfm_config(cfg: dict) -> CfmConfig:
    try:
        return CfmConfig(**cfg["distill"])
    except TypeError as exc:  # pragma: no cover - keys already checked
        raise InvalidConfig(str(exc)) from exc


def eval_config(cfg: dict) -> EvalConfig:
    return EvalConfig(**cfg["eval"])


def squeeze_hash(cfg: dict) -> str:
    """Identifies the squeeze artifact: dataset, network and head settings."""
    return stable_hash({k: cfg[k] for k in ("dataset", "net", "squeeze")})


def run_hash(cfg: dict) -> str:
    return stable_hash(cfg)


def datasets(cfg: dict) -> Splits:
    ds = cfg["dataset"]
    if ds["kind"] == "gaussian-mixture":
        return generate_gaussian_mixture(ds["classes"], ds["dim"], ds["n_per_class"], ds["separation"], ds["seed"])
    if ds["kind"] == "file":
        if not ds["train_path"] or not ds["test_path"]:
            raise InvalidConfig("dataset.kind = 'file' needs train_path and test_path")
        return Splits(load_dataset(ds["train_path"]), load_dataset(ds["test_path"]))
    raise InvalidConfig(f"unknown dataset kind {ds['kind']!r}")


def compare_entries(cfg: dict) -> list[tuple[str, CfmConfig | None]]:
    base = cfm_config(cfg)
    out: list[tuple[str, CfmConfig | None]] = []
    if cfg["compare"]["baseline"]:
        out.append(("random-real", None))
    for e in cfg["compare"]["entries"]:
        beta = float(e.get("beta", base.beta))
        if e["filter"] == "curriculum":
            out.append((e["name"], curriculum_config(base, beta)))
        elif e["filter"] == "constant":
            out.append((e["name"], constant_beta_config(base, beta)))
        else:
            out.append((e["name"], low_pass_config(base)))
    return out
