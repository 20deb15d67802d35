"""``unidd`` command line.

Exit codes: 0 success, 1 numerical or property failure, 2 usage, I/O,
configuration or format error.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
from pathlib import Path

import numpy as np

from . import config as config_mod
from . import verify as verify_mod
from .cfm import distill
from .errors import FormatError, InvalidConfig, ShapeMismatch, UniDDError
from .harness import (
    Splits,
    compare_filters,
    default_jobs,
    evaluate,
    load_dataset,
    load_squeeze,
    run_loss_ablation,
    save_dataset,
    save_squeeze,
    squeeze,
)
from .spectral import AllPass, HighPassPower, HighPassShiftInverse, LowPassLinear, response_grid, write_response_csv

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2

# files written next to the squeeze artifact so later steps need only the directory
TRAIN_FILE, TEST_FILE = "train.uds", "test.uds"


class UsageError(Exception):
    pass


def _dump_json(path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _sidecar(path) -> Path:
    return Path(str(path) + ".json")


def _sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _load_cfg(args) -> dict:
    if args.config is None:
        return config_mod.resolve({}, args.seed)
    return config_mod.load(args.config, args.seed)


def _open_squeeze(cfg: dict, directory):
    art = load_squeeze(directory)
    want = config_mod.squeeze_hash(cfg)
    if art.config_hash != want:
        raise UsageError(f"squeeze artifact {directory} was built from a different configuration "
                         f"({art.config_hash} != {want})")
    return art


def _squeeze_from(cfg: dict, directory):
    """Artifact and real splits, from ``directory`` when given, otherwise built in memory."""
    if directory is None:
        splits = config_mod.datasets(cfg)
        art = squeeze(splits.train, cfg["net"], cfg["squeeze"]["ridge_beta"], cfg["net"]["seed"],
                      config_mod.squeeze_hash(cfg))
        return art, splits
    art = _open_squeeze(cfg, directory)
    return art, Splits(load_dataset(Path(directory) / TRAIN_FILE), load_dataset(Path(directory) / TEST_FILE))


# ---------------------------------------------------------------------------
# commands


def cmd_verify(args) -> int:
    rep = verify_mod.run(args.seeds)
    if args.report:
        verify_mod.write_report(rep, args.report)
    for c in rep["checks"]:
        tag = "info" if c["reported_only"] else ("ok" if c["passed"] else "FAIL")
        print(f"{tag:4s} {c['name']:50s} max_error={c['max_error']:.3e} instances={c['instances']}")
    print(f"{sum(c['passed'] for c in rep['checks'])}/{rep['n_checks']} checks passed in {rep['seconds']:.1f}s")
    return EXIT_OK if rep["passed"] else EXIT_FAIL


def _parse_grid(text: str) -> np.ndarray:
    try:
        lo, hi, steps = text.split(":")
        lo, hi, steps = float(lo), float(hi), int(steps)
    except ValueError as exc:
        raise UsageError(f"grid must be MIN:MAX:STEPS, got {text!r}") from exc
    if steps < 2 or not hi > lo or lo < 0:
        raise UsageError("grid needs 0 <= MIN < MAX and STEPS >= 2")
    return np.linspace(lo, hi, steps)


def cmd_filters(args) -> int:
    grid = _parse_grid(args.grid)
    try:
        betas = [float(b) for b in args.beta.split(",") if b.strip()]
    except ValueError as exc:
        raise UsageError(f"bad --beta list {args.beta!r}") from exc
    specs = [AllPass(), LowPassLinear()]
    if args.alpha is not None:
        specs.append(HighPassPower(args.alpha, args.power))
    specs += [HighPassShiftInverse(b) for b in betas]
    if args.out:
        write_response_csv(args.out, grid, specs, labels=[s.label for s in specs])
        print(f"wrote {len(specs)} filters x {grid.size} points to {args.out}")
    else:
        values = response_grid(specs, grid)
        print(",".join(["lambda"] + [s.label for s in specs]))
        for lam, row in zip(grid, values):
            print(",".join(repr(float(v)) for v in (lam, *row)))
    return EXIT_OK


def cmd_squeeze(args) -> int:
    cfg = _load_cfg(args)
    splits = config_mod.datasets(cfg)
    art = squeeze(splits.train, cfg["net"], cfg["squeeze"]["ridge_beta"], cfg["net"]["seed"],
                  config_mod.squeeze_hash(cfg))
    save_squeeze(args.out, art)
    save_dataset(Path(args.out) / TRAIN_FILE, splits.train)
    save_dataset(Path(args.out) / TEST_FILE, splits.test)
    print(f"squeeze {art.config_hash}: {art.net.depth} layers, train n={splits.train.n}, "
          f"test n={splits.test.n} -> {args.out}")
    return EXIT_OK


def cmd_distill(args) -> int:
    cfg = _load_cfg(args)
    art = _open_squeeze(cfg, args.squeeze)
    train = load_dataset(Path(args.squeeze) / TRAIN_FILE)
    run_hash = config_mod.run_hash(cfg)
    syn, rep = distill(train, art, config_mod.cfm_config(cfg), cfg["seed"], run_hash)
    out = Path(args.out)
    save_dataset(out, syn)
    loss_path = Path(args.loss_csv) if args.loss_csv else out.with_suffix(".loss.csv")
    rep.write_csv(loss_path)
    _dump_json(_sidecar(out), {
        "config_hash": run_hash,
        "squeeze_hash": art.config_hash,
        "provenance": syn.provenance,
        "config": cfg,
    })
    first, last = rep.records[0].l_total, rep.records[-1].l_total
    print(f"distill {run_hash} seed={cfg['seed']}: m={syn.Hs.shape[0]} L_total {first:.6g} -> {last:.6g} -> {out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = _load_cfg(args)
    art = _open_squeeze(cfg, args.squeeze)
    syn = load_dataset(args.synthetic)
    side = _sidecar(args.synthetic)
    meta = json.loads(side.read_text()) if side.is_file() else {}
    if meta and meta.get("squeeze_hash") != art.config_hash:
        raise UsageError("synthetic set was distilled against a different squeeze artifact")
    if syn.H.shape[1] != art.net.input_dim:
        raise ShapeMismatch(f"synthetic inputs have {syn.H.shape[1]} columns, net expects {art.net.input_dim}")
    test = load_dataset(Path(args.squeeze) / TEST_FILE)
    res = evaluate(syn, art, test, config_mod.eval_config(cfg))
    out = res.to_dict()
    out.update({
        "config_hash": config_mod.run_hash(cfg),
        "squeeze_hash": art.config_hash,
        "synthetic_sha256": _sha256(args.synthetic),
        "synthetic_config_hash": meta.get("config_hash"),
    })
    _dump_json(args.out, out)
    print(f"eval accuracy={res.accuracy:.4f} on n={test.n} -> {args.out}")
    return EXIT_OK


def _write_table(table, prefix, cfg, art) -> None:
    table.write_csv(str(prefix) + ".csv")
    doc = table.to_dict()
    doc.update({"config_hash": config_mod.run_hash(cfg), "squeeze_hash": art.config_hash})
    _dump_json(str(prefix) + ".json", doc)


def _jobs(args, cfg) -> int:
    jobs = args.jobs if args.jobs is not None else cfg["compare"]["jobs"]
    if jobs < 0:
        raise UsageError("--jobs must be non-negative")
    return jobs or default_jobs()


def _seeds(cfg) -> list[int]:
    return [cfg["seed"] + int(s) for s in cfg["compare"]["seeds"]]


def cmd_compare(args) -> int:
    cfg = _load_cfg(args)
    art, splits = _squeeze_from(cfg, args.squeeze)
    entries = config_mod.compare_entries(cfg)
    table = compare_filters(splits, art, entries, _seeds(cfg), config_mod.eval_config(cfg), _jobs(args, cfg),
                            baseline_ipc=cfg["distill"]["ipc"])
    _write_table(table, args.out, cfg, art)
    for r in table.rows:
        print(f"{r.name:20s} {r.mean:.4f} +- {r.std:.4f} (n={r.n})")
    return EXIT_OK


def cmd_ablation(args) -> int:
    cfg = _load_cfg(args)
    art, splits = _squeeze_from(cfg, args.squeeze)
    table = run_loss_ablation(splits, art, config_mod.cfm_config(cfg), _seeds(cfg), config_mod.eval_config(cfg),
                              _jobs(args, cfg))
    _write_table(table, args.out, cfg, art)
    for r in table.rows:
        print(f"{r.name:20s} {r.mean:.4f} +- {r.std:.4f} (n={r.n})")
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="unidd", description="Spectral dataset distillation toolkit.")
    sub = p.add_subparsers(dest="command", required=True)

    v = sub.add_parser("verify", help="run the derivation and property battery")
    v.add_argument("--seeds", type=int, default=100)
    v.add_argument("--report", help="write the JSON report here")
    v.set_defaults(func=cmd_verify)

    f = sub.add_parser("filters", help="export filter responses over an eigenvalue grid")
    f.add_argument("--beta", default="0.1", help="comma-separated shift-inverse parameters")
    f.add_argument("--alpha", type=float, help="step of the power high-pass filter (omitted when unset)")
    f.add_argument("--power", type=int, default=1)
    f.add_argument("--grid", default="0:2:201", help="MIN:MAX:STEPS")
    f.add_argument("--out", help="CSV path (stdout when unset)")
    f.set_defaults(func=cmd_filters)

    def run_parser(name, func, help_, squeeze_required=False):
        r = sub.add_parser(name, help=help_)
        r.add_argument("config", nargs="?", help="TOML run configuration (defaults when omitted)")
        r.add_argument("--seed", type=int, help="overrides the config seed and UNIDD_SEED")
        r.add_argument("--out", required=True)
        if name != "squeeze":
            r.add_argument("--squeeze", required=squeeze_required, help="squeeze artifact directory")
        r.set_defaults(func=func)
        return r

    run_parser("squeeze", cmd_squeeze, "build the network, real statistics and head")
    d = run_parser("distill", cmd_distill, "distill a synthetic set", squeeze_required=True)
    d.add_argument("--loss-csv", help="loss report path (default: OUT with .loss.csv)")
    e = run_parser("eval", cmd_eval, "evaluate a synthetic set", squeeze_required=True)
    e.add_argument("--synthetic", required=True)
    c = run_parser("compare", cmd_compare, "compare filter configurations over seeds")
    c.add_argument("--jobs", type=int)
    a = run_parser("ablation", cmd_ablation, "loss-term ablation over seeds")
    a.add_argument("--jobs", type=int)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except (UsageError, InvalidConfig, FormatError, ShapeMismatch, OSError) as exc:
        print(f"unidd: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (UniDDError, AssertionError, ValueError, np.linalg.LinAlgError) as exc:
        print(f"unidd: numerical failure: {exc}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
