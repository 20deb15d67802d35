"""Desk-scale datasets, the squeeze phase, evaluation and comparison runs.

Binary dataset layout (little-endian)::

    "UDS1" | u32 version | u32 n | u32 d_in | u32 c | u8 split
    f64[n * d_in] inputs, row-major
    u16[n] label indices
    u32 CRC32 of everything above
"""

from __future__ import annotations

import hashlib
import io
import json
import os
import struct
import zlib
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import cfm as cfm_mod
from .cfm import CfmConfig, SyntheticDataset
from .errors import ChecksumMismatch, FormatError, InvalidConfig, ShapeMismatch
from .features import (
    CorrStats,
    FeatureNet,
    build_net,
    corr_stats,
    dump_corr_stats,
    forward,
    read_corr_stats_stream,
    spatial_average,
)
from .objectives import LinearModel, krr_ridge_solution

SPLITS = {"train": 0, "test": 1, "synthetic": 2}
SPLIT_NAMES = {v: k for k, v in SPLITS.items()}
FORMAT_VERSION = 1
_DS_HEAD = struct.Struct("<4sIIIIB")


def stable_hash(obj) -> str:
    """Short SHA-256 of the canonical JSON form of ``obj``."""
    text = json.dumps(obj, sort_keys=True, separators=(",", ":"), default=float)
    return hashlib.sha256(text.encode()).hexdigest()[:16]


# ---------------------------------------------------------------------------
# datasets


@dataclass(eq=False)
class Dataset:
    H: np.ndarray
    Y: np.ndarray
    split: str = "train"
    name: str = ""
    seed: int | None = None

    def __post_init__(self):
        self.H = np.asarray(self.H, dtype=np.float64)
        self.Y = np.asarray(self.Y, dtype=np.float64)
        if self.H.ndim != 2 or self.Y.ndim != 2 or self.H.shape[0] != self.Y.shape[0]:
            raise ShapeMismatch(f"H {self.H.shape} and Y {self.Y.shape} disagree")
        if self.split not in SPLITS:
            raise InvalidConfig(f"unknown split {self.split!r}")

    @property
    def n(self) -> int:
        return self.H.shape[0]

    @property
    def num_classes(self) -> int:
        return self.Y.shape[1]

    @property
    def labels(self) -> np.ndarray:
        return np.argmax(self.Y, axis=1)

    @property
    def class_counts(self) -> np.ndarray:
        return self.Y.sum(axis=0).astype(int)

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        h.update(np.ascontiguousarray(self.H).tobytes())
        h.update(np.ascontiguousarray(self.Y).tobytes())
        return h.hexdigest()[:16]


@dataclass(eq=False)
class Splits:
    train: Dataset
    test: Dataset


def one_hot(labels, c: int) -> np.ndarray:
    return np.eye(c)[np.asarray(labels, dtype=int)]


def generate_gaussian_mixture(c: int, d_in: int, n_per_class: int, separation: float, seed: int) -> Splits:
    """Isotropic unit-variance Gaussian classes with means on a sphere of radius ``separation``.

    Each class is split 80/20 into train and test.
    """
    if c < 2 or d_in < 1 or n_per_class < 2:
        raise InvalidConfig("need c >= 2, d_in >= 1 and n_per_class >= 2")
    if separation < 0:
        raise InvalidConfig("separation must be non-negative")
    rng = np.random.default_rng(seed)
    directions = rng.standard_normal((c, d_in))
    means = separation * directions / np.linalg.norm(directions, axis=1, keepdims=True)
    n_train = int(round(0.8 * n_per_class))
    if not 0 < n_train < n_per_class:
        raise InvalidConfig("n_per_class too small for an 80/20 split")
    parts = {"train": ([], []), "test": ([], [])}
    for k in range(c):
        x = means[k] + rng.standard_normal((n_per_class, d_in))
        parts["train"][0].append(x[:n_train])
        parts["train"][1].append(np.full(n_train, k))
        parts["test"][0].append(x[n_train:])
        parts["test"][1].append(np.full(n_per_class - n_train, k))
    out = {}
    for split, (xs, ys) in parts.items():
        H = np.vstack(xs)
        labels = np.concatenate(ys)
        order = rng.permutation(H.shape[0])
        out[split] = Dataset(H[order], one_hot(labels[order], c), split, "gaussian-mixture", seed)
    return Splits(out["train"], out["test"])


def dumps_dataset(H, Y, split: str = "train") -> bytes:
    H = np.asarray(H, dtype=np.float64)
    Y = np.asarray(Y, dtype=np.float64)
    n, d_in = H.shape
    c = Y.shape[1]
    if Y.shape[0] != n:
        raise ShapeMismatch("label and input row counts differ")
    if not (np.all((Y == 0) | (Y == 1)) and np.all(Y.sum(axis=1) == 1)):
        raise FormatError("label rows must be one-hot")
    if c > 0xFFFF:
        raise FormatError("too many classes for u16 labels")
    body = (
        _DS_HEAD.pack(b"UDS1", FORMAT_VERSION, n, d_in, c, SPLITS[split])
        + np.ascontiguousarray(H, dtype="<f8").tobytes()
        + np.argmax(Y, axis=1).astype("<u2").tobytes()
    )
    return body + struct.pack("<I", zlib.crc32(body))


def loads_dataset(data: bytes, name: str = "") -> Dataset:
    if len(data) < _DS_HEAD.size + 4:
        raise FormatError("file too short for a dataset header")
    magic, version, n, d_in, c, tag = _DS_HEAD.unpack_from(data)
    if magic != b"UDS1":
        raise FormatError(f"bad magic {magic!r}")
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported version {version}")
    if tag not in SPLIT_NAMES:
        raise FormatError(f"unknown split tag {tag}")
    expected = _DS_HEAD.size + 8 * n * d_in + 2 * n + 4
    if len(data) != expected:
        raise FormatError(f"expected {expected} bytes, found {len(data)}")
    (crc,) = struct.unpack_from("<I", data, expected - 4)
    if zlib.crc32(data[: expected - 4]) != crc:
        raise ChecksumMismatch("CRC32 mismatch")
    off = _DS_HEAD.size
    H = np.frombuffer(data, dtype="<f8", count=n * d_in, offset=off).astype(np.float64).reshape(n, d_in)
    labels = np.frombuffer(data, dtype="<u2", count=n, offset=off + 8 * n * d_in).astype(int)
    if n and labels.max() >= c:
        raise FormatError("label index out of range, row is not one-hot")
    return Dataset(H, one_hot(labels, c) if c else np.zeros((n, 0)), SPLIT_NAMES[tag], name)


def save_dataset(path, ds) -> None:
    split = getattr(ds, "split", "synthetic")
    H = ds.H if hasattr(ds, "H") else ds.Hs
    Y = ds.Y if hasattr(ds, "Y") else ds.Ys
    Path(path).write_bytes(dumps_dataset(H, Y, split))


def load_dataset(path) -> Dataset:
    path = Path(path)
    return loads_dataset(path.read_bytes(), name=path.stem)


# ---------------------------------------------------------------------------
# squeeze


@dataclass(eq=False)
class SqueezeArtifact:
    net: FeatureNet
    head: LinearModel
    real_stats: tuple[CorrStats, ...]
    ridge_beta: float
    config_hash: str

    def manifest(self) -> dict:
        return {
            "format": "unidd-squeeze/1",
            "net": self.net.config(),
            "ridge_beta": float(self.ridge_beta),
            "config_hash": self.config_hash,
            "layers": [list(s.phi.shape) for s in self.real_stats],
        }


def net_from_config(net_config: dict, seed: int | None = None) -> FeatureNet:
    allowed = {"widths", "mode", "spatial_size", "seed"}
    extra = set(net_config) - allowed
    if extra:
        raise InvalidConfig(f"unknown net config keys {sorted(extra)}")
    if "widths" not in net_config:
        raise InvalidConfig("net config needs 'widths'")
    s = net_config.get("seed", 0) if seed is None else seed
    return build_net(net_config["widths"], net_config.get("mode", "flat"), int(s), net_config.get("spatial_size", 4))


def last_features(net: FeatureNet, H) -> np.ndarray:
    return spatial_average(forward(net, H)[-1])


def squeeze(dataset: Dataset, net_config: dict, ridge_beta: float, seed: int, config_hash: str | None = None) -> SqueezeArtifact:
    """Build the fixed network, collect per-layer real statistics and fit the ridge head."""
    if dataset.n == 0:
        raise InvalidConfig("training split is empty")
    net = net_from_config(net_config, seed)
    maps = forward(net, dataset.H)
    stats = tuple(corr_stats(F, dataset.Y) for F in maps)
    head = krr_ridge_solution(spatial_average(maps[-1]), dataset.Y, ridge_beta)
    if config_hash is None:
        config_hash = stable_hash({"net": net.config(), "ridge_beta": ridge_beta, "data": dataset.fingerprint()})
    return SqueezeArtifact(net, head, stats, float(ridge_beta), config_hash)


def save_squeeze(path, art: SqueezeArtifact) -> None:
    """Directory with ``manifest.json``, ``stats.udd`` (one UDD1 record per layer) and ``head.npy``."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    (path / "manifest.json").write_text(json.dumps(art.manifest(), indent=2, sort_keys=True) + "\n")
    (path / "stats.udd").write_bytes(b"".join(dump_corr_stats(s) for s in art.real_stats))
    np.save(path / "head.npy", np.ascontiguousarray(art.head.W, dtype="<f8"), allow_pickle=False)


def load_squeeze(path) -> SqueezeArtifact:
    path = Path(path)
    if not (path / "manifest.json").is_file():
        raise FileNotFoundError(f"no squeeze artifact at {path}")
    try:
        manifest = json.loads((path / "manifest.json").read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"bad manifest: {exc}") from exc
    if manifest.get("format") != "unidd-squeeze/1":
        raise FormatError("not a squeeze artifact")
    net = net_from_config(manifest["net"])
    fh = io.BytesIO((path / "stats.udd").read_bytes())
    stats = tuple(read_corr_stats_stream(fh) for _ in range(net.depth))
    if fh.read(1):
        raise FormatError("trailing bytes in stats.udd")
    head = LinearModel(np.load(path / "head.npy", allow_pickle=False))
    return SqueezeArtifact(net, head, stats, float(manifest["ridge_beta"]), manifest["config_hash"])


# ---------------------------------------------------------------------------
# evaluation


@dataclass(frozen=True)
class EvalConfig:
    method: str = "ridge"  # ridge | softmax
    ridge_beta: float | None = None  # None: reuse the squeeze head's beta
    epochs: int = 300
    lr: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if self.method not in ("ridge", "softmax"):
            raise InvalidConfig(f"unknown eval method {self.method!r}")


@dataclass
class EvalResult:
    accuracy: float
    per_class: list[float]
    config: dict

    def to_dict(self) -> dict:
        return asdict(self)


def _softmax_head(X, Y, cfg: EvalConfig) -> np.ndarray:
    # full-batch GD from zero on mean cross-entropy; deterministic
    W = np.zeros((X.shape[1], Y.shape[1]))
    for _ in range(cfg.epochs):
        W -= cfg.lr * X.T @ cfm_mod.cls_loss_grad(X @ W, Y)
    return W


def fit_head(X, Y, cfg: EvalConfig, default_beta: float) -> LinearModel:
    if cfg.method == "ridge":
        beta = default_beta if cfg.ridge_beta is None else cfg.ridge_beta
        return krr_ridge_solution(X, Y, beta)
    return LinearModel(_softmax_head(X, Y, cfg))


def accuracy_of(head: LinearModel, X, Y) -> tuple[float, list[float]]:
    pred = np.argmax(X @ head.W, axis=1)
    truth = np.argmax(Y, axis=1)
    per_class = []
    for k in range(Y.shape[1]):
        mask = truth == k
        per_class.append(float(np.mean(pred[mask] == k)) if mask.any() else float("nan"))
    return float(np.mean(pred == truth)), per_class


def evaluate(synthetic, squeeze_art: SqueezeArtifact, test: Dataset, eval_config: EvalConfig = EvalConfig()) -> EvalResult:
    """Fit a fresh head on the synthetic set's last-layer features and score it on ``test``."""
    H = synthetic.Hs if hasattr(synthetic, "Hs") else synthetic.H
    Y = synthetic.Ys if hasattr(synthetic, "Ys") else synthetic.Y
    if H.shape[0] == 0:
        raise InvalidConfig("synthetic set is empty")
    if np.any(np.asarray(Y).sum(axis=0) == 0):
        raise InvalidConfig("synthetic set has a class with no samples")
    head = fit_head(last_features(squeeze_art.net, H), Y, eval_config, squeeze_art.ridge_beta)
    acc, per_class = accuracy_of(head, last_features(squeeze_art.net, test.H), test.Y)
    cfg = asdict(eval_config)
    if cfg["ridge_beta"] is None:
        cfg["ridge_beta"] = squeeze_art.ridge_beta
    return EvalResult(acc, per_class, cfg)


def random_subset(train: Dataset, ipc: int, seed: int) -> SyntheticDataset:
    """IPC-balanced random real subset, the baseline every distilled set is compared with."""
    H, Y = cfm_mod.init_synthetic(train.H, train.Y, CfmConfig(ipc=ipc, batch_size=max(2, ipc)), seed)
    return SyntheticDataset(H, Y, {"seed": int(seed), "kind": "random-real"})


# ---------------------------------------------------------------------------
# comparisons


def curriculum_config(base: CfmConfig, beta: float) -> CfmConfig:
    return cfm_mod.with_overrides(base, beta=beta, schedule="cosine", filter="high-pass")


def constant_beta_config(base: CfmConfig, beta: float) -> CfmConfig:
    return cfm_mod.with_overrides(base, beta=beta, schedule="constant", filter="high-pass")


def low_pass_config(base: CfmConfig) -> CfmConfig:
    return cfm_mod.with_overrides(base, filter="low-pass")


@dataclass
class Row:
    name: str
    accuracies: list[float]

    @property
    def mean(self) -> float:
        return float(np.mean(self.accuracies))

    @property
    def std(self) -> float:
        # sample std over seeds; a single seed has no spread
        return float(np.std(self.accuracies, ddof=1)) if len(self.accuracies) > 1 else 0.0

    @property
    def n(self) -> int:
        return len(self.accuracies)


@dataclass
class ComparisonTable:
    rows: list[Row] = field(default_factory=list)

    def row(self, name: str) -> Row:
        for r in self.rows:
            if r.name == name:
                return r
        raise KeyError(name)

    def to_dict(self) -> dict:
        return {"rows": [{"name": r.name, "mean": r.mean, "std": r.std, "n_seeds": r.n,
                          "accuracies": r.accuracies} for r in self.rows]}

    def write_csv(self, path) -> None:
        lines = ["name,mean,std,n_seeds"]
        lines += [f"{r.name},{r.mean!r},{r.std!r},{r.n}" for r in self.rows]
        Path(path).write_text("\n".join(lines) + "\n")

    def write_json(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")


def pooled_std(a: Row, b: Row) -> float:
    return float(np.sqrt(0.5 * (a.std**2 + b.std**2)))


def _run_one(args) -> float:
    train, test, squeeze_art, cfg, seed, eval_cfg = args
    if cfg is None:
        syn = random_subset(train, eval_cfg[1], seed)
        return evaluate(syn, squeeze_art, test, eval_cfg[0]).accuracy
    syn, _ = cfm_mod.distill(train, squeeze_art, cfg, seed)
    return evaluate(syn, squeeze_art, test, eval_cfg).accuracy


def _fan_out(tasks: list, jobs: int) -> list[float]:
    if jobs <= 1 or len(tasks) <= 1:
        return [_run_one(t) for t in tasks]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        # map preserves submission order
        return list(pool.map(_run_one, tasks))


def default_jobs() -> int:
    return max(1, os.cpu_count() or 1)


def compare_filters(splits: Splits, squeeze_art: SqueezeArtifact, configs: Sequence[tuple[str, CfmConfig | None]],
                    seeds: Sequence[int], eval_config: EvalConfig = EvalConfig(), jobs: int = 1,
                    baseline_ipc: int | None = None) -> ComparisonTable:
    """Accuracy mean/std over seeds for each named config, in the given order.

    A ``None`` config is the random real-subset baseline at ``baseline_ipc``.
    """
    if len(configs) < 2:
        raise InvalidConfig("need at least two configurations to compare")
    tasks = []
    for _, cfg in configs:
        for s in seeds:
            if cfg is None:
                ipc = baseline_ipc or next(c.ipc for _, c in configs if c is not None)
                tasks.append((splits.train, splits.test, squeeze_art, None, s, (eval_config, ipc)))
            else:
                tasks.append((splits.train, splits.test, squeeze_art, cfg, s, eval_config))
    accs = _fan_out(tasks, jobs)
    table = ComparisonTable()
    k = len(seeds)
    for i, (name, _) in enumerate(configs):
        table.rows.append(Row(name, accs[i * k : (i + 1) * k]))
    return table


ABLATION_SETTINGS = (
    ("filter", dict(use_filter=True, use_signal=False, use_cls=False)),
    ("filter+signal", dict(use_filter=True, use_signal=True, use_cls=False)),
    ("filter+signal+cls", dict(use_filter=True, use_signal=True, use_cls=True)),
)


def run_loss_ablation(splits: Splits, squeeze_art: SqueezeArtifact, cfg: CfmConfig, seeds: Sequence[int],
                      eval_config: EvalConfig = EvalConfig(), jobs: int = 1) -> ComparisonTable:
    configs = [(name, cfm_mod.with_overrides(cfg, **flags)) for name, flags in ABLATION_SETTINGS]
    return compare_filters(splits, squeeze_art, configs, seeds, eval_config, jobs)
