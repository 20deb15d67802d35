"""Curriculum frequency matching.

Synthetic inputs are optimised so that, at every layer of a fixed network,
the ridge-filtered statistics of the synthetic batch match those of the real
data::

    L_filter = sum_l || (psi_l + b I)^-1 - (psi_s_l + b I)^-1 ||
    L_signal = sum_l || (psi_l + b I)^-1 phi_l - (psi_s_l + b I)^-1 phi_s_l ||
    L        = L_cls + eta * L_filter + eta * L_signal

while the ridge parameter ``b`` follows a cosine schedule from ``beta`` down to
a small floor.  Norms are unsquared Frobenius norms unless
``squared_norms`` is set.
"""

from __future__ import annotations

import csv
import math
import zlib
from dataclasses import asdict, dataclass, field, replace
from typing import Sequence

import numpy as np

from .errors import ConfigError, NonFiniteGradient, OutOfRange, ShapeMismatch, SingularSystem
from .features import (
    CorrStats,
    EmuState,
    FeatureNet,
    backward,
    check_one_hot,
    corr_stats,
    corr_stats_backward,
    emu_update,
    forward_activations,
    spatial_average,
)
from .objectives import LinearModel

NORM_GUARD = 1e-12
MAX_CONDITION = 1e14


# ---------------------------------------------------------------------------
# schedule


@dataclass(frozen=True)
class CurriculumSchedule:
    beta_max: float
    total_steps: int
    beta_floor: float = 1e-6
    kind: str = "cosine"  # or "constant"

    def __post_init__(self):
        if self.beta_max < 0:
            raise ConfigError("beta_max must be non-negative")
        if self.total_steps < 1:
            raise ConfigError("total_steps must be positive")
        if self.beta_floor < 0:
            raise ConfigError("beta_floor must be non-negative")
        if self.kind not in ("cosine", "constant"):
            raise ConfigError(f"unknown schedule kind {self.kind!r}")


def beta_at(schedule: CurriculumSchedule, t: float) -> float:
    """``max(floor, beta * (1 + cos(pi t / T)) / 2)``; constant schedules ignore ``t``."""
    T = schedule.total_steps
    if not 0 <= t <= T:
        raise OutOfRange(f"step {t} outside [0, {T}]")
    if schedule.kind == "constant":
        return max(schedule.beta_floor, schedule.beta_max)
    value = schedule.beta_max * (1.0 + math.cos(math.pi * t / T)) / 2.0
    return max(schedule.beta_floor, value)


def default_floor(real: Sequence[CorrStats]) -> float:
    """``1e-6 * max(1, trace(psi) / d)`` over the layers."""
    scale = max([1.0] + [float(np.trace(s.psi)) / s.psi.shape[0] for s in real])
    return 1e-6 * scale


# ---------------------------------------------------------------------------
# configuration and records


@dataclass(frozen=True)
class CfmConfig:
    eta: float = 0.1
    iterations: int = 200
    batch_size: int = 10
    ipc: int = 10
    optimizer: str = "adam"  # adam | gd
    lr: float = 0.1
    adam_beta1: float = 0.5
    adam_beta2: float = 0.9
    adam_eps: float = 1e-8
    lr_schedule: str = "constant"  # constant | cosine
    beta: float = 0.1
    schedule: str = "cosine"  # cosine | constant
    beta_floor: float | None = None  # None: derived from the real statistics
    curriculum_axis: str = "per-batch"  # per-batch | per-iteration
    filter: str = "high-pass"  # high-pass | low-pass
    emu_scope: str = "batch"  # batch: reset per batch | run: one running mean for the whole run
    squared_norms: bool = False
    use_cls: bool = True
    use_filter: bool = True
    use_signal: bool = True

    def __post_init__(self):
        if self.eta < 0:
            raise ConfigError("eta must be non-negative")
        if self.iterations < 0:
            raise ConfigError("iterations must be non-negative")
        if self.batch_size < 2:
            raise ConfigError("batch_size must be at least 2")
        if self.ipc < 1:
            raise ConfigError("ipc must be positive")
        if self.optimizer not in ("adam", "gd"):
            raise ConfigError(f"unknown optimizer {self.optimizer!r}")
        if self.lr_schedule not in ("constant", "cosine"):
            raise ConfigError(f"unknown lr_schedule {self.lr_schedule!r}")
        if self.schedule not in ("cosine", "constant"):
            raise ConfigError(f"unknown schedule {self.schedule!r}")
        if self.curriculum_axis not in ("per-batch", "per-iteration"):
            raise ConfigError(f"unknown curriculum_axis {self.curriculum_axis!r}")
        if self.filter not in ("high-pass", "low-pass"):
            raise ConfigError(f"unknown filter {self.filter!r}")
        if self.emu_scope not in ("batch", "run"):
            raise ConfigError(f"unknown emu_scope {self.emu_scope!r}")
        if self.beta < 0:
            raise ConfigError("beta must be non-negative")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class LossRecord:
    t: int
    batch: int
    iteration: int
    beta: float
    l_cls: float
    l_filter: float
    l_signal: float
    l_total: float


@dataclass
class LossReport:
    eta: float
    records: list[LossRecord] = field(default_factory=list)

    def batch_records(self, b: int) -> list[LossRecord]:
        return [r for r in self.records if r.batch == b]

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t", "beta", "l_cls", "l_filter", "l_signal", "l_total"])
            for r in self.records:
                w.writerow([r.t, repr(r.beta), repr(r.l_cls), repr(r.l_filter), repr(r.l_signal), repr(r.l_total)])


def read_loss_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        return [
            {k: (int(v) if k == "t" else float(v)) for k, v in row.items()}
            for row in csv.DictReader(fh)
        ]


@dataclass
class SyntheticDataset:
    Hs: np.ndarray
    Ys: np.ndarray
    provenance: dict = field(default_factory=dict)

    @property
    def labels(self) -> np.ndarray:
        return np.argmax(self.Ys, axis=1)


def total_loss(l_cls: float, l_filter: float, l_signal: float, eta: float) -> float:
    return l_cls + eta * l_filter + eta * l_signal


# ---------------------------------------------------------------------------
# losses


def _shifted_inverse(psi: np.ndarray, beta: float) -> np.ndarray:
    d = psi.shape[0]
    shifted = psi + beta * np.eye(d)
    try:
        inv = np.linalg.solve(shifted, np.eye(d))
    except np.linalg.LinAlgError as exc:
        raise SingularSystem(f"psi + {beta:g} I is singular") from exc
    if not np.all(np.isfinite(inv)) or np.linalg.cond(shifted) > MAX_CONDITION:
        raise SingularSystem(f"psi + {beta:g} I is numerically singular")
    return 0.5 * (inv + inv.T)


def _norm_and_grad(A: np.ndarray, squared: bool) -> tuple[float, np.ndarray]:
    if squared:
        return float(np.sum(A * A)), 2.0 * A
    n = float(np.linalg.norm(A))
    if n < NORM_GUARD:
        return n, np.zeros_like(A)
    return n, A / n


@dataclass
class _LayerTerms:
    l_filter: float
    l_signal: float
    # gradients w.r.t. the synthetic psi_s / phi_s (after the EMU update)
    gpsi_filter: np.ndarray
    gpsi_signal: np.ndarray
    gphi_signal: np.ndarray


def _layer_terms(real: CorrStats, psi_s, phi_s, beta: float, kind: str, squared: bool) -> _LayerTerms:
    if real.psi.shape != psi_s.shape or real.phi.shape != phi_s.shape:
        raise ShapeMismatch(f"real {real.phi.shape} vs synthetic {phi_s.shape}")
    if kind == "high-pass":
        inv_r = _shifted_inverse(real.psi, beta)
        inv_s = _shifted_inverse(psi_s, beta)
        lf, gf = _norm_and_grad(inv_r - inv_s, squared)
        sig_s = inv_s @ phi_s
        ls, gs = _norm_and_grad(inv_r @ real.phi - sig_s, squared)
        # d(inv_s) = -inv_s d(psi_s) inv_s
        gpsi_f = inv_s @ gf @ inv_s
        gpsi_s = inv_s @ gs @ sig_s.T
        gphi_s = -inv_s @ gs
    elif kind == "low-pass":
        lf, gf = _norm_and_grad(real.psi - psi_s, squared)
        ls, gs = _norm_and_grad(real.psi @ real.phi - psi_s @ phi_s, squared)
        gpsi_f = -gf
        gpsi_s = -gs @ phi_s.T
        gphi_s = -psi_s.T @ gs
    else:
        raise ConfigError(f"unknown filter kind {kind!r}")
    return _LayerTerms(lf, ls, gpsi_f, gpsi_s, gphi_s)


def _as_pair(s) -> tuple[np.ndarray, np.ndarray]:
    if isinstance(s, EmuState):
        return s.psi_s, s.phi_s
    return s.psi, s.phi


def cfm_losses(real: Sequence[CorrStats], synth: Sequence, beta_t: float, kind: str = "high-pass",
               squared: bool = False) -> tuple[float, float]:
    """``(L_filter, L_signal)`` summed over layers.

    ``synth`` holds per-layer :class:`EmuState` or :class:`CorrStats`.
    """
    if len(real) != len(synth):
        raise ShapeMismatch(f"{len(real)} real layers vs {len(synth)} synthetic layers")
    lf = ls = 0.0
    for r, s in zip(real, synth):
        terms = _layer_terms(r, *_as_pair(s), beta_t, kind, squared)
        lf += terms.l_filter
        ls += terms.l_signal
    return lf, ls


def log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def cls_loss(logits, Ys) -> float:
    """Mean softmax cross-entropy against one-hot labels."""
    logits = np.asarray(logits, dtype=np.float64)
    Ys = np.asarray(Ys, dtype=np.float64)
    if logits.shape != Ys.shape:
        raise ShapeMismatch(f"logits {logits.shape} vs labels {Ys.shape}")
    return float(-np.sum(Ys * log_softmax(logits)) / logits.shape[0])


def cls_loss_grad(logits, Ys) -> np.ndarray:
    logits = np.asarray(logits, dtype=np.float64)
    return (np.exp(log_softmax(logits)) - Ys) / logits.shape[0]


# ---------------------------------------------------------------------------
# batch objective and its gradient


@dataclass(frozen=True)
class LossTerms:
    """Which terms enter the objective."""

    use_cls: bool = True
    use_filter: bool = True
    use_signal: bool = True
    kind: str = "high-pass"
    squared: bool = False

    @classmethod
    def from_config(cls, cfg: CfmConfig) -> "LossTerms":
        return cls(cfg.use_cls, cfg.use_filter, cfg.use_signal, cfg.filter, cfg.squared_norms)


@dataclass
class BatchEval:
    l_cls: float
    l_filter: float
    l_signal: float
    l_total: float
    emu: list[EmuState]
    grad: np.ndarray | None = None


def evaluate_batch(net: FeatureNet, head: LinearModel, Hs, Ys, real: Sequence[CorrStats],
                   emu: Sequence[EmuState], beta_t: float, eta: float,
                   terms: LossTerms = LossTerms(), need_grad: bool = True) -> BatchEval:
    """Loss of one synthetic batch after folding its statistics into ``emu``.

    Loss values of disabled terms are reported as zero, so the returned total
    is always ``l_cls + eta * (l_filter + l_signal)``.  The previous EMU state
    is a constant: only the current batch's share ``1/b`` is differentiated.
    """
    if len(real) != net.depth or len(emu) != net.depth:
        raise ShapeMismatch("need real statistics and an EMU state for every layer")
    Ys = check_one_hot(Ys, np.asarray(Hs).shape[0])
    acts = forward_activations(net, Hs)
    feats = acts[1:]

    new_emu: list[EmuState] = []
    lf = ls = 0.0
    feature_grads: list[np.ndarray | None] = []
    match = terms.use_filter or terms.use_signal
    for l, (F, r, prev) in enumerate(zip(feats, real, emu)):
        stats = corr_stats(F, Ys)
        state = emu_update(prev, stats)
        new_emu.append(state)
        if not match:
            feature_grads.append(None)
            continue
        lt = _layer_terms(r, state.psi_s, state.phi_s, beta_t, terms.kind, terms.squared)
        lf += lt.l_filter if terms.use_filter else 0.0
        ls += lt.l_signal if terms.use_signal else 0.0
        if need_grad:
            w_f = eta if terms.use_filter else 0.0
            w_s = eta if terms.use_signal else 0.0
            gpsi = (w_f * lt.gpsi_filter + w_s * lt.gpsi_signal) / state.count
            gphi = (w_s * lt.gphi_signal) / state.count
            feature_grads.append(corr_stats_backward(F, Ys, gpsi, gphi))
        else:
            feature_grads.append(None)

    lc = 0.0
    pooled = spatial_average(feats[-1])
    logits = pooled @ head.W
    if terms.use_cls:
        lc = cls_loss(logits, Ys)
        if need_grad:
            dpooled = cls_loss_grad(logits, Ys) @ head.W.T
            h, w = feats[-1].shape[2:]
            g_last = np.broadcast_to(dpooled[:, :, None, None] / (h * w), feats[-1].shape)
            prev_g = feature_grads[-1]
            feature_grads[-1] = g_last if prev_g is None else prev_g + g_last

    grad = None
    if need_grad:
        if all(g is None for g in feature_grads):
            grad = np.zeros_like(np.asarray(Hs, dtype=np.float64))
        else:
            grad = backward(net, acts, feature_grads)
        if not np.all(np.isfinite(grad)):
            raise NonFiniteGradient("gradient w.r.t. synthetic inputs is not finite")
    return BatchEval(lc, lf, ls, total_loss(lc, lf, ls, eta), new_emu, grad)


def grad_synthetic(net: FeatureNet, head: LinearModel, Hs_batch, Ys_batch, real: Sequence[CorrStats],
                   emu: Sequence[EmuState], beta_t: float, eta: float,
                   terms: LossTerms = LossTerms()) -> np.ndarray:
    """Gradient of the total batch loss w.r.t. ``Hs_batch``.

    ``emu`` is the accumulated state *before* this batch is folded in.
    """
    return evaluate_batch(net, head, Hs_batch, Ys_batch, real, emu, beta_t, eta, terms).grad


def batch_loss(net: FeatureNet, head: LinearModel, Hs_batch, Ys_batch, real: Sequence[CorrStats],
               emu: Sequence[EmuState], beta_t: float, eta: float,
               terms: LossTerms = LossTerms()) -> float:
    return evaluate_batch(net, head, Hs_batch, Ys_batch, real, emu, beta_t, eta, terms, need_grad=False).l_total


# ---------------------------------------------------------------------------
# optimisers


class Adam:
    def __init__(self, shape, lr: float, beta1: float, beta2: float, eps: float):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = np.zeros(shape)
        self.v = np.zeros(shape)
        self.t = 0

    def step(self, x: np.ndarray, g: np.ndarray, lr: float | None = None) -> np.ndarray:
        lr = self.lr if lr is None else lr
        self.t += 1
        self.m = self.beta1 * self.m + (1.0 - self.beta1) * g
        self.v = self.beta2 * self.v + (1.0 - self.beta2) * g * g
        m_hat = self.m / (1.0 - self.beta1**self.t)
        v_hat = self.v / (1.0 - self.beta2**self.t)
        return x - lr * m_hat / (np.sqrt(v_hat) + self.eps)


class GradientDescent:
    def __init__(self, lr: float):
        self.lr = lr

    def step(self, x: np.ndarray, g: np.ndarray, lr: float | None = None) -> np.ndarray:
        return x - (self.lr if lr is None else lr) * g


def _make_optimizer(cfg: CfmConfig, shape):
    if cfg.optimizer == "adam":
        return Adam(shape, cfg.lr, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps)
    return GradientDescent(cfg.lr)


def _lr_at(cfg: CfmConfig, i: int) -> float:
    if cfg.lr_schedule == "constant" or cfg.iterations <= 1:
        return cfg.lr
    return cfg.lr * 0.5 * (1.0 + math.cos(math.pi * i / cfg.iterations))


# ---------------------------------------------------------------------------
# distillation loop


def rng_stream(seed: int, name: str) -> np.random.Generator:
    """Independent generator for a named purpose within one run."""
    return np.random.default_rng(np.random.SeedSequence([int(seed), zlib.crc32(name.encode())]))


def synthetic_layout(c: int, ipc: int) -> np.ndarray:
    """Class of each synthetic row: rows cycle through the classes."""
    return np.tile(np.arange(c), ipc)


def run_schedule(cfg: CfmConfig, n_batches: int, floor: float) -> CurriculumSchedule:
    count = n_batches if cfg.curriculum_axis == "per-batch" else cfg.iterations
    return CurriculumSchedule(cfg.beta, max(1, count - 1), floor, cfg.schedule)


def init_synthetic(H, Y, cfg: CfmConfig, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Class-balanced real samples drawn without replacement, in synthetic layout."""
    H = np.asarray(H, dtype=np.float64)
    Y = check_one_hot(Y, H.shape[0])
    c = Y.shape[1]
    labels = np.argmax(Y, axis=1)
    rng = rng_stream(seed, "init-sampling")
    layout = synthetic_layout(c, cfg.ipc)
    Hs = np.empty((layout.size, H.shape[1]))
    for k in range(c):
        pool = np.flatnonzero(labels == k)
        if pool.size < cfg.ipc:
            raise ConfigError(f"class {k} has {pool.size} samples, fewer than ipc={cfg.ipc}")
        picks = rng.choice(pool, size=cfg.ipc, replace=False)
        Hs[layout == k] = H[picks]
    return Hs, np.eye(c)[layout]


def distill(real, squeeze, cfg: CfmConfig, seed: int, config_hash: str = "") -> tuple[SyntheticDataset, LossReport]:
    """Batch-wise curriculum distillation.

    ``real`` needs ``H``/``Y`` arrays (a harness ``Dataset``), ``squeeze``
    needs ``net``, ``head`` and ``real_stats``.  Each batch is initialised
    from real samples, assigned one ridge parameter from the curriculum
    (per-batch axis) and optimised for ``cfg.iterations`` steps with a fresh
    EMU state and optimiser.
    """
    net, head, real_stats = squeeze.net, squeeze.head, list(squeeze.real_stats)
    if len(real_stats) != net.depth:
        raise ConfigError("squeeze statistics do not match the network depth")
    Hs, Ys = init_synthetic(real.H, real.Y, cfg, seed)
    m, c = Ys.shape
    if m % cfg.batch_size:
        raise ConfigError(f"{m} synthetic samples do not split into batches of {cfg.batch_size}")
    n_batches = m // cfg.batch_size
    floor = default_floor(real_stats) if cfg.beta_floor is None else cfg.beta_floor
    schedule = run_schedule(cfg, n_batches, floor)
    terms = LossTerms.from_config(cfg)
    report = LossReport(cfg.eta)
    batch_betas = []
    t = 0
    emu = [EmuState.empty(*s.phi.shape) for s in real_stats]
    for b in range(n_batches):
        rows = slice(b * cfg.batch_size, (b + 1) * cfg.batch_size)
        Hb, Yb = Hs[rows].copy(), Ys[rows]
        if cfg.emu_scope == "batch":
            emu = [EmuState.empty(*s.phi.shape) for s in real_stats]
        opt = _make_optimizer(cfg, Hb.shape)
        batch_betas.append(beta_at(schedule, b) if cfg.curriculum_axis == "per-batch" else beta_at(schedule, 0))
        for i in range(cfg.iterations):
            beta_t = beta_at(schedule, b if cfg.curriculum_axis == "per-batch" else i)
            ev = evaluate_batch(net, head, Hb, Yb, real_stats, emu, beta_t, cfg.eta, terms)
            emu = ev.emu
            report.records.append(LossRecord(t, b, i, beta_t, ev.l_cls, ev.l_filter, ev.l_signal, ev.l_total))
            Hb = opt.step(Hb, ev.grad, _lr_at(cfg, i))
            t += 1
        Hs[rows] = Hb
    if not np.all(np.isfinite(Hs)):
        raise NonFiniteGradient("synthetic inputs diverged")
    provenance = {
        "seed": int(seed),
        "config_hash": config_hash,
        "batch_betas": [float(x) for x in batch_betas],
        "schedule": {"beta_max": schedule.beta_max, "total_steps": schedule.total_steps,
                     "beta_floor": schedule.beta_floor, "kind": schedule.kind,
                     "axis": cfg.curriculum_axis},
    }
    return SyntheticDataset(Hs, Ys, provenance), report


def with_overrides(cfg: CfmConfig, **kw) -> CfmConfig:
    return replace(cfg, **kw)
