"""Classical distillation objectives and their filter-form equivalents.

With features ``X`` (n x d), one-hot labels ``Y`` (n x c) and their synthetic
counterparts ``Xs``/``Ys``, every objective here compares a filtered
feature-feature matrix ``f(X^T X)`` applied to either the identity or the
feature-label matrix ``X^T Y``.

Gradient convention: :func:`grad_classifier` returns ``X^T (X W - Y)``,
i.e. half the true gradient of ``||X W - Y||_F^2``.  The gradient-descent
trajectories below are built on that convention.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from . import spectral
from .errors import IdentityViolation, ShapeMismatch, SingularSystem, UnstableFilter
from .spectral import FilterSpec, HighPassPower, TrajectoryPolySum

IDENTITY_RTOL = 1e-9


class GMode(enum.Enum):
    IDENTITY = "identity"
    FLC = "flc"


@dataclass(frozen=True)
class LinearModel:
    W: np.ndarray

    def __post_init__(self):
        W = np.asarray(self.W, dtype=np.float64)
        if W.ndim != 2:
            raise ShapeMismatch(f"weights must be d x c, got {W.shape}")
        if not np.all(np.isfinite(W)):
            raise ValueError("weights must be finite")
        object.__setattr__(self, "W", W)

    def predict(self, X) -> np.ndarray:
        return np.asarray(X) @ self.W


@dataclass(frozen=True)
class TrajectoryConfig:
    alpha: float
    P: int
    Q: int
    W0: LinearModel

    def __post_init__(self):
        if not self.alpha > 0:
            raise ValueError("alpha must be positive")
        if self.P < 1 or self.Q < 1:
            raise ValueError("P and Q must be at least 1")


@dataclass(frozen=True)
class GradientMatchTerms:
    native: float
    ffc_term: float
    flc_term: float
    identity_error: float

    @property
    def bound(self) -> float:
        """Factor-2 bound that always holds: ``2 (ffc_term + flc_term)``."""
        return 2.0 * (self.ffc_term + self.flc_term)

    @property
    def unscaled_bound(self) -> float:
        """The unscaled bound ``ffc_term + flc_term``, which can fail."""
        return self.ffc_term + self.flc_term


@dataclass(frozen=True)
class TrajectoryMatchTerms:
    native: float
    operator_term: float  # ||A^P - B^Q||^2
    signal_term: float  # alpha * ||sum A^p X^T Y - sum B^q Xs^T Ys||^2
    w0_sq: float
    alpha: float
    identity_error: float

    @property
    def bound(self) -> float:
        # ||(A^P - B^Q) W0 + alpha S||^2 <= 2 ||W0||^2 ||A^P - B^Q||^2 + 2 alpha^2 ||S||^2
        return 2.0 * (self.w0_sq * self.operator_term + self.alpha * self.signal_term)

    @property
    def unscaled_bound(self) -> float:
        return self.operator_term + self.signal_term


def _fro2(A) -> float:
    return float(np.sum(np.square(A)))


def _rel_err(a, b) -> float:
    a = np.asarray(a)
    b = np.asarray(b)
    return float(np.linalg.norm(a - b) / max(1.0, np.linalg.norm(b)))


def _pairs(X, Y, Xs=None, Ys=None):
    X = np.asarray(X, dtype=np.float64)
    Y = np.asarray(Y, dtype=np.float64)
    if X.ndim != 2 or Y.ndim != 2 or X.shape[0] != Y.shape[0]:
        raise ShapeMismatch(f"X {X.shape} and Y {Y.shape} must have matching rows")
    if Xs is None:
        return X, Y
    Xs = np.asarray(Xs, dtype=np.float64)
    Ys = np.asarray(Ys, dtype=np.float64)
    if Xs.ndim != 2 or Ys.ndim != 2 or Xs.shape[0] != Ys.shape[0]:
        raise ShapeMismatch(f"Xs {Xs.shape} and Ys {Ys.shape} must have matching rows")
    if Xs.shape[1] != X.shape[1]:
        raise ShapeMismatch(f"feature dims differ: {X.shape[1]} vs {Xs.shape[1]}")
    if Ys.shape[1] != Y.shape[1]:
        raise ShapeMismatch(f"class counts differ: {Y.shape[1]} vs {Ys.shape[1]}")
    return X, Y, Xs, Ys


def _solve_spd(A, B) -> np.ndarray:
    try:
        return np.linalg.solve(A, B)
    except np.linalg.LinAlgError as exc:
        raise SingularSystem(str(exc)) from exc


def _check_beta(beta: float) -> None:
    if not beta > 0:
        raise ValueError(f"beta must be positive, got {beta}")


# ---------------------------------------------------------------------------
# unified objective


def filtered_term(f: FilterSpec, g: GMode, X, Y) -> np.ndarray:
    """``f(X^T X) g(X^T Y)`` via the spectral route."""
    ffc = X.T @ X
    signal = np.eye(X.shape[1]) if g is GMode.IDENTITY else X.T @ Y
    return spectral.apply_filter_spectral(f, ffc, signal)


def unified_loss(f: FilterSpec, g: GMode, X, Y, Xs, Ys) -> float:
    X, Y, Xs, Ys = _pairs(X, Y, Xs, Ys)
    g = GMode(g)
    return _fro2(filtered_term(f, g, X, Y) - filtered_term(f, g, Xs, Ys))


def dm_loss(X, Y, Xs, Ys) -> float:
    X, Y, Xs, Ys = _pairs(X, Y, Xs, Ys)
    return _fro2(X.T @ Y - Xs.T @ Ys)


def ffc_loss(X, Xs) -> float:
    """``||X^T X - Xs^T Xs||_F^2``."""
    X = np.asarray(X, dtype=np.float64)
    Xs = np.asarray(Xs, dtype=np.float64)
    if X.shape[1] != Xs.shape[1]:
        raise ShapeMismatch("feature dims differ")
    return _fro2(X.T @ X - Xs.T @ Xs)


def srel_bn_loss(X, Xs) -> float:
    """Diagonal second moments plus column means, as in BN-statistics matching."""
    X = np.asarray(X, dtype=np.float64)
    Xs = np.asarray(Xs, dtype=np.float64)
    if X.ndim != 2 or Xs.ndim != 2 or X.shape[1] != Xs.shape[1]:
        raise ShapeMismatch(f"feature dims differ: {X.shape} vs {Xs.shape}")
    diag = np.sum(X * X, axis=0) - np.sum(Xs * Xs, axis=0)
    avg = X.mean(axis=0) - Xs.mean(axis=0)
    return _fro2(diag) + _fro2(avg)


# ---------------------------------------------------------------------------
# gradient matching


def grad_classifier(X, Y, W) -> np.ndarray:
    X, Y = _pairs(X, Y)
    W = W.W if isinstance(W, LinearModel) else np.asarray(W, dtype=np.float64)
    if W.shape != (X.shape[1], Y.shape[1]):
        raise ShapeMismatch(f"W must be {X.shape[1]} x {Y.shape[1]}, got {W.shape}")
    return X.T @ (X @ W - Y)


def gradient_match_decomposition(X, Y, Xs, Ys, W, rtol: float = 1e-10) -> GradientMatchTerms:
    X, Y, Xs, Ys = _pairs(X, Y, Xs, Ys)
    W = W.W if isinstance(W, LinearModel) else np.asarray(W, dtype=np.float64)
    diff = grad_classifier(X, Y, W) - grad_classifier(Xs, Ys, W)
    d_ffc = X.T @ X - Xs.T @ Xs
    d_flc = X.T @ Y - Xs.T @ Ys
    err = _rel_err(diff, d_ffc @ W - d_flc)
    if err > rtol:
        raise IdentityViolation(f"gradient difference identity off by {err:.3e}")
    return GradientMatchTerms(
        native=_fro2(diff),
        ffc_term=_fro2(W) * _fro2(d_ffc),
        flc_term=_fro2(d_flc),
        identity_error=err,
    )


# ---------------------------------------------------------------------------
# trajectory matching


def _check_step(X, alpha: float) -> None:
    lam_max = float(np.linalg.eigvalsh(X.T @ X)[-1]) if X.shape[1] else 0.0
    if alpha * lam_max >= 1.0:
        raise UnstableFilter(f"alpha * lambda_max = {alpha * lam_max:.6g} >= 1")


def gd_trajectory(X, Y, cfg: TrajectoryConfig, K: int) -> LinearModel:
    """``K`` full-batch steps ``W <- W - alpha X^T (X W - Y)`` from ``cfg.W0``."""
    X, Y = _pairs(X, Y)
    if K < 0:
        raise ValueError("K must be non-negative")
    _check_step(X, cfg.alpha)
    W = cfg.W0.W.copy()
    for _ in range(K):
        W = W - cfg.alpha * grad_classifier(X, Y, W)
    return LinearModel(W)


def gd_closed_form(X, Y, cfg: TrajectoryConfig, K: int) -> LinearModel:
    """``(I - a X^T X)^K W0 + a sum_{k<K} (I - a X^T X)^k X^T Y`` through the eigenbasis."""
    X, Y = _pairs(X, Y)
    if K < 0:
        raise ValueError("K must be non-negative")
    _check_step(X, cfg.alpha)
    W0 = cfg.W0.W
    if K == 0:
        return LinearModel(W0.copy())
    spec = spectral.eig_psd(X.T @ X)
    decay = spectral.apply_with_spectrum(HighPassPower(cfg.alpha, K), spec, W0)
    drive = spectral.apply_with_spectrum(TrajectoryPolySum(cfg.alpha, K), spec, X.T @ Y)
    return LinearModel(decay + cfg.alpha * drive)


def _poly_sum_direct(ffc, alpha: float, steps: int, S) -> np.ndarray:
    return spectral.apply_filter_direct(TrajectoryPolySum(alpha, steps), ffc, S)


def mtt_decomposition(X, Y, Xs, Ys, cfg: TrajectoryConfig, rtol: float = IDENTITY_RTOL) -> TrajectoryMatchTerms:
    """Split ``||W^P - Ws^Q||^2`` into operator and signal parts.

    ``native`` comes from the closed form; the identity check rebuilds the
    difference from direct matrix powers and sums.
    """
    X, Y, Xs, Ys = _pairs(X, Y, Xs, Ys)
    alpha, P, Q, W0 = cfg.alpha, cfg.P, cfg.Q, cfg.W0.W
    _check_step(X, alpha)
    _check_step(Xs, alpha)
    d = X.shape[1]
    A = np.eye(d) - alpha * (X.T @ X)
    B = np.eye(d) - alpha * (Xs.T @ Xs)
    AP = np.linalg.matrix_power(A, P)
    BQ = np.linalg.matrix_power(B, Q)
    sig = _poly_sum_direct(X.T @ X, alpha, P, X.T @ Y) - _poly_sum_direct(Xs.T @ Xs, alpha, Q, Xs.T @ Ys)

    diff = gd_closed_form(X, Y, cfg, P).W - gd_closed_form(Xs, Ys, cfg, Q).W
    rebuilt = (AP - BQ) @ W0 + alpha * sig
    err = _rel_err(diff, rebuilt)
    if err > rtol:
        raise IdentityViolation(f"trajectory difference identity off by {err:.3e}")
    return TrajectoryMatchTerms(
        native=_fro2(diff),
        operator_term=_fro2(AP - BQ),
        signal_term=alpha * _fro2(sig),
        w0_sq=_fro2(W0),
        alpha=alpha,
        identity_error=err,
    )


# ---------------------------------------------------------------------------
# kernel ridge regression


def krr_ridge_solution(X, Y, beta: float) -> LinearModel:
    """``(X^T X + beta I)^{-1} X^T Y``."""
    X, Y = _pairs(X, Y)
    _check_beta(beta)
    return LinearModel(_solve_spd(X.T @ X + beta * np.eye(X.shape[1]), X.T @ Y))


def krr_dual_weights(Xs, Ys, beta: float) -> np.ndarray:
    """Primal weights from the Gram form, ``Xs^T (Xs Xs^T + beta I)^{-1} Ys``."""
    Xs, Ys = _pairs(Xs, Ys)
    _check_beta(beta)
    return Xs.T @ _solve_spd(Xs @ Xs.T + beta * np.eye(Xs.shape[0]), Ys)


def ridge_gradient(X, Y, W, beta: float) -> np.ndarray:
    """True gradient of ``||X W - Y||^2 + beta ||W||^2``."""
    W = W.W if isinstance(W, LinearModel) else np.asarray(W, dtype=np.float64)
    return 2.0 * X.T @ (X @ W - Y) + 2.0 * beta * W


def krr_gram_gradient(K, W, Y, beta: float) -> np.ndarray:
    """True gradient of ``||K W - Y||^2 + beta tr(W^T K W)``.

    Its zero is ``W = (K + beta I)^{-1} Y`` for symmetric invertible ``K``.
    """
    K = np.asarray(K, dtype=np.float64)
    return 2.0 * K.T @ (K @ W - Y) + beta * (K @ W + K.T @ W)


def krr_loss_gram(X, Y, Xs, Ys, beta: float) -> float:
    """Residual of the linear-kernel predictor fitted on the synthetic set, on real data."""
    X, Y, Xs, Ys = _pairs(X, Y, Xs, Ys)
    _check_beta(beta)
    coef = _solve_spd(Xs @ Xs.T + beta * np.eye(Xs.shape[0]), Ys)
    return _fro2(Y - X @ (Xs.T @ coef))


def krr_loss_unified(X, Y, Xs, Ys, beta: float) -> float:
    X, Y, Xs, Ys = _pairs(X, Y, Xs, Ys)
    return _fro2(krr_ridge_solution(X, Y, beta).W - krr_ridge_solution(Xs, Ys, beta).W)


def verify_identity_transform(Xs, beta: float) -> float:
    """Max abs difference between ``Xs^T (Xs Xs^T + bI)^{-1}`` and ``(Xs^T Xs + bI)^{-1} Xs^T``."""
    Xs = np.asarray(Xs, dtype=np.float64)
    if Xs.ndim != 2:
        raise ShapeMismatch("Xs must be a matrix")
    _check_beta(beta)
    m, d = Xs.shape
    # (G^{-1})^T = G^{-1} for the symmetric Gram shift
    left = _solve_spd(Xs @ Xs.T + beta * np.eye(m), Xs).T
    right = _solve_spd(Xs.T @ Xs + beta * np.eye(d), Xs.T)
    return float(np.max(np.abs(left - right))) if left.size else 0.0
