"""Eigendecomposition of PSD correlation matrices and spectral filters.

A filter ``f`` acts on a PSD matrix ``M = U diag(lam) U^T`` through its
eigenvalues, ``f(M) S = U f(diag(lam)) U^T S``.  Large eigenvalues are low
frequencies, so a filter that grows with ``lam`` is low-pass and one that
shrinks with ``lam`` is high-pass.

Two routes are provided for every filter: :func:`apply_filter_spectral`
goes through :func:`eig_psd`, :func:`apply_filter_direct` uses plain matrix
algebra (products, shifted solves, repeated multiplication).  They are meant
to check each other.
"""

from __future__ import annotations

import csv
import enum
from dataclasses import dataclass
from typing import Sequence, Union

import numpy as np

from .errors import NoConvergence, NotPsd, NotSymmetric, ShapeMismatch, SingularSystem, UnstableFilter

SYMMETRY_RTOL = 1e-10
PSD_RTOL = 1e-8
MAX_CONDITION = 1e12


# ---------------------------------------------------------------------------
# filter specifications


@dataclass(frozen=True)
class AllPass:
    """f(lam) = 1."""

    @property
    def label(self) -> str:
        return "all-pass"


@dataclass(frozen=True)
class LowPassLinear:
    """f(lam) = lam."""

    @property
    def label(self) -> str:
        return "low-pass-linear"


@dataclass(frozen=True)
class HighPassPower:
    """f(lam) = (1 - alpha * lam) ** exponent, one gradient-descent step operator raised to a power."""

    alpha: float
    exponent: int

    def __post_init__(self):
        if not self.alpha > 0:
            raise ValueError(f"alpha must be positive, got {self.alpha}")
        if int(self.exponent) != self.exponent or self.exponent < 0:
            raise ValueError(f"exponent must be a non-negative integer, got {self.exponent}")
        object.__setattr__(self, "exponent", int(self.exponent))

    @property
    def label(self) -> str:
        return f"power(alpha={self.alpha:g},P={self.exponent})"


@dataclass(frozen=True)
class HighPassShiftInverse:
    """f(lam) = 1 / (lam + beta), the ridge filter."""

    beta: float

    def __post_init__(self):
        if not self.beta >= 0:
            raise ValueError(f"beta must be non-negative, got {self.beta}")

    @property
    def label(self) -> str:
        return f"shift-inverse(beta={self.beta:g})"


@dataclass(frozen=True)
class TrajectoryPolySum:
    """f(lam) = sum_{p=0}^{horizon-1} (1 - alpha * lam) ** p."""

    alpha: float
    horizon: int

    def __post_init__(self):
        if not self.alpha > 0:
            raise ValueError(f"alpha must be positive, got {self.alpha}")
        if int(self.horizon) != self.horizon or self.horizon < 1:
            raise ValueError(f"horizon must be a positive integer, got {self.horizon}")
        object.__setattr__(self, "horizon", int(self.horizon))

    @property
    def label(self) -> str:
        return f"poly-sum(alpha={self.alpha:g},P={self.horizon})"


FilterSpec = Union[AllPass, LowPassLinear, HighPassPower, HighPassShiftInverse, TrajectoryPolySum]

ALL_VARIANTS = (AllPass, LowPassLinear, HighPassPower, HighPassShiftInverse, TrajectoryPolySum)


class FilterClass(str, enum.Enum):
    ALL_PASS = "all-pass"
    LOW_PASS = "low-pass"
    HIGH_PASS = "high-pass"
    MIXED = "mixed"


# ---------------------------------------------------------------------------
# eigendecomposition


@dataclass(frozen=True)
class Spectrum:
    eigvecs: np.ndarray
    eigvals: np.ndarray

    def reconstruct(self) -> np.ndarray:
        return (self.eigvecs * self.eigvals) @ self.eigvecs.T


def _square(M) -> np.ndarray:
    M = np.asarray(M, dtype=np.float64)
    if M.ndim != 2 or M.shape[0] != M.shape[1]:
        raise ShapeMismatch(f"expected a square matrix, got shape {M.shape}")
    if not np.all(np.isfinite(M)):
        raise ValueError("matrix has non-finite entries")
    return M


def check_symmetric(M) -> np.ndarray:
    """Return ``M`` as float64 after checking symmetry to 1e-10 relative."""
    M = _square(M)
    scale = max(1.0, float(np.max(np.abs(M)))) if M.size else 1.0
    asym = float(np.max(np.abs(M - M.T))) if M.size else 0.0
    if asym > SYMMETRY_RTOL * scale:
        raise NotSymmetric(f"max |M - M^T| = {asym:.3e} exceeds {SYMMETRY_RTOL:g} * {scale:.3e}")
    return M


def eig_psd(M) -> Spectrum:
    """Eigendecomposition of a symmetric PSD matrix, eigenvalues descending.

    Small negative eigenvalues (above ``-1e-8 * max(1, lam_1)``) are clamped
    to zero; anything more negative raises :class:`NotPsd`.
    """
    M = check_symmetric(M)
    sym = 0.5 * (M + M.T)
    try:
        w, V = np.linalg.eigh(sym)
    except np.linalg.LinAlgError as exc:  # pragma: no cover - LAPACK failure
        raise NoConvergence(str(exc)) from exc
    order = np.argsort(w)[::-1]
    w = w[order]
    V = V[:, order]
    top = max(1.0, float(w[0])) if w.size else 1.0
    if w.size and w[-1] < -PSD_RTOL * top:
        raise NotPsd(f"minimum eigenvalue {w[-1]:.3e} below -{PSD_RTOL:g} * {top:.3e}")
    w = np.maximum(w, 0.0)
    V = np.ascontiguousarray(V)
    w.setflags(write=False)
    V.setflags(write=False)
    return Spectrum(eigvecs=V, eigvals=w)


# ---------------------------------------------------------------------------
# filter responses


def _check_stable(spec: FilterSpec, lam_max: float, inclusive: bool) -> None:
    if isinstance(spec, (HighPassPower, TrajectoryPolySum)):
        prod = spec.alpha * lam_max
        if prod > 1.0 or (inclusive and prod >= 1.0):
            raise UnstableFilter(
                f"{spec.label}: alpha * lambda = {prod:.6g} is outside the stable range"
            )


def filter_response_array(spec: FilterSpec, lam) -> np.ndarray:
    """Vectorised filter response.  No stability check, callers do that."""
    lam = np.asarray(lam, dtype=np.float64)
    if isinstance(spec, AllPass):
        return np.ones_like(lam)
    if isinstance(spec, LowPassLinear):
        return lam.copy()
    if isinstance(spec, HighPassPower):
        return (1.0 - spec.alpha * lam) ** spec.exponent
    if isinstance(spec, HighPassShiftInverse):
        shifted = lam + spec.beta
        if np.any(shifted <= 0.0):
            raise SingularSystem(f"{spec.label}: lambda + beta is zero")
        return 1.0 / shifted
    if isinstance(spec, TrajectoryPolySum):
        base = 1.0 - spec.alpha * lam
        acc = np.zeros_like(lam)
        term = np.ones_like(lam)
        for _ in range(spec.horizon):
            acc = acc + term
            term = term * base
        return acc
    raise TypeError(f"unknown filter spec {spec!r}")


def filter_response(spec: FilterSpec, lam: float) -> float:
    """Scalar ``f(lam)``.

    For the power and poly-sum filters ``alpha * lam`` may reach 1 (where the
    step operator is exactly zero) but not exceed it.
    """
    lam = float(lam)
    if lam < 0:
        raise ValueError(f"lambda must be non-negative, got {lam}")
    _check_stable(spec, lam, inclusive=False)
    return float(filter_response_array(spec, lam))


def classify_filter(spec: FilterSpec, lam_grid: Sequence[float]) -> FilterClass:
    grid = np.asarray(lam_grid, dtype=np.float64)
    if grid.ndim != 1 or grid.size < 2:
        raise ValueError("lambda grid needs at least two points")
    if np.any(np.diff(grid) <= 0) or grid[0] < 0:
        raise ValueError("lambda grid must be ascending and non-negative")
    values = np.array([filter_response(spec, lam) for lam in grid])
    tol = 1e-12 * max(1.0, float(np.max(np.abs(values))))
    if np.all(np.abs(values - 1.0) <= tol):
        return FilterClass.ALL_PASS
    steps = np.diff(values)
    if np.all(steps >= -tol):
        return FilterClass.LOW_PASS
    if np.all(steps <= tol):
        return FilterClass.HIGH_PASS
    return FilterClass.MIXED


# ---------------------------------------------------------------------------
# applying filters


def _signal(S, d: int) -> tuple[np.ndarray, bool]:
    S = np.asarray(S, dtype=np.float64)
    vector = S.ndim == 1
    if vector:
        S = S[:, None]
    if S.ndim != 2 or S.shape[0] != d:
        raise ShapeMismatch(f"signal must have {d} rows, got shape {S.shape}")
    return S, vector


def apply_with_spectrum(spec: FilterSpec, spectrum: Spectrum, S) -> np.ndarray:
    U, lam = spectrum.eigvecs, spectrum.eigvals
    S2, vector = _signal(S, U.shape[0])
    if isinstance(spec, AllPass):
        out = S2.copy()
    else:
        if lam.size:
            _check_stable(spec, float(lam[0]), inclusive=True)
        f = filter_response_array(spec, lam)
        out = U @ (f[:, None] * (U.T @ S2))
    return out[:, 0] if vector else out


def apply_filter_spectral(spec: FilterSpec, M, S) -> np.ndarray:
    """``U f(Lambda) U^T S``.  The all-pass filter returns ``S`` unchanged."""
    if isinstance(spec, AllPass):
        M = check_symmetric(M)
        S2, vector = _signal(S, M.shape[0])
        out = S2.copy()
        return out[:, 0] if vector else out
    return apply_with_spectrum(spec, eig_psd(M), S)


def apply_filter_direct(spec: FilterSpec, M, S) -> np.ndarray:
    """``f(M) S`` without an eigendecomposition.

    The stability guard for the power filters uses the spectral norm of
    ``M`` (its largest eigenvalue when ``M`` is PSD), computed via SVD.
    """
    M = check_symmetric(M)
    d = M.shape[0]
    S2, vector = _signal(S, d)
    if isinstance(spec, AllPass):
        out = S2.copy()
    elif isinstance(spec, LowPassLinear):
        out = M @ S2
    elif isinstance(spec, HighPassShiftInverse):
        shifted = M + spec.beta * np.eye(d)
        cond = np.linalg.cond(shifted)
        if not np.isfinite(cond) or cond >= MAX_CONDITION:
            raise SingularSystem(f"M + beta I has condition number {cond:.3e}")
        out = np.linalg.solve(shifted, S2)
    elif isinstance(spec, (HighPassPower, TrajectoryPolySum)):
        lam_max = float(np.linalg.norm(M, 2)) if d else 0.0
        _check_stable(spec, lam_max, inclusive=True)
        steps = spec.exponent if isinstance(spec, HighPassPower) else spec.horizon
        term = S2.copy()
        if isinstance(spec, HighPassPower):
            for _ in range(steps):
                term = term - spec.alpha * (M @ term)
            out = term
        else:
            out = np.zeros_like(S2)
            for _ in range(steps):
                out += term
                term = term - spec.alpha * (M @ term)
    else:
        raise TypeError(f"unknown filter spec {spec!r}")
    return out[:, 0] if vector else out


def filter_matrix(spec: FilterSpec, M) -> np.ndarray:
    """``f(M)`` itself, via the spectral route."""
    M = check_symmetric(M)
    return apply_filter_spectral(spec, M, np.eye(M.shape[0]))


# ---------------------------------------------------------------------------
# export


def response_grid(specs: Sequence[FilterSpec], grid) -> np.ndarray:
    """Responses of several filters over a grid, shape ``(len(grid), len(specs))``.

    Raises :class:`UnstableFilter` if any grid point leaves a power filter's
    stable range (``alpha * lam >= 1``).
    """
    grid = np.asarray(grid, dtype=np.float64)
    if grid.size and np.any(grid < 0):
        raise ValueError("lambda grid must be non-negative")
    cols = []
    for spec in specs:
        if grid.size:
            _check_stable(spec, float(np.max(grid)), inclusive=True)
        cols.append(filter_response_array(spec, grid))
    return np.column_stack(cols) if cols else np.empty((grid.size, 0))


def write_response_csv(path, grid, specs: Sequence[FilterSpec], labels: Sequence[str] | None = None) -> None:
    """Write ``lambda`` plus one response column per filter.

    A single unlabeled filter gets the header ``lambda,response``.
    """
    grid = np.asarray(grid, dtype=np.float64)
    table = response_grid(specs, grid)
    if labels is None:
        labels = ["response"] if len(specs) == 1 else [s.label for s in specs]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["lambda", *labels])
        for lam, row in zip(grid, table):
            writer.writerow([repr(float(lam)), *(repr(float(v)) for v in row)])
