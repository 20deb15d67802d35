"""Fixed feature network and per-layer correlation statistics.

The network is a stack of affine (flat mode) or 3x3 same-padded convolution
(spatial mode) layers followed by ``tanh``.  Its weights are drawn once from
a seeded Glorot-uniform distribution and never change.

For each layer output ``X`` of shape ``n x d x h x w``:

* ``reshape_channels`` gives the ``nhw x d`` channel matrix,
* ``spatial_average`` gives the ``n x d`` pooled matrix,
* ``corr_stats`` gives the centered channel covariance ``psi`` (divisor
  ``nhw``) and the class-sum matrix ``phi = pooled^T Y / n``.
"""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass
from typing import BinaryIO, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import DegenerateBatch, FormatError, InvalidConfig, NonFiniteActivation, ShapeMismatch

MODES = ("flat", "spatial")
KERNEL = 3


def _frozen(a) -> np.ndarray:
    a = np.array(a, dtype=np.float64, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class FixedLayer:
    # flat: (d_in, d_out); spatial: (d_out, d_in, 3, 3)
    weight: np.ndarray
    bias: np.ndarray
    nonlinearity: str = "tanh"


@dataclass(frozen=True)
class FeatureNet:
    layers: tuple[FixedLayer, ...]
    widths: tuple[int, ...]
    seed: int
    mode: str = "flat"
    spatial_size: int = 1

    @property
    def depth(self) -> int:
        return len(self.layers)

    @property
    def input_dim(self) -> int:
        """Number of columns expected in the input matrix."""
        return self.widths[0] * self.spatial_size**2

    def config(self) -> dict:
        return {
            "widths": list(self.widths),
            "mode": self.mode,
            "seed": int(self.seed),
            "spatial_size": int(self.spatial_size),
        }


@dataclass(frozen=True)
class FeatureMap:
    tensor: np.ndarray
    layer_index: int

    @property
    def shape(self) -> tuple[int, ...]:
        return self.tensor.shape


@dataclass(frozen=True)
class CorrStats:
    psi: np.ndarray
    phi: np.ndarray

    @property
    def dims(self) -> tuple[int, int]:
        return self.phi.shape


@dataclass(frozen=True)
class EmuState:
    psi_s: np.ndarray
    phi_s: np.ndarray
    count: int = 0

    @classmethod
    def empty(cls, d: int, c: int) -> "EmuState":
        return cls(np.zeros((d, d)), np.zeros((d, c)), 0)

    def as_stats(self) -> CorrStats:
        return CorrStats(self.psi_s, self.phi_s)


# ---------------------------------------------------------------------------
# network


def build_net(widths: Sequence[int], mode: str = "flat", seed: int = 0, spatial_size: int = 4) -> FeatureNet:
    """Build a fixed network with layer widths ``widths[0] -> widths[1] -> ...``.

    ``widths[0]`` is the input width (channels in spatial mode), so at least
    two entries are needed.  In flat mode ``spatial_size`` is forced to 1.
    """
    widths = tuple(int(w) for w in widths)
    if len(widths) < 2:
        raise InvalidConfig("need an input width and at least one layer width")
    if any(w <= 0 for w in widths):
        raise InvalidConfig(f"widths must be positive, got {widths}")
    if mode not in MODES:
        raise InvalidConfig(f"mode must be one of {MODES}, got {mode!r}")
    if seed < 0:
        raise InvalidConfig("seed must be non-negative")
    if mode == "flat":
        spatial_size = 1
    elif spatial_size < 1:
        raise InvalidConfig("spatial_size must be positive")

    rng = np.random.default_rng(seed)
    layers = []
    for fan_in, fan_out in zip(widths[:-1], widths[1:]):
        if mode == "flat":
            s = np.sqrt(6.0 / (fan_in + fan_out))
            shape = (fan_in, fan_out)
        else:
            s = np.sqrt(6.0 / (KERNEL * KERNEL * (fan_in + fan_out)))
            shape = (fan_out, fan_in, KERNEL, KERNEL)
        weight = rng.uniform(-s, s, size=shape)
        bias = rng.uniform(-s, s, size=fan_out)
        layers.append(FixedLayer(_frozen(weight), _frozen(bias)))
    return FeatureNet(tuple(layers), widths, int(seed), mode, int(spatial_size))


def _im2col(x: np.ndarray) -> np.ndarray:
    # (n, c, h, w) -> (n, h, w, c * 9), same padding
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    win = sliding_window_view(xp, (KERNEL, KERNEL), axis=(2, 3))  # n, c, h, w, 3, 3
    n, c, h, w = x.shape
    return win.transpose(0, 2, 3, 1, 4, 5).reshape(n, h, w, c * KERNEL * KERNEL)


def _col2im(cols: np.ndarray, c: int) -> np.ndarray:
    # adjoint of _im2col
    n, h, w, _ = cols.shape
    cols = cols.reshape(n, h, w, c, KERNEL, KERNEL)
    xp = np.zeros((n, c, h + 2, w + 2))
    for ki in range(KERNEL):
        for kj in range(KERNEL):
            xp[:, :, ki : ki + h, kj : kj + w] += cols[..., ki, kj].transpose(0, 3, 1, 2)
    return xp[:, :, 1:-1, 1:-1]


def _layer_pre(layer: FixedLayer, x: np.ndarray, mode: str) -> np.ndarray:
    if mode == "flat":
        z = x[:, :, 0, 0] @ layer.weight + layer.bias
        return z[:, :, None, None]
    d_out = layer.weight.shape[0]
    cols = _im2col(x)
    z = cols @ layer.weight.reshape(d_out, -1).T + layer.bias
    return z.transpose(0, 3, 1, 2)


def _layer_back(layer: FixedLayer, x: np.ndarray, dz: np.ndarray, mode: str) -> np.ndarray:
    if mode == "flat":
        return (dz[:, :, 0, 0] @ layer.weight.T)[:, :, None, None]
    d_out, d_in = layer.weight.shape[:2]
    dcols = dz.transpose(0, 2, 3, 1) @ layer.weight.reshape(d_out, -1)
    return _col2im(dcols, d_in)


def input_tensor(net: FeatureNet, H) -> np.ndarray:
    H = np.asarray(H, dtype=np.float64)
    if H.ndim != 2 or H.shape[1] != net.input_dim:
        raise ShapeMismatch(f"input must be n x {net.input_dim}, got {H.shape}")
    s = net.spatial_size
    return H.reshape(H.shape[0], net.widths[0], s, s)


def forward_activations(net: FeatureNet, H) -> list[np.ndarray]:
    """All activations ``[A_0, A_1, ..., A_L]`` as ``n x d x h x w`` tensors."""
    acts = [input_tensor(net, H)]
    for layer in net.layers:
        a = np.tanh(_layer_pre(layer, acts[-1], net.mode))
        if not np.all(np.isfinite(a)):
            raise NonFiniteActivation(f"layer {len(acts)} produced non-finite values")
        acts.append(a)
    return acts


def forward(net: FeatureNet, H) -> list[FeatureMap]:
    acts = forward_activations(net, H)
    return [FeatureMap(a, i) for i, a in enumerate(acts[1:], start=1)]


def backward(net: FeatureNet, acts: list[np.ndarray], feature_grads: Sequence[np.ndarray | None]) -> np.ndarray:
    """Reverse pass: gradient w.r.t. the input matrix.

    ``feature_grads[l-1]`` is the loss gradient with respect to layer ``l``'s
    output tensor (``None`` when the layer does not feed the loss directly).
    Returns an array shaped like the original ``n x d_in`` input.
    """
    if len(feature_grads) != net.depth:
        raise ShapeMismatch("need one feature gradient (or None) per layer")
    upstream = np.zeros_like(acts[-1])
    for l in range(net.depth, 0, -1):
        g = feature_grads[l - 1]
        if g is not None:
            upstream = upstream + g
        dz = upstream * (1.0 - acts[l] ** 2)
        upstream = _layer_back(net.layers[l - 1], acts[l - 1], dz, net.mode)
    return upstream.reshape(upstream.shape[0], -1)


# ---------------------------------------------------------------------------
# statistics


def _tensor(F) -> np.ndarray:
    t = F.tensor if isinstance(F, FeatureMap) else np.asarray(F, dtype=np.float64)
    if t.ndim == 2:
        t = t[:, :, None, None]
    if t.ndim != 4:
        raise ShapeMismatch(f"feature map must be n x d x h x w, got {t.shape}")
    return t


def reshape_channels(F) -> np.ndarray:
    """``nhw x d`` matrix; row ``i*hw + p`` is sample ``i`` at spatial position ``p`` (row-major)."""
    t = _tensor(F)
    n, d, h, w = t.shape
    return t.transpose(0, 2, 3, 1).reshape(n * h * w, d)


def unreshape_channels(Xhat, n: int, h: int, w: int) -> np.ndarray:
    Xhat = np.asarray(Xhat)
    d = Xhat.shape[1]
    return Xhat.reshape(n, h, w, d).transpose(0, 3, 1, 2)


def spatial_average(F) -> np.ndarray:
    return _tensor(F).mean(axis=(2, 3))


def check_one_hot(Y, n: int | None = None) -> np.ndarray:
    Y = np.asarray(Y, dtype=np.float64)
    if Y.ndim != 2:
        raise ShapeMismatch(f"labels must be n x c, got {Y.shape}")
    if n is not None and Y.shape[0] != n:
        raise ShapeMismatch(f"labels have {Y.shape[0]} rows, expected {n}")
    ok = np.all((Y == 0.0) | (Y == 1.0)) and np.all(Y.sum(axis=1) == 1.0)
    if not ok:
        raise ShapeMismatch("label rows must be one-hot")
    return Y


def corr_stats(F, Y) -> CorrStats:
    t = _tensor(F)
    n = t.shape[0]
    if n < 2:
        raise DegenerateBatch(f"need at least 2 samples, got {n}")
    Y = check_one_hot(Y, n)
    Xhat = reshape_channels(t)
    centered = Xhat - Xhat.mean(axis=0)
    psi = centered.T @ centered / Xhat.shape[0]
    psi = 0.5 * (psi + psi.T)
    phi = spatial_average(t).T @ Y / n
    return CorrStats(psi, phi)


def corr_stats_backward(F, Y, grad_psi, grad_phi) -> np.ndarray:
    """Pull gradients on ``(psi, phi)`` back to the feature tensor.

    Gradient w.r.t. ``psi`` is symmetrised first, since ``psi`` is symmetric
    by construction.  The centering term drops out because centered rows sum
    to zero.
    """
    t = _tensor(F)
    n, d, h, w = t.shape
    Xhat = reshape_channels(t)
    centered = Xhat - Xhat.mean(axis=0)
    g = np.zeros_like(t)
    if grad_psi is not None:
        gsym = grad_psi + grad_psi.T
        dXhat = centered @ gsym / Xhat.shape[0]
        g = g + unreshape_channels(dXhat, n, h, w)
    if grad_phi is not None:
        dpooled = np.asarray(Y) @ grad_phi.T / n
        g = g + dpooled[:, :, None, None] / (h * w)
    return g


def emu_update(state: EmuState, batch: CorrStats) -> EmuState:
    """Running-mean update: with the new count ``b``, ``s <- batch / b + (1 - 1/b) s``."""
    if state.psi_s.shape != batch.psi.shape or state.phi_s.shape != batch.phi.shape:
        raise ShapeMismatch(
            f"state {state.psi_s.shape}/{state.phi_s.shape} vs batch {batch.psi.shape}/{batch.phi.shape}"
        )
    b = state.count + 1
    keep = 1.0 - 1.0 / b
    return EmuState(
        batch.psi / b + keep * state.psi_s,
        batch.phi / b + keep * state.phi_s,
        b,
    )


# ---------------------------------------------------------------------------
# binary artifact: "UDD1", u32 d, u32 c, f64 psi (row-major), f64 phi


STATS_MAGIC = b"UDD1"
_STATS_HEAD = struct.Struct("<4sII")


def dump_corr_stats(stats: CorrStats) -> bytes:
    d, c = stats.phi.shape
    if stats.psi.shape != (d, d):
        raise ShapeMismatch("psi must be d x d with d = phi rows")
    return (
        _STATS_HEAD.pack(STATS_MAGIC, d, c)
        + np.ascontiguousarray(stats.psi, dtype="<f8").tobytes()
        + np.ascontiguousarray(stats.phi, dtype="<f8").tobytes()
    )


def read_corr_stats_stream(fh: BinaryIO) -> CorrStats:
    head = fh.read(_STATS_HEAD.size)
    if len(head) != _STATS_HEAD.size:
        raise FormatError("truncated stats header")
    magic, d, c = _STATS_HEAD.unpack(head)
    if magic != STATS_MAGIC:
        raise FormatError(f"bad magic {magic!r}")
    nbytes = 8 * (d * d + d * c)
    body = fh.read(nbytes)
    if len(body) != nbytes:
        raise FormatError("truncated stats body")
    values = np.frombuffer(body, dtype="<f8").astype(np.float64)
    return CorrStats(values[: d * d].reshape(d, d).copy(), values[d * d :].reshape(d, c).copy())


def load_corr_stats(data: bytes) -> CorrStats:
    fh = io.BytesIO(data)
    stats = read_corr_stats_stream(fh)
    if fh.read(1):
        raise FormatError("trailing bytes after stats record")
    return stats


def save_corr_stats(path, stats: CorrStats) -> None:
    with open(path, "wb") as fh:
        fh.write(dump_corr_stats(stats))


def read_corr_stats(path) -> CorrStats:
    with open(path, "rb") as fh:
        return load_corr_stats(fh.read())
