"""Finite-difference check of the synthetic-input gradient, shared by tests."""

import numpy as np

from unidd.cfm import LossTerms, batch_loss, evaluate_batch
from unidd.features import EmuState, build_net, corr_stats, emu_update, forward
from unidd.objectives import LinearModel

TERM_SETS = {
    "all": LossTerms(),
    "cls": LossTerms(True, False, False),
    "filter": LossTerms(False, True, False),
    "signal": LossTerms(False, False, True),
    "low-pass": LossTerms(kind="low-pass"),
    "squared": LossTerms(squared=True),
}


def central_difference(f, x, h=1e-5):
    g = np.zeros_like(x)
    for idx in np.ndindex(*x.shape):
        xp = x.copy()
        xm = x.copy()
        xp[idx] += h
        xm[idx] -= h
        g[idx] = (f(xp) - f(xm)) / (2 * h)
    return g


def make_case(seed):
    """Small net, real stats, head and a 4-sample synthetic batch; odd seeds carry a non-empty EMU."""
    rng = np.random.default_rng(seed)
    depth = 1 + seed % 3
    mode = "spatial" if seed % 4 == 0 else "flat"
    widths = [3] + [int(rng.integers(2, 5)) for _ in range(depth)]
    net = build_net(widths, mode, seed, spatial_size=2)
    c = 2
    Hr = rng.standard_normal((30, net.input_dim))
    Yr = np.eye(c)[rng.integers(0, c, 30)]
    real = [corr_stats(F, Yr) for F in forward(net, Hr)]
    head = LinearModel(rng.standard_normal((widths[-1], c)))
    Hs = rng.standard_normal((4, net.input_dim))
    Ys = np.eye(c)[np.arange(4) % c]
    emu = [EmuState.empty(*s.phi.shape) for s in real]
    if seed % 2:
        Hp = rng.standard_normal((4, net.input_dim))
        emu = [emu_update(e, corr_stats(F, Ys)) for e, F in zip(emu, forward(net, Hp))]
    return net, head, Hs, Ys, real, emu


def worst_relative_error(seed, terms, beta=0.1, eta=0.1):
    net, head, Hs, Ys, real, emu = make_case(seed)
    g = evaluate_batch(net, head, Hs, Ys, real, emu, beta, eta, terms).grad
    fd = central_difference(lambda x: batch_loss(net, head, x, Ys, real, emu, beta, eta, terms), Hs)
    mask = np.abs(g) > 1e-8
    if not mask.any():
        return 0.0
    return float(np.max(np.abs(g - fd)[mask] / np.abs(g)[mask]))
