"""GRU cell, sequence unrolling and the bidirectional encoder.

Each forward function has a ``*_forward`` twin that also returns the cache
its matching ``*_backward`` needs. Backward functions accumulate parameter
gradients into a ``GruParams`` whose arrays are the gradient buffers of a
``ParamStore`` (see :meth:`GruParams.grads_from_store`).
"""

from __future__ import annotations

from dataclasses import dataclass, fields
from typing import List, Optional, Tuple

import numpy as np

from .numerics import DTYPE, ParamStore, glorot_uniform, sigmoid

GRU_FIELDS = ("W_xz", "W_sz", "W_xr", "W_sr", "W_xs", "W_ss", "b_z", "b_r", "b_s")


@dataclass
class GruParams:
    W_xz: np.ndarray  # hidden x d_in
    W_sz: np.ndarray  # hidden x hidden
    W_xr: np.ndarray
    W_sr: np.ndarray
    W_xs: np.ndarray
    W_ss: np.ndarray
    b_z: np.ndarray
    b_r: np.ndarray
    b_s: np.ndarray

    def __post_init__(self):
        h, d = self.W_xz.shape
        for name in ("W_xr", "W_xs"):
            if getattr(self, name).shape != (h, d):
                raise ValueError(f"{name} must be {h}x{d}")
        for name in ("W_sz", "W_sr", "W_ss"):
            if getattr(self, name).shape != (h, h):
                raise ValueError(f"{name} must be {h}x{h}")
        for name in ("b_z", "b_r", "b_s"):
            if getattr(self, name).shape != (h,):
                raise ValueError(f"{name} must have length {h}")

    @property
    def hidden(self) -> int:
        return self.W_xz.shape[0]

    @property
    def d_in(self) -> int:
        return self.W_xz.shape[1]

    @classmethod
    def zeros(cls, d_in: int, hidden: int) -> "GruParams":
        wx = lambda: np.zeros((hidden, d_in), dtype=DTYPE)
        ws = lambda: np.zeros((hidden, hidden), dtype=DTYPE)
        b = lambda: np.zeros(hidden, dtype=DTYPE)
        return cls(wx(), ws(), wx(), ws(), wx(), ws(), b(), b(), b())

    @classmethod
    def init(cls, store: ParamStore, prefix: str, d_in: int, hidden: int,
             rng: np.random.Generator) -> "GruParams":
        """Register a freshly initialised cell under ``prefix.*`` in ``store``."""
        for f in GRU_FIELDS:
            if f.startswith("b_"):
                store.add(f"{prefix}.{f}", np.zeros(hidden))
            elif f.startswith("W_x"):
                store.add(f"{prefix}.{f}", glorot_uniform(rng, (hidden, d_in)))
            else:
                store.add(f"{prefix}.{f}", glorot_uniform(rng, (hidden, hidden)))
        return cls.from_store(store, prefix)

    @classmethod
    def from_store(cls, store: ParamStore, prefix: str) -> "GruParams":
        return cls(*(store.values[f"{prefix}.{f}"] for f in GRU_FIELDS))

    @classmethod
    def grads_from_store(cls, store: ParamStore, prefix: str) -> "GruParams":
        return cls(*(store.grads[f"{prefix}.{f}"] for f in GRU_FIELDS))

    def arrays(self):
        return [getattr(self, f.name) for f in fields(self)]


def _check_step(x: np.ndarray, s_prev: np.ndarray, p: GruParams) -> None:
    if x.shape != (p.d_in,):
        raise ValueError(f"input has shape {x.shape}, cell expects ({p.d_in},)")
    if s_prev.shape != (p.hidden,):
        raise ValueError(f"state has shape {s_prev.shape}, cell expects ({p.hidden},)")


def gru_step(x, s_prev, p: GruParams) -> np.ndarray:
    """One GRU update; returns the new state s_t."""
    return gru_step_forward(x, s_prev, p)[0]


def gru_step_forward(x, s_prev, p: GruParams):
    x = np.asarray(x, dtype=DTYPE)
    s_prev = np.asarray(s_prev, dtype=DTYPE)
    _check_step(x, s_prev, p)
    z = sigmoid(p.W_xz @ x + p.W_sz @ s_prev + p.b_z)
    r = sigmoid(p.W_xr @ x + p.W_sr @ s_prev + p.b_r)
    rs = r * s_prev
    cand = np.tanh(p.W_xs @ x + p.W_ss @ rs + p.b_s)
    s = cand * z + (1.0 - z) * s_prev
    return s, (x, s_prev, z, r, rs, cand)


def gru_step_backward(ds: np.ndarray, cache, p: GruParams, g: GruParams):
    """Backprop ``ds`` = dL/ds_t through one step. Returns (dx, ds_prev)."""
    dx, ds_prev, pre = gru_step_backward_inputs(ds, cache, p)
    x, s_prev, _, _, rs, _ = cache
    gru_accumulate(g, x[None], s_prev[None], rs[None], *(d[None] for d in pre))
    return dx, ds_prev


def gru_step_backward_inputs(ds: np.ndarray, cache, p: GruParams):
    """Like :func:`gru_step_backward` but leaves parameter gradients alone.

    Returns (dx, ds_prev, (da_z, da_r, da_s)); the pre-activation gradients
    can be batched over many steps with :func:`gru_accumulate`.
    """
    x, s_prev, z, r, rs, cand = cache
    da_s = ds * z * (1.0 - cand * cand)
    drs = p.W_ss.T @ da_s
    da_r = drs * s_prev * r * (1.0 - r)
    da_z = ds * (cand - s_prev) * z * (1.0 - z)
    ds_prev = ds * (1.0 - z) + drs * r + p.W_sz.T @ da_z + p.W_sr.T @ da_r
    dx = p.W_xz.T @ da_z + p.W_xr.T @ da_r + p.W_xs.T @ da_s
    return dx, ds_prev, (da_z, da_r, da_s)


def gru_accumulate(g: GruParams, xs, s_prevs, rss, da_z, da_r, da_s) -> None:
    """Add parameter gradients for a batch of steps (rows) into ``g``."""
    g.W_xz += da_z.T @ xs
    g.W_xr += da_r.T @ xs
    g.W_xs += da_s.T @ xs
    g.W_sz += da_z.T @ s_prevs
    g.W_sr += da_r.T @ s_prevs
    g.W_ss += da_s.T @ rss
    g.b_z += da_z.sum(axis=0)
    g.b_r += da_r.sum(axis=0)
    g.b_s += da_s.sum(axis=0)


def gru_unroll(xs, p: GruParams, s0: Optional[np.ndarray] = None) -> np.ndarray:
    """Fold :func:`gru_step` over the rows of ``xs``; returns the n x h states."""
    return gru_unroll_forward(xs, p, s0)[0]


def gru_unroll_forward(xs, p: GruParams, s0: Optional[np.ndarray] = None):
    xs = np.asarray(xs, dtype=DTYPE)
    if xs.ndim != 2 or xs.shape[0] == 0:
        raise ValueError("gru_unroll needs a non-empty n x d_in sequence")
    if xs.shape[1] != p.d_in:
        raise ValueError(f"sequence width {xs.shape[1]} != cell input {p.d_in}")
    h = p.hidden
    s = np.zeros(h, dtype=DTYPE) if s0 is None else np.asarray(s0, dtype=DTYPE)
    if s.shape != (h,):
        raise ValueError(f"initial state must have length {h}")
    # one stacked matrix-vector product per step; a batched matmul over all
    # rows could round differently with n and break the prefix property
    Wx = np.vstack([p.W_xz, p.W_xr, p.W_xs])
    n = xs.shape[0]
    states = np.empty((n, h), dtype=DTYPE)
    caches = []
    for t in range(n):
        ax = Wx @ xs[t]
        z = sigmoid(ax[:h] + p.W_sz @ s + p.b_z)
        r = sigmoid(ax[h:2 * h] + p.W_sr @ s + p.b_r)
        rs = r * s
        cand = np.tanh(ax[2 * h:] + p.W_ss @ rs + p.b_s)
        s_new = cand * z + (1.0 - z) * s
        caches.append((s, z, r, rs, cand))
        states[t] = s_new
        s = s_new
    return states, (xs, caches)


def gru_unroll_backward(dstates: np.ndarray, cache, p: GruParams, g: GruParams):
    """Backprop through an unroll. ``dstates[t]`` is dL/ds_t from outside.

    Returns (dxs, ds0).
    """
    xs, caches = cache
    n, h = dstates.shape
    da_z = np.empty((n, h), dtype=DTYPE)
    da_r = np.empty((n, h), dtype=DTYPE)
    da_s = np.empty((n, h), dtype=DTYPE)
    s_prevs = np.empty((n, h), dtype=DTYPE)
    rss = np.empty((n, h), dtype=DTYPE)
    carry = np.zeros(h, dtype=DTYPE)
    for t in range(n - 1, -1, -1):
        s_prev, z, r, rs, cand = caches[t]
        ds = dstates[t] + carry
        da_s[t] = ds * z * (1.0 - cand * cand)
        drs = p.W_ss.T @ da_s[t]
        da_r[t] = drs * s_prev * r * (1.0 - r)
        da_z[t] = ds * (cand - s_prev) * z * (1.0 - z)
        carry = ds * (1.0 - z) + drs * r + p.W_sz.T @ da_z[t] + p.W_sr.T @ da_r[t]
        s_prevs[t] = s_prev
        rss[t] = rs
    gru_accumulate(g, xs, s_prevs, rss, da_z, da_r, da_s)
    dxs = da_z @ p.W_xz + da_r @ p.W_xr + da_s @ p.W_xs
    return dxs, carry


def encode_bidirectional(xs, p_fwd: GruParams, p_bwd: GruParams) -> np.ndarray:
    """Encoder matrix E of shape (2h) x n.

    Column k stacks the forward state after reading x_1..x_k on top of the
    backward state after reading x_n..x_k.
    """
    return encode_bidirectional_forward(xs, p_fwd, p_bwd)[0]


def encode_bidirectional_forward(xs, p_fwd: GruParams, p_bwd: GruParams):
    xs = np.asarray(xs, dtype=DTYPE)
    if p_fwd.d_in != p_bwd.d_in or p_fwd.hidden != p_bwd.hidden:
        raise ValueError("forward and backward cells must share d_in and hidden size")
    fwd, cf = gru_unroll_forward(xs, p_fwd)
    bwd, cb = gru_unroll_forward(xs[::-1], p_bwd)
    # bwd[j] has read x_n..x_{n-j}; column k needs the state that ends at x_k
    E = np.concatenate([fwd, bwd[::-1]], axis=1).T.copy()
    return E, (cf, cb)


def encode_bidirectional_backward(dE: np.ndarray, cache, p_fwd: GruParams, p_bwd: GruParams,
                                  g_fwd: GruParams, g_bwd: GruParams) -> np.ndarray:
    """Backprop dL/dE into both cells. Returns dL/dxs."""
    cf, cb = cache
    h = p_fwd.hidden
    dfwd = dE[:h].T
    dbwd = dE[h:].T[::-1]
    dx_f, _ = gru_unroll_backward(np.ascontiguousarray(dfwd), cf, p_fwd, g_fwd)
    dx_b, _ = gru_unroll_backward(np.ascontiguousarray(dbwd), cb, p_bwd, g_bwd)
    return dx_f + dx_b[::-1]
