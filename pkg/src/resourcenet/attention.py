"""Additive attention over the encoder matrix E.

Energies are mu[k] = v . tanh(W_mu E[:, k] + V_mu s_prev + b_mu), weights are
softmax(mu) and the context is E @ alpha. ``W_mu E`` does not depend on the
decoder step and is computed once per sequence by :func:`precompute_keys`.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .numerics import DTYPE, ParamStore, glorot_uniform, softmax

ATTN_FIELDS = ("v", "W_mu", "V_mu", "b_mu")


@dataclass
class AttnParams:
    v: np.ndarray  # m
    W_mu: np.ndarray  # m x 2h_enc
    V_mu: np.ndarray  # m x h_dec
    b_mu: np.ndarray  # m

    def __post_init__(self):
        m = self.v.shape[0]
        if self.W_mu.shape[0] != m or self.V_mu.shape[0] != m or self.b_mu.shape != (m,):
            raise ValueError("attention parameter shapes disagree on the energy width")

    @property
    def width(self) -> int:
        return self.v.shape[0]

    @classmethod
    def init(cls, store: ParamStore, prefix: str, key_dim: int, query_dim: int, width: int,
             rng: np.random.Generator) -> "AttnParams":
        store.add(f"{prefix}.v", glorot_uniform(rng, (width,)))
        store.add(f"{prefix}.W_mu", glorot_uniform(rng, (width, key_dim)))
        store.add(f"{prefix}.V_mu", glorot_uniform(rng, (width, query_dim)))
        store.add(f"{prefix}.b_mu", np.zeros(width))
        return cls.from_store(store, prefix)

    @classmethod
    def from_store(cls, store: ParamStore, prefix: str) -> "AttnParams":
        return cls(*(store.values[f"{prefix}.{f}"] for f in ATTN_FIELDS))

    @classmethod
    def grads_from_store(cls, store: ParamStore, prefix: str) -> "AttnParams":
        return cls(*(store.grads[f"{prefix}.{f}"] for f in ATTN_FIELDS))


@dataclass
class AttentionStep:
    energies: np.ndarray  # n
    weights: np.ndarray  # n, sums to 1
    context: np.ndarray  # 2h_enc


def precompute_keys(E: np.ndarray, p: AttnParams) -> np.ndarray:
    """K = W_mu @ E (m x n)."""
    E = np.asarray(E, dtype=DTYPE)
    if E.ndim != 2 or E.shape[0] != p.W_mu.shape[1]:
        raise ValueError(f"E has shape {E.shape}, W_mu expects {p.W_mu.shape[1]} rows")
    return p.W_mu @ E


def attend(E, s_prev, p: AttnParams, keys: Optional[np.ndarray] = None) -> AttentionStep:
    step, _ = attend_forward(E, s_prev, p, keys)
    return step


def attend_forward(E, s_prev, p: AttnParams, keys: Optional[np.ndarray] = None):
    E = np.asarray(E, dtype=DTYPE)
    s_prev = np.asarray(s_prev, dtype=DTYPE)
    if E.ndim != 2 or E.shape[1] == 0:
        raise ValueError("attention needs at least one encoder column")
    if s_prev.shape != (p.V_mu.shape[1],):
        raise ValueError(f"decoder state has shape {s_prev.shape}, expected ({p.V_mu.shape[1]},)")
    K = precompute_keys(E, p) if keys is None else keys
    if K.shape != (p.width, E.shape[1]):
        raise ValueError(f"keys have shape {K.shape}, expected {(p.width, E.shape[1])}")
    hidden = np.tanh(K + (p.V_mu @ s_prev + p.b_mu)[:, None])
    mu = p.v @ hidden
    alpha = softmax(mu)
    c = E @ alpha
    return AttentionStep(mu, alpha, c), (E, s_prev, hidden, alpha)


def attend_backward(dc: np.ndarray, cache, p: AttnParams, g: AttnParams,
                    dE: np.ndarray, dK: np.ndarray) -> np.ndarray:
    """Backprop dL/dc through one attention step.

    Accumulates into ``g`` (v, V_mu, b_mu), into ``dE`` (through the context
    product) and into ``dK`` (dL/dkeys; convert with :func:`keys_backward`
    once per sequence). Returns dL/ds_prev.
    """
    E, s_prev, hidden, alpha = cache
    dE += np.outer(dc, alpha)
    ds_prev, dq = attend_backward_inputs(dc, cache, p, g, dK)
    g.V_mu += np.outer(dq, s_prev)
    g.b_mu += dq
    return ds_prev


def attend_backward_inputs(dc: np.ndarray, cache, p: AttnParams, g: AttnParams, dK: np.ndarray):
    """Per-step part of :func:`attend_backward`.

    Skips the rank-one terms (dE through the context, V_mu and b_mu) so a
    decoder can batch them over all steps. Returns (dL/ds_prev, dL/dquery).
    """
    E, s_prev, hidden, alpha = cache
    dalpha = dc @ E
    dmu = alpha * (dalpha - alpha @ dalpha)
    g.v += hidden @ dmu
    dpre = (p.v[:, None] * dmu) * (1.0 - hidden * hidden)
    dK += dpre
    dq = dpre.sum(axis=1)
    return p.V_mu.T @ dq, dq


def keys_backward(dK: np.ndarray, E: np.ndarray, p: AttnParams, g: AttnParams, dE: np.ndarray) -> None:
    g.W_mu += dK @ E.T
    dE += p.W_mu.T @ dK
