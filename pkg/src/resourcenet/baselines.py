"""Per-timestep comparison models.

All three map the stacked metric halves [a_t ; b_t] (18 values) of one step
to the 9 co-located metrics of the same step. They have no memory and cannot
see past the end of the stacked input, which is the limitation the sequence
model addresses.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, Optional, Sequence

import numpy as np

from . import autodiff as ad
from .features import N_METRICS, Example
from .numerics import DTYPE, OptimizerState, ParamStore, glorot_uniform, optimizer_step

KINDS = ("sum", "linear", "mlp")


def baseline_sum(a_t, b_t) -> np.ndarray:
    """Co-located usage guessed as the sum of the isolated usages."""
    return np.asarray(a_t, dtype=DTYPE) + np.asarray(b_t, dtype=DTYPE)


@dataclass
class ElementwiseModel:
    kind: str
    weights: Dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown elementwise model {self.kind!r}")

    def _forward(self, X: np.ndarray) -> np.ndarray:
        d = X.shape[1] // 2
        if self.kind == "sum":
            return baseline_sum(X[:, :d], X[:, d:])
        if self.kind == "linear":
            return X @ self.weights["W"].T + self.weights["b"]
        hidden = np.tanh(X @ self.weights["W1"].T + self.weights["b1"])
        return hidden @ self.weights["W2"].T + self.weights["b2"]


def sum_model() -> ElementwiseModel:
    return ElementwiseModel("sum")


def predict_elementwise(model: ElementwiseModel, stacked) -> np.ndarray:
    """Apply ``model`` to every row of an N x 18 stacked input."""
    X = np.atleast_2d(np.asarray(stacked, dtype=DTYPE))
    return model._forward(X)


def training_pairs(examples: Sequence[Example], normalized: bool = True):
    """Aligned (stacked halves, co-located metrics) rows from training examples.

    Rows exist only where both the stacked input and the co-located trace do.
    """
    xs, ys = [], []
    for ex in examples:
        n = min(ex.inputs.shape[0], ex.length)
        if normalized:
            xs.append(ex.inputs[:n, :2 * N_METRICS])
            ys.append(ex.target[:n, :N_METRICS])
        else:
            xs.append(ex.raw_stacked[:n])
            ys.append(ex.colocated[:n])
    return np.concatenate(xs), np.concatenate(ys)


def fit_elementwise(kind: str, X, Y, seed: int = 0, hidden: int = 64, epochs: int = 2000,
                    lr: float = 1e-2) -> ElementwiseModel:
    """Least-squares fit of an elementwise model on row-aligned data.

    ``linear`` is solved in closed form; ``mlp`` (one tanh hidden layer) is
    trained full-batch with Adam from a seeded initialization.
    """
    X = np.asarray(X, dtype=DTYPE)
    Y = np.asarray(Y, dtype=DTYPE)
    if X.ndim != 2 or X.shape[0] == 0:
        raise ValueError("empty training set")
    if X.shape[0] != Y.shape[0]:
        raise ValueError("inputs and targets must have the same number of rows")
    if kind == "sum":
        return sum_model()
    if kind == "linear":
        A = np.hstack([X, np.ones((X.shape[0], 1))])
        coef, *_ = np.linalg.lstsq(A, Y, rcond=None)
        return ElementwiseModel("linear", {"W": coef[:-1].T.copy(), "b": coef[-1].copy()})
    if kind != "mlp":
        raise ValueError(f"unknown elementwise model {kind!r}")

    rng = np.random.default_rng(seed)
    store = ParamStore()
    store.add("W1", glorot_uniform(rng, (hidden, X.shape[1])))
    store.add("b1", np.zeros(hidden))
    store.add("W2", glorot_uniform(rng, (Y.shape[1], hidden)))
    store.add("b2", np.zeros(Y.shape[1]))
    state = OptimizerState("adam", lr)
    for _ in range(epochs):
        h = ad.tanh(ad.matmul(X, ad.transpose(ad.param(store, "W1"))) + ad.param(store, "b1"))
        out = ad.matmul(h, ad.transpose(ad.param(store, "W2"))) + ad.param(store, "b2")
        loss = ad.mean(ad.square(out - Y))
        ad.backward(loss)
        optimizer_step(store, state)
    return ElementwiseModel("mlp", store.copy_values())
