"""Dense float64 math shared by every model in the package.

Holds the activation functions, the named parameter container, the two
optimizer rules (plain SGD and Adam), global-norm gradient clipping and the
central finite-difference gradient oracle used to validate every hand-written
backward pass.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Dict, Iterator, Optional, Tuple

import numpy as np

DTYPE = np.float64


class StateError(RuntimeError):
    """An operation was called in the wrong order (e.g. backward before forward)."""


class NumericError(ArithmeticError):
    """A loss or gradient became NaN or infinite."""


def _check_nonempty(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=DTYPE)
    if x.size == 0:
        raise ValueError("activation of an empty input")
    return x


def sigmoid(x):
    # tanh form never overflows
    return 0.5 * (1.0 + np.tanh(0.5 * _check_nonempty(x)))


def tanh(x):
    return np.tanh(_check_nonempty(x))


def softmax(x, axis: int = -1):
    x = _check_nonempty(x)
    e = np.exp(x - np.max(x, axis=axis, keepdims=True))
    return e / np.sum(e, axis=axis, keepdims=True)


def activations(x, kind: str) -> np.ndarray:
    """Apply ``kind`` (``sigmoid``, ``tanh`` or ``softmax``) to ``x``."""
    funcs = {"sigmoid": sigmoid, "tanh": tanh, "softmax": softmax}
    try:
        return funcs[kind](x)
    except KeyError:
        raise ValueError(f"unknown activation {kind!r}") from None


def glorot_uniform(rng: np.random.Generator, shape: Tuple[int, ...]) -> np.ndarray:
    """Uniform in +-sqrt(6 / (fan_in + fan_out)); vectors count as 1 x n."""
    if len(shape) == 1:
        fan_out, fan_in = 1, shape[0]
    else:
        fan_out, fan_in = shape[0], shape[1]
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape).astype(DTYPE)


class ParamStore:
    """Named trainable tensors, each paired with a gradient of the same shape.

    Arrays are mutated in place by the optimizer, so views handed out to the
    model layers (see ``GruParams.from_store``) stay valid across steps.
    """

    def __init__(self):
        self.values: Dict[str, np.ndarray] = {}
        self.grads: Dict[str, np.ndarray] = {}

    def add(self, name: str, value) -> np.ndarray:
        if name in self.values:
            raise KeyError(f"duplicate parameter name {name!r}")
        arr = np.array(value, dtype=DTYPE)
        if arr.ndim == 0:
            arr = arr.reshape(1)
        self.values[name] = arr
        self.grads[name] = np.zeros_like(arr)
        return arr

    def __getitem__(self, name: str) -> np.ndarray:
        return self.values[name]

    def __contains__(self, name: str) -> bool:
        return name in self.values

    def __iter__(self) -> Iterator[str]:
        return iter(self.values)

    def __len__(self) -> int:
        return len(self.values)

    def items(self):
        return self.values.items()

    def grad(self, name: str) -> np.ndarray:
        return self.grads[name]

    def zero_grad(self) -> None:
        for g in self.grads.values():
            g[...] = 0.0

    def size(self) -> int:
        """Total number of scalar parameters."""
        return int(sum(v.size for v in self.values.values()))

    def copy_values(self) -> Dict[str, np.ndarray]:
        return {k: v.copy() for k, v in self.values.items()}

    def load_values(self, values: Dict[str, np.ndarray]) -> None:
        """Overwrite parameters in place from a name -> array mapping."""
        missing = set(self.values) - set(values)
        if missing:
            raise KeyError(f"missing parameters: {sorted(missing)}")
        for k, v in values.items():
            if k not in self.values:
                raise KeyError(f"unknown parameter {k!r}")
            v = np.asarray(v, dtype=DTYPE)
            if v.shape != self.values[k].shape:
                raise ValueError(f"shape mismatch for {k}: {v.shape} vs {self.values[k].shape}")
            self.values[k][...] = v

    def grad_norm(self) -> float:
        return float(np.sqrt(sum(float(np.sum(g * g)) for g in self.grads.values())))


def clip_grad_norm(params: ParamStore, max_norm: float) -> float:
    """Rescale all gradients so their global L2 norm is at most ``max_norm``.

    Returns the norm before clipping.
    """
    norm = params.grad_norm()
    if not np.isfinite(norm):
        raise NumericError("non-finite gradient norm")
    if max_norm > 0 and norm > max_norm:
        scale = max_norm / norm
        for g in params.grads.values():
            g *= scale
    return norm


@dataclass
class OptimizerState:
    rule: str = "adam"
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if self.rule not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer rule {self.rule!r}")
        if not self.lr > 0:
            raise ValueError("learning rate must be positive")


def optimizer_step(params: ParamStore, state: OptimizerState) -> ParamStore:
    """Apply one update in place, then zero the gradients."""
    if not state.lr > 0:
        raise ValueError("learning rate must be positive")
    state.step += 1
    if state.rule == "sgd":
        for name, w in params.values.items():
            w -= state.lr * params.grads[name]
    else:
        t = state.step
        c1 = 1.0 - state.beta1 ** t
        c2 = 1.0 - state.beta2 ** t
        for name, w in params.values.items():
            g = params.grads[name]
            if name not in state.m:
                state.m[name] = np.zeros_like(w)
                state.v[name] = np.zeros_like(w)
            m, v = state.m[name], state.v[name]
            m *= state.beta1
            m += (1.0 - state.beta1) * g
            v *= state.beta2
            v += (1.0 - state.beta2) * g * g
            w -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    params.zero_grad()
    return params


def finite_diff_check(
    model_forward: Callable[[], float],
    params: ParamStore,
    h: float = 1e-5,
    names: Optional[list] = None,
) -> float:
    """Compare analytic gradients against central differences.

    ``model_forward`` runs a forward *and* backward pass over ``params``
    (accumulating into ``params.grads``) and returns the scalar loss. It is
    called once with zeroed gradients to collect the analytic gradient, then
    twice per scalar parameter with that parameter shifted by +-h.

    Returns max |analytic - numeric| / max(|analytic|, |numeric|, 1e-12) over
    every checked entry; 0.0 for a model without parameters.
    """
    if not h > 0:
        raise ValueError("step h must be positive")
    params.zero_grad()
    loss = model_forward()
    if not np.isfinite(loss):
        raise NumericError(f"non-finite loss {loss}")
    analytic = {k: g.copy() for k, g in params.grads.items()}

    worst = 0.0
    for name in names or list(params.values):
        w = params.values[name]
        flat = w.reshape(-1)
        ga = analytic[name].reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            lp = model_forward()
            flat[i] = orig - h
            lm = model_forward()
            flat[i] = orig
            if not (np.isfinite(lp) and np.isfinite(lm)):
                raise NumericError(f"non-finite loss while perturbing {name}[{i}]")
            num = (lp - lm) / (2.0 * h)
            denom = max(abs(ga[i]), abs(num), 1e-12)
            worst = max(worst, abs(ga[i] - num) / denom)
    for k, g in analytic.items():
        params.grads[k][...] = g
    return worst
