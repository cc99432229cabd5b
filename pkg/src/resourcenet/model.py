"""ResourceNet: bidirectional GRU encoder, additive attention, GRU decoder.

The decoder input at step t is [y_{t-1} ; c_t]; its initial state is a tanh
bridge from the final forward and backward encoder states, and a linear
projection maps each decoder state to the 12 output channels (9 metrics,
EOS, PC_a, PC_b).
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from typing import Callable, List, Optional, Sequence

import numpy as np

from .attention import AttnParams, attend_backward_inputs, attend_forward, keys_backward, precompute_keys
from .features import INPUT_DIM, TARGET_DIM, DataError, Example
from .numerics import (
    DTYPE,
    NumericError,
    OptimizerState,
    ParamStore,
    StateError,
    clip_grad_norm,
    glorot_uniform,
    optimizer_step,
)
from .recurrent import (
    GruParams,
    encode_bidirectional_backward,
    encode_bidirectional_forward,
    gru_accumulate,
    gru_step_backward_inputs,
    gru_step_forward,
)

log = logging.getLogger(__name__)


@dataclass
class ModelConfig:
    input_dim: int = INPUT_DIM
    output_dim: int = TARGET_DIM
    enc_hidden: int = 64
    dec_hidden: int = 64
    attn_width: Optional[int] = None  # defaults to dec_hidden
    seed: int = 0
    lr: float = 1e-3
    clip_norm: float = 5.0

    def __post_init__(self):
        if self.attn_width is None:
            self.attn_width = self.dec_hidden
        for name in ("input_dim", "output_dim", "enc_hidden", "dec_hidden", "attn_width"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {k: v for k, v in d.items() if k in cls.__dataclass_fields__}
        return cls(**known)


@dataclass
class GenerationConfig:
    k: int = 4  # generate k * x steps, x = longest isolated length

    def __post_init__(self):
        if self.k < 1:
            raise ValueError("length multiplier k must be >= 1")


@dataclass
class TrainingConfig:
    """Everything a training run needs besides data, as a JSON document."""

    enc_hidden: int = 64
    dec_hidden: int = 64
    lr: float = 1e-3
    lr_decay: float = 1.0
    epochs: int = 20
    seed: int = 0
    k: int = 4

    def __post_init__(self):
        if self.epochs < 0:
            raise ValueError("epochs must be nonnegative")
        if not self.lr > 0 or not 0 < self.lr_decay <= 1:
            raise ValueError("need lr > 0 and lr_decay in (0, 1]")
        GenerationConfig(self.k)

    def model_config(self) -> ModelConfig:
        return ModelConfig(enc_hidden=self.enc_hidden, dec_hidden=self.dec_hidden, seed=self.seed, lr=self.lr)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=1, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "TrainingConfig":
        doc = json.loads(text)
        unknown = set(doc) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown training config keys: {sorted(unknown)}")
        return cls(**doc)


class ResourceNet:
    def __init__(self, config: Optional[ModelConfig] = None, params: Optional[ParamStore] = None):
        self.config = config = config or ModelConfig()
        he, hd = config.enc_hidden, config.dec_hidden
        if params is None:
            rng = np.random.default_rng(config.seed)
            params = ParamStore()
            GruParams.init(params, "enc_f", config.input_dim, he, rng)
            GruParams.init(params, "enc_b", config.input_dim, he, rng)
            GruParams.init(params, "dec", config.output_dim + 2 * he, hd, rng)
            AttnParams.init(params, "attn", 2 * he, hd, config.attn_width, rng)
            params.add("bridge.W", glorot_uniform(rng, (hd, 2 * he)))
            params.add("bridge.b", np.zeros(hd))
            params.add("out.W", glorot_uniform(rng, (config.output_dim, hd)))
            params.add("out.b", np.zeros(config.output_dim))
        self.params = params
        self.enc_f = GruParams.from_store(params, "enc_f")
        self.enc_b = GruParams.from_store(params, "enc_b")
        self.dec = GruParams.from_store(params, "dec")
        self.attn = AttnParams.from_store(params, "attn")
        self._check_shapes()
        self._cache = None

    def _check_shapes(self):
        c = self.config
        if self.enc_f.d_in != c.input_dim or self.enc_f.hidden != c.enc_hidden:
            raise ValueError("encoder parameters disagree with the config")
        if self.dec.d_in != c.output_dim + 2 * c.enc_hidden or self.dec.hidden != c.dec_hidden:
            raise ValueError("decoder parameters disagree with the config")
        if self.params["out.W"].shape != (c.output_dim, c.dec_hidden):
            raise ValueError("output projection disagrees with the config")
        if self.params["bridge.W"].shape != (c.dec_hidden, 2 * c.enc_hidden):
            raise ValueError("bridge disagrees with the config")

    @property
    def n_params(self) -> int:
        return self.params.size()

    # -- forward pieces -------------------------------------------------

    def _encode(self, inputs):
        inputs = np.asarray(inputs, dtype=DTYPE)
        if inputs.ndim != 2 or inputs.shape[1] != self.config.input_dim:
            raise ValueError(f"inputs must be n x {self.config.input_dim}, got {inputs.shape}")
        E, enc_cache = encode_bidirectional_forward(inputs, self.enc_f, self.enc_b)
        h = self.config.enc_hidden
        summary = np.concatenate([E[:h, -1], E[h:, 0]])
        s0 = np.tanh(self.params["bridge.W"] @ summary + self.params["bridge.b"])
        return E, enc_cache, summary, s0

    def encode(self, inputs):
        """Encoder matrix E and the decoder's initial state."""
        E, _, _, s0 = self._encode(inputs)
        return E, s0

    def decode_step(self, y_prev, s_prev, E, keys=None):
        """One decoder step; returns (y_t, s_t)."""
        y_prev = np.asarray(y_prev, dtype=DTYPE)
        if y_prev.shape != (self.config.output_dim,):
            raise ValueError(f"previous output must have length {self.config.output_dim}")
        if keys is None:
            keys = precompute_keys(E, self.attn)
        step, _ = attend_forward(E, s_prev, self.attn, keys)
        s, _ = gru_step_forward(np.concatenate([y_prev, step.context]), s_prev, self.dec)
        return self.params["out.W"] @ s + self.params["out.b"], s

    def forward_teacher_forced(self, inputs, target):
        """Predictions (T x 12) and mean squared error against ``target``.

        The decoder is fed the true target of the previous step (zeros at
        t=1). The pass is recorded for :meth:`backward`.
        """
        target = np.asarray(target, dtype=DTYPE)
        if target.ndim != 2 or target.shape[0] < 1 or target.shape[1] != self.config.output_dim:
            raise DataError(f"target must be T x {self.config.output_dim} with T >= 1")
        E, enc_cache, summary, s0 = self._encode(inputs)
        K = precompute_keys(E, self.attn)
        Wo, bo = self.params["out.W"], self.params["out.b"]
        T, d = target.shape
        states = np.empty((T, self.config.dec_hidden), dtype=DTYPE)
        preds = np.empty((T, d), dtype=DTYPE)
        attn_caches, gru_caches = [], []
        s = s0
        y_prev = np.zeros(d, dtype=DTYPE)
        for t in range(T):
            step, ac = attend_forward(E, s, self.attn, K)
            s, gc = gru_step_forward(np.concatenate([y_prev, step.context]), s, self.dec)
            states[t] = s
            # same per-step product as generate, so step 1 matches bit for bit
            preds[t] = Wo @ s + bo
            attn_caches.append(ac)
            gru_caches.append(gc)
            y_prev = target[t]
        diff = preds - target
        loss = float(np.mean(diff * diff))
        self._cache = (E, enc_cache, summary, s0, states, attn_caches, gru_caches, diff)
        return preds, loss

    def backward(self) -> None:
        """Accumulate dLoss/dparam for the last teacher-forced pass."""
        if self._cache is None:
            raise StateError("backward called before forward_teacher_forced")
        E, enc_cache, summary, s0, states, attn_caches, gru_caches, diff = self._cache
        p, g = self.params, self.params.grads
        T, d = diff.shape
        dY = 2.0 * diff / diff.size
        g["out.W"] += dY.T @ states
        g["out.b"] += dY.sum(axis=0)
        dS = dY @ p["out.W"]

        g_dec = GruParams.grads_from_store(p, "dec")
        g_attn = AttnParams.grads_from_store(p, "attn")
        hd = self.config.dec_hidden
        dE = np.zeros_like(E)
        dK = np.zeros((self.attn.width, E.shape[1]), dtype=DTYPE)
        # per-step terms batched into matrix products after the loop
        da = np.empty((3, T, hd), dtype=DTYPE)
        dC = np.empty((T, E.shape[0]), dtype=DTYPE)
        dQ = np.empty((T, self.attn.width), dtype=DTYPE)
        carry = np.zeros(hd, dtype=DTYPE)
        for t in range(T - 1, -1, -1):
            dx, ds_prev, (da[0, t], da[1, t], da[2, t]) = gru_step_backward_inputs(
                dS[t] + carry, gru_caches[t], self.dec)
            dC[t] = dx[d:]
            ds_attn, dQ[t] = attend_backward_inputs(dC[t], attn_caches[t], self.attn, g_attn, dK)
            carry = ds_prev + ds_attn
        xs = np.array([c[0] for c in gru_caches])
        s_prevs = np.array([c[1] for c in gru_caches])
        rss = np.array([c[4] for c in gru_caches])
        gru_accumulate(g_dec, xs, s_prevs, rss, da[0], da[1], da[2])
        alphas = np.array([c[3] for c in attn_caches])
        dE += dC.T @ alphas
        g_attn.V_mu += dQ.T @ s_prevs
        g_attn.b_mu += dQ.sum(axis=0)
        keys_backward(dK, E, self.attn, g_attn, dE)

        da = carry * (1.0 - s0 * s0)
        g["bridge.W"] += np.outer(da, summary)
        g["bridge.b"] += da
        dsum = p["bridge.W"].T @ da
        h = self.config.enc_hidden
        dE[:h, -1] += dsum[:h]
        dE[h:, 0] += dsum[h:]
        encode_bidirectional_backward(
            dE, enc_cache, self.enc_f, self.enc_b,
            GruParams.grads_from_store(p, "enc_f"), GruParams.grads_from_store(p, "enc_b"),
        )

    def loss_and_grad(self, inputs, target) -> float:
        _, loss = self.forward_teacher_forced(inputs, target)
        self.backward()
        return loss

    def generate(self, inputs, x: Optional[int] = None, cfg: Optional[GenerationConfig] = None,
                 steps: Optional[int] = None) -> np.ndarray:
        """Free-running decode of ``steps`` rows (default k * x).

        ``x`` defaults to the number of input rows.
        """
        if steps is None:
            cfg = cfg or GenerationConfig()
            steps = cfg.k * (x if x is not None else np.asarray(inputs).shape[0])
        E, _, _, s = self._encode(inputs)
        K = precompute_keys(E, self.attn)
        Wo, bo = self.params["out.W"], self.params["out.b"]
        d = self.config.output_dim
        out = np.empty((steps, d), dtype=DTYPE)
        y = np.zeros(d, dtype=DTYPE)
        for t in range(steps):
            step, _ = attend_forward(E, s, self.attn, K)
            s, _ = gru_step_forward(np.concatenate([y, step.context]), s, self.dec)
            y = Wo @ s + bo
            out[t] = y
        return out


@dataclass
class TrainResult:
    losses: List[float] = field(default_factory=list)  # mean teacher-forced loss per epoch
    best_loss: float = float("inf")
    steps: int = 0


def train(
    model: ResourceNet,
    examples: Sequence[Example],
    epochs: int,
    seed: int = 0,
    lr: Optional[float] = None,
    lr_decay: float = 1.0,
    optimizer: Optional[OptimizerState] = None,
    callback: Optional[Callable[[int, float], Optional[bool]]] = None,
) -> TrainResult:
    """One optimizer step per example, examples reshuffled every epoch.

    The learning rate is multiplied by ``lr_decay`` after every epoch.
    ``callback(epoch, mean_loss)`` may return True to stop early.
    """
    if not 0 < lr_decay <= 1:
        raise ValueError("lr_decay must lie in (0, 1]")
    if not examples:
        raise ValueError("training set is empty")
    if epochs < 0:
        raise ValueError("epochs must be nonnegative")
    rng = np.random.default_rng(seed)
    state = optimizer or OptimizerState("adam", lr or model.config.lr)
    result = TrainResult()
    params = model.params
    for epoch in range(epochs):
        order = rng.permutation(len(examples))
        total = 0.0
        for i in order:
            ex = examples[i]
            params.zero_grad()
            loss = model.loss_and_grad(ex.inputs, ex.target)
            if not np.isfinite(loss):
                raise NumericError(f"non-finite loss on triplet {ex.id} (epoch {epoch})")
            clip_grad_norm(params, model.config.clip_norm)
            optimizer_step(params, state)
            total += loss
            result.steps += 1
        mean_loss = total / len(examples)
        result.losses.append(mean_loss)
        result.best_loss = min(result.best_loss, mean_loss)
        log.debug("epoch %d loss %.6g", epoch + 1, mean_loss)
        state.lr *= lr_decay
        if callback is not None and callback(epoch + 1, mean_loss):
            break
    return result


def evaluate_loss(model: ResourceNet, examples: Sequence[Example]) -> float:
    """Mean teacher-forced loss without touching gradients."""
    losses = [model.forward_teacher_forced(ex.inputs, ex.target)[1] for ex in examples]
    model._cache = None
    return float(np.mean(losses))
