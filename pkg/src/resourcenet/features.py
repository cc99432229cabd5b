"""Model inputs and targets built from isolated and co-located traces.

A trace is a float array of shape (l, 9) whose columns follow ``METRICS``.
The encoder input for a pair (a, b) with b delayed by ``delay`` steps is the
row-wise stack [a_t ; b_t ; pcf_a(t) ; pcf_b(t)], zero-padded where an
application is not running. The decoder target for the co-located run is
[m_t ; eos_t ; pc_a(t) ; pc_b(t)].
"""

from __future__ import annotations

from dataclasses import astuple, dataclass
from typing import Iterable, Optional

import numpy as np

from .numerics import DTYPE

METRICS = ("cpu", "ram", "ior", "iow", "cpi", "llcm", "flcm", "pf", "tlbm")
N_METRICS = len(METRICS)
INPUT_DIM = 2 * N_METRICS + 2
TARGET_DIM = N_METRICS + 3
EOS, PC_A, PC_B = N_METRICS, N_METRICS + 1, N_METRICS + 2


class DataError(ValueError):
    """Inputs are inconsistent with their metadata."""


@dataclass
class MetricVector:
    """One second of monitored usage for a single execution."""

    cpu: float = 0.0  # percent of total CPU
    ram: float = 0.0  # bytes
    ior: float = 0.0  # blocks/s received
    iow: float = 0.0  # blocks/s sent
    cpi: float = 0.0  # cycles per instruction
    llcm: float = 0.0  # last-level cache misses/s
    flcm: float = 0.0  # first-level cache misses/s
    pf: float = 0.0  # page faults/s
    tlbm: float = 0.0  # TLB misses/s

    def __post_init__(self):
        for name, value in zip(METRICS, astuple(self)):
            if not value >= 0:
                raise ValueError(f"metric {name} must be nonnegative, got {value}")

    def to_array(self) -> np.ndarray:
        return np.array(astuple(self), dtype=DTYPE)

    @classmethod
    def from_array(cls, values) -> "MetricVector":
        return cls(*(float(v) for v in values))


def as_trace(values) -> np.ndarray:
    trace = np.asarray(values, dtype=DTYPE)
    if trace.ndim != 2 or trace.shape[1] != N_METRICS or trace.shape[0] < 1:
        raise DataError(f"a trace must be l x {N_METRICS} with l >= 1, got {trace.shape}")
    return trace


def pcf(length: int) -> np.ndarray:
    """Percentage completion (100/N, 200/N, ..., 100) for a length-N run."""
    if length < 1:
        raise ValueError("pcf needs a positive length")
    # i * 100 is exact, so one rounding per entry and the last is exactly 100
    return np.arange(1, length + 1, dtype=DTYPE) * 100.0 / length


def eos_feature(length: int) -> np.ndarray:
    if length < 1:
        raise ValueError("eos_feature needs a positive length")
    out = np.zeros(length, dtype=DTYPE)
    out[-1] = 1.0
    return out


def stack_inputs(a, b, delay: int = 0, with_pcf: bool = True) -> np.ndarray:
    """Stack two traces side by side, b starting ``delay`` steps after a.

    Returns an N x (2d [+ 2]) array with N = max(l(a), delay + l(b)). Rows
    where an application is not running are zero in its half, including its
    PCF column (in percent).
    """
    a = np.asarray(a, dtype=DTYPE)
    b = np.asarray(b, dtype=DTYPE)
    if delay < 0:
        raise ValueError("delay must be nonnegative")
    la, lb = a.shape[0], b.shape[0]
    d = a.shape[1]
    n = max(la, delay + lb)
    width = 2 * d + (2 if with_pcf else 0)
    out = np.zeros((n, width), dtype=DTYPE)
    out[:la, :d] = a
    out[delay:delay + lb, d:2 * d] = b
    if with_pcf:
        out[:la, 2 * d] = pcf(la)
        out[delay:delay + lb, 2 * d + 1] = pcf(lb)
    return out


def completion_channel(completion: int, length: int) -> np.ndarray:
    """pcf(completion) followed by 100 held until ``length``."""
    if not 1 <= completion <= length:
        raise DataError(f"completion step {completion} outside 1..{length}")
    out = np.full(length, 100.0, dtype=DTYPE)
    out[:completion] = pcf(completion)
    return out


def build_target(colocated, completion_a: Optional[int], completion_b: Optional[int]) -> np.ndarray:
    """Raw T x 12 target: co-located metrics, EOS, PC_a and PC_b (percent)."""
    colocated = as_trace(colocated)
    if completion_a is None or completion_b is None:
        raise DataError("completion steps are required to build PC targets")
    t = colocated.shape[0]
    out = np.empty((t, TARGET_DIM), dtype=DTYPE)
    out[:, :N_METRICS] = colocated
    out[:, EOS] = eos_feature(t)
    out[:, PC_A] = completion_channel(int(completion_a), t)
    out[:, PC_B] = completion_channel(int(completion_b), t)
    return out


@dataclass
class Normalizer:
    """Per-metric min-max scaling fitted on training traces."""

    lo: np.ndarray
    hi: np.ndarray

    def __post_init__(self):
        self.lo = np.asarray(self.lo, dtype=DTYPE)
        self.hi = np.asarray(self.hi, dtype=DTYPE)
        if np.any(self.hi < self.lo):
            raise ValueError("normalizer max below min")

    @property
    def span(self) -> np.ndarray:
        return self.hi - self.lo

    @classmethod
    def fit(cls, traces: Iterable) -> "Normalizer":
        traces = [as_trace(t) for t in traces]
        if not traces:
            raise ValueError("cannot fit a normalizer on an empty set")
        allrows = np.concatenate(traces, axis=0)
        return cls(allrows.min(axis=0), allrows.max(axis=0))

    def apply(self, trace) -> np.ndarray:
        trace = np.asarray(trace, dtype=DTYPE)
        span = self.span
        safe = np.where(span > 0, span, 1.0)
        out = (trace - self.lo) / safe
        return np.where(span > 0, out, 0.0)

    def invert(self, values) -> np.ndarray:
        return np.asarray(values, dtype=DTYPE) * self.span + self.lo

    def apply_target(self, target) -> np.ndarray:
        target = np.asarray(target, dtype=DTYPE)
        out = target.copy()
        out[:, :N_METRICS] = self.apply(target[:, :N_METRICS])
        out[:, PC_A:] = target[:, PC_A:] / 100.0
        return out

    def invert_target(self, values) -> np.ndarray:
        values = np.asarray(values, dtype=DTYPE)
        out = values.copy()
        out[:, :N_METRICS] = self.invert(values[:, :N_METRICS])
        out[:, PC_A:] = values[:, PC_A:] * 100.0
        return out

    def to_dict(self) -> dict:
        return {"min": [float(v) for v in self.lo], "max": [float(v) for v in self.hi]}

    @classmethod
    def from_dict(cls, d: dict) -> "Normalizer":
        return cls(np.array(d["min"], dtype=DTYPE), np.array(d["max"], dtype=DTYPE))


@dataclass
class Example:
    """A triplet prepared for the model, plus what evaluation needs."""

    id: str
    inputs: np.ndarray  # N x 20, normalized
    target: np.ndarray  # T x 12, normalized
    raw_stacked: np.ndarray  # N x 18, raw metric halves
    colocated: np.ndarray  # T x 9, raw
    x: int  # longest isolated length
    delay: int
    completion_a: int
    completion_b: int

    @property
    def length(self) -> int:
        return self.target.shape[0]

    @property
    def overlap(self):
        """(start, end), 1-indexed and inclusive, while both apps run."""
        return self.delay + 1, min(self.completion_a, self.completion_b)


def normalized_inputs(a, b, delay: int, norm: Normalizer) -> np.ndarray:
    """Encoder input: normalized metric halves, zero padding, PCFs in [0, 1]."""
    stacked = stack_inputs(norm.apply(a), norm.apply(b), delay)
    stacked[:, -2:] /= 100.0
    return stacked


def make_example(triplet, norm: Normalizer) -> Example:
    """Turn a data-module triplet into normalized model arrays."""
    a, b, ab = as_trace(triplet.a), as_trace(triplet.b), as_trace(triplet.colocated)
    delay = int(triplet.delay_steps)
    target = build_target(ab, triplet.completion_a, triplet.completion_b)
    return Example(
        id=triplet.id,
        inputs=normalized_inputs(a, b, delay, norm),
        target=norm.apply_target(target),
        raw_stacked=stack_inputs(a, b, delay, with_pcf=False),
        colocated=ab,
        x=max(a.shape[0], b.shape[0]),
        delay=delay,
        completion_a=int(triplet.completion_a),
        completion_b=int(triplet.completion_b),
    )
