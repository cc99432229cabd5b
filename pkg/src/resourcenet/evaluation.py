"""Error metrics, runtime stopping criteria and report files."""

from __future__ import annotations

import csv
import json
import os
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from .baselines import ElementwiseModel, predict_elementwise
from .features import EOS, METRICS, N_METRICS, PC_A, PC_B, Example, Normalizer
from .numerics import DTYPE

CRITERIA = ("first_max_eos", "first_max_pc_sum", "argmax_eos", "argmax_pc_sum")
MODELS = ("baseline", "linear", "mlp", "resourcenet")
BIN_EDGES = (0, 1, 2, 3, 4)  # in multiples of x


@dataclass(frozen=True)
class OverlapWindow:
    start: int  # 1-indexed, inclusive
    end: int

    @property
    def valid(self) -> bool:
        return 1 <= self.start <= self.end

    def __len__(self) -> int:
        return max(0, self.end - self.start + 1)

    @classmethod
    def of(cls, ex: Example) -> "OverlapWindow":
        return cls(*ex.overlap)


def mape(pred, truth, window: OverlapWindow, eps=0.0):
    """Mean absolute percentage error over ``window``; None if it is empty.

    Denominators are floored at ``eps`` so near-zero truths stay finite.
    For T x d inputs the result is one value per column (``eps`` may then
    be per-column too).
    """
    if not window.valid:
        return None
    pred = np.asarray(pred, dtype=DTYPE)
    truth = np.asarray(truth, dtype=DTYPE)
    if pred.shape[0] < window.end or truth.shape[0] < window.end:
        raise ValueError("sequences do not cover the window")
    sl = slice(window.start - 1, window.end)
    p, t = pred[sl], truth[sl]
    denom = np.maximum(np.abs(t), np.maximum(eps, 1e-300))
    err = 100.0 * np.mean(np.abs(p - t) / denom, axis=0)
    return float(err) if err.ndim == 0 else err


def mape_floor(norm: Normalizer) -> np.ndarray:
    """Per-metric denominator floor: 1e-3 of the training range."""
    return 1e-3 * norm.span


# -- runtime criteria --------------------------------------------------


def criterion_channel(generated, criterion: str) -> np.ndarray:
    generated = np.asarray(generated, dtype=DTYPE)
    if criterion.endswith("_eos"):
        return generated[:, EOS]
    if criterion.endswith("_pc_sum"):
        return generated[:, PC_A] + generated[:, PC_B]
    raise ValueError(f"unknown criterion {criterion!r}")


def first_local_max(v) -> int:
    """Smallest 1-indexed t with v[t-1] < v[t] >= v[t+1] (ends padded with -inf)."""
    v = np.asarray(v, dtype=DTYPE)
    if v.size == 0:
        raise ValueError("empty sequence")
    padded = np.concatenate([[-np.inf], v, [-np.inf]])
    hits = np.nonzero((padded[:-2] < padded[1:-1]) & (padded[1:-1] >= padded[2:]))[0]
    return int(hits[0]) + 1


def predict_runtime(generated, criterion: str) -> int:
    """Predicted co-located runtime in steps from a generated T x 12 sequence."""
    if criterion not in CRITERIA:
        raise ValueError(f"unknown criterion {criterion!r}")
    v = criterion_channel(generated, criterion)
    if criterion.startswith("first_max"):
        return first_local_max(v)
    return int(np.argmax(v)) + 1


def clamp_pc(generated) -> np.ndarray:
    """Clip predicted PC channels to their valid range [0, 1] (normalized units)."""
    out = np.array(generated, dtype=DTYPE)
    out[:, PC_A:PC_B + 1] = np.clip(out[:, PC_A:PC_B + 1], 0.0, 1.0)
    return out


def runtime_error(predicted: int, true: int) -> float:
    return 100.0 * abs(predicted - true) / true


@dataclass
class SweepResult:
    ks: List[int]
    table: Dict[Tuple[str, int], Tuple[float, float]]  # (criterion, k) -> (MAPE, std)
    predictions: Dict[Tuple[str, int], List[int]]
    true_lengths: List[int]
    xs: List[int]
    ids: List[str]


def sweep_length_multiplier(model, examples: Sequence[Example], ks: Iterable[int] = range(1, 9),
                            criteria: Sequence[str] = CRITERIA, clamp: bool = True) -> SweepResult:
    """Runtime MAPE for every (criterion, k) over ``examples``.

    Free-running output does not depend on the horizon, so each example is
    generated once at the largest k and truncated for smaller ones.
    """
    ks = sorted(set(int(k) for k in ks))
    if not ks or ks[0] < 1:
        raise ValueError("k values must be >= 1")
    preds = {(c, k): [] for c in criteria for k in ks}
    truths, xs, ids = [], [], []
    for ex in examples:
        gen = model.generate(ex.inputs, steps=ks[-1] * ex.x)
        if clamp:
            gen = clamp_pc(gen)
        truths.append(ex.length)
        xs.append(ex.x)
        ids.append(ex.id)
        for k in ks:
            for c in criteria:
                preds[(c, k)].append(predict_runtime(gen[:k * ex.x], c))
    table = {}
    for key, p in preds.items():
        errs = [runtime_error(pi, ti) for pi, ti in zip(p, truths)]
        table[key] = (float(np.mean(errs)), float(np.std(errs))) if errs else (float("nan"), float("nan"))
    return SweepResult(ks, table, preds, truths, xs, ids)


def bin_errors(predicted: Sequence[int], true: Sequence[int], xs: Sequence[int],
               edges: Sequence[float] = BIN_EDGES) -> Dict[str, dict]:
    """Group absolute percentage runtime errors by predicted length / x.

    Bin i holds predictions in (edges[i] x, edges[i+1] x]; predictions past
    the last edge are dropped.
    """
    bins = {f"({edges[i]:g}x,{edges[i + 1]:g}x]": [] for i in range(len(edges) - 1)}
    labels = list(bins)
    for p, t, x in zip(predicted, true, xs):
        ratio = p / x
        for i in range(len(edges) - 1):
            if edges[i] < ratio <= edges[i + 1]:
                bins[labels[i]].append(runtime_error(p, t))
                break
    out = {}
    for label, errs in bins.items():
        q = [float(v) for v in np.percentile(errs, [25, 50, 75])] if errs else None
        out[label] = {"errors": errs, "quartiles": q, "count": len(errs)}
    return out


# -- experiment 1 -----------------------------------------------------


def elementwise_sequence(model: ElementwiseModel, stacked: np.ndarray, length: int) -> np.ndarray:
    """Per-step predictions for ``length`` steps; past the input, model(0)."""
    pred = predict_elementwise(model, stacked)
    if length <= pred.shape[0]:
        return pred[:length]
    stuck = predict_elementwise(model, np.zeros((1, stacked.shape[1])))
    return np.vstack([pred, np.repeat(stuck, length - pred.shape[0], axis=0)])


def experiment1_predictions(ex: Example, norm: Normalizer, resourcenet=None,
                            elementwise: Optional[Dict[str, ElementwiseModel]] = None) -> Dict[str, np.ndarray]:
    """Denormalized T x 9 metric predictions of every model for one example."""
    T = ex.length
    out = {}
    for name, m in (elementwise or {}).items():
        if m.kind == "sum":
            out[name] = elementwise_sequence(m, ex.raw_stacked, T)
        else:
            normed = ex.inputs[:, :2 * N_METRICS]
            out[name] = norm.invert(elementwise_sequence(m, normed, T))
    if resourcenet is not None:
        gen = resourcenet.generate(ex.inputs, steps=T)
        out["resourcenet"] = norm.invert(gen[:, :N_METRICS])
    return out


@dataclass
class Experiment1Result:
    table: Dict[str, Dict[str, Tuple[float, float]]]  # model -> metric -> (MAPE, std)
    per_triplet: Dict[str, List[np.ndarray]]
    used: List[str]
    excluded: List[str]

    def mean_over_metrics(self, model: str) -> float:
        return float(np.mean([self.table[model][m][0] for m in METRICS]))


def experiment1(examples: Sequence[Example], norm: Normalizer, resourcenet=None,
                elementwise: Optional[Dict[str, ElementwiseModel]] = None) -> Experiment1Result:
    eps = mape_floor(norm)
    per: Dict[str, List[np.ndarray]] = {}
    used, excluded = [], []
    for ex in examples:
        window = OverlapWindow.of(ex)
        if not window.valid:
            excluded.append(ex.id)
            continue
        used.append(ex.id)
        for name, pred in experiment1_predictions(ex, norm, resourcenet, elementwise).items():
            per.setdefault(name, []).append(mape(pred, ex.colocated, window, eps))
    table = {}
    for name, rows in per.items():
        arr = np.array(rows)
        table[name] = {m: (float(arr[:, i].mean()), float(arr[:, i].std())) for i, m in enumerate(METRICS)}
    return Experiment1Result(table, per, used, excluded)


# -- report files ------------------------------------------------------


def _fmt(v: float) -> str:
    return repr(float(v))


def write_mape_table(path, table: Dict[str, Dict[str, Tuple[float, float]]]) -> None:
    header = ["metric"] + [f"{m}_{s}" for m in MODELS for s in ("mape", "std")]
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        if not table:
            return
        for metric in METRICS:
            row = [metric]
            for m in MODELS:
                mean, std = table.get(m, {}).get(metric, (float("nan"), float("nan")))
                row += [_fmt(mean), _fmt(std)]
            w.writerow(row)


def write_runtime_table(path, table: Dict[Tuple[str, int], Tuple[float, float]]) -> None:
    header = ["length"] + [f"{c}_{s}" for c in CRITERIA for s in ("mape", "std")]
    ks = sorted({k for _, k in table})
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for k in ks:
            row = [f"{k}x"]
            for c in CRITERIA:
                mean, std = table.get((c, k), (float("nan"), float("nan")))
                row += [_fmt(mean), _fmt(std)]
            w.writerow(row)


def read_runtime_table(path) -> Dict[Tuple[str, int], Tuple[float, float]]:
    table = {}
    with open(path, encoding="utf-8", newline="") as fh:
        for rec in csv.DictReader(fh):
            k = int(rec["length"].rstrip("x"))
            for c in CRITERIA:
                table[(c, k)] = (float(rec[f"{c}_mape"]), float(rec[f"{c}_std"]))
    return table


def read_mape_table(path) -> Dict[str, Dict[str, Tuple[float, float]]]:
    table: Dict[str, Dict[str, Tuple[float, float]]] = {}
    with open(path, encoding="utf-8", newline="") as fh:
        for rec in csv.DictReader(fh):
            for m in MODELS:
                table.setdefault(m, {})[rec["metric"]] = (float(rec[f"{m}_mape"]), float(rec[f"{m}_std"]))
    return table


def write_trace_comparison(path, truth: np.ndarray, preds: Dict[str, np.ndarray]) -> None:
    """Per-step true vs predicted metrics of one triplet, for plotting."""
    names = sorted(preds)
    header = ["t"] + [f"true_{m}" for m in METRICS] + [f"{n}_{m}" for n in names for m in METRICS]
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for t in range(truth.shape[0]):
            row = [t + 1] + ["%.17g" % v for v in truth[t]]
            for n in names:
                row += ["%.17g" % v for v in preds[n][t]]
            w.writerow(row)


@dataclass
class Report:
    mape_table: Dict[str, Dict[str, Tuple[float, float]]] = field(default_factory=dict)
    runtime_table: Dict[Tuple[str, int], Tuple[float, float]] = field(default_factory=dict)
    bins: Dict[str, dict] = field(default_factory=dict)
    traces: Dict[str, Tuple[np.ndarray, Dict[str, np.ndarray]]] = field(default_factory=dict)
    summary: Dict[str, object] = field(default_factory=dict)


def emit_report(report: Report, out_dir) -> List[str]:
    """Write the report files into ``out_dir``; returns the paths written."""
    os.makedirs(out_dir, exist_ok=True)
    paths = [os.path.join(out_dir, n) for n in ("mape_by_metric.csv", "runtime_sweep.csv", "bins.json")]
    write_mape_table(paths[0], report.mape_table)
    write_runtime_table(paths[1], report.runtime_table)
    with open(paths[2], "w", encoding="utf-8", newline="\n") as fh:
        json.dump(report.bins, fh, indent=1)
        fh.write("\n")
    if report.traces:
        tdir = os.path.join(out_dir, "traces")
        os.makedirs(tdir, exist_ok=True)
        for tid, (truth, preds) in sorted(report.traces.items()):
            p = os.path.join(tdir, f"{tid}.csv")
            write_trace_comparison(p, truth, preds)
            paths.append(p)
    if report.summary:
        p = os.path.join(out_dir, "summary.json")
        with open(p, "w", encoding="utf-8", newline="\n") as fh:
            json.dump(report.summary, fh, indent=1, sort_keys=True)
            fh.write("\n")
        paths.append(p)
    return paths
