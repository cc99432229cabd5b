"""Trace files, the synthetic workload generator and the co-location simulator.

Real benchmark executions are replaced by :func:`cosimulate`, a 1 Hz tick
model: each running application advances through its isolated trace at rate
1/rho, where rho > 1 whenever the summed CPU or block-I/O demand exceeds
machine capacity. Observed metrics are capped sums, with cache-family
counters (and CPI) inflated by ``1 + gamma * (rho - 1)``.
"""

from __future__ import annotations

import csv
import io
import json
import math
import os
from dataclasses import asdict, dataclass, field
from itertools import combinations
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .features import METRICS, N_METRICS, DataError, MetricVector, as_trace
from .numerics import DTYPE

CSV_HEADER = ("t",) + METRICS
OFFSETS = (0.0, 0.25, 0.5, 0.75)
CPU, RAM, IOR, IOW, CPI = 0, 1, 2, 3, 4
CACHE_FAMILY = (5, 6, 7, 8)  # llcm, flcm, pf, tlbm
# progress comparisons tolerate float drift from summing 1/rho
_TICK_EPS = 1e-9


# -- trace CSV ----------------------------------------------------------


def format_trace_csv(trace) -> str:
    trace = as_trace(trace)
    buf = io.StringIO()
    buf.write(",".join(CSV_HEADER) + "\n")
    for i, row in enumerate(trace, start=1):
        buf.write(str(i) + "," + ",".join("%.17g" % v for v in row) + "\n")
    return buf.getvalue()


def save_trace_csv(trace, path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(format_trace_csv(trace))


def load_trace_csv(path) -> np.ndarray:
    """Read a ``t,cpu,...,tlbm`` file into an l x 9 array."""
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{path}: empty file") from None
        if tuple(h.strip() for h in header) != CSV_HEADER:
            raise DataError(f"{path}: header must be {','.join(CSV_HEADER)}, got {','.join(header)}")
        rows = []
        for lineno, rec in enumerate(reader, start=2):
            if not rec:
                continue
            if len(rec) != len(CSV_HEADER):
                raise DataError(f"{path}: row {lineno} has {len(rec)} fields")
            try:
                t = int(rec[0])
                values = [float(v) for v in rec[1:]]
            except ValueError as exc:
                raise DataError(f"{path}: row {lineno}: {exc}") from None
            if t != len(rows) + 1:
                raise DataError(f"{path}: row {lineno}: t must increase from 1 in steps of 1")
            if any(not math.isfinite(v) or v < 0 for v in values):
                raise DataError(f"{path}: row {lineno}: values must be finite and nonnegative")
            rows.append(values)
    if not rows:
        raise DataError(f"{path}: no samples")
    return np.array(rows, dtype=DTYPE)


# -- workload generator --------------------------------------------------


@dataclass
class Phase:
    duration: int
    demand: MetricVector

    def __post_init__(self):
        if isinstance(self.demand, dict):
            self.demand = MetricVector(**self.demand)
        if self.duration < 1:
            raise ValueError("phase duration must be >= 1")


@dataclass
class WorkloadSpec:
    name: str
    phases: List[Phase]
    seed: int = 0
    noise: float = 0.05  # uniform multiplicative noise half-width

    def __post_init__(self):
        self.phases = [p if isinstance(p, Phase) else Phase(**p) for p in self.phases]
        if not self.phases:
            raise ValueError(f"workload {self.name!r} has no phases")

    @property
    def length(self) -> int:
        return sum(p.duration for p in self.phases)

    def to_dict(self) -> dict:
        return asdict(self)


def gen_workload(spec: WorkloadSpec) -> np.ndarray:
    """Concatenate the phase demands and apply seeded per-step noise."""
    base = np.concatenate([np.tile(p.demand.to_array(), (p.duration, 1)) for p in spec.phases])
    if spec.noise > 0:
        rng = np.random.default_rng(spec.seed)
        base = base * rng.uniform(1.0 - spec.noise, 1.0 + spec.noise, size=base.shape)
    return base


# Demand ranges for random_specs; chosen so every metric stays well above zero.
DEMAND_RANGES = {
    "cpu": (15.0, 80.0),
    "ram": (1e9, 3e10),
    "ior": (300.0, 4500.0),
    "iow": (300.0, 4500.0),
    "cpi": (0.6, 2.5),
    "llcm": (1e5, 1e7),
    "flcm": (1e6, 1e8),
    "pf": (100.0, 5000.0),
    "tlbm": (1e4, 1e6),
}


def random_specs(count: int, seed: int = 0, min_length: int = 8, max_length: int = 20,
                 max_phases: int = 3, noise: float = 0.05) -> List[WorkloadSpec]:
    """Random multi-phase workloads for synthetic datasets."""
    rng = np.random.default_rng(seed)
    specs = []
    for i in range(count):
        length = int(rng.integers(min_length, max_length + 1))
        n_phases = int(rng.integers(1, max_phases + 1))
        n_phases = min(n_phases, length)
        cuts = np.sort(rng.choice(np.arange(1, length), size=n_phases - 1, replace=False))
        durations = np.diff(np.concatenate([[0], cuts, [length]])).astype(int)
        phases = []
        for dur in durations:
            demand = {m: float(rng.uniform(*DEMAND_RANGES[m])) for m in METRICS}
            phases.append(Phase(int(dur), MetricVector(**demand)))
        specs.append(WorkloadSpec(f"w{i:03d}", phases, seed=int(rng.integers(2**31)), noise=noise))
    return specs


def specs_to_json(specs: Sequence[WorkloadSpec], contention: Optional["ContentionConfig"] = None) -> dict:
    doc = {"workloads": [s.to_dict() for s in specs]}
    if contention is not None:
        doc["contention"] = asdict(contention)
    return doc


def specs_from_json(doc) -> Tuple[List[WorkloadSpec], "ContentionConfig"]:
    if isinstance(doc, list):
        doc = {"workloads": doc}
    try:
        specs = [WorkloadSpec(**w) for w in doc["workloads"]]
        contention = ContentionConfig(**doc.get("contention", {}))
    except (KeyError, TypeError) as exc:
        raise DataError(f"malformed workload specs: {exc}") from None
    return specs, contention


# -- co-location simulator ----------------------------------------------


@dataclass
class ContentionConfig:
    cpu_capacity: float = 100.0
    io_capacity: float = 10000.0  # blocks/s, read + write
    cache_gain: float = 0.5

    def __post_init__(self):
        if not (self.cpu_capacity > 0 and self.io_capacity > 0):
            raise ValueError("capacities must be positive")
        if self.cache_gain < 0:
            raise ValueError("cache_gain must be >= 0")


def cosimulate(a, b, delay: int, cfg: Optional[ContentionConfig] = None):
    """Simulate a and b sharing one machine, b starting ``delay`` ticks late.

    Returns (colocated trace, completion tick of a, completion tick of b).
    """
    cfg = cfg or ContentionConfig()
    if delay < 0:
        raise ValueError("delay must be nonnegative")
    traces = [as_trace(a), as_trace(b)]
    lengths = [t.shape[0] for t in traces]
    starts = [0, delay]
    progress = [0.0, 0.0]
    done: List[Optional[int]] = [None, None]
    rows = []
    tick = 0
    while None in done:
        tick += 1
        active = [i for i in (0, 1) if done[i] is None and tick > starts[i]]
        if not active:
            rows.append(np.zeros(N_METRICS, dtype=DTYPE))
            continue
        demands = [traces[i][min(int(math.floor(progress[i] + _TICK_EPS)), lengths[i] - 1)] for i in active]
        cpu = sum(d[CPU] for d in demands)
        io = sum(d[IOR] + d[IOW] for d in demands)
        rho = max(1.0, cpu / cfg.cpu_capacity, io / cfg.io_capacity)
        inflate = 1.0 + cfg.cache_gain * (rho - 1.0)

        obs = np.empty(N_METRICS, dtype=DTYPE)
        obs[CPU] = min(cfg.cpu_capacity, cpu)
        obs[RAM] = sum(d[RAM] for d in demands)
        obs[IOR] = min(cfg.io_capacity, sum(d[IOR] for d in demands))
        obs[IOW] = min(cfg.io_capacity, sum(d[IOW] for d in demands))
        obs[CPI] = (sum(d[CPU] * d[CPI] for d in demands) / cpu) * inflate if cpu > 0 else 0.0
        for m in CACHE_FAMILY:
            obs[m] = sum(d[m] for d in demands) * inflate
        rows.append(obs)

        for i in active:
            progress[i] += 1.0 / rho
            if progress[i] >= lengths[i] - _TICK_EPS:
                done[i] = tick
    return np.array(rows), done[0], done[1]


# -- triplets and datasets ----------------------------------------------


@dataclass
class Triplet:
    id: str
    a: np.ndarray
    b: np.ndarray
    colocated: np.ndarray
    delay_fraction: float
    delay_steps: int
    completion_a: int
    completion_b: int
    a_name: str = ""
    b_name: str = ""

    def __post_init__(self):
        if not 0 <= self.delay_fraction < 1:
            raise DataError("delay fraction must lie in [0, 1)")
        n = self.colocated.shape[0]
        if not (1 <= self.completion_a <= n and 1 <= self.completion_b <= n):
            raise DataError(f"{self.id}: completion steps must lie within the co-located trace")


def delay_steps(fraction: float, a_len: int, b_len: int) -> int:
    # round half up, not to even
    return int(math.floor(fraction * max(a_len, b_len) + 0.5))


def make_triplet(a_name: str, a, b_name: str, b, fraction: float,
                 cfg: Optional[ContentionConfig] = None) -> Triplet:
    """Order the pair longest-first, delay the other one and co-simulate."""
    a, b = as_trace(a), as_trace(b)
    if b.shape[0] > a.shape[0]:
        a_name, a, b_name, b = b_name, b, a_name, a
    delay = delay_steps(fraction, a.shape[0], b.shape[0])
    ab, ca, cb = cosimulate(a, b, delay, cfg)
    return Triplet(f"{a_name}__{b_name}__d{fraction:g}", a, b, ab, fraction, delay, ca, cb, a_name, b_name)


def split_pairs(names: Sequence[str], test_fraction: float, seed: int):
    """Shuffle unordered pairs and split them; returns (train_pairs, test_pairs)."""
    if not 0 < test_fraction < 1:
        raise ValueError("test_fraction must lie in (0, 1)")
    pairs = list(combinations(names, 2))
    order = np.random.default_rng(seed).permutation(len(pairs))
    n_test = int(math.floor(test_fraction * len(pairs) + 0.5))
    test = sorted(pairs[i] for i in order[:n_test])
    train = sorted(pairs[i] for i in order[n_test:])
    return train, test


def build_triplets(specs: Sequence[WorkloadSpec], pairs, offsets=OFFSETS,
                   cfg: Optional[ContentionConfig] = None) -> List[Triplet]:
    traces = {s.name: gen_workload(s) for s in specs}
    out = []
    for p, q in pairs:
        for f in offsets:
            out.append(make_triplet(p, traces[p], q, traces[q], f, cfg))
    return out


def build_dataset(specs: Sequence[WorkloadSpec], out_dir=None, offsets=OFFSETS,
                  cfg: Optional[ContentionConfig] = None, split_seed: int = 0,
                  test_fraction: float = 0.2):
    """All pairs x offsets, split by workload pair.

    With ``out_dir`` the traces and ``train.json`` / ``test.json`` manifests
    are written there. Returns (train triplets, test triplets).
    """
    if len(specs) < 2:
        raise ValueError("need at least two workload specs")
    names = [s.name for s in specs]
    if len(set(names)) != len(names):
        raise ValueError("workload names must be unique")
    train_pairs, test_pairs = split_pairs(names, test_fraction, split_seed)
    train = build_triplets(specs, train_pairs, offsets, cfg)
    test = build_triplets(specs, test_pairs, offsets, cfg)
    if out_dir is not None:
        write_dataset(out_dir, specs, train, test)
    return train, test


def write_dataset(out_dir, specs: Sequence[WorkloadSpec], train: Sequence[Triplet],
                  test: Sequence[Triplet]) -> None:
    os.makedirs(os.path.join(out_dir, "isolated"), exist_ok=True)
    os.makedirs(os.path.join(out_dir, "colocated"), exist_ok=True)
    for s in specs:
        save_trace_csv(gen_workload(s), os.path.join(out_dir, "isolated", f"{s.name}.csv"))
    for name, triplets in (("train", train), ("test", test)):
        for t in triplets:
            save_trace_csv(t.colocated, os.path.join(out_dir, "colocated", f"{t.id}.csv"))
        write_manifest(os.path.join(out_dir, f"{name}.json"), triplets)


def manifest_entry(t: Triplet) -> dict:
    return {
        "a": f"isolated/{t.a_name}.csv",
        "b": f"isolated/{t.b_name}.csv",
        "ab": f"colocated/{t.id}.csv",
        "delay_fraction": t.delay_fraction,
        "delay_steps": t.delay_steps,
        "completion_a": t.completion_a,
        "completion_b": t.completion_b,
    }


def write_manifest(path, triplets: Sequence[Triplet]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump([manifest_entry(t) for t in triplets], fh, indent=1)
        fh.write("\n")


def read_manifest(path) -> List[dict]:
    try:
        with open(path, encoding="utf-8") as fh:
            entries = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"cannot read manifest {path}: {exc}") from None
    required = {"a", "b", "ab", "delay_fraction", "delay_steps", "completion_a", "completion_b"}
    if not isinstance(entries, list):
        raise DataError(f"{path}: manifest must be a JSON array")
    for i, e in enumerate(entries):
        if not isinstance(e, dict):
            raise DataError(f"{path}: entry {i} is not an object")
        missing = required - set(e)
        if missing:
            raise DataError(f"{path}: entry {i} lacks {sorted(missing)}")
    return entries


def load_manifest(path) -> List[Triplet]:
    """Load every triplet listed in a manifest (paths relative to its folder)."""
    root = os.path.dirname(os.path.abspath(path))
    cache: Dict[str, np.ndarray] = {}

    def trace(rel):
        if rel not in cache:
            cache[rel] = load_trace_csv(os.path.join(root, rel))
        return cache[rel]

    out = []
    for e in read_manifest(path):
        stem = lambda rel: os.path.splitext(os.path.basename(rel))[0]
        out.append(Triplet(
            id=stem(e["ab"]), a=trace(e["a"]), b=trace(e["b"]), colocated=trace(e["ab"]),
            delay_fraction=float(e["delay_fraction"]), delay_steps=int(e["delay_steps"]),
            completion_a=int(e["completion_a"]), completion_b=int(e["completion_b"]),
            a_name=stem(e["a"]), b_name=stem(e["b"]),
        ))
    return out
