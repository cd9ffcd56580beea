"""Latency harness, synthetic workloads, the energy proxy, and bench reports.

Timed regions run one at a time (a process-wide lock) with BLAS/OpenMP pools
limited to one thread. Only ``latency`` fields of a report depend on the
clock; everything else is a deterministic function of config and seed.
"""

from __future__ import annotations

import gc
import math
import threading
import time
from dataclasses import dataclass, field

import numpy as np
from threadpoolctl import threadpool_limits

from .audio import EmbeddingTable
from .bitwise import popcount_words
from .errors import DataError, ParameterError
from .stats import levene_test
from .tensor_core import Rng

_TIMING_LOCK = threading.Lock()


@dataclass(frozen=True)
class LatencySample:
    config_id: str
    run_index: int
    wall_ms: float
    batch_size: int

    def __post_init__(self):
        if not self.wall_ms > 0:
            raise DataError(f"non-positive wall time {self.wall_ms}")


@dataclass
class LatencyStats:
    mean_ms: float
    sd_ms: float
    min: float
    max: float
    runs: int

    @classmethod
    def of(cls, samples):
        ms = np.array([s.wall_ms for s in samples], dtype=np.float64)
        if ms.size == 0:
            raise DataError("no latency samples")
        sd = float(ms.std(ddof=1)) if ms.size > 1 else 0.0
        return cls(float(ms.mean()), sd, float(ms.min()), float(ms.max()), int(ms.size))

    def to_dict(self):
        return {"mean_ms": self.mean_ms, "sd_ms": self.sd_ms, "min": self.min,
                "max": self.max, "runs": self.runs}


def resource_peak_rss():
    """Peak resident set size in bytes via ``getrusage`` (Linux reports KiB)."""
    import resource
    import sys

    peak = resource.getrusage(resource.RUSAGE_SELF).ru_maxrss
    return peak if sys.platform == "darwin" else peak * 1024


def _rows(workload):
    if isinstance(workload, EmbeddingTable):
        return workload.data
    return np.asarray(workload)


def run_latency_bench(model, workload, runs=30, warmup=3, config_id="model", ram_hook=None):
    """Time ``model(rows)`` over a whole workload, ``runs`` times after ``warmup`` untimed runs.

    ``workload`` is an :class:`EmbeddingTable`, an array, or a callable
    ``run_index -> workload`` (warmups get negative indices). Workloads are
    built outside the timed region. ``ram_hook`` is called once after the
    timed runs; its value is attached to the returned list as ``peak_ram``.
    """
    if runs < 5:
        raise ParameterError("need at least 5 timed runs")
    if warmup < 1:
        raise ParameterError("need at least 1 warmup run")
    make = workload if callable(workload) else (lambda _i: workload)
    samples = []
    gc_was_on = gc.isenabled()
    with _TIMING_LOCK, threadpool_limits(limits=1):
        try:
            for i in range(-warmup, runs):
                rows = _rows(make(i))
                if rows.shape[0] == 0:
                    raise DataError("empty workload")
                gc.collect()
                gc.disable()
                start = time.perf_counter_ns()
                model(rows)
                elapsed = time.perf_counter_ns() - start
                if gc_was_on:
                    gc.enable()
                if i >= 0:
                    samples.append(LatencySample(config_id, i, max(elapsed, 1) / 1e6, rows.shape[0]))
        finally:
            if gc_was_on:
                gc.enable()
    result = SampleList(samples)
    result.peak_ram = ram_hook() if ram_hook is not None else None
    return result


class SampleList(list):
    peak_ram = None

    def stats(self):
        return LatencyStats.of(self)


class StubModel:
    """Deterministic constant-cost model: ``passes`` float32 mat-vecs per input row."""

    def __init__(self, passes=1, width=256, seed=0):
        r = Rng(seed)
        self.weight = r.normal(0.0, 0.05, (1024, width))
        self.passes = passes

    def __call__(self, rows):
        acc = 0.0
        for row in rows:
            for _ in range(self.passes):
                acc += float(np.tanh(row @ self.weight).sum())
        return acc


# ---------------------------------------------------------------------------
# synthetic data
# ---------------------------------------------------------------------------


def synth_dataset(num_classes, samples_per_class, cluster_spread, seed):
    """Gaussian clusters around random unit-norm 1024-d centers, labels attached.

    Rows are grouped by class (class 0 first). The same seed gives a
    byte-identical table.
    """
    if num_classes < 2:
        raise ParameterError("need at least two classes")
    if samples_per_class < 1 or cluster_spread < 0:
        raise ParameterError("need samples_per_class >= 1 and spread >= 0")
    rng = Rng(seed)
    centers = rng.standard_normal((num_classes, 1024))
    centers /= np.linalg.norm(centers, axis=1, keepdims=True)
    labels = np.repeat(np.arange(num_classes), samples_per_class)
    noise = rng.standard_normal((labels.size, 1024))
    data = centers[labels] + cluster_spread * noise
    return EmbeddingTable.create(data.astype(np.float32), labels)


def class_centroids(table):
    C = int(table.labels.max()) + 1
    return np.stack([table.data[table.labels == c].mean(axis=0) for c in range(C)])


def mixed_workload(pool, size, seed, concentration=0.5):
    """``size`` rows drawn from ``pool`` with a Dirichlet class mix, all seeded."""
    C = int(pool.labels.max()) + 1
    rng = Rng(seed)
    mix = rng.dirichlet(np.full(C, concentration))
    cls = rng.choice(C, size=size, p=mix)
    by_class = [np.nonzero(pool.labels == c)[0] for c in range(C)]
    idx = np.array([by_class[c][rng.integers(0, by_class[c].size)] for c in cls], dtype=np.int64)
    return pool.subset(idx)


def fold_indices(n, folds, seed):
    """Seeded shuffle, then round-robin fold assignment by position."""
    if folds < 2:
        raise ParameterError("need at least 2 folds")
    order = Rng(seed).permutation(n)
    assign = np.empty(n, dtype=np.int64)
    assign[order] = np.arange(n) % folds
    return [np.nonzero(assign == f)[0] for f in range(folds)]


# ---------------------------------------------------------------------------
# energy proxy
# ---------------------------------------------------------------------------

# cost units per operation (femtojoule-scale, rounded literature figures for
# 45 nm arithmetic); callers may pass their own table.
DEFAULT_COSTS = {
    "fp32_mac": 4600,
    "int1_mac": 30,
    "int2_mac": 50,
    "int4_mac": 100,
    "int8_mac": 230,
    "int16_mac": 800,
    "ternary_add": 30,
    "popcount_word": 100,
}


def layer_ops(in_dim, out_dim, scheme):
    """``(op_name, count)`` for one forward pass of a single input through a layer."""
    kind = scheme.kind
    if kind == "float32":
        return "fp32_mac", in_dim * out_dim
    if kind == "bitlinear":
        return f"int{scheme.bits}_mac", in_dim * out_dim
    if kind == "ternary":
        return "ternary_add", in_dim * out_dim
    return "popcount_word", popcount_words(in_dim, out_dim)


def count_ops(layer_specs, inputs=1):
    counts = {}
    for in_dim, out_dim, scheme in layer_specs:
        op, n = layer_ops(in_dim, out_dim, scheme)
        counts[op] = counts.get(op, 0) + n * inputs
    return counts


@dataclass
class EnergyProxy:
    counts: dict
    costs: dict = field(default_factory=lambda: dict(DEFAULT_COSTS))

    def __post_init__(self):
        missing = set(self.counts) - set(self.costs)
        if missing:
            raise ParameterError(f"no cost for operations {sorted(missing)}")

    @property
    def total(self):
        return sum(self.counts[k] * self.costs[k] for k in sorted(self.counts))

    def __add__(self, other):
        counts = dict(self.counts)
        for k, v in other.counts.items():
            counts[k] = counts.get(k, 0) + v
        return EnergyProxy(counts, self.costs)

    def to_dict(self):
        return {"counts": dict(sorted(self.counts.items())), "total_units": self.total}


def expert_energy(net, inputs=1, costs=None):
    return EnergyProxy(count_ops(net.layer_specs, inputs), dict(costs or DEFAULT_COSTS))


def routing_energy(model, selected, mode, costs=None):
    """Energy of routing a batch whose top-k choices are ``selected`` (batch, k)."""
    costs = dict(costs or DEFAULT_COSTS)
    B = selected.shape[0]
    router_passes = B * (1 + (model.mc_samples if mode == "curious" else 0))
    total = EnergyProxy(count_ops(model.router.layer_specs, router_passes), costs)
    for e, net in enumerate(model.experts):
        n = B if mode == "curious" else int(np.count_nonzero((selected == e).any(axis=1)))
        total = total + EnergyProxy(count_ops(net.layer_specs, n), costs)
    return total


# ---------------------------------------------------------------------------
# reports
# ---------------------------------------------------------------------------


def variance_reduction_report(uniform, curious):
    """sd and variance reductions of ``curious`` relative to ``uniform``, with Levene's test."""
    u = np.array([s.wall_ms for s in uniform], dtype=np.float64)
    c = np.array([s.wall_ms for s in curious], dtype=np.float64)
    if u.size == 0 or c.size == 0:
        raise DataError("both sample sets must be non-empty")
    sd_u = float(u.std(ddof=1)) if u.size > 1 else 0.0
    sd_c = float(c.std(ddof=1)) if c.size > 1 else 0.0
    if sd_u > 0:
        sd_red = 1.0 - sd_c / sd_u
        var_red = 1.0 - (sd_c / sd_u) ** 2
    else:
        sd_red = var_red = 0.0
    lev = levene_test(u, c)
    return {
        "uniform": LatencyStats.of(uniform).to_dict(),
        "curious": LatencyStats.of(curious).to_dict(),
        "sd_reduction_pct": 100.0 * sd_red,
        "variance_reduction_pct": 100.0 * var_red,
        "sd_ratio": (sd_u / sd_c) if sd_c > 0 else math.inf,
        "levene": lev.to_dict(),
    }


REPORT_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "title": "BenchReport",
    "type": "object",
    "required": ["config_id", "latency", "energy_proxy", "size", "f1", "stats"],
    "additionalProperties": False,
    "properties": {
        "config_id": {"type": "string"},
        "latency": {
            "x-nondeterministic": True,
            "type": ["object", "null"],
            "required": ["mean_ms", "sd_ms", "min", "max", "runs"],
            "additionalProperties": False,
            "properties": {
                "mean_ms": {"type": "number", "minimum": 0},
                "sd_ms": {"type": "number", "minimum": 0},
                "min": {"type": "number", "minimum": 0},
                "max": {"type": "number", "minimum": 0},
                "runs": {"type": "integer", "minimum": 0},
            },
        },
        "energy_proxy": {
            "type": ["object", "null"],
            "required": ["counts", "total_units"],
            "properties": {
                "counts": {"type": "object", "additionalProperties": {"type": "integer", "minimum": 0}},
                "total_units": {"type": "number", "minimum": 0},
            },
        },
        "size": {
            "type": ["object", "null"],
            "required": ["bytes", "reduction"],
            "properties": {"bytes": {"type": "integer"}, "reduction": {"type": "number"}},
        },
        "f1": {
            "type": ["object", "null"],
            "required": ["mean", "sd", "folds"],
            "properties": {
                "mean": {"type": "number"},
                "sd": {"type": "number"},
                "folds": {"type": "array", "items": {"type": "number"}},
            },
        },
        "stats": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["test", "statistic", "p", "effect_size", "corrected_alpha", "verdict"],
                "properties": {
                    "test": {"enum": ["paired_t", "levene", "spearman"]},
                    "statistic": {"type": "number"},
                    "p": {"type": "number", "minimum": 0, "maximum": 1},
                    "effect_size": {"type": ["number", "null"]},
                    "corrected_alpha": {"type": "number"},
                    "verdict": {"type": "string"},
                },
            },
        },
    },
}

NONDETERMINISTIC_FIELDS = ("latency", "latency_ms")


@dataclass
class BenchReport:
    config_id: str
    latency: LatencyStats | None = None
    energy: EnergyProxy | None = None
    size_bytes: int | None = None
    size_reduction: float | None = None
    f1_folds: list | None = None
    stats: list = field(default_factory=list)

    def to_dict(self):
        f1 = None
        if self.f1_folds is not None:
            arr = np.asarray(self.f1_folds, dtype=np.float64)
            f1 = {"mean": float(arr.mean()), "sd": float(arr.std(ddof=1)) if arr.size > 1 else 0.0,
                  "folds": [float(v) for v in arr]}
        size = None
        if self.size_bytes is not None:
            size = {"bytes": int(self.size_bytes), "reduction": float(self.size_reduction)}
        return {
            "config_id": self.config_id,
            "latency": None if self.latency is None else self.latency.to_dict(),
            "energy_proxy": None if self.energy is None else self.energy.to_dict(),
            "size": size,
            "f1": f1,
            "stats": [s.to_dict() for s in self.stats],
        }

    def deterministic_dict(self):
        d = self.to_dict()
        for key in NONDETERMINISTIC_FIELDS:
            d.pop(key, None)
        return d


def validate_report(report_dict):
    import jsonschema

    jsonschema.validate(report_dict, REPORT_SCHEMA)
    return report_dict
