"""Routing-latency comparison and a heterogeneous-cost MoE to run it on.

Uniform routing pays only for the experts a batch happens to pick, so its
per-run cost swings with the class mix of the workload. Curious routing runs
every expert plus the MC-dropout router passes on every input, which makes its
cost nearly independent of the mix.
"""

from __future__ import annotations

import warnings

import numpy as np

from .bench import mixed_workload, run_latency_bench, synth_dataset, variance_reduction_report
from .experts import ExpertNet, TrainConfig, convert_to_bitwise, train_expert
from .quantizers import QuantScheme
from .router import MoEModel, RouterNet, route_batch_curious, route_batch_uniform
from .tensor_core import Rng


def heterogeneous_moe(pool, seed=0):
    """Two cheap bitwise experts around one BitLinear(16) expert, with a router
    trained to send class ``c`` to expert ``c % 3``.

    The experts are left untrained; only their cost matters here.
    """
    X, y = pool.data, pool.labels
    cheap_a = convert_to_bitwise(ExpertNet.build(int(y.max()) + 1, hidden=(256, 128, 64),
                                                 seed=seed + 1), X)
    big = ExpertNet.build(int(y.max()) + 1, QuantScheme.bitlinear(16), hidden=(640, 320),
                          seed=seed + 2)
    cheap_b = convert_to_bitwise(ExpertNet.build(int(y.max()) + 1, hidden=(128, 64),
                                                 seed=seed + 3), X)
    router = RouterNet.create(3, seed=seed + 4)
    target = y % 3
    train_expert(router, (X, target), (X, target), TrainConfig(max_epochs=20, patience=5, seed=seed))
    return MoEModel([cheap_a, big, cheap_b], router, k=1, alpha_curiosity=1.0)


def routing_pool(seed=0):
    return synth_dataset(6, 50, 0.05, seed)


def compare_routing(model, pool, runs=30, size=500, seed=1000, concentration=0.1, warmup=2):
    """Time uniform then curious routing on the same seeded workloads.

    Run ``i`` of each mode sees ``mixed_workload(pool, size, seed + i)``.
    Returns :func:`variance_reduction_report` plus the settings used.
    """
    shapes = {tuple((i, o, str(s)) for i, o, s in net.layer_specs) for net in model.experts}
    if len(shapes) < 2:
        warnings.warn("experts have equal cost; the variance comparison is meaningless",
                      RuntimeWarning, stacklevel=2)

    def workload(i):
        return mixed_workload(pool, size, seed + max(i, 0) + (10**6 if i < 0 else 0),
                              concentration)

    uniform = run_latency_bench(lambda rows: route_batch_uniform(model, rows), workload,
                                runs=runs, warmup=warmup, config_id="uniform")
    rng = Rng(seed)
    curious = run_latency_bench(lambda rows: route_batch_curious(model, rows, rng), workload,
                                runs=runs, warmup=warmup, config_id="curious")
    report = variance_reduction_report(uniform, curious)
    report["settings"] = {"runs": runs, "workload_size": size, "seed": seed,
                          "concentration": concentration}
    return report


def selection_counts(model, pool, size=500, seed=1000, concentration=0.1, runs=30):
    """Per-run expert selection counts under uniform routing (deterministic)."""
    out = []
    for i in range(runs):
        rows = mixed_workload(pool, size, seed + i, concentration).data
        _, batch = route_batch_uniform(model, rows)
        out.append(np.bincount(batch.selected[:, 0], minlength=model.num_experts).tolist())
    return out
