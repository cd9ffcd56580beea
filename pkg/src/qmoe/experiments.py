"""Cross-validated training, evaluation and the bit-width ablation.

These functions sit between the library and the CLI: they take a
:class:`~qmoe.config.RunConfig` and return plain dicts ready for JSON.
"""

from __future__ import annotations

import json

import numpy as np

from .audio import atomic_write, load_embeddings
from .bench import (BenchReport, expert_energy, fold_indices, routing_energy, run_latency_bench,
                    synth_dataset)
from .errors import DataError
from .experts import ExpertNet, TrainConfig, convert_to_bitwise, macro_f1, train_expert
from .quantizers import QuantScheme, model_size_report
from .router import MoEModel, route_batch, train_moe
from .stats import paired_t_test
from .tensor_core import Rng


def load_table(cfg):
    """Embeddings from ``cfg.data``, or the ``cfg.synth`` dataset when no path is set."""
    if cfg.data:
        table = load_embeddings(cfg.data)
        if table.labels is None:
            raise DataError(f"{cfg.data} has no labels")
        return table
    s = cfg.synth
    return synth_dataset(s.num_classes, s.samples_per_class, s.cluster_spread, s.seed)


def num_classes(table):
    return int(table.labels.max()) + 1


def split(table, cfg, fold=0):
    folds = fold_indices(table.rows, cfg.fold_count, cfg.seed)
    val = folds[fold]
    train = np.concatenate([f for i, f in enumerate(folds) if i != fold])
    return (table.data[train], table.labels[train]), (table.data[val], table.labels[val])


def train_config(cfg, moe=False):
    base = TrainConfig.moe if moe else TrainConfig.individual
    return base(max_epochs=cfg.max_epochs, patience=cfg.patience, seed=cfg.seed)


def train_one(table, scheme, cfg, fold=0):
    """Train one expert on every fold but ``fold``; returns ``(net, result)``."""
    train, val = split(table, cfg, fold)
    # bitwise layers are post-training: fit a float net, then binarise it
    ptq = scheme.kind == "bitwise"
    net = ExpertNet.build(num_classes(table), QuantScheme.float32() if ptq else scheme,
                          hidden=tuple(cfg.hidden), seed=cfg.seed)
    result = train_expert(net, train, val, train_config(cfg))
    if ptq:
        net = convert_to_bitwise(net, train[0])
        result = train_expert(net, train, val, train_config(cfg))
    return net, result


def build_moe(table, cfg):
    return MoEModel.build(num_classes(table), cfg.scheme_objs, tuple(cfg.hidden), seed=cfg.seed,
                          k=min(cfg.k, len(cfg.schemes)), T=cfg.T,
                          alpha_curiosity=cfg.alpha_curiosity, alpha_balance=cfg.alpha_balance,
                          mc_samples=cfg.mc_samples, kl_mode=cfg.kl_mode)


def train_moe_one(table, cfg, fold=0, train_cfg=None):
    train, val = split(table, cfg, fold)
    model = build_moe(table, cfg)
    result = train_moe(model, train, val, train_cfg or train_config(cfg, moe=True))
    return model, result


def size_dict(net):
    rep = model_size_report(net.quantized_layers())
    return rep.to_dict()


def evaluate(model, table, routing="uniform", seed=0):
    """Macro-F1 of an expert or MoE on a labelled table, plus routing energy for a MoE."""
    C = num_classes(table)
    out = {"rows": table.rows}
    if isinstance(model, MoEModel):
        y, batch = route_batch(model, table.data, routing, Rng(seed))
        preds = np.argmax(y, axis=1)
        out["energy_proxy"] = routing_energy(model, batch.selected, routing).to_dict()
        out["selection_counts"] = np.bincount(batch.selected[:, 0],
                                              minlength=model.num_experts).tolist()
    else:
        preds = model.predict(table.data)
        out["energy_proxy"] = expert_energy(model, table.rows).to_dict()
    C = max(C, model.num_classes)
    out["f1"] = macro_f1(preds, table.labels, C)
    out["accuracy"] = float(np.mean(preds == table.labels))
    return out


def ablation(table, cfg, partial_path=None, bench=True, log=None):
    """Per bit-width: train on every fold, record F1, latency, energy and size.

    If a fold fails, whatever finished is written to ``partial_path`` with
    ``"partial": true`` and the error is re-raised.
    """
    reports, rows, folds_f1 = [], [], {}
    try:
        for k in cfg.bits:
            scheme = QuantScheme.bitlinear(k)
            f1s, net = [], None
            for fold in range(cfg.fold_count):
                net, res = train_one(table, scheme, cfg, fold)
                f1s.append(res.best_val_f1)
                if log is not None:
                    log({"bits": k, "fold": fold, "val_f1": res.best_val_f1,
                         "epochs": len(res.history)})
            folds_f1[k] = f1s
            size = size_dict(net)
            latency = None
            if bench:
                _, val = split(table, cfg, 0)
                work = val[0][:cfg.workload_size]
                latency = run_latency_bench(net.forward, work, runs=cfg.bench_runs,
                                            warmup=cfg.bench_warmup,
                                            config_id=str(scheme)).stats()
            energy = expert_energy(net)
            reports.append(BenchReport(str(scheme), latency, energy, size["total_bytes"],
                                       size["reduction"], f1s))
            rows.append({"bits": k, "f1": float(np.mean(f1s)),
                         "latency_ms": None if latency is None else latency.mean_ms,
                         "energy_units": energy.total, "size_bytes": size["total_bytes"],
                         "size_reduction": size["reduction"]})
    except Exception as exc:
        if partial_path:
            payload = _ablation_payload(reports, rows, folds_f1, cfg)
            payload["partial"] = True
            payload["error"] = f"{type(exc).__name__}: {exc}"
            atomic_write(partial_path, (json.dumps(payload, indent=2, sort_keys=True) + "\n")
                         .encode())
        raise
    return _ablation_payload(reports, rows, folds_f1, cfg)


def _ablation_payload(reports, rows, folds_f1, cfg):
    ref = folds_f1.get(16)
    ref_mean = float(np.mean(ref)) if ref else None
    others = [k for k in folds_f1 if k != 16]
    for row, rep in zip(rows, reports):
        k = row["bits"]
        row["pct_of_16bit"] = (100.0 * row["f1"] / ref_mean) if ref_mean else None
        if ref and k != 16:
            try:
                rep.stats.append(paired_t_test(folds_f1[k], ref, comparisons=len(others)))
            except DataError:
                pass  # identical fold scores; t is undefined
    return {"experiment": "ablation", "partial": False, "seed": cfg.seed,
            "fold_count": cfg.fold_count, "table": rows,
            "reports": [r.to_dict() for r in reports]}
