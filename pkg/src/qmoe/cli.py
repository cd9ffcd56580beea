"""``qmoe`` command line.

Every command prints (or writes to ``--out``/``--report``) one JSON report.
``--out`` names the command's main artifact: the embedding file for
``synth-data``, the model container for ``train-*``, the ``.npy`` array for
``melspec``, and the report itself for everything else.

Exit codes: 0 ok, 2 bad config or arguments, 3 bad data, 4 internal error.
"""

from __future__ import annotations

import argparse
import json
import sys
import warnings

import numpy as np

from . import __version__
from .audio import atomic_write, load_wav, melspectrogram, save_embeddings
from .bench import (NONDETERMINISTIC_FIELDS, BenchReport, expert_energy, routing_energy,
                    run_latency_bench, validate_report)
from .config import RunConfig
from .container import load_model, save_model
from .errors import ConfigError, DataError, QmoeError
from .experiments import (ablation, build_moe, evaluate, load_table, size_dict, split,
                          train_config, train_one)
from .experts import ExpertNet
from .quantizers import model_size_report
from .router import MoEModel, route_batch, train_moe
from .scenario import compare_routing, heterogeneous_moe, routing_pool, selection_counts
from .stats import levene_test, paired_t_test, spearman_test, stars
from .tensor_core import Rng


def _json_default(obj):
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.floating):
        return float(obj)
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    raise TypeError(f"cannot serialise {type(obj).__name__}")


def dumps(report):
    return json.dumps(report, indent=2, sort_keys=True, default=_json_default) + "\n"


def strip_nondeterministic(report):
    """Copy of ``report`` without timing fields, at any depth."""
    if isinstance(report, dict):
        return {k: strip_nondeterministic(v) for k, v in report.items()
                if k not in NONDETERMINISTIC_FIELDS}
    if isinstance(report, list):
        return [strip_nondeterministic(v) for v in report]
    return report


def _emit(report, path):
    text = dumps(report)
    if path:
        atomic_write(path, text.encode())
    else:
        sys.stdout.write(text)


def _floats(text):
    """Comma-separated numbers, or a path to a JSON list."""
    if text.lstrip().startswith("@"):
        with open(text.strip()[1:], encoding="utf-8") as fh:
            values = json.load(fh)
    else:
        try:
            values = [float(v) for v in text.split(",") if v.strip()]
        except ValueError:
            raise ConfigError(f"not a comma-separated list of numbers: {text!r}") from None
    return np.asarray(values, dtype=np.float64)


def _out(args):
    return getattr(args, "out", None)


def _require(value, flag):
    if not value:
        raise ConfigError(f"{flag} is required")
    return value


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_synth_data(cfg, args):
    out = _require(_out(args), "--out")
    table = load_table(cfg)
    save_embeddings(table, out)
    return {"experiment": "synth-data", "rows": table.rows, "dim": table.dim,
            "classes": int(table.labels.max()) + 1, "synth": cfg.to_dict()["synth"]}


def cmd_train_expert(cfg, args):
    table = load_table(cfg)
    scheme = cfg.scheme_objs[0]
    net, res = train_one(table, scheme, cfg, args.fold)
    if cfg.model:
        save_model(net, cfg.model)
    return {"experiment": "train-expert", "scheme": str(scheme), "fold": args.fold,
            "seed": cfg.seed, "best_epoch": res.best_epoch, "best_val_f1": res.best_val_f1,
            "epochs": len(res.history), "history": res.history, "size": size_dict(net),
            "energy_proxy": expert_energy(net).to_dict()}


def cmd_train_moe(cfg, args):
    table = load_table(cfg)
    train, val = split(table, cfg, args.fold)
    model = build_moe(table, cfg)
    res = train_moe(model, train, val, train_config(cfg, moe=True))
    if cfg.model:
        save_model(model, cfg.model)
    return {"experiment": "train-moe", "schemes": [str(s) for s in cfg.scheme_objs],
            "fold": args.fold, "seed": cfg.seed, "k": model.k, "T": model.T,
            "best_epoch": res.best_epoch, "best_val_f1": res.best_val_f1,
            "epochs": len(res.history), "history": res.history}


def cmd_eval(cfg, args):
    model = load_model(_require(cfg.model, "--model"))
    table = load_table(cfg)
    out = evaluate(model, table, cfg.routing, cfg.seed)
    out.update(experiment="eval", routing=cfg.routing if isinstance(model, MoEModel) else None)
    return out


def _bench_target(model, cfg):
    if isinstance(model, MoEModel):
        rng = Rng(cfg.seed)
        return lambda rows: route_batch(model, rows, cfg.routing, rng)
    return model.forward


def cmd_bench(cfg, args):
    model = load_model(_require(cfg.model, "--model"))
    table = load_table(cfg)
    rows = table.data[:cfg.workload_size]
    samples = run_latency_bench(_bench_target(model, cfg), rows, runs=cfg.bench_runs,
                                warmup=cfg.bench_warmup, config_id=cfg.routing)
    f1 = evaluate(model, table, cfg.routing, cfg.seed)["f1"]
    if isinstance(model, MoEModel):
        _, batch = route_batch(model, rows, cfg.routing, Rng(cfg.seed))
        energy = routing_energy(model, batch.selected, cfg.routing)
        layers = [q for net in [*model.experts, model.router] for q in net.quantized_layers()]
        config_id = f"moe-{cfg.routing}"
    else:
        energy = expert_energy(model, rows.shape[0])
        layers = model.quantized_layers()
        config_id = str(model.layers[0].scheme)
    size = model_size_report(layers)
    report = BenchReport(config_id, samples.stats(), energy, size.total_bytes, size.reduction, [f1])
    return validate_report(report.to_dict())


def cmd_bench_routing(cfg, args):
    if cfg.model:
        model = load_model(cfg.model)
        if not isinstance(model, MoEModel):
            raise DataError(f"{cfg.model} holds a single expert, not a MoE")
        pool = load_table(cfg)
    else:
        pool = routing_pool(cfg.seed)
        model = heterogeneous_moe(pool, cfg.seed)
    if model.num_experts < 2:
        warnings.warn("single-expert model; the variance comparison is meaningless",
                      RuntimeWarning, stacklevel=2)
    seed = 1000 + cfg.seed
    cmp = compare_routing(model, pool, runs=cfg.bench_runs, size=cfg.workload_size, seed=seed,
                          concentration=args.concentration, warmup=cfg.bench_warmup)
    counts = selection_counts(model, pool, cfg.workload_size, seed, args.concentration,
                              cfg.bench_runs)
    total = np.sum(counts, axis=0)
    n_inputs = cfg.workload_size * cfg.bench_runs
    sel = np.repeat(np.arange(model.num_experts), total)[:, None]
    reports = []
    for mode, energy in (("uniform", routing_energy(model, sel, "uniform")),
                         ("curious", routing_energy(model, np.zeros((n_inputs, 1), int),
                                                    "curious"))):
        rep = BenchReport(mode, None, energy)
        d = rep.to_dict()
        d["latency"] = cmp[mode]
        reports.append(validate_report(d))
    latency = {k: cmp[k] for k in ("sd_reduction_pct", "variance_reduction_pct", "sd_ratio",
                                   "levene")}
    return {"experiment": "bench-routing", "settings": cmp["settings"],
            "selection_counts": counts, "reports": reports, "latency": latency}


def cmd_ablation(cfg, args):
    table = load_table(cfg)
    partial = _out(args) or "ablation.partial.json"
    return ablation(table, cfg, partial_path=partial, bench=not args.no_bench)


def cmd_route_trace(cfg, args):
    model = load_model(_require(cfg.model, "--model"))
    if not isinstance(model, MoEModel):
        raise DataError(f"{cfg.model} holds a single expert, not a MoE")
    table = load_table(cfg)
    rows = table.data[:args.limit] if args.limit else table.data
    _, batch = route_batch(model, rows, cfg.routing, Rng(cfg.seed))
    lines = "".join(d.to_json() + "\n" for d in batch.decisions())
    if _out(args):
        atomic_write(_out(args), lines.encode())
    else:
        sys.stdout.write(lines)
    return None


def cmd_melspec(cfg, args):
    clip = load_wav(_require(args.wav, "--wav"))
    mel = melspectrogram(clip, args.mel_bins)
    if _out(args):
        import io

        buf = io.BytesIO()
        np.save(buf, mel.values.astype(np.float32))
        atomic_write(_out(args), buf.getvalue())
    return {"experiment": "melspec", "frames": mel.frames, "mel_bins": mel.mel_bins,
            "sample_rate": mel.sample_rate, "window": mel.window, "hop": mel.hop,
            "min": float(mel.values.min()), "max": float(mel.values.max())}


def cmd_size_report(cfg, args):
    if cfg.model:
        model = load_model(cfg.model)
        nets = [*model.experts, model.router] if isinstance(model, MoEModel) else [model]
        layers = [q for net in nets for q in net.quantized_layers()]
        report = model_size_report(layers).to_dict()
        report["source"] = "container"
        return report
    scheme = cfg.scheme_objs[0]
    net = ExpertNet.build(args.classes, scheme, hidden=tuple(cfg.hidden), seed=cfg.seed)
    report = model_size_report(net.quantized_layers()).to_dict()
    report["source"] = f"fresh {scheme} net"
    return report


def cmd_stats(cfg, args):
    a = _floats(_require(args.a, "--a"))
    b = _floats(_require(args.b, "--b"))
    test = {"paired_t": paired_t_test, "levene": levene_test, "spearman": spearman_test}[args.test]
    res = test(a, b, comparisons=args.comparisons)
    out = res.to_dict()
    out["stars"] = stars(res.p_value)
    out["experiment"] = "stats"
    return out


COMMANDS = {
    "synth-data": cmd_synth_data,
    "train-expert": cmd_train_expert,
    "train-moe": cmd_train_moe,
    "eval": cmd_eval,
    "bench": cmd_bench,
    "bench-routing": cmd_bench_routing,
    "ablation": cmd_ablation,
    "route-trace": cmd_route_trace,
    "melspec": cmd_melspec,
    "size-report": cmd_size_report,
    "stats": cmd_stats,
}


# ---------------------------------------------------------------------------
# parsing
# ---------------------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise ConfigError(message)


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default=argparse.SUPPRESS, help="RunConfig JSON file")
    common.add_argument("--seed", type=int, default=argparse.SUPPRESS)
    common.add_argument("--out", default=argparse.SUPPRESS)
    common.add_argument("--format", choices=["json"], default=argparse.SUPPRESS)
    common.add_argument("--data", default=argparse.SUPPRESS,
                        help="embedding file (default: synthetic dataset)")
    common.add_argument("--model", default=argparse.SUPPRESS)
    common.add_argument("--report", default=argparse.SUPPRESS)

    p = _Parser(prog="qmoe", description="Quantized mixture-of-experts toolkit.",
                parents=[common])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def add(name, help_text):
        return sub.add_parser(name, help=help_text, parents=[common])

    s = add("synth-data", "write a synthetic embedding table")
    s.add_argument("--classes", type=int)
    s.add_argument("--per-class", type=int)
    s.add_argument("--spread", type=float)

    s = add("train-expert", "train one quantized expert")
    s.add_argument("--scheme")
    s.add_argument("--fold", type=int, default=0)
    s.add_argument("--epochs", type=int)

    s = add("train-moe", "train a mixture of experts")
    s.add_argument("--schemes", help="comma-separated, one per expert")
    s.add_argument("--fold", type=int, default=0)
    s.add_argument("--epochs", type=int)
    s.add_argument("--k", type=int)
    s.add_argument("--T", type=float)
    s.add_argument("--alpha-curiosity", type=float)
    s.add_argument("--alpha-balance", type=float)

    s = add("eval", "macro-F1 of a saved model")
    s.add_argument("--routing", choices=["uniform", "curious"])

    s = add("bench", "latency, energy proxy and size of a saved model")
    s.add_argument("--routing", choices=["uniform", "curious"])
    s.add_argument("--runs", type=int)

    s = add("bench-routing", "latency variance of uniform vs curious routing")
    s.add_argument("--runs", type=int)
    s.add_argument("--concentration", type=float, default=0.1)

    s = add("ablation", "train and bench every bit-width")
    s.add_argument("--bits", help="comma-separated subset of 1,2,4,8,16")
    s.add_argument("--epochs", type=int)
    s.add_argument("--runs", type=int)
    s.add_argument("--no-bench", action="store_true", help="skip latency timing")

    s = add("route-trace", "per-input routing decisions as JSON lines")
    s.add_argument("--routing", choices=["uniform", "curious"])
    s.add_argument("--limit", type=int, default=0)

    s = add("melspec", "mel spectrogram of a PCM16 WAV file")
    s.add_argument("--wav")
    s.add_argument("--mel-bins", type=int, default=128)

    s = add("size-report", "serialized size versus float32")
    s.add_argument("--scheme")
    s.add_argument("--classes", type=int, default=10)

    s = add("stats", "paired t, Levene or Spearman on two samples")
    s.add_argument("--test", choices=["paired_t", "levene", "spearman"], default="paired_t")
    s.add_argument("--a", help="comma-separated numbers or @file.json")
    s.add_argument("--b")
    s.add_argument("--comparisons", type=int, default=1)
    return p


def resolve_config(args):
    cfg = RunConfig.load(args.config) if getattr(args, "config", None) else RunConfig()
    if cfg.experiment is not None and cfg.experiment != args.command:
        raise ConfigError(f"config is for {cfg.experiment!r}, command is {args.command!r}")
    get = lambda name: getattr(args, name, None)  # noqa: E731
    changes = {
        "experiment": args.command,
        "seed": get("seed"),
        "data": get("data"),
        "model": get("model"),
        "routing": get("routing"),
        "k": get("k"),
        "T": get("T"),
        "alpha_curiosity": get("alpha_curiosity"),
        "alpha_balance": get("alpha_balance"),
        "max_epochs": get("epochs"),
        "bench_runs": get("runs"),
    }
    if get("scheme"):
        changes["schemes"] = [get("scheme")]
    if get("schemes"):
        changes["schemes"] = [s.strip() for s in get("schemes").split(",") if s.strip()]
    if get("bits"):
        try:
            changes["bits"] = [int(b) for b in get("bits").split(",")]
        except ValueError:
            raise ConfigError(f"--bits must be integers, got {get('bits')!r}") from None
    if args.command == "synth-data":
        s = cfg.to_dict()["synth"]
        for flag, key in (("classes", "num_classes"), ("per_class", "samples_per_class"),
                          ("spread", "cluster_spread"), ("seed", "seed")):
            if get(flag) is not None:
                s[key] = get(flag)
        changes["synth"] = s
    # train commands write the model to --out
    if args.command in ("train-expert", "train-moe") and get("out"):
        changes["model"] = get("out")
    return cfg.replace(**changes)


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        cfg = resolve_config(args)
        report = COMMANDS[args.command](cfg, args)
        if report is not None:
            if args.command in ("train-expert", "train-moe", "synth-data", "melspec"):
                target = getattr(args, "report", None) or cfg.report
            else:
                target = _out(args) or getattr(args, "report", None) or cfg.report
            _emit(report, target)
        return 0
    except QmoeError as exc:
        print(f"qmoe: error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"qmoe: error: {exc}", file=sys.stderr)
        return DataError.exit_code
    except Exception as exc:  # anything else is a bug
        print(f"qmoe: internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
