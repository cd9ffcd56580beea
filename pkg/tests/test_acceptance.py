"""End-to-end acceptance checks, one test per numbered criterion.

Each test prints a single ``ACCEPTANCE n: PASS|FAIL`` line with the measured
values; the lines are repeated in the terminal summary.
"""

import json
import math
import time

import numpy as np
import pytest

from oracles import F_CRITICAL, PAIRED_P, PAIRED_T, T_CRITICAL
from qmoe.bench import expert_energy, synth_dataset
from qmoe.bitwise import BitVector, bitwise_linear, pack_sign_rows, popcount_linear
from qmoe.cli import main, strip_nondeterministic
from qmoe.config import RunConfig
from qmoe.container import from_bytes, to_bytes
from qmoe.experiments import train_one
from qmoe.experts import ExpertNet, TrainConfig, loss_and_grads, train_expert
from qmoe.quantizers import (PackedWeights, QuantScheme, code_range, dequantize,
                             model_size_report, quantize_layer)
from qmoe.router import (MoEModel, RouterNet, curiosity_adjust, route_batch_curious,
                         route_batch_uniform, route_curious, train_moe)
from qmoe.scenario import compare_routing, heterogeneous_moe, routing_pool
from qmoe.stats import f_ppf, levene_test, paired_t_test, t_ppf
from qmoe.tensor_core import Rng, entropy, kl_divergence


def test_1_quantization_roundtrip(accept):
    t0 = time.perf_counter()
    rng = np.random.default_rng(1)
    worst = {}
    for k in (2, 4, 8, 16):
        excess = -np.inf
        for _ in range(1000):
            m, n = rng.integers(1, 33, 2)
            W = (rng.standard_normal((m, n)) * rng.uniform(0.01, 5)
                 + rng.uniform(-3, 3)).astype(np.float32)
            layer = quantize_layer(W, None, QuantScheme.bitlinear(k))
            s = float(layer.weight_scale[0])
            excess = max(excess, float(np.abs(dequantize(layer) - W).max() - (s / 2 + 1e-6)))
        worst[k] = excess
    packing_ok = True
    for bits in (1, 2, 4, 8, 16):
        lo, hi = code_range(bits)
        for n in range(1, 258):
            codes = rng.choice([-1, 1], n) if bits == 1 else rng.integers(lo, hi + 1, n)
            packed = PackedWeights.pack(codes, bits)
            packing_ok &= bool(np.array_equal(packed.unpack(), codes))
            packing_ok &= packed.nbytes == math.ceil(n * bits / 8)
    elapsed = time.perf_counter() - t0
    ok = all(v <= 0 for v in worst.values()) and packing_ok and elapsed < 30
    accept(1, ok, f"max(err - (s/2 + 1e-6)) per k {({k: f'{v:.2e}' for k, v in worst.items()})}; "
                  f"pack/unpack exact={packing_ok}; {elapsed:.1f}s")


def _all_bits(d):
    idx = np.arange(2 ** d)
    return ((idx[:, None] >> np.arange(d)) & 1).astype(bool)


def test_2_popcount_identity(accept):
    mismatches, pairs = 0, 0
    for d in range(1, 13):
        B = _all_bits(d)
        S = np.where(B, 1.0, -1.0)
        words = pack_sign_rows(B)
        y = bitwise_linear(words, words, d)  # every x against every w
        mismatches += int(np.count_nonzero(y != -(S @ S.T) / 2))
        pairs += B.shape[0] ** 2
        if d <= 6:
            for xa in B:
                for wa in B:
                    x, w = BitVector.from_bits(xa), BitVector.from_bits(wa)
                    mismatches += popcount_linear(x, w) != -np.dot(x.signs(), w.signs()) / 2
    rng = np.random.default_rng(2)
    for d in (63, 64, 65, 1024):
        for _ in range(1000):
            x = BitVector.from_bits(rng.random(d) > 0.5)
            w = BitVector.from_bits(rng.random(d) > 0.5)
            mismatches += popcount_linear(x, w) != -np.dot(x.signs(), w.signs()) / 2
            pairs += 1
    accept(2, mismatches == 0, f"{pairs} pairs (exhaustive d<=12, 1000 random for d in "
                               f"63/64/65/1024), mismatches={mismatches}")


def test_3_routing_algebra(accept):
    m = MoEModel.build(4, [QuantScheme.float32(), QuantScheme.bitlinear(4), QuantScheme.ternary()],
                       hidden=(32,), seed=3, k=2, alpha_curiosity=0.0)
    Z = np.random.default_rng(3).standard_normal((100, 1024)).astype(np.float32)
    yu, bu = route_batch_uniform(m, Z)
    yc, bc = route_batch_curious(m, Z, Rng(4))
    same = (yu.tobytes() == yc.tobytes() and bu.selected.tobytes() == bc.selected.tobytes()
            and bu.weights.tobytes() == bc.weights.tobytes())

    e = ExpertNet.build(4, hidden=(32,), seed=5)
    consensus = MoEModel([e, e.copy(), e.copy()], RouterNet.create(3, seed=6), alpha_curiosity=2.0)
    zero_bonus = True
    for z in Z[:10]:
        _, d = route_curious(consensus, z, Rng(0))
        zero_bonus &= (not d.kl_per_expert.any()) and d.curious_probs.tobytes() == \
            d.base_probs.tobytes()
    p = curiosity_adjust([0.5, 0.5], [math.log(2), 0.0], 1.0)
    err = float(np.abs(p - [2 / 3, 1 / 3]).max())
    accept(3, same and zero_bonus and err < 1e-9,
           f"alpha=0 bit-identical on 100 inputs={same}; consensus zero bonus={zero_bonus}; "
           f"closed form error={err:.1e}")


def test_4_entropy_kl(accept):
    ent_err = max(abs(entropy(np.full(n, 1.0 / n)) - math.log(n)) for n in range(1, 65))
    rng = np.random.default_rng(4)
    min_kl, eq_max, neq_min = np.inf, 0.0, np.inf
    for _ in range(1000):
        n = int(rng.integers(2, 20))
        p, q = rng.dirichlet(np.ones(n)), rng.dirichlet(np.ones(n))
        kl = kl_divergence(p, q)
        min_kl = min(min_kl, kl)
        eq_max = max(eq_max, kl_divergence(p, p))
        if np.abs(p - q).max() > 1e-3:
            neq_min = min(neq_min, kl)
    ok = ent_err < 1e-9 and min_kl >= 0 and eq_max < 1e-9 and neq_min > 1e-9
    accept(4, ok, f"max |H(uniform_N) - ln N|={ent_err:.1e}; min KL={min_kl:.2e}; "
                  f"max KL(p,p)={eq_max:.1e}; min KL(p!=q)={neq_min:.2e}")


def _loss64(layers, X, y, cw):
    x = X.astype(np.float64)
    for i, (W, b) in enumerate(layers):
        x = x @ W.T + b
        if i < len(layers) - 1:
            x = np.maximum(x, 0)
    z = x - x.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    w = cw[y]
    return -(w * logp[np.arange(len(y)), y]).sum() / w.sum()


def test_5_gradient_check(accept):
    t0 = time.perf_counter()
    net = ExpertNet.build(3, hidden=(6,), seed=1)
    rng = np.random.default_rng(5)
    X = rng.standard_normal((12, 1024)).astype(np.float32)
    y = np.arange(12) % 3
    cw = np.array([1.0, 2.0, 0.5])
    _, grads = loss_and_grads(net, X, y, cw)
    base = [(l.weight.astype(np.float64), l.bias.astype(np.float64)) for l in net.layers]
    worst, checked, eps = 0.0, 0, 1e-3
    while checked < 20:
        li = int(rng.integers(0, 2))
        name = "weight" if rng.random() < 0.8 else "bias"
        shape = base[li][0 if name == "weight" else 1].shape
        idx = tuple(int(rng.integers(0, s)) for s in shape)
        vals = []
        for sign in (1, -1):
            layers = [(W.copy(), b.copy()) for W, b in base]
            arr = layers[li][0 if name == "weight" else 1]
            arr[idx] += sign * eps
            vals.append(_loss64(layers, X, y, cw))
        fd = (vals[0] - vals[1]) / (2 * eps)
        if abs(fd) < 1e-4:
            continue  # dead ReLU or kink: relative error undefined
        g = float(grads[(li, name)][idx])
        worst = max(worst, abs(g - fd) / max(abs(g), abs(fd)))
        checked += 1
    elapsed = time.perf_counter() - t0
    accept(5, worst < 1e-3 and elapsed < 10,
           f"20 parameters, max relative error={worst:.2e}; {elapsed:.2f}s")


def test_6_compression(accept):
    hidden = (630, 882)  # 1024*630+630 + 630*882+882 + 882*10+10 = 1,211,122
    q4 = ExpertNet.build(10, QuantScheme.bitlinear(4), hidden=hidden)
    fp = ExpertNet.build(10, QuantScheme.float32(), hidden=hidden)
    rep4 = model_size_report(q4.quantized_layers())
    rep32 = model_size_report(fp.quantized_layers())
    fp_rel = abs(rep32.total_bytes - 4 * fp.param_count) / (4 * fp.param_count)
    table_rel = abs(1_206_770 * 4 / 1000 - 4830.8) / 4830.8
    ok = (q4.param_count == 1_211_122 and 6.3 <= rep4.reduction <= 7.7 and fp_rel < 0.01
          and table_rel < 0.01)
    accept(6, ok, f"params={q4.param_count}; 4-bit {rep4.total_bytes} B, reduction "
                  f"{rep4.reduction:.2f}x (reference 7.03x); fp32 {rep32.total_bytes} B vs "
                  f"params*4 off by {100 * fp_rel:.3f}%; reference row 1,206,770*4 B vs "
                  f"4,830.8 KB off by {100 * table_rel:.2f}%")


@pytest.mark.slow
def test_7_accuracy_retention(accept):
    seeds = (7, 8, 9)
    f1 = {2: [], 4: [], 16: []}
    times = []
    for seed in seeds:
        t0 = time.perf_counter()
        table = synth_dataset(10, 200, 0.05, seed)
        cfg = RunConfig(seed=seed)
        for k in f1:
            _, res = train_one(table, QuantScheme.bitlinear(k), cfg, fold=0)
            f1[k].append(res.best_val_f1)
        times.append(time.perf_counter() - t0)
    mean = {k: float(np.mean(v)) for k, v in f1.items()}
    retention = mean[4] >= 0.95 * mean[16]
    cliff = mean[2] < mean[4]
    accept(7, retention and cliff and max(times) < 300,
           f"mean F1 2/4/16-bit = {mean[2]:.4f}/{mean[4]:.4f}/{mean[16]:.4f}; "
           f"4-bit >= 0.95 x 16-bit: {retention}; 2-bit < 4-bit: {cliff}; "
           f"max {max(times):.0f}s per seed")


def test_8_statistics(accept):
    t_err = max(abs(t_ppf(q, df) - v) for (q, df), v in T_CRITICAL.items())
    f_err = max(abs(f_ppf(q, a, b) - v) for (q, a, b), v in F_CRITICAL.items())
    r = paired_t_test([1, 2, 3, 4, 5], [0] * 5)
    lev = levene_test([1, 2, 3, 4, 5], [5, 4, 3, 2, 1])
    ok = (t_err < 1e-3 and f_err < 1e-3 and abs(r.statistic - PAIRED_T) < 1e-3
          and abs(r.p_value - PAIRED_P) < 1e-3 and lev.p_value == 1.0)
    accept(8, ok, f"20-entry table max error t={t_err:.1e} F={f_err:.1e}; paired t="
                  f"{r.statistic:.4f} p={r.p_value:.4f}; Levene equal groups p={lev.p_value}")


@pytest.mark.slow
@pytest.mark.timing
def test_9_variance_reduction(accept):
    pool = routing_pool(0)
    model = heterogeneous_moe(pool, 0)
    costs = [expert_energy(e).total for e in model.experts]
    router = expert_energy(model.router).total
    spread = max(costs) / min(costs)
    rep = compare_routing(model, pool, runs=30, size=500)
    red, p = rep["sd_reduction_pct"], rep["levene"]["p"]
    ok = spread >= 5 and red >= 30 and p < 0.05
    accept(9, ok, f"expert cost units {costs} (spread {spread:.0f}x), router pass {router}, "
                  f"{model.mc_samples} MC passes per curious input; sd uniform "
                  f"{rep['uniform']['sd_ms']:.2f} ms vs curious {rep['curious']['sd_ms']:.2f} ms; "
                  f"sd reduction {red:.1f}%, variance reduction "
                  f"{rep['variance_reduction_pct']:.1f}%, Levene p={p:.2g}")


def test_10_determinism(accept, tmp_path, capsys):
    cfg = {"hidden": [16], "max_epochs": 3, "patience": 2, "fold_count": 2, "bench_runs": 5,
           "bench_warmup": 1, "workload_size": 20, "bits": [2, 16], "schemes": ["q2", "ternary"],
           "k": 2, "synth": {"num_classes": 3, "samples_per_class": 12, "cluster_spread": 0.1,
                             "seed": 1}}
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(cfg))
    commands = [["train-expert", "--scheme", "q4"], ["train-moe"], ["ablation"],
                ["size-report", "--scheme", "q8"], ["stats", "--a", "1,2,3", "--b", "2,2,5"]]
    identical = []
    for argv in commands:
        outs = []
        for i in range(2):
            report = tmp_path / f"{argv[0]}-{i}.json"
            model = ["--out", str(tmp_path / f"{argv[0]}-{i}.cqmf")] if argv[0].startswith(
                "train") else []
            target = ["--report", str(report)] if model else ["--out", str(report)]
            code = main([*argv, "--config", str(path), "--seed", "3", *model, *target])
            capsys.readouterr()
            assert code == 0
            outs.append(json.dumps(strip_nondeterministic(json.loads(report.read_text())),
                                   sort_keys=True))
        identical.append(outs[0] == outs[1])
    # container round trip, bitwise forward equality on 20 inputs
    Z = np.random.default_rng(10).standard_normal((20, 1024)).astype(np.float32)
    roundtrip = []
    for scheme in (QuantScheme.float32(), QuantScheme.bitlinear(1), QuantScheme.bitlinear(4),
                   QuantScheme.bitlinear(16), QuantScheme.ternary()):
        net = ExpertNet.build(5, scheme, hidden=(24,), seed=2)
        roundtrip.append(from_bytes(to_bytes(net)).forward(Z).tobytes() == net.forward(Z).tobytes())
    moe = MoEModel.build(5, [QuantScheme.bitlinear(2), QuantScheme.float32()], hidden=(24,), k=2)
    back = from_bytes(to_bytes(moe))
    roundtrip.append(route_batch_curious(back, Z, Rng(1))[0].tobytes()
                     == route_batch_curious(moe, Z, Rng(1))[0].tobytes())
    ok = all(identical) and all(roundtrip)
    accept(10, ok, f"reports identical across two runs "
                   f"{dict(zip((c[0] for c in commands), identical))}; container round trips "
                   f"bitwise {sum(roundtrip)}/{len(roundtrip)}")


def test_11_moe_degeneracy(accept):
    diffs = []
    for seed in (0, 1, 2):
        table = synth_dataset(5, 60, 0.4, seed)
        X, y = table.data, table.labels
        tr, va = np.arange(table.rows) % 5 != 0, np.arange(table.rows) % 5 == 0
        cfg = TrainConfig.individual(max_epochs=60, seed=seed)
        net = ExpertNet.build(5, QuantScheme.bitlinear(4), hidden=(64,), seed=seed)
        moe = MoEModel([net.copy()], RouterNet.create(1, seed=seed), k=1)
        single = train_expert(net, (X[tr], y[tr]), (X[va], y[va]), cfg).best_val_f1
        joint = train_moe(moe, (X[tr], y[tr]), (X[va], y[va]), cfg).best_val_f1
        diffs.append((single, joint))
    worst = max(abs(a - b) for a, b in diffs)
    accept(11, worst <= 0.02, "val F1 single vs N=1 MoE " +
           ", ".join(f"{a:.4f}/{b:.4f}" for a, b in diffs) + f"; max |diff|={worst:.4f}")
