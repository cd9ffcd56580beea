"""Gating network, top-k routing, MC-dropout uncertainty and the curiosity bonus.

Routing probabilities are float64. Combination weights are the selected
experts' probabilities taken as they are, without renormalising over the
top-k subset, so they sum to less than one whenever ``k < N``.

Curious routing evaluates every expert (it needs their class distributions)
and always runs ``mc_samples`` stochastic router passes, so its cost does not
depend on which experts win. Uniform routing evaluates only the winners.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .errors import InfiniteDivergence, InvariantError, ParameterError, ShapeError
from .experts import (
    EMBED_DIM, Adam, ExpertNet, TrainConfig, TrainResult, _backward, _check_data, _project,
    _train_forward, clip_grad_norm, macro_f1, resolve_class_weights, weighted_cross_entropy,
)
from .tensor_core import Rng, entropy, kl_divergence, softmax_rows

ROUTER_HIDDEN = (128, 64)
ROUTER_DROPOUT = 0.2
KL_SMOOTHING = 1e-9


class RouterNet(ExpertNet):
    """``1024 -> 128 -> 64 -> N`` with ReLU, dropout only after the first layer."""

    @classmethod
    def create(cls, num_experts, *, rng=None, seed=0, dropout_p=ROUTER_DROPOUT):
        if num_experts < 1:
            raise ParameterError("a router needs at least one expert")
        return cls.build(num_experts, hidden=ROUTER_HIDDEN, rng=rng, seed=seed,
                         dropout_p=dropout_p, dropout_after=(0,), act_quant=False)

    @property
    def num_experts(self):
        return self.num_classes

    def copy(self):
        base = super().copy()
        return RouterNet(base.layers, base.dropout_p, base.dropout_after, base.act_quant)


@dataclass
class MoEModel:
    experts: list
    router: RouterNet
    k: int = 1
    T: float = 1.0
    alpha_curiosity: float = 1.0
    alpha_balance: float = 1e-3
    mc_samples: int = 10
    kl_mode: str = "class"  # "class" | "gate"
    entropy_threshold: float | None = None

    def __post_init__(self):
        n = len(self.experts)
        if n == 0:
            raise ParameterError("MoE needs at least one expert")
        if self.router.num_experts != n:
            raise ShapeError(f"router has {self.router.num_experts} outputs for {n} experts")
        if not 1 <= self.k <= n:
            raise ParameterError(f"k must be in [1, {n}], got {self.k}")
        if not self.T > 0:
            raise ParameterError(f"temperature must be positive, got {self.T}")
        if not self.alpha_curiosity >= 0:
            raise ParameterError("curiosity strength must be >= 0")
        if self.kl_mode not in ("class", "gate"):
            raise ParameterError(f"kl_mode must be 'class' or 'gate', got {self.kl_mode!r}")
        classes = {e.num_classes for e in self.experts}
        if len(classes) != 1:
            raise ShapeError(f"experts disagree on class count: {sorted(classes)}")

    @classmethod
    def build(cls, num_classes, schemes, hidden=None, *, seed=0, **kwargs):
        """One expert per scheme (hidden layers quantized, float head) and a fresh router."""
        rng = Rng(seed)
        streams = rng.spawn(len(schemes) + 1)
        experts = []
        for scheme, r in zip(schemes, streams):
            extra = {} if hidden is None else {"hidden": hidden}
            experts.append(ExpertNet.build(num_classes, scheme, rng=r, **extra))
        router = RouterNet.create(len(schemes), rng=streams[-1])
        return cls(experts, router, **kwargs)

    @property
    def num_experts(self):
        return len(self.experts)

    @property
    def num_classes(self):
        return self.experts[0].num_classes

    def parameters(self):
        named = [(("router", i, n), a) for i, n, a in self.router.parameters()]
        for e, net in enumerate(self.experts):
            named += [((e, i, n), a) for i, n, a in net.parameters()]
        return named

    def invalidate(self):
        self.router.invalidate()
        for e in self.experts:
            e.invalidate()

    def state(self):
        return [self.router.state()] + [e.state() for e in self.experts]

    def load_state(self, state):
        self.router.load_state(state[0])
        for e, s in zip(self.experts, state[1:]):
            e.load_state(s)


@dataclass
class RoutingDecision:
    """Per-input routing record; JSON-serialisable via :meth:`to_dict`."""

    mode: str
    gate_logits: np.ndarray
    base_probs: np.ndarray
    selected: np.ndarray
    weights: np.ndarray
    curious_probs: np.ndarray | None = None
    expert_class_dists: np.ndarray | None = None
    mean_dist: np.ndarray | None = None
    predictive_entropy: float = 0.0
    kl_per_expert: np.ndarray | None = None
    mc_samples: int = 0
    smoothed: bool = False
    bonus_applied: bool = False

    @property
    def active_probs(self):
        return self.base_probs if self.curious_probs is None else self.curious_probs

    def to_dict(self):
        def arr(a):
            return None if a is None else np.asarray(a).tolist()

        return {
            "mode": self.mode,
            "gate_logits": arr(self.gate_logits),
            "base_probs": arr(self.base_probs),
            "curious_probs": arr(self.curious_probs),
            "expert_class_dists": arr(self.expert_class_dists),
            "mean_dist": arr(self.mean_dist),
            "predictive_entropy": self.predictive_entropy,
            "kl_per_expert": arr(self.kl_per_expert),
            "selected": [int(i) for i in self.selected],
            "weights": arr(self.weights),
            "mc_samples": self.mc_samples,
            "smoothed": self.smoothed,
            "bonus_applied": self.bonus_applied,
        }

    def to_json(self):
        return json.dumps(self.to_dict(), sort_keys=True)


# ---------------------------------------------------------------------------
# building blocks
# ---------------------------------------------------------------------------


def curiosity_adjust(p_base, kl, alpha):
    """``p_base * exp(alpha * kl)`` renormalised; returns ``p_base`` itself when every bonus is 1."""
    p_base = np.asarray(p_base, dtype=np.float64)
    kl = np.asarray(kl, dtype=np.float64)
    if not alpha >= 0:
        raise ParameterError("curiosity strength must be >= 0")
    bonus = np.exp(alpha * kl)
    if np.all(bonus == 1.0):
        return p_base
    # log domain keeps large alpha * kl from overflowing
    with np.errstate(divide="ignore"):
        s = np.log(p_base) + alpha * kl
    s = s - s.max()
    e = np.exp(s)
    return e / e.sum()


def expert_kl(dists, smoothing=KL_SMOOTHING):
    """``KL(d_i || mean_i d_i)`` per expert; ``(kl, mean_dist, smoothed)``.

    An infinite divergence (possible only through underflow) is avoided by
    mixing every distribution with ``smoothing`` mass and renormalising.
    """
    dists = np.asarray(dists, dtype=np.float64)
    mean = _exact_mean(dists)
    try:
        kl = np.array([kl_divergence(d, mean) for d in dists])
        return kl, mean, False
    except InfiniteDivergence:
        c = dists.shape[1]
        dists = (dists + smoothing) / (1.0 + c * smoothing)
        mean = _exact_mean(dists)
        return np.array([kl_divergence(d, mean) for d in dists]), mean, True


def gate_kl(samples):
    """Per-expert disagreement across MC router samples.

    For expert i, the mean over samples of the Bernoulli KL between the
    sample's probability ``p_s,i`` and the sample mean ``pbar_i``.
    """
    p = np.clip(np.asarray(samples, dtype=np.float64), KL_SMOOTHING, 1.0 - KL_SMOOTHING)
    q = p.mean(axis=0)
    kl = p * np.log(p / q) + (1.0 - p) * np.log((1.0 - p) / (1.0 - q))
    return np.maximum(kl.mean(axis=0), 0.0)


def _router_probs(model, Z):
    logits = model.router.forward(Z)
    return logits, softmax_rows(logits, model.T)


def _as_batch(z):
    Z = np.asarray(z, dtype=np.float32)
    if Z.ndim == 1:
        Z = Z[None, :]
    if Z.ndim != 2 or Z.shape[1] != EMBED_DIM:
        raise ShapeError(f"expected {EMBED_DIM}-d embeddings, got shape {np.shape(z)}")
    return Z


def mc_router_samples(model, Z, rng, samples=None):
    """``(samples, batch, N)`` softmax outputs of the router with dropout on.

    Layers before the first dropout are deterministic, so they run once and
    only the remainder is repeated per sample.
    """
    samples = model.mc_samples if samples is None else samples
    if samples < 2:
        raise ParameterError(f"MC dropout needs at least 2 samples, got {samples}")
    Z = _as_batch(Z)
    router = model.router
    n_layers = len(router.layers)
    first = min(router.dropout_after, default=n_layers - 1)
    prefix = router.run_layers(Z, 0, first + 1)
    out = np.empty((samples, Z.shape[0], model.num_experts))
    for s in range(samples):
        x = router.dropout(prefix, rng) if first < n_layers - 1 else prefix
        x = router.run_layers(x, first + 1, n_layers, "dropout", rng)
        out[s] = softmax_rows(x, model.T)
    return out


def estimate_uncertainty(model, z, rng, samples=None):
    """MC-dropout router passes: ``(p_bar, H, per_sample_probs)`` for one input."""
    per = mc_router_samples(model, z, rng, samples)[:, 0, :]
    p_bar = per.mean(axis=0)
    return p_bar, entropy(p_bar / p_bar.sum()), per


# ---------------------------------------------------------------------------
# batched routing
# ---------------------------------------------------------------------------


@dataclass
class BatchRouting:
    """Array form of a batch of routing decisions."""

    mode: str
    gate_logits: np.ndarray
    base_probs: np.ndarray
    active_probs: np.ndarray
    selected: np.ndarray
    weights: np.ndarray
    class_dists: np.ndarray | None = None
    mean_dists: np.ndarray | None = None
    entropies: np.ndarray | None = None
    kl: np.ndarray | None = None
    mc_samples: int = 0
    smoothed: np.ndarray | None = None
    bonus_applied: np.ndarray | None = None

    def __len__(self):
        return self.gate_logits.shape[0]

    def decision(self, b):
        if self.mode == "uniform":
            n = self.base_probs.shape[1]
            return RoutingDecision("uniform", self.gate_logits[b], self.base_probs[b],
                                   self.selected[b], self.weights[b], kl_per_expert=np.zeros(n))
        return RoutingDecision(
            "curious", self.gate_logits[b], self.base_probs[b], self.selected[b], self.weights[b],
            curious_probs=self.active_probs[b], expert_class_dists=self.class_dists[:, b],
            mean_dist=self.mean_dists[b], predictive_entropy=float(self.entropies[b]),
            kl_per_expert=self.kl[b], mc_samples=self.mc_samples,
            smoothed=bool(self.smoothed[b]), bonus_applied=bool(self.bonus_applied[b]))

    def decisions(self):
        return [self.decision(b) for b in range(len(self))]


def _select(probs, k):
    """Row-wise top-k; a stable sort on ``-p`` sends ties to the lower index."""
    sel = np.argsort(-probs, axis=1, kind="stable")[:, :k]
    return sel, np.take_along_axis(probs, sel, axis=1)


def route_batch_uniform(model, Z):
    """Uniform routing of a batch; each expert runs only on the rows that picked it."""
    Z = _as_batch(Z)
    logits, probs = _router_probs(model, Z)
    sel, w = _select(probs, model.k)
    B = Z.shape[0]
    outs = {}
    for e, net in enumerate(model.experts):
        rows = np.nonzero((sel == e).any(axis=1))[0]
        if rows.size:
            full = np.zeros((B, model.num_classes), dtype=np.float32)
            full[rows] = net.forward(Z[rows])
            outs[e] = full
    y = _accumulate(outs, sel, w, Z.shape[0], model.num_classes)
    return y, BatchRouting("uniform", logits, probs, probs, sel, w)


def _accumulate(outs, sel, w, batch, classes):
    """Row b gets ``sum_j w[b, j] * outs[sel[b, j]][b]``, added in slot order j = 0, 1, ..."""
    y = np.zeros((batch, classes), dtype=np.float64)
    for j in range(sel.shape[1]):
        for e, out in outs.items():
            rows = sel[:, j] == e
            y[rows] += w[rows, j][:, None] * out[rows].astype(np.float64)
    return y.astype(np.float32)


def _exact_mean(dists):
    # (d + d + d) / 3 can round away from d; agreeing experts must give KL == 0
    mean = dists.mean(axis=0)
    same = np.all(dists == dists[0], axis=0)
    return np.where(same, dists[0], mean)


def _batch_kl(dists, smoothing=KL_SMOOTHING):
    """Vectorised :func:`expert_kl` over a batch: dists is ``(N, B, C)``."""
    mean = _exact_mean(dists)
    bad = np.any((dists > 0) & (mean == 0), axis=(0, 2))
    if np.any(bad):
        c = dists.shape[2]
        fixed = (dists[:, bad] + smoothing) / (1.0 + c * smoothing)
        dists = dists.copy()
        dists[:, bad] = fixed
        mean = _exact_mean(dists)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(dists > 0, dists * np.log(dists / mean), 0.0)
    return np.maximum(terms.sum(axis=2), 0.0).T, mean, bad


def _row_entropy(p):
    p = p / p.sum(axis=1, keepdims=True)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0, p * np.log(p), 0.0)
    return np.maximum(-terms.sum(axis=1), 0.0)


def route_batch_curious(model, Z, rng):
    """Curiosity routing of a batch: all experts, MC-dropout entropy, KL bonus."""
    Z = _as_batch(Z)
    B = Z.shape[0]
    logits, probs = _router_probs(model, Z)
    samples = mc_router_samples(model, Z, rng)
    H = _row_entropy(samples.mean(axis=0))
    outputs = np.stack([net.forward(Z) for net in model.experts])  # (N, B, C)
    dists = softmax_rows(outputs)
    kl, mean_dists, smoothed = _batch_kl(dists)
    if model.kl_mode == "gate":
        kl = np.stack([gate_kl(samples[:, b]) for b in range(B)])
    gate = np.ones(B, dtype=bool)
    if model.entropy_threshold is not None:
        gate = H >= model.entropy_threshold
    alpha = np.where(gate, model.alpha_curiosity, 0.0)[:, None]
    bonus = np.exp(alpha * kl)
    with np.errstate(divide="ignore"):
        score = np.log(probs) + alpha * kl
    e = np.exp(score - score.max(axis=1, keepdims=True))
    adjusted = e / e.sum(axis=1, keepdims=True)
    # rows whose bonus is exactly 1 everywhere keep p_base untouched
    active = np.where(np.all(bonus == 1.0, axis=1)[:, None], probs, adjusted)
    if np.any(np.abs(active.sum(axis=1) - 1.0) > 1e-6):
        raise InvariantError("curious probabilities do not sum to 1")
    sel, w = _select(active, model.k)
    y = _accumulate(dict(enumerate(outputs)), sel, w, B, model.num_classes)
    applied = gate & (model.alpha_curiosity > 0)
    return y, BatchRouting("curious", logits, probs, active, sel, w, dists, mean_dists, H, kl,
                           model.mc_samples, smoothed, applied)


def route_uniform(model, z):
    """Output logits and decision for one embedding under plain top-k gating."""
    y, batch = route_batch_uniform(model, z)
    return y[0], batch.decision(0)


def route_curious(model, z, rng):
    """Output logits and decision for one embedding under curiosity routing."""
    y, batch = route_batch_curious(model, z, rng)
    return y[0], batch.decision(0)


def route_batch(model, Z, mode="uniform", rng=None):
    if mode == "uniform":
        return route_batch_uniform(model, Z)
    if mode == "curious":
        if rng is None:
            raise ParameterError("curious routing needs an Rng")
        return route_batch_curious(model, Z, rng)
    raise ParameterError(f"unknown routing mode {mode!r}")


def moe_predict(model, X):
    y, _ = route_batch_uniform(model, X)
    return np.argmax(y, axis=1)


# ---------------------------------------------------------------------------
# load balancing and training
# ---------------------------------------------------------------------------


def importance(probs):
    return np.asarray(probs, dtype=np.float64).mean(axis=0)


def load_balance_loss(decisions):
    """``N * sum_i (importance_i - 1/N)^2`` over a batch of decisions (or a probs matrix)."""
    if isinstance(decisions, np.ndarray):
        probs = decisions
    else:
        if not decisions:
            raise ParameterError("load balance needs at least one decision")
        probs = np.stack([d.active_probs for d in decisions])
    imp = importance(probs)
    n = imp.size
    return float(n * np.sum((imp - 1.0 / n) ** 2))


def _moe_step(model, X, y, cw, rng, dropout=True):
    """Forward + backward for one batch; returns ``(loss, grads, probs)``."""
    B, N, C = X.shape[0], model.num_experts, model.num_classes
    if N == 1:
        # the gate is identically 1 and gets no gradient; skipping the router
        # also leaves the dropout stream to the expert alone
        probs = np.ones((B, 1))
    else:
        g_logits, r_cache = _train_forward(model.router, X, rng, dropout)
        probs = softmax_rows(g_logits.astype(np.float64), model.T)
    sel, w = _select(probs, model.k)
    combined = np.zeros((B, C), dtype=np.float64)
    e_cache = {}
    for e, net in enumerate(model.experts):
        mask = (sel == e).any(axis=1)
        rows = np.nonzero(mask)[0]
        if rows.size == 0:
            continue
        out, cache = _train_forward(net, X[rows], rng, dropout)
        p_e = probs[rows, e]
        combined[rows] += p_e[:, None] * out
        e_cache[e] = (rows, out, cache)
    ce, d_comb = weighted_cross_entropy(combined, y, cw)
    d_comb = d_comb.astype(np.float64)
    imp = probs.mean(axis=0)
    lb = N * np.sum((imp - 1.0 / N) ** 2)
    loss = ce + model.alpha_balance * lb
    dp = np.broadcast_to(model.alpha_balance * 2.0 * N * (imp - 1.0 / N) / B, (B, N)).copy()
    grads = {}
    for e, (rows, out, cache) in e_cache.items():
        dp[rows, e] += np.sum(d_comb[rows] * out, axis=1)
        d_out = d_comb[rows] * probs[rows, e][:, None]
        for (i, name), arr in _backward(model.experts[e], cache, d_out.astype(np.float32)).items():
            grads[(e, i, name)] = arr
    if N > 1:
        dg = probs * (dp - np.sum(probs * dp, axis=1, keepdims=True)) / model.T
        for (i, name), arr in _backward(model.router, r_cache, dg.astype(np.float32)).items():
            grads[("router", i, name)] = arr
    return float(loss), grads, probs


def train_moe(model, train, val, cfg=None, log=None):
    """Joint router + expert training with early stopping on validation macro-F1.

    Loss is class-weighted cross-entropy on the combined output plus
    ``alpha_balance`` times :func:`load_balance_loss`. Only the selected
    experts and their gate probabilities receive gradient.
    """
    cfg = cfg or TrainConfig.moe()
    C = model.num_classes
    X, y = _check_data(*train, C, "train")
    Xv, yv = _check_data(*val, C, "val")
    cw = resolve_class_weights(cfg, y, C)
    rng = Rng(cfg.seed)
    opt = Adam(model.parameters(), cfg.lr, cfg.weight_decay, decoupled=cfg.optimizer == "adamw")
    result = TrainResult(model)
    best_state = model.state()
    best, wait = -1.0, 0
    n = X.shape[0]
    for epoch in range(1, cfg.max_epochs + 1):
        order = rng.permutation(n)
        losses, sizes, max_post = [], [], 0.0
        imps = []
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            loss, grads, probs = _moe_step(model, X[idx], y[idx], cw, rng)
            if epoch == 1 and start == 0:
                result.first_batch_loss = loss
            grads, _, post = clip_grad_norm(grads, cfg.grad_clip_norm)
            max_post = max(max_post, post)
            opt.step(grads)
            _project(model.router)
            for e in model.experts:
                _project(e)
            model.invalidate()
            losses.append(loss)
            sizes.append(len(idx))
            imps.append(importance(probs) * len(idx))
        val_f1 = macro_f1(moe_predict(model, Xv), yv, C)
        record = {"epoch": epoch, "train_loss": float(np.average(losses, weights=sizes)),
                  "val_f1": val_f1, "lr": cfg.lr, "max_grad_norm": max_post,
                  "importance": (np.sum(imps, axis=0) / n).tolist()}
        result.history.append(record)
        if log is not None:
            log(record)
        # ties keep the later epoch; only a strict improvement resets patience
        if val_f1 >= best:
            wait = 0 if val_f1 > best else wait + 1
            best = val_f1
            best_state = model.state()
            result.best_epoch = epoch
        else:
            wait += 1
        if wait >= cfg.patience:
            break
    model.load_state(best_state)
    result.best_val_f1 = best
    return result
