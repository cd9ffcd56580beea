"""MLP experts over 1024-d embeddings, with quantization-aware training.

Every layer keeps float32 "shadow" weights. The forward pass quantizes them
according to the layer's :class:`QuantScheme` and backpropagation treats the
quantizer as the identity (straight-through), zeroing the gradient only where
a code was clipped. Bitwise (XOR-popcount) layers are post-training
conversions and are never updated; gradients stop at the topmost one.

Inference (``forward``) uses the ordered matmul from :mod:`qmoe.tensor_core`,
training uses BLAS ``@`` for throughput.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from . import bitwise, kernels
from .errors import DataError, ParameterError, ShapeError
from .quantizers import (
    QuantScheme, bitlinear_unclipped, dequantize, quantize_activations,
    quantize_layer, quantize_sign, quantize_ternary, ternary_channel_scales,
)
from .tensor_core import Rng, matmul, xavier_uniform

EMBED_DIM = 1024
DEFAULT_HIDDEN = (640, 320)
ALT_HIDDEN = (256, 128, 64)
DEFAULT_DROPOUT = 0.195


class Layer:
    """One affine layer: shadow weights (out, in), bias, and scheme parameters."""

    def __init__(self, weight, bias, scheme, tau=None, alpha=None):
        self.weight = np.ascontiguousarray(weight, dtype=np.float32)
        self.bias = np.ascontiguousarray(bias, dtype=np.float32)
        self.scheme = scheme
        self.frozen = None  # QuantizedLayer for loaded inference-only layers
        self.tau = None
        self.alpha = None
        if scheme.kind == "ternary":
            if tau is None:
                tau = 0.7 * float(np.mean(np.abs(self.weight), dtype=np.float64))
            self.tau = np.array(tau, dtype=np.float32)
            if alpha is None:
                alpha = ternary_channel_scales(self.weight, quantize_ternary(self.weight, float(self.tau)))
            self.alpha = np.asarray(alpha, dtype=np.float32).copy()
        elif scheme.kind == "bitwise":
            self.tau = np.array(bitwise.DEFAULT_THRESHOLD if tau is None else tau, dtype=np.float32)

    @classmethod
    def from_quantized(cls, q):
        layer = cls(dequantize(q), q.bias_or_zero(), q.scheme,
                    tau=q.threshold if q.scheme.kind in ("ternary", "bitwise") else None,
                    alpha=q.weight_scale if q.scheme.kind == "ternary" else None)
        layer.frozen = q
        return layer

    @property
    def in_dim(self):
        return self.weight.shape[1]

    @property
    def out_dim(self):
        return self.weight.shape[0]

    @property
    def trainable(self):
        return self.scheme.kind != "bitwise" and self.frozen is None

    def quantized(self):
        if self.frozen is not None:
            return self.frozen
        tau = None if self.tau is None else float(self.tau)
        return quantize_layer(self.weight, self.bias, self.scheme, tau=tau, alpha=self.alpha)

    def parameters(self):
        """Named trainable arrays (updated in place by the optimizer)."""
        if not self.trainable:
            return []
        named = [("weight", self.weight), ("bias", self.bias)]
        if self.scheme.kind == "ternary":
            named += [("alpha", self.alpha), ("tau", self.tau)]
        return named


class _Compiled:
    """Inference form of one layer: transposed effective weights or packed sign words."""

    def __init__(self, q):
        self.scheme = q.scheme
        self.in_dim = q.in_dim
        self.bias = q.bias_or_zero()
        if q.scheme.kind == "bitwise":
            self.words = bitwise.pack_sign_rows(q.codes())
            self.tau = q.threshold
            self.weight_t = None
        else:
            self.weight_t = np.ascontiguousarray(dequantize(q).T)


class ExpertNet:
    """Sequence of affine layers with ReLU between them.

    ``dropout_after`` lists the hidden-layer indices followed by dropout;
    ``None`` means every hidden layer.
    """

    def __init__(self, layers, dropout_p=DEFAULT_DROPOUT, dropout_after=None, act_quant=True):
        if not layers:
            raise ShapeError("an expert needs at least one layer")
        if layers[0].in_dim != EMBED_DIM:
            raise ShapeError(f"first layer must take {EMBED_DIM}-d embeddings, got {layers[0].in_dim}")
        for a, b in zip(layers, layers[1:]):
            if a.out_dim != b.in_dim:
                raise ShapeError(f"layer widths do not chain: {a.out_dim} -> {b.in_dim}")
        if not 0.0 <= dropout_p < 1.0:
            raise ParameterError(f"dropout must be in [0, 1), got {dropout_p}")
        self.layers = list(layers)
        self.dropout_p = float(dropout_p)
        hidden = range(len(layers) - 1)
        self.dropout_after = tuple(hidden) if dropout_after is None else tuple(dropout_after)
        self.act_quant = bool(act_quant)
        self._compiled = None

    @classmethod
    def build(cls, num_classes, scheme=None, hidden=DEFAULT_HIDDEN, *, rng=None, seed=0,
              dropout_p=DEFAULT_DROPOUT, head_scheme=None, schemes=None, dropout_after=None,
              act_quant=True):
        """Xavier-initialised net ``1024 -> hidden... -> num_classes``.

        ``scheme`` applies to hidden layers, ``head_scheme`` (default float32)
        to the classifier. ``schemes`` gives one scheme per layer explicitly.
        """
        rng = rng or Rng(seed)
        dims = [EMBED_DIM, *hidden, num_classes]
        n_layers = len(dims) - 1
        if schemes is None:
            scheme = scheme or QuantScheme.float32()
            head_scheme = head_scheme or QuantScheme.float32()
            schemes = [scheme] * (n_layers - 1) + [head_scheme]
        if len(schemes) != n_layers:
            raise ShapeError(f"{len(schemes)} schemes for {n_layers} layers")
        layers = []
        for fan_in, fan_out, sch in zip(dims, dims[1:], schemes):
            W = xavier_uniform(rng, fan_in, fan_out)
            layers.append(Layer(W, np.zeros(fan_out, np.float32), sch))
        return cls(layers, dropout_p, dropout_after, act_quant)

    # -- structure -------------------------------------------------------

    @property
    def num_classes(self):
        return self.layers[-1].out_dim

    @property
    def layer_specs(self):
        return [(l.in_dim, l.out_dim, l.scheme) for l in self.layers]

    @property
    def param_count(self):
        return sum(l.weight.size + l.bias.size for l in self.layers)

    def parameters(self):
        return [(i, name, arr) for i, l in enumerate(self.layers) for name, arr in l.parameters()]

    def quantized_layers(self):
        return [l.quantized() for l in self.layers]

    def invalidate(self):
        self._compiled = None

    def _compile(self):
        if self._compiled is None:
            self._compiled = [_Compiled(l.quantized()) for l in self.layers]
        return self._compiled

    def state(self):
        return [[arr.copy() for _, arr in l.parameters()] for l in self.layers]

    def load_state(self, state):
        for layer, arrays in zip(self.layers, state):
            for (_, arr), saved in zip(layer.parameters(), arrays):
                arr[...] = saved
        self.invalidate()

    def copy(self):
        layers = []
        for l in self.layers:
            c = Layer(l.weight.copy(), l.bias.copy(), l.scheme,
                      tau=None if l.tau is None else float(l.tau),
                      alpha=None if l.alpha is None else l.alpha.copy())
            c.frozen = l.frozen
            layers.append(c)
        return ExpertNet(layers, self.dropout_p, self.dropout_after, self.act_quant)

    # -- inference -------------------------------------------------------

    def forward(self, z, mode="eval", rng=None):
        """Class logits for one embedding (1-D) or a batch (2-D).

        ``mode="dropout"`` applies inverted dropout to hidden units and needs ``rng``.
        """
        if mode not in ("eval", "dropout"):
            raise ParameterError(f"unknown forward mode {mode!r}")
        if mode == "dropout" and rng is None:
            raise ParameterError("dropout mode needs an Rng")
        x = np.asarray(z, dtype=np.float32)
        single = x.ndim == 1
        if single:
            x = x[None, :]
        if x.ndim != 2 or x.shape[1] != EMBED_DIM:
            raise ShapeError(f"expected {EMBED_DIM}-d embeddings, got shape {np.shape(z)}")
        x = self.run_layers(x, 0, len(self.layers), mode, rng)
        return x[0] if single else x

    def run_layers(self, x, start, stop, mode="eval", rng=None):
        """Apply layers ``start .. stop - 1`` to a float32 batch (ReLU/dropout after hidden ones)."""
        compiled = self._compile()
        last = len(compiled) - 1
        for i in range(start, stop):
            c = compiled[i]
            if c.scheme.kind == "bitwise":
                words = bitwise.binarize_rows(x, c.tau)
                x = bitwise.bitwise_linear(words, c.words, c.in_dim, c.bias)
            else:
                if self.act_quant and c.scheme.kind == "bitlinear":
                    x = _fake_quant_activations(x)
                x = matmul(x, c.weight_t) + c.bias
            if i < last:
                np.maximum(x, 0.0, out=x)
                if mode == "dropout" and i in self.dropout_after:
                    x = self.dropout(x, rng)
        return x

    def dropout(self, x, rng):
        """Inverted dropout with this net's rate."""
        if self.dropout_p == 0:
            return x
        keep = rng.keep_mask(self.dropout_p, x.shape)
        return np.where(keep, x / np.float32(1.0 - self.dropout_p), np.float32(0.0)).astype(np.float32)

    def predict(self, X):
        return np.argmax(self.forward(np.atleast_2d(X)), axis=1)


def _fake_quant_activations(x):
    codes, s = quantize_activations(x)
    return (codes / np.asarray(s, dtype=np.float64)[:, None]).astype(np.float32)


# ---------------------------------------------------------------------------
# training-time forward / backward
# ---------------------------------------------------------------------------


def effective_weight(layer):
    """``(W_eff, ste_mask, codes)`` used during training.

    ``ste_mask`` is None when the gradient passes through unchanged.
    """
    kind = layer.scheme.kind
    W = layer.weight
    if kind == "float32" or layer.frozen is not None:
        return (W if layer.frozen is None else dequantize(layer.frozen)), None, None
    if kind == "bitlinear":
        if layer.scheme.bits == 1:
            codes, s = quantize_sign(W)
            return codes.astype(np.float32) * np.float32(s), None, codes
        k = layer.scheme.bits
        raw, s, mu = bitlinear_unclipped(W, k)
        qmax = (1 << (k - 1)) - 1
        codes = np.clip(raw, -qmax - 1, qmax).astype(np.int32)
        W_eff = codes.astype(np.float32) * np.float32(s) + np.float32(mu)
        mask = raw == codes
        return W_eff, (None if mask.all() else mask), codes
    if kind == "ternary":
        codes = quantize_ternary(W, float(layer.tau))
        return codes.astype(np.float32) * layer.alpha[:, None], None, codes
    return None, None, None


def _train_forward(net, X, rng=None, dropout=True):
    cache = []
    x = np.asarray(X, dtype=np.float32)
    last = len(net.layers) - 1
    for i, layer in enumerate(net.layers):
        entry = {"layer": layer}
        if layer.scheme.kind == "bitwise":
            words = bitwise.binarize_rows(x, float(layer.tau))
            w_words = bitwise.pack_sign_rows(layer.weight > 0)
            x = bitwise.bitwise_linear(words, w_words, layer.in_dim, layer.bias)
        else:
            W_eff, mask, codes = effective_weight(layer)
            if net.act_quant and layer.scheme.kind == "bitlinear":
                x = _fake_quant_activations(x)
            entry.update(x_in=x, W_eff=W_eff, mask=mask, codes=codes)
            x = x @ W_eff.T + layer.bias
        if i < last:
            entry["relu"] = x > 0
            x = np.where(entry["relu"], x, np.float32(0.0))
            if dropout and rng is not None and i in net.dropout_after and net.dropout_p > 0:
                keep = rng.keep_mask(net.dropout_p, x.shape)
                entry["drop"] = keep.astype(np.float32) / np.float32(1.0 - net.dropout_p)
                x = x * entry["drop"]
        cache.append(entry)
    return x, cache


def _backward(net, cache, dout):
    """Gradients ``{(layer_index, name): array}`` for all trainable parameters."""
    grads = {}
    g = dout.astype(np.float32)
    last = len(cache) - 1
    for i in range(last, -1, -1):
        entry = cache[i]
        layer = entry["layer"]
        if i < last:
            if "drop" in entry:
                g = g * entry["drop"]
            g = np.where(entry["relu"], g, np.float32(0.0))
        if layer.scheme.kind == "bitwise":
            break
        x_in, W_eff = entry["x_in"], entry["W_eff"]
        gW_eff = g.T @ x_in
        if layer.trainable:
            grads[(i, "bias")] = g.sum(axis=0)
            gW = gW_eff if entry["mask"] is None else gW_eff * entry["mask"]
            grads[(i, "weight")] = gW
            if layer.scheme.kind == "ternary":
                codes = entry["codes"]
                grads[(i, "alpha")] = (gW_eff * codes).sum(axis=1).astype(np.float32)
                grads[(i, "tau")] = _tau_grad(layer, gW_eff)
        if i > 0:
            g = g @ W_eff
    return grads


def _tau_grad(layer, gW_eff):
    # Surrogate: d code / d tau = -sign(w) / (2 delta) within delta of the threshold.
    tau = float(layer.tau)
    delta = max(0.5 * tau, 1e-6)
    w = layer.weight
    band = np.abs(np.abs(w) - tau) <= delta
    dcode = np.where(band, -np.sign(w) / (2.0 * delta), 0.0)
    return np.array((gW_eff * layer.alpha[:, None] * dcode).sum(), dtype=np.float32)


def weighted_cross_entropy(logits, y, class_weights):
    """Weighted-mean cross-entropy and its gradient w.r.t. logits."""
    logits = np.asarray(logits, dtype=np.float64)
    z = logits - logits.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    w = np.asarray(class_weights, dtype=np.float64)[y]
    wsum = w.sum()
    n = len(y)
    loss = -(w * logp[np.arange(n), y]).sum() / wsum
    grad = np.exp(logp)
    grad[np.arange(n), y] -= 1.0
    grad *= (w / wsum)[:, None]
    return float(loss), grad.astype(np.float32)


def balanced_class_weights(y, num_classes):
    counts = np.bincount(y, minlength=num_classes).astype(np.float64)
    present = counts > 0
    if present.sum() < 2:
        raise DataError("class weighting needs at least two classes present")
    w = np.zeros(num_classes)
    w[present] = len(y) / (present.sum() * counts[present])
    return w


def loss_and_grads(net, X, y, class_weights=None):
    """Deterministic (no dropout) loss and parameter gradients."""
    y = np.asarray(y)
    if class_weights is None:
        class_weights = np.ones(net.num_classes)
    logits, cache = _train_forward(net, X, dropout=False)
    loss, dlogits = weighted_cross_entropy(logits, y, class_weights)
    return loss, _backward(net, cache, dlogits)


def clip_grad_norm(grads, max_norm):
    """Scale all gradients so their global L2 norm is at most ``max_norm``.

    Returns ``(grads, norm_before, norm_after)``.
    """
    total = math.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads.values()))
    if total > max_norm:
        scale = max_norm / (total + 1e-6)
        grads = {k: (g * np.float32(scale)).astype(np.float32) for k, g in grads.items()}
        after = math.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads.values()))
        return grads, total, after
    return grads, total, total


class Adam:
    """Adam with either L2 (``decoupled=False``) or decoupled (AdamW) weight decay."""

    def __init__(self, params, lr, weight_decay=0.0, decoupled=True, betas=(0.9, 0.999), eps=1e-8):
        if not lr > 0:
            raise ParameterError(f"learning rate must be positive, got {lr}")
        self.params = params  # list of (key, array)
        self.lr = lr
        self.wd = weight_decay
        self.decoupled = decoupled
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(a) for k, a in params}
        self.v = {k: np.zeros_like(a) for k, a in params}

    def step(self, grads):
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        decay = 1.0 - self.lr * self.wd if self.decoupled else 1.0
        for key, p in self.params:
            g = grads.get(key)
            if g is None:
                continue
            if self.wd and not self.decoupled:
                g = g + np.float32(self.wd) * p
            kernels.adam_update(p, g, self.m[key], self.v[key], self.lr, self.b1, self.b2,
                                c1, c2, self.eps, decay)


# ---------------------------------------------------------------------------
# metrics and training
# ---------------------------------------------------------------------------


def macro_f1(preds, labels, num_classes):
    """Unweighted mean of per-class F1 over all ``num_classes`` classes.

    A class with no true and no predicted samples contributes 0.
    """
    preds = np.asarray(preds, dtype=np.int64).reshape(-1)
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if preds.size != labels.size or preds.size == 0:
        raise ShapeError("preds and labels must be equal, non-zero length")
    for arr in (preds, labels):
        if arr.min() < 0 or arr.max() >= num_classes:
            raise ParameterError(f"class id outside [0, {num_classes})")
    cm = np.bincount(labels * num_classes + preds, minlength=num_classes ** 2).reshape(num_classes, num_classes)
    tp = np.diag(cm).astype(np.float64)
    fp = cm.sum(axis=0) - tp
    fn = cm.sum(axis=1) - tp
    denom = 2 * tp + fp + fn
    f1 = np.where(denom > 0, 2 * tp / np.where(denom > 0, denom, 1), 0.0)
    return float(f1.mean())


@dataclass
class TrainConfig:
    optimizer: str = "adamw"
    lr: float = 5.79e-4
    weight_decay: float = 5.13e-3
    batch_size: int = 64
    grad_clip_norm: float = 1.0
    patience: int = 19
    max_epochs: int = 100
    class_weights: list | None = None
    seed: int = 0

    def __post_init__(self):
        if self.optimizer not in ("adam", "adamw"):
            raise ParameterError(f"optimizer must be 'adam' or 'adamw', got {self.optimizer!r}")
        if not self.lr > 0 or self.patience < 1 or not self.grad_clip_norm > 0:
            raise ParameterError("need lr > 0, patience >= 1 and clip norm > 0")
        if self.batch_size < 1 or self.max_epochs < 1:
            raise ParameterError("batch_size and max_epochs must be >= 1")

    @classmethod
    def individual(cls, **overrides):
        return cls(**overrides)

    @classmethod
    def moe(cls, **overrides):
        base = dict(optimizer="adam", lr=1e-3, weight_decay=1e-4, batch_size=256, patience=30)
        base.update(overrides)
        return cls(**base)


@dataclass
class TrainResult:
    net: object
    history: list = field(default_factory=list)
    best_epoch: int = 0
    best_val_f1: float = 0.0
    first_batch_loss: float = float("nan")

    def history_jsonl(self):
        return "".join(json.dumps(h, sort_keys=True) + "\n" for h in self.history)


def _check_data(X, y, num_classes, what):
    X = np.asarray(X, dtype=np.float32)
    y = np.asarray(y, dtype=np.int64)
    if X.ndim != 2 or X.shape[0] == 0:
        raise DataError(f"{what} set is empty")
    if X.shape[0] != y.shape[0]:
        raise ShapeError(f"{what}: {X.shape[0]} rows but {y.shape[0]} labels")
    if X.shape[1] != EMBED_DIM:
        raise ShapeError(f"{what}: expected {EMBED_DIM}-d embeddings, got {X.shape[1]}")
    if y.min() < 0 or y.max() >= num_classes:
        raise DataError(f"{what}: label outside [0, {num_classes})")
    return X, y


def resolve_class_weights(cfg, y, num_classes):
    if cfg.class_weights is not None:
        w = np.asarray(cfg.class_weights, dtype=np.float64)
        if w.shape != (num_classes,):
            raise ParameterError(f"need {num_classes} class weights")
        if np.count_nonzero(np.bincount(y, minlength=num_classes)) < 2:
            raise DataError("training data has a single class")
        return w
    return balanced_class_weights(y, num_classes)


def train_expert(net, train, val, cfg=None, log=None):
    """Quantization-aware training with early stopping on validation macro-F1.

    ``train`` and ``val`` are ``(X, y)`` pairs. The returned net holds the
    weights of the best validation epoch. ``log`` receives one dict per epoch.
    """
    cfg = cfg or TrainConfig.individual()
    C = net.num_classes
    X, y = _check_data(*train, C, "train")
    Xv, yv = _check_data(*val, C, "val")
    cw = resolve_class_weights(cfg, y, C)
    rng = Rng(cfg.seed)
    keyed = [((i, name), arr) for i, name, arr in net.parameters()]
    opt = Adam(keyed, cfg.lr, cfg.weight_decay, decoupled=cfg.optimizer == "adamw")
    result = TrainResult(net)
    best_state = net.state()
    best, wait = -1.0, 0
    n = X.shape[0]
    for epoch in range(1, cfg.max_epochs + 1):
        order = rng.permutation(n)
        losses, weights, max_post = [], [], 0.0
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            logits, cache = _train_forward(net, X[idx], rng, dropout=True)
            loss, dlogits = weighted_cross_entropy(logits, y[idx], cw)
            if epoch == 1 and start == 0:
                result.first_batch_loss = loss
            grads = _backward(net, cache, dlogits)
            grads, _, post = clip_grad_norm(grads, cfg.grad_clip_norm)
            max_post = max(max_post, post)
            opt.step(grads)
            _project(net)
            net.invalidate()
            losses.append(loss)
            weights.append(len(idx))
        val_f1 = macro_f1(net.predict(Xv), yv, C)
        record = {"epoch": epoch, "train_loss": float(np.average(losses, weights=weights)),
                  "val_f1": val_f1, "lr": cfg.lr, "max_grad_norm": max_post}
        result.history.append(record)
        if log is not None:
            log(record)
        # ties keep the later epoch; only a strict improvement resets patience
        if val_f1 >= best:
            wait = 0 if val_f1 > best else wait + 1
            best = val_f1
            best_state = net.state()
            result.best_epoch = epoch
        else:
            wait += 1
        if wait >= cfg.patience:
            break
    net.load_state(best_state)
    result.best_val_f1 = best
    return result


def _project(net):
    for layer in net.layers:
        if layer.scheme.kind == "ternary":
            np.maximum(layer.tau, 0.0, out=layer.tau)
            np.maximum(layer.alpha, 1e-8, out=layer.alpha)


# ---------------------------------------------------------------------------
# post-training bitwise conversion
# ---------------------------------------------------------------------------


def convert_to_bitwise(net, calib_X, tau=bitwise.DEFAULT_THRESHOLD):
    """Replace every hidden layer with a frozen XOR-popcount layer.

    Weight bits are ``w > 0``. Each bitwise unit's bias is set to minus its
    mean popcount response on ``calib_X`` so roughly half the units fire.
    The classifier head is kept and should be re-fitted with :func:`train_expert`.
    """
    calib = np.asarray(calib_X, dtype=np.float32)
    layers = []
    x = calib
    for i, layer in enumerate(net.layers[:-1]):
        words = bitwise.binarize_rows(x, tau)
        w_words = bitwise.pack_sign_rows(layer.weight > 0)
        y = bitwise.bitwise_linear(words, w_words, layer.in_dim)
        bias = -y.mean(axis=0)
        layers.append(Layer(layer.weight.copy(), bias, QuantScheme.bitwise(), tau=tau))
        x = np.maximum(y + bias, 0.0)
    head = net.layers[-1]
    layers.append(Layer(head.weight.copy(), head.bias.copy(), head.scheme,
                        tau=None if head.tau is None else float(head.tau),
                        alpha=None if head.alpha is None else head.alpha.copy()))
    return ExpertNet(layers, net.dropout_p, net.dropout_after, net.act_quant)
