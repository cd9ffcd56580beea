"""Run configuration: a strict JSON object; unknown keys are rejected before any work starts.

Defaults::

    experiment       null       subcommand name; must match the command if given
    schemes          ["bitlinear4"]
    routing          "uniform"  or "curious"
    k                1
    T                1.0
    alpha_curiosity  1.0
    alpha_balance    0.001
    mc_samples       10
    kl_mode          "class"    or "gate"
    seed             0
    fold_count       5
    hidden           [640, 320]
    max_epochs       100
    patience         19
    bench_runs       30
    bench_warmup     3
    workload_size    500
    bits             [1, 2, 4, 8, 16]   (ablation)
    synth            {"num_classes": 10, "samples_per_class": 200,
                      "cluster_spread": 0.05, "seed": 7}
    data             null       embedding file; null means generate ``synth``
    model            null       model container (input or output, per command)
    report           null       report path; null prints to stdout
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields

from .errors import ConfigError
from .quantizers import QuantScheme

EXPERIMENTS = ("train-expert", "train-moe", "eval", "bench", "bench-routing", "ablation",
               "route-trace", "melspec", "size-report", "stats", "synth-data")


@dataclass
class SynthSpec:
    num_classes: int = 10
    samples_per_class: int = 200
    cluster_spread: float = 0.05
    seed: int = 7


@dataclass
class RunConfig:
    experiment: str | None = None
    schemes: list = field(default_factory=lambda: ["bitlinear4"])
    routing: str = "uniform"
    k: int = 1
    T: float = 1.0
    alpha_curiosity: float = 1.0
    alpha_balance: float = 1e-3
    mc_samples: int = 10
    kl_mode: str = "class"
    seed: int = 0
    fold_count: int = 5
    hidden: list = field(default_factory=lambda: [640, 320])
    max_epochs: int = 100
    patience: int = 19
    bench_runs: int = 30
    bench_warmup: int = 3
    workload_size: int = 500
    bits: list = field(default_factory=lambda: [1, 2, 4, 8, 16])
    synth: SynthSpec = field(default_factory=SynthSpec)
    data: str | None = None
    model: str | None = None
    report: str | None = None

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.experiment is not None and self.experiment not in EXPERIMENTS:
            raise ConfigError(f"experiment must be one of {', '.join(EXPERIMENTS)}")
        if self.routing not in ("uniform", "curious"):
            raise ConfigError(f"routing must be 'uniform' or 'curious', got {self.routing!r}")
        if self.kl_mode not in ("class", "gate"):
            raise ConfigError(f"kl_mode must be 'class' or 'gate', got {self.kl_mode!r}")
        for name, kind in (("schemes", str), ("hidden", int), ("bits", int)):
            items = getattr(self, name)
            if any(isinstance(v, bool) or not isinstance(v, kind) for v in items):
                raise ConfigError(f"{name} must be a list of {kind.__name__}")
        if not self.schemes:
            raise ConfigError("need at least one scheme")
        for s in self.schemes:
            try:
                QuantScheme.parse(s)
            except ValueError as exc:
                raise ConfigError(f"bad scheme {s!r}: {exc}") from None
        for name in ("k", "mc_samples", "max_epochs", "patience", "bench_runs", "bench_warmup",
                     "workload_size"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.fold_count < 2:
            raise ConfigError("fold_count must be >= 2")
        if not self.T > 0:
            raise ConfigError("T must be positive")
        if self.alpha_curiosity < 0 or self.alpha_balance < 0:
            raise ConfigError("alpha_curiosity and alpha_balance must be >= 0")
        if not 0 <= self.seed < 2**64:
            raise ConfigError("seed must fit in u64")
        if any(b not in (1, 2, 4, 8, 16) for b in self.bits):
            raise ConfigError("ablation bits must be drawn from 1, 2, 4, 8, 16")
        if any(h < 1 for h in self.hidden):
            raise ConfigError("hidden widths must be >= 1")
        s = self.synth
        if s.num_classes < 2 or s.samples_per_class < 1 or s.cluster_spread < 0:
            raise ConfigError("synth needs num_classes >= 2, samples_per_class >= 1, spread >= 0")

    @property
    def scheme_objs(self):
        return [QuantScheme.parse(s) for s in self.schemes]

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, raw):
        if not isinstance(raw, dict):
            raise ConfigError("config must be a JSON object")
        kw = _typed(cls, raw, "config")
        if "synth" in kw:
            kw["synth"] = SynthSpec(**_typed(SynthSpec, kw["synth"], "synth"))
        return cls(**kw)

    @classmethod
    def load(cls, path):
        try:
            with open(path, encoding="utf-8") as fh:
                raw = json.load(fh)
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc.msg} at line {exc.lineno})") from None
        return cls.from_dict(raw)

    def replace(self, **changes):
        d = {k: v for k, v in asdict(self).items()}
        d.update({k: v for k, v in changes.items() if v is not None})
        return RunConfig.from_dict(d)


_TYPES = {
    "int": (int,),
    "float": (int, float),
    "str": (str,),
    "list": (list,),
}


def _typed(cls, raw, where):
    if not isinstance(raw, dict):
        raise ConfigError(f"{where} must be a JSON object")
    known = {f.name: f for f in fields(cls)}
    unknown = sorted(set(raw) - set(known))
    if unknown:
        raise ConfigError(f"unknown {where} key(s): {', '.join(unknown)}")
    for key, value in raw.items():
        kind = str(known[key].type).split(" | ")[0]
        if value is None and "None" in str(known[key].type):
            continue
        allowed = _TYPES.get(kind)
        if allowed is None:
            continue
        if isinstance(value, bool) or not isinstance(value, allowed):
            raise ConfigError(f"{where}.{key} must be {kind}, got {type(value).__name__}")
    return dict(raw)
