"""Experiment configuration.

Configs are INI files read with :mod:`configparser`; every key belongs to a
fixed section and unknown sections or keys are rejected.  Example::

    [method]
    lambda = 0.5
    alpha = 100

    [noise]
    type = random
    rate = 0.2

    [run]
    seeds = 0, 1, 2
"""

import configparser
import dataclasses
import hashlib
import json
from dataclasses import dataclass, field

from .epr import MarginParams
from .model import Schedule


class ConfigError(ValueError):
    def __init__(self, field_name, message):
        super().__init__(f"{field_name}: {message}")
        self.field = field_name


@dataclass(frozen=True)
class ExperimentConfig:
    # [method]
    lam: float = 0.5
    alpha: float = 100.0
    beta: float = 100.0
    kappa: float = 1.0
    k: int = 5
    gamma: float = 1.0
    partition: str = "quantile"
    threshold: float = 0.5
    # [train]
    batch_size: int = 32
    stage1_epochs: int = 20
    stage2_epochs: int = 40
    lr: float = 0.01
    decay: float = 0.1
    momentum: float = 0.9
    # [noise]
    noise_type: str = "random"
    noise_rate: float = 0.2
    # [data]
    c_train: int = 50
    c_test: int = 25
    samples_per_id: int = 20
    d_in: int = 32
    d_emb: int = 16
    intra_spread: float = 0.15
    identity_dim: int = 0  # 0: identity centres span all of d_in
    # [run]
    seeds: tuple = field(default=(0, 1, 2, 3, 4))

    def __post_init__(self):
        self.validate()

    def validate(self):
        def need(cond, name, msg):
            if not cond:
                raise ConfigError(name, msg)

        need(self.lam >= 0, "lambda", "must be >= 0")
        need(self.alpha > 0, "alpha", "must be > 0")
        need(self.beta > 0, "beta", "must be > 0")
        need(self.kappa > 0, "kappa", "must be > 0")
        need(2 <= self.k < self.c_train, "k", f"must lie in [2, {self.c_train - 1}]")
        need(self.gamma >= 0, "gamma", "must be >= 0")
        need(self.partition in ("quantile", "threshold"), "partition", "must be quantile or threshold")
        need(0 < self.threshold < 1, "threshold", "must lie in (0, 1)")
        need(self.batch_size >= 1, "batch_size", "must be >= 1")
        need(self.stage1_epochs >= 1, "stage1_epochs", "must be >= 1")
        need(self.stage2_epochs >= 0, "stage2_epochs", "must be >= 0")
        need(self.lr >= 0, "lr", "must be >= 0")
        need(0 < self.decay <= 1, "decay", "must lie in (0, 1]")
        need(0 <= self.momentum < 1, "momentum", "must lie in [0, 1)")
        need(self.noise_type in ("none", "random", "patterned"), "noise.type",
             "must be none, random or patterned")
        need(0 <= self.noise_rate < 1, "noise.rate", "must lie in [0, 1)")
        need(self.c_train >= 3, "c_train", "must be >= 3")
        need(self.c_test >= 1, "c_test", "must be >= 1")
        need(2 <= self.samples_per_id <= 30, "samples_per_id", "must lie in [2, 30]")
        need(self.d_in >= 2 and self.d_emb >= 2, "d_in", "dimensions must be >= 2")
        need(self.intra_spread >= 0, "intra_spread", "must be >= 0")
        need(self.identity_dim == 0 or 2 <= self.identity_dim <= self.d_in, "identity_dim",
             "must be 0 or lie in [2, d_in]")
        need(len(self.seeds) >= 1, "seeds", "need at least one seed")

    @property
    def schedule(self):
        return Schedule(self.stage1_epochs, self.stage2_epochs, self.lr, self.decay)

    @property
    def total_epochs(self):
        return self.stage1_epochs + self.stage2_epochs

    @property
    def margin(self):
        return MarginParams(self.alpha, self.beta, self.k, self.total_epochs)

    def replace(self, **changes):
        return dataclasses.replace(self, **changes)

    def to_dict(self):
        d = dataclasses.asdict(self)
        d["seeds"] = list(self.seeds)
        return d

    def digest(self, exclude=("seeds",)):
        """Stable short hash of everything except ``exclude``."""
        d = {k: v for k, v in self.to_dict().items() if k not in exclude}
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:12]

    def to_ini(self):
        lines = []
        for section, keys in SECTIONS.items():
            lines.append(f"[{section}]")
            for key, attr in keys.items():
                v = getattr(self, attr)
                if isinstance(v, tuple):
                    v = ", ".join(str(s) for s in v)
                lines.append(f"{key} = {v}")
            lines.append("")
        return "\n".join(lines)


# section -> {ini key: dataclass attribute}
SECTIONS = {
    "method": {"lambda": "lam", "alpha": "alpha", "beta": "beta", "kappa": "kappa", "k": "k",
               "gamma": "gamma", "partition": "partition", "threshold": "threshold"},
    "train": {"batch_size": "batch_size", "stage1_epochs": "stage1_epochs",
              "stage2_epochs": "stage2_epochs", "lr": "lr", "decay": "decay",
              "momentum": "momentum"},
    "noise": {"type": "noise_type", "rate": "noise_rate"},
    "data": {"c_train": "c_train", "c_test": "c_test", "samples_per_id": "samples_per_id",
             "d_in": "d_in", "d_emb": "d_emb", "intra_spread": "intra_spread",
             "identity_dim": "identity_dim"},
    "run": {"seeds": "seeds"},
}

_FIELD_TYPES = {f.name: f.type for f in dataclasses.fields(ExperimentConfig)}


def _convert(attr, raw):
    kind = _FIELD_TYPES[attr]
    try:
        if attr == "seeds":
            return tuple(int(s) for s in raw.replace(",", " ").split())
        if kind in (int, "int"):
            return int(raw)
        if kind in (float, "float"):
            return float(raw)
        return raw.strip()
    except ValueError:
        raise ConfigError(attr, f"cannot parse {raw!r}") from None


def parse_overrides(pairs):
    """``["lambda=0.25", "noise.rate=0.5"]`` -> ``{"lam": 0.25, "noise_rate": 0.5}``."""
    flat = {}
    for section, keys in SECTIONS.items():
        for key, attr in keys.items():
            flat[key] = attr
            flat[f"{section}.{key}"] = attr
    out = {}
    for pair in pairs:
        if "=" not in pair:
            raise ConfigError(pair, "override must look like key=value")
        key, raw = pair.split("=", 1)
        attr = flat.get(key.strip())
        if attr is None:
            raise ConfigError(key.strip(), "unknown key")
        out[attr] = _convert(attr, raw)
    return out


def loads(text, overrides=()):
    parser = configparser.ConfigParser(interpolation=None)
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError("config", str(exc).splitlines()[0]) from None
    values = {}
    for section in parser.sections():
        if section not in SECTIONS:
            raise ConfigError(section, "unknown section")
        for key, raw in parser.items(section):
            attr = SECTIONS[section].get(key)
            if attr is None:
                raise ConfigError(f"{section}.{key}", "unknown key")
            values[attr] = _convert(attr, raw)
    values.update(parse_overrides(overrides))
    return ExperimentConfig(**values)


def load(path, overrides=()):
    with open(path) as f:
        return loads(f.read(), overrides)
