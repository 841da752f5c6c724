"""Experiment configuration: a dataclass plus an INI-style text format.

Grammar (parsed with ``configparser``; ``#`` and ``;`` start comments)::

    [data]
    dataset = mnist            ; mnist | blobs
    train_limit = 10000
    test_limit = 2000
    root =                     ; empty: $CONDLR_DATA, then <repo>/data
    blobs_per_class = 200
    blobs_dim = 20
    blobs_separation = 6.0
    num_classes = 10

    [model]
    widths = 784, 256, 128, 10
    activation = leaky_relu(0.01)
    bias = true
    variant = condlr           ; condlr | unit | noband | vanilla_uv | full | projected_sgd
    tau = 0.1
    alpha = 0.5                ; ignored when ranks is set
    ranks =                    ; e.g. 88, 38, 4
    init = svd_of_gaussian     ; svd_of_gaussian | exp_decay

    [train]
    lr = 0.2
    momentum = 0.9
    epochs = 15
    batch_size = 128
    milestones = 8, 12
    factor = 0.4
    seed = 0                   ; weight initialization
    data_seed = 0              ; minibatch order
    timing = true              ; false writes 0 in the secs column
    divergence_retries = 3     ; on a non-finite step restart with lr * backoff
    backoff = 0.5

    [attack]
    epsilons = 0, 0.01, 0.02, 0.03, 0.04, 0.05, 0.06

    [output]
    dir = runs/default

The defaults above are the desk-scale preset (a 4000/1000 MNIST subset, 15
epochs). Keys may be given without their section on the command line
(``--set lr=0.05``); unknown keys are errors.
"""

from __future__ import annotations

import configparser
import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ConfigError
from .lowrank import VARIANTS
from .nn import Activation

SECTIONS = {
    "data": ("dataset", "train_limit", "test_limit", "root", "blobs_per_class", "blobs_dim",
             "blobs_separation", "num_classes"),
    "model": ("widths", "activation", "bias", "variant", "tau", "alpha", "ranks", "init"),
    "train": ("lr", "momentum", "epochs", "batch_size", "milestones", "factor", "seed",
              "data_seed", "timing", "divergence_retries", "backoff"),
    "attack": ("epsilons",),
    "output": ("dir",),
}
_FIELD_OF = {"dir": "out_dir"}


@dataclass(frozen=True)
class TrainConfig:
    dataset: str = "mnist"
    train_limit: int | None = 10000
    test_limit: int | None = 2000
    root: str | None = None
    blobs_per_class: int = 200
    blobs_dim: int = 20
    blobs_separation: float = 6.0
    num_classes: int = 10
    widths: tuple = (784, 256, 128, 10)
    activation: str = "leaky_relu(0.01)"
    bias: bool = True
    variant: str = "condlr"
    tau: float = 0.1
    alpha: float = 0.5
    ranks: tuple | None = None
    init: str = "svd_of_gaussian"
    lr: float = 0.2
    momentum: float = 0.9
    epochs: int = 15
    batch_size: int = 128
    milestones: tuple = (8, 12)
    factor: float = 0.4
    seed: int = 0
    data_seed: int = 0
    timing: bool = True
    divergence_retries: int = 3
    backoff: float = 0.5
    epsilons: tuple = (0.0, 0.01, 0.02, 0.03, 0.04, 0.05, 0.06)
    out_dir: str = "runs/default"

    def __post_init__(self):
        if self.lr <= 0:
            raise ConfigError("lr must be positive")
        if not 0 <= self.momentum < 1:
            raise ConfigError("momentum must lie in [0, 1)")
        if list(self.milestones) != sorted(self.milestones):
            raise ConfigError("milestones must be ascending")
        if self.epochs < 0 or self.batch_size < 1:
            raise ConfigError("epochs must be >= 0 and batch_size >= 1")
        if self.divergence_retries < 0 or not 0 < self.backoff < 1:
            raise ConfigError("divergence_retries must be >= 0 and backoff in (0, 1)")
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}")
        if self.tau < 0:
            raise ConfigError("tau must be nonnegative")
        if self.dataset not in ("mnist", "blobs"):
            raise ConfigError(f"unknown dataset {self.dataset!r}")
        if self.init not in ("svd_of_gaussian", "exp_decay"):
            raise ConfigError(f"unknown init scheme {self.init!r}")
        if len(self.widths) < 2:
            raise ConfigError("widths needs at least an input and an output size")
        if self.ranks is not None and len(self.ranks) != len(self.widths) - 1:
            raise ConfigError("ranks needs one entry per layer")
        if list(self.epsilons) != sorted(self.epsilons) or min(self.epsilons, default=0) < 0:
            raise ConfigError("epsilons must be nonnegative and ascending")
        try:
            Activation.parse(self.activation)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    def lr_at(self, epoch):
        """Step-decayed learning rate used during 1-based ``epoch``."""
        return self.lr * self.factor ** sum(1 for m in self.milestones if m < epoch)

    def replace(self, **changes):
        return dataclasses.replace(self, **changes)


_FIELDS = {f.name: f for f in dataclasses.fields(TrainConfig)}


def _tuple(text, cast):
    parts = [p.strip() for p in text.split(",") if p.strip()]
    return tuple(cast(p) for p in parts)


def _convert(name, text):
    text = text.strip()
    try:
        if name in ("widths", "milestones"):
            return _tuple(text, int)
        if name == "ranks":
            return _tuple(text, int) or None
        if name == "epsilons":
            return _tuple(text, float)
        if name in ("bias", "timing"):
            low = text.lower()
            if low not in ("true", "false", "1", "0", "yes", "no", "on", "off"):
                raise ValueError(f"not a boolean: {text!r}")
            return low in ("true", "1", "yes", "on")
        if name in ("train_limit", "test_limit"):
            return None if text.lower() in ("", "none", "all") else int(text)
        if name == "root":
            return text or None
        kind = _FIELDS[name].type
        if kind in ("int",):
            return int(text)
        if kind in ("float",):
            return float(text)
        return text
    except ValueError as exc:
        raise ConfigError(f"bad value for {name}: {exc}") from exc


def _field_name(key):
    name = _FIELD_OF.get(key, key)
    if name not in _FIELDS:
        raise ConfigError(f"unknown configuration key {key!r}")
    return name


def parse_overrides(pairs):
    out = {}
    for pair in pairs:
        if "=" not in pair:
            raise ConfigError(f"override {pair!r} is not key=value")
        key, value = pair.split("=", 1)
        key = key.strip().split(".")[-1]
        name = _field_name(key)
        out[name] = _convert(name, value)
    return out


def load_config(path=None, overrides=(), base=None):
    """Read a config file (optional), then apply ``key=value`` overrides."""
    values = {}
    if path is not None:
        parser = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
        try:
            with open(path) as fh:
                parser.read_file(fh)
        except (OSError, configparser.Error) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        for section in parser.sections():
            if section not in SECTIONS:
                raise ConfigError(f"unknown section [{section}]")
            for key, value in parser.items(section):
                if key not in SECTIONS[section]:
                    raise ConfigError(f"unknown key {key!r} in [{section}]")
                name = _field_name(key)
                values[name] = _convert(name, value)
    values.update(parse_overrides(overrides))
    try:
        return dataclasses.replace(base or TrainConfig(), **values)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc


def dump_config(cfg):
    """Serialize to the INI grammar; ``load_config`` reads it back unchanged."""
    lines = []
    for section, keys in SECTIONS.items():
        lines.append(f"[{section}]")
        for key in keys:
            value = getattr(cfg, _FIELD_OF.get(key, key))
            if value is None:
                text = ""
            elif isinstance(value, tuple):
                text = ", ".join(repr(v) if isinstance(v, float) else str(v) for v in value)
            elif isinstance(value, bool):
                text = "true" if value else "false"
            elif isinstance(value, float):
                text = repr(value)
            else:
                text = str(value)
            lines.append(f"{key} = {text}")
        lines.append("")
    return "\n".join(lines)


def write_config(cfg, path):
    Path(path).write_text(dump_config(cfg))
