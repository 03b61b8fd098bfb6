"""Flat ``key = value`` run configuration with typed resolution and a stable hash."""

from __future__ import annotations

import hashlib
import os
import re
from dataclasses import dataclass, fields, replace

from .errors import ConfigError
from .location import ACTIVATIONS, PositionalEncodingConfig
from .objectives import ContrastiveConfig

_MODEL = re.compile(r"^(sup-only-(grid|wrap)|mse|csp-(mc|nce)-(b|bl|bd|bld))$")


@dataclass(frozen=True)
class TrainConfig:
    # synthetic data (ignored when dataset paths are given)
    n_classes: int = 20
    feature_dim: int = 32
    kappa: float = 20.0
    centers_per_class: int = 3
    feature_noise: float = 2.0
    prototype_scale: float = 1.0
    n_train: int = 5000
    n_eval: int = 2000
    train_path: str = ""
    eval_path: str = ""
    # location encoder
    encoding: str = "grid"
    n_scales: int = 64
    min_radius: float = 0.01
    max_radius: float = 1.0
    hidden_layers: int = 1
    hidden_units: int = 512
    embed_dim: int = 512
    dropout: float = 0.5
    activation: str = "leaky_relu"
    # pre-training
    objective: str = "mc"
    components: str = "BLD"
    alpha1: float = 1.0
    alpha2: float = 1.0
    beta1: float = 1.0
    beta2: float = 1.0
    tau0: float = 1.0
    tau1: float = 1.0
    tau2: float = 1.0
    n_neg_locations: int = 1
    pretrain_lr: float = 2e-4
    mse_lr: float = 2e-6
    pretrain_epochs: int = 100
    batch_size: int = 64
    # fine-tuning
    pos_weight: float = 1.0
    finetune_lr: float = 5e-4
    finetune_epochs: int = 30
    finetune_batch_size: int = 32
    head_lr: float = 1e-3
    head_epochs: int = 200
    head_batch_size: int = 64
    # experiment grid
    ratios: tuple = (5.0,)
    models: tuple = ("sup-only-grid", "csp-mc-bld")
    seed: int = 0

    def __post_init__(self):
        for name in ("pretrain_lr", "mse_lr", "finetune_lr", "head_lr", "pos_weight", "kappa"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be > 0, got {getattr(self, name)}")
        for name in ("n_classes", "feature_dim", "centers_per_class", "n_train", "n_eval", "hidden_units",
                     "embed_dim", "n_neg_locations", "finetune_batch_size", "head_batch_size"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        for name in ("pretrain_epochs", "finetune_epochs", "head_epochs", "hidden_layers", "seed"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0, got {getattr(self, name)}")
        if self.batch_size < 2:
            raise ConfigError(f"batch_size must be >= 2, got {self.batch_size}")
        if not self.ratios or any(not 0 < r <= 100 for r in self.ratios):
            raise ConfigError(f"every ratio must lie in (0, 100], got {self.ratios}")
        if not self.models:
            raise ConfigError("models must name at least one model")
        for name in self.models:
            if not _MODEL.match(name):
                raise ConfigError(f"unknown model {name!r}")
        if self.objective not in ("mc", "nce", "mse"):
            raise ConfigError(f"objective must be mc, nce or mse, got {self.objective!r}")
        if self.activation not in ACTIVATIONS:
            raise ConfigError(f"unknown activation {self.activation!r}")
        if not 0 <= self.dropout < 1:
            raise ConfigError(f"dropout must lie in [0, 1), got {self.dropout}")
        self.positional()
        self.contrastive()

    def positional(self) -> PositionalEncodingConfig:
        return PositionalEncodingConfig(self.encoding, self.n_scales, self.min_radius, self.max_radius)

    def contrastive(self) -> ContrastiveConfig:
        return ContrastiveConfig(
            self.objective, self.components, self.alpha1, self.alpha2, self.beta1, self.beta2,
            self.tau0, self.tau1, self.tau2, self.n_neg_locations,
        )

    def for_model(self, name: str) -> "TrainConfig":
        """This config specialised to one named model of the experiment grid."""
        match = _MODEL.match(name)
        if not match:
            raise ConfigError(f"unknown model {name!r}")
        if match.group(2):
            return replace(self, encoding=match.group(2))
        if name == "mse":
            return replace(self, encoding="grid", objective="mse")
        return replace(self, encoding="grid", objective=match.group(3), components=match.group(4).upper())

    def to_text(self) -> str:
        return "".join(f"{f.name} = {_format(getattr(self, f.name))}\n" for f in fields(self))

    def hash(self) -> str:
        return hashlib.sha256(self.to_text().encode()).hexdigest()


def is_pretrained(model: str) -> bool:
    return not model.startswith("sup-only")


def _format(value) -> str:
    if isinstance(value, tuple):
        return ", ".join(_format(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _convert(name: str, kind, text: str):
    text = text.strip()
    try:
        if kind == "int":
            return int(text)
        if kind == "float":
            return float(text)
        if kind == "tuple":
            items = [t.strip() for t in text.split(",") if t.strip()]
            return tuple(float(t) for t in items) if name == "ratios" else tuple(items)
    except ValueError:
        raise ConfigError(f"{name}: cannot parse {text!r}") from None
    return text


_TYPES = {f.name: f.type for f in fields(TrainConfig)}


def parse_text(text: str, source: str = "<config>") -> dict[str, str]:
    """Raw ``key -> value`` strings from config text; ``#`` starts a comment."""
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key = key.strip()
        if not sep or not key:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {line!r}")
        if key in out:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}")
        out[key] = value.strip()
    return out


def parse_overrides(items) -> dict[str, str]:
    out = {}
    for item in items or ():
        key, sep, value = item.partition("=")
        if not sep or not key.strip():
            raise ConfigError(f"override must look like key=value, got {item!r}")
        out[key.strip()] = value.strip()
    return out


def resolve(raw: dict[str, str], base: TrainConfig | None = None) -> TrainConfig:
    unknown = sorted(set(raw) - set(_TYPES))
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    values = {k: _convert(k, _TYPES[k], v) for k, v in raw.items()}
    try:
        return replace(base or TrainConfig(), **values)
    except TypeError as exc:
        raise ConfigError(str(exc)) from None


def load_config(
    path: str | os.PathLike | None = None, overrides=None, seed: int | None = None
) -> TrainConfig:
    """Defaults, then the file at ``path``, then ``key=value`` overrides, then ``seed``."""
    raw = {}
    if path is not None:
        try:
            with open(path) as fh:
                raw = parse_text(fh.read(), str(path))
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    raw.update(parse_overrides(overrides))
    if seed is not None:
        raw["seed"] = str(seed)
    return resolve(raw)
