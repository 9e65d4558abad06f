"""Flat ``key = value`` experiment configuration.

The file is INI-style without section headers::

    # comments start with '#' or ';'
    protocol = feddm
    rounds = 10
    hidden = 32
    classes = 0, 1, 2

Lists are comma separated; ``none`` (or an empty value) clears optional
keys. Unknown keys and out-of-range values are rejected at parse time.
"""
from __future__ import annotations

import configparser
import dataclasses
import typing
from dataclasses import dataclass, field
from pathlib import Path

from .distillation import ClientConfig
from .federation import PROTOCOLS, FedRunConfig, LocalConfig, ServerConfig

DATASETS = ("blobs", "1d-binary", "idx", "cifar")
MODELS = ("mlp", "convnet-lite", "logistic-1d")
_SECTION = "experiment"


class ConfigError(ValueError):
    """Invalid experiment configuration."""


@dataclass
class ExperimentConfig:
    protocol: str = "feddm"
    rounds: int = 20
    clients: int = 10
    alpha: float = 0.5
    seed: int = 0
    participation: float = 1.0
    workers: int = 1

    dataset: str = "blobs"
    blobs_per_class: int = 200
    blobs_classes: int = 4
    blobs_dim: int = 2
    blobs_spread: float = 0.5
    test_per_class: int = 100
    binary_n: int = 100
    train_images: str = ""
    train_labels: str = ""
    test_images: str = ""
    test_labels: str = ""
    cifar_train: list[str] = field(default_factory=list)
    cifar_test: list[str] = field(default_factory=list)
    cifar_label_bytes: int = 1
    num_classes: int = 10
    classes: list[int] = field(default_factory=list)
    per_class: int | None = None

    model: str = "mlp"
    hidden: list[int] = field(default_factory=lambda: [128])
    channels: list[int] = field(default_factory=lambda: [8, 16, 32])

    iterations: int = 1000
    client_lr: float = 1.0
    real_batch: int = 256
    ipc: int = 10
    rho: float = 5.0
    sigma: float = 0.0
    clip: float = 5.0
    syn_batch: int | None = None
    dp_delta: float | None = None

    server_lr: float = 0.01
    server_epochs: int = 500
    server_batch: int = 256

    local_epochs: int = 10
    local_lr: float = 0.01
    local_batch: int = 256
    mu: float = 0.01

    out: str = "runs/experiment"
    dump_images: bool = False
    record_wall_time: bool = False

    def __post_init__(self):
        validate(self)

    def to_text(self) -> str:
        lines = []
        for f in dataclasses.fields(self):
            lines.append(f"{f.name} = {_format(getattr(self, f.name))}")
        return "\n".join(lines) + "\n"

    def as_dict(self) -> dict:
        return dataclasses.asdict(self)

    def client_config(self) -> ClientConfig:
        return ClientConfig(iterations=self.iterations, lr=self.client_lr, real_batch=self.real_batch,
                            ipc=self.ipc, rho=self.rho, sigma=self.sigma, clip=self.clip,
                            syn_batch=self.syn_batch)

    def run_config(self) -> FedRunConfig:
        return FedRunConfig(
            protocol=self.protocol, rounds=self.rounds, clients=self.clients, alpha=self.alpha,
            seed=self.seed, client=self.client_config(),
            local=LocalConfig(self.local_epochs, self.local_lr, self.local_batch,
                              self.mu if self.protocol == "fedprox" else 0.0),
            server=ServerConfig(self.server_lr, self.server_epochs, self.server_batch, self.rho),
            participation=self.participation, workers=self.workers, dp_delta=self.dp_delta)


_HINTS = typing.get_type_hints(ExperimentConfig)


def _format(value) -> str:
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, list):
        return ", ".join(str(v) for v in value)
    return str(value)


def _coerce(key, raw: str):
    hint = _HINTS[key]
    raw = raw.strip()
    optional = type(None) in typing.get_args(hint)
    if optional:
        if raw.lower() in ("", "none"):
            return None
        hint = next(a for a in typing.get_args(hint) if a is not type(None))
    try:
        if typing.get_origin(hint) is list:
            (inner,) = typing.get_args(hint)
            return [inner(p.strip()) for p in raw.split(",") if p.strip()]
        if hint is bool:
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if hint is int:
            return int(raw)
        if hint is float:
            return float(raw)
        return raw
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {getattr(hint, '__name__', hint)}") from None


def _require(ok, key, message):
    if not ok:
        raise ConfigError(f"{key}: {message}")


def validate(cfg: ExperimentConfig) -> None:
    _require(cfg.protocol in PROTOCOLS, "protocol", f"must be one of {PROTOCOLS}")
    _require(cfg.dataset in DATASETS, "dataset", f"must be one of {DATASETS}")
    _require(cfg.model in MODELS, "model", f"must be one of {MODELS}")
    for key in ("rounds", "clients", "workers", "blobs_per_class", "blobs_classes", "blobs_dim",
                "test_per_class", "binary_n", "num_classes", "real_batch", "ipc",
                "server_batch", "local_batch"):
        _require(getattr(cfg, key) >= 1, key, "must be >= 1")
    for key in ("iterations", "server_epochs", "local_epochs", "seed"):
        _require(getattr(cfg, key) >= 0, key, "must be >= 0")
    for key in ("alpha", "client_lr", "server_lr", "local_lr", "clip"):
        _require(getattr(cfg, key) > 0, key, "must be > 0")
    for key in ("rho", "sigma", "mu", "blobs_spread"):
        _require(getattr(cfg, key) >= 0, key, "must be >= 0")
    _require(0 < cfg.participation <= 1, "participation", "must lie in (0, 1]")
    _require(cfg.cifar_label_bytes in (1, 2), "cifar_label_bytes", "must be 1 or 2")
    _require(cfg.per_class is None or cfg.per_class >= 1, "per_class", "must be >= 1")
    _require(cfg.syn_batch is None or cfg.syn_batch >= 1, "syn_batch", "must be >= 1")
    _require(cfg.dp_delta is None or 0 < cfg.dp_delta < 1, "dp_delta", "must lie in (0, 1)")
    _require(all(h >= 1 for h in cfg.hidden), "hidden", "widths must be >= 1")
    _require(len(cfg.channels) >= 1 and all(c >= 1 for c in cfg.channels), "channels",
             "needs at least one width, all >= 1")
    _require(len(set(cfg.classes)) == len(cfg.classes), "classes", "must not repeat")
    _require(all(0 <= c < cfg.num_classes for c in cfg.classes), "classes",
             f"must lie in [0, {cfg.num_classes})")
    if cfg.dataset == "1d-binary":
        _require(cfg.model == "logistic-1d", "model", "the 1d-binary dataset needs model = logistic-1d")
    if cfg.model == "logistic-1d":
        _require(cfg.dataset == "1d-binary", "dataset", "logistic-1d only fits the 1d-binary dataset")


def parse_text(text: str, source="<string>") -> ExperimentConfig:
    parser = configparser.ConfigParser(interpolation=None, default_section="__defaults__")
    parser.optionxform = str
    try:
        parser.read_string(f"[{_SECTION}]\n{text}", source=source)
    except configparser.Error as exc:
        raise ConfigError(f"{source}: {exc}") from None
    values = {}
    for key, raw in parser.items(_SECTION):
        if key not in _HINTS:
            raise ConfigError(f"{key}: unknown key")
        values[key] = _coerce(key, raw)
    try:
        return ExperimentConfig(**values)
    except ConfigError:
        raise
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def parse_config(path) -> ExperimentConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config: file not found: {path}")
    return parse_text(path.read_text(), source=str(path))


def replace(cfg: ExperimentConfig, **changes) -> ExperimentConfig:
    return dataclasses.replace(cfg, **changes)
