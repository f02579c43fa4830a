"""Run configuration: defaults < ``key = value`` config file < command-line flags."""
from __future__ import annotations

from dataclasses import dataclass, fields
from pathlib import Path

from .errors import InvalidArgument
from .flowcore import METHODS, SolverConfig, TrainConfig
from .flownet import NetArch
from .metrics import EvalConfig


def _int_list(text):
    if isinstance(text, (list, tuple)):
        return tuple(int(x) for x in text)
    return tuple(int(x) for x in str(text).replace(" ", "").split(",") if x)


@dataclass
class RunConfig:
    # dataset
    contents: int = 64
    styles: int = 12
    views: int = 8
    dim: int = 64
    factor_dim: int = 16
    hidden_dim: int = 128
    noise: float = 0.05
    seed: int = 1
    train_fraction: float = 0.7
    # velocity net
    widths: tuple = (256, 256, 256)
    time_freqs: int = 8
    # training
    epochs: int = 30
    batches: int = 200
    batch_size: int = 256
    lr: float = 1e-3
    # solver
    nfe: int = 1
    method: str = "euler"
    roundtrip_nfe: int = 64
    # evaluation
    knn_ks: tuple = (1, 5, 10)
    recall_ks: tuple = (1, 10)
    restarts: int = 10
    merge_triplets: int = 1000
    out: str = "run"

    def validate(self):
        checks = [
            (self.contents >= 2, "contents must be >= 2"),
            (self.styles >= 2, "styles must be >= 2"),
            (self.views >= 1, "views must be >= 1"),
            (self.dim >= 1, "dim must be >= 1"),
            (self.factor_dim >= 2, "factor_dim must be >= 2"),
            (self.hidden_dim >= 1, "hidden_dim must be >= 1"),
            (self.noise >= 0, "noise must be >= 0"),
            (0 < self.train_fraction < 1, "train_fraction must lie in (0, 1)"),
            (len(self.widths) > 0 and min(self.widths) >= 1, "widths must be positive"),
            (self.time_freqs >= 1, "time_freqs must be >= 1"),
            (self.epochs >= 1, "epochs must be >= 1"),
            (self.batches >= 1, "batches must be >= 1"),
            (self.batch_size >= 1, "batch_size must be >= 1"),
            (self.lr > 0, "lr must be > 0"),
            (self.nfe >= 1, "nfe must be >= 1"),
            (self.roundtrip_nfe >= 1, "roundtrip_nfe must be >= 1"),
            (self.method in METHODS, f"method must be one of {METHODS}"),
            (self.restarts >= 1, "restarts must be >= 1"),
            (self.merge_triplets >= 1, "merge_triplets must be >= 1"),
            (all(k >= 1 for k in self.knn_ks + self.recall_ks), "k values must be >= 1"),
        ]
        for ok, msg in checks:
            if not ok:
                raise InvalidArgument(msg)
        return self

    def arch(self):
        return NetArch(self.dim, self.widths, self.time_freqs)

    def train_config(self):
        return TrainConfig(self.epochs, self.batches, self.batch_size, self.lr, self.seed, self.nfe)

    def solver(self, direction):
        return SolverConfig(direction, self.nfe, self.method)

    def eval_config(self):
        return EvalConfig(nfe=self.nfe, method=self.method, roundtrip_nfe=self.roundtrip_nfe,
                          knn_ks=self.knn_ks, recall_ks=self.recall_ks, restarts=self.restarts,
                          merge_triplets=self.merge_triplets, seed=self.seed)


_TYPES = {f.name: f.type for f in fields(RunConfig)}


def coerce(key, value):
    if key not in _TYPES:
        raise InvalidArgument(f"unknown config key {key!r}")
    kind = _TYPES[key]
    try:
        if kind == "int":
            return int(value)
        if kind == "float":
            return float(value)
        if kind == "tuple":
            return _int_list(value)
        return str(value)
    except ValueError:
        raise InvalidArgument(f"bad value for {key}: {value!r}") from None


def read_config_file(path):
    values = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise InvalidArgument(f"{path}:{lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        values[key] = coerce(key, value)
    return values


def build_config(file_path=None, overrides=None):
    values = {}
    if file_path:
        values.update(read_config_file(file_path))
    for key, value in (overrides or {}).items():
        if value is not None:
            values[key] = coerce(key, value)
    return RunConfig(**values).validate()
