"""Flat ``key = value`` configuration files for experiments."""
from __future__ import annotations

import hashlib
import typing
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Dict, Optional, Tuple

from .signals import DEFAULT_BANDS
from .training import TrainConfig

DEFAULT_LENGTHS = (2000, 4000, 6000, 8000, 10000)
DEFAULT_METHODS = ("skr", "gp", "vanilla", "beta:0.5", "beta:2")


class ConfigError(ValueError):
    pass


def parse_key_values(text: str, allow_private: bool = False) -> Dict[str, str]:
    out: Dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if key.startswith("_") and not allow_private:
            continue
        if key in out:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        out[key] = value
    return out


def _convert(tp, text: str):
    origin = typing.get_origin(tp)
    args = typing.get_args(tp)
    if origin is typing.Union:
        inner = [a for a in args if a is not type(None)]
        if text == "" or text.lower() == "none":
            return None
        return _convert(inner[0], text)
    if origin in (tuple, Tuple):
        if text == "":
            return ()
        elem = args[0]
        return tuple(_convert(elem, t.strip()) for t in text.split(","))
    if tp is bool:
        low = text.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"not a boolean: {text!r}")
    if tp is int:
        return int(text)
    if tp is float:
        return float(text)
    return text


def coerce_fields(cls, raw: Dict[str, str]) -> dict:
    hints = typing.get_type_hints(cls)
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(raw) - known)
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    out = {}
    for key, text in raw.items():
        try:
            out[key] = _convert(hints[key], text)
        except ValueError as err:
            raise ConfigError(f"{key}: {err}") from None
    return out


def _format(v) -> str:
    if v is None:
        return ""
    if isinstance(v, tuple):
        return ",".join(_format(x) if not isinstance(x, tuple) else ":".join(map(repr, x)) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


@dataclass
class ExperimentConfig:
    # dataset
    n_components: int = 3
    length: int = 10000
    bands: str = ";".join(f"{lo},{hi}" for lo, hi in DEFAULT_BANDS)
    data_seed: int = 0
    mixing_seed: int = 1
    # experiment grid
    methods: Tuple[str, ...] = DEFAULT_METHODS
    lengths: Tuple[int, ...] = DEFAULT_LENGTHS
    train_seeds: Tuple[int, ...] = (0,)
    out_dir: str = "runs"
    # training (mirrors TrainConfig; method/seed are set per cell)
    epochs: int = 3000
    learning_rate: float = 1e-3
    lam: float = 0.3
    disc_weight: Optional[float] = None
    disc_learning_rate: Optional[float] = None
    eval_every: int = 50
    gamma_init: Optional[Tuple[float, ...]] = None
    xi_init: float = 1.0
    variance_mode: str = "adopt_q"
    jitter: float = 1e-6
    leave_one_out: bool = True
    whiten: bool = True
    hidden: Tuple[int, ...] = (64, 64)
    disc_hidden: Tuple[int, ...] = (64, 64)
    # single-cell training and benchmarking
    method: str = "skr"
    train_seed: int = 0
    bench_lengths: Tuple[int, ...] = (500, 1000, 2000, 4000)
    bench_methods: Tuple[str, ...] = ("skr", "gp")
    bench_repeats: int = 3
    bench_epochs: int = 3
    bench_scope: str = "prior"

    def band_list(self):
        out = []
        for chunk in self.bands.split(";"):
            lo, hi = (float(t) for t in chunk.split(","))
            out.append((lo, hi))
        return out

    def train_config(self, method: str, seed: int) -> TrainConfig:
        name, beta = parse_method(method)
        return TrainConfig(
            method=name, epochs=self.epochs, learning_rate=self.learning_rate, lam=self.lam,
            beta=beta, disc_weight=self.disc_weight, disc_learning_rate=self.disc_learning_rate,
            seed=seed, eval_every=self.eval_every, gamma_init=self.gamma_init,
            xi_init=self.xi_init, variance_mode=self.variance_mode, jitter=self.jitter,
            leave_one_out=self.leave_one_out, whiten=self.whiten, hidden=self.hidden,
            disc_hidden=self.disc_hidden,
        ).validate()

    def to_text(self) -> str:
        return "".join(f"{f.name} = {_format(getattr(self, f.name))}\n" for f in fields(self))

    def hash(self) -> str:
        return hashlib.sha256(self.to_text().encode()).hexdigest()[:12]

    @classmethod
    def from_text(cls, text: str) -> "ExperimentConfig":
        cfg = cls(**coerce_fields(cls, parse_key_values(text)))
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        return cls.from_text(Path(path).read_text())

    def validate(self) -> None:
        try:
            self.band_list()
        except ValueError:
            raise ConfigError(f"bad bands {self.bands!r}; expected 'lo,hi;lo,hi;...'") from None
        if len(self.band_list()) != self.n_components:
            raise ConfigError("number of bands must equal n_components")
        for m in self.methods + (self.method,) + self.bench_methods:
            parse_method(m)
        if self.bench_scope not in ("prior", "step"):
            raise ConfigError("bench_scope must be 'prior' or 'step'")


def parse_method(spec: str):
    """'skr' | 'gp' | 'vanilla' | 'beta:<value>' -> (name, beta)."""
    if spec.startswith("beta"):
        if ":" not in spec:
            raise ConfigError("beta methods are written beta:<value>, e.g. beta:0.5")
        try:
            return "beta", float(spec.split(":", 1)[1])
        except ValueError:
            raise ConfigError(f"bad beta method {spec!r}") from None
    if spec not in ("skr", "gp", "vanilla"):
        raise ConfigError(f"unknown method {spec!r}")
    return spec, None


def method_label(spec: str) -> str:
    name, beta = parse_method(spec)
    if name == "beta":
        return f"betaVAE({beta:g})"
    return {"skr": "skrVAE", "gp": "gpVAE", "vanilla": "VAE"}[name]
