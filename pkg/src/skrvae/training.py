"""Adam, the full-sequence training loop and binary checkpoints."""
from __future__ import annotations

import hashlib
import struct
import time
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np

from . import autograd as ad
from .autograd import ParameterStore
from .models import (METHODS, ConfigurationError, LossHyper, discriminator_loss,
                     encode, init_params, loss)
from .rng import CounterRNG
from .signals import Observation, SourceSet, standardize_rows


class TrainingError(RuntimeError):
    def __init__(self, message: str, epoch: int = -1, last_breakdown: Optional[dict] = None):
        super().__init__(message)
        self.epoch = epoch
        self.last_breakdown = last_breakdown


class CheckpointError(ValueError):
    pass


@dataclass
class TrainConfig:
    method: str = "skr"
    epochs: int = 3000
    learning_rate: float = 1e-3
    lam: float = 0.3
    beta: Optional[float] = None
    # None: 1.0 for skr, 0.0 for the baselines
    disc_weight: Optional[float] = None
    disc_learning_rate: Optional[float] = None
    seed: int = 0
    eval_every: int = 50
    gamma_init: Optional[Tuple[float, ...]] = None
    xi_init: float = 1.0
    variance_mode: str = "adopt_q"
    jitter: float = 1e-6
    leave_one_out: bool = True
    whiten: bool = True
    hidden: Tuple[int, ...] = (64, 64)
    disc_hidden: Tuple[int, ...] = (64, 64)
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8

    def validate(self) -> "TrainConfig":
        if self.method not in METHODS:
            raise ConfigurationError(f"unknown method {self.method!r}")
        if self.epochs < 1:
            raise ConfigurationError("epochs must be >= 1")
        if not self.learning_rate > 0:
            raise ConfigurationError("learning_rate must be > 0")
        if self.method == "beta" and self.beta is None:
            raise ConfigurationError("method 'beta' needs beta")
        if self.eval_every < 1:
            raise ConfigurationError("eval_every must be >= 1")
        return self

    @property
    def effective_disc_weight(self) -> float:
        if self.disc_weight is not None:
            return float(self.disc_weight)
        return 1.0 if self.method == "skr" else 0.0

    def hyper(self) -> LossHyper:
        mode = self.variance_mode
        if mode != "adopt_q":
            mode = float(mode.split(":", 1)[1]) if mode.startswith("fixed:") else float(mode)
        return LossHyper(lam=self.lam, beta=self.beta, disc_weight=self.effective_disc_weight,
                         variance_mode=mode, jitter=self.jitter, leave_one_out=self.leave_one_out)

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, tuple):
                v = ",".join(repr(x) for x in v)
            lines.append(f"{f.name} = {'' if v is None else v}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "TrainConfig":
        from .config import parse_key_values, coerce_fields
        return cls(**coerce_fields(cls, parse_key_values(text)))


@dataclass
class AdamState:
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def adam_step(params: ParameterStore, grads: Dict[str, np.ndarray], state: AdamState,
              lr: float) -> None:
    """One bias-corrected Adam update, in place."""
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for name, value in params.items():
        g = grads[name]
        if g.shape != value.data.shape:
            raise ad.DimensionError(f"{name}: grad {g.shape} != param {value.data.shape}")
        m = state.m.setdefault(name, np.zeros_like(g))
        v = state.v.setdefault(name, np.zeros_like(g))
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        value.data = value.data - lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


@dataclass
class EpochRecord:
    epoch: int
    loss: float
    recon: float
    kl: float
    gen: float
    disc: float
    seconds: float
    max_corr: Optional[float] = None


@dataclass
class RunReport:
    method: str
    epochs: List[EpochRecord] = field(default_factory=list)
    recovered: Optional[np.ndarray] = None
    gamma: Optional[np.ndarray] = None
    xi: Optional[np.ndarray] = None
    final_max_corr: Optional[float] = None

    def losses(self) -> np.ndarray:
        return np.array([r.loss for r in self.epochs])

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        for r in self.epochs:
            h.update(repr((r.epoch, r.loss, r.recon, r.kl, r.gen, r.disc, r.max_corr)).encode())
        if self.recovered is not None:
            h.update(self.recovered.tobytes())
        return h.hexdigest()


@dataclass
class TrainState:
    config: TrainConfig
    params: ParameterStore
    adam: AdamState
    disc_adam: AdamState
    rng: CounterRNG
    epoch: int = 0


def prepare_data(data, whiten: bool = True) -> np.ndarray:
    x = data.x if isinstance(data, Observation) else np.asarray(data, dtype=np.float64)
    if not np.all(np.isfinite(x)):
        raise TrainingError("observations contain NaN or Inf")
    return whiten_rows(x) if whiten else standardize_rows(x)


def whiten_rows(x: np.ndarray) -> np.ndarray:
    """Symmetric (ZCA) whitening: zero-mean rows with identity sample covariance."""
    centered = x - x.mean(axis=1, keepdims=True)
    cov = centered @ centered.T / centered.shape[1]
    evals, evecs = np.linalg.eigh(cov)
    if evals[0] <= 1e-12 * evals[-1]:
        raise TrainingError("observation channels are linearly dependent; cannot whiten")
    return (evecs * evals ** -0.5) @ evecs.T @ centered


def init_state(config: TrainConfig, n: int) -> TrainState:
    config.validate()
    disc_hidden = config.disc_hidden if config.effective_disc_weight else None
    params = init_params(config.method, n, config.hidden, disc_hidden, config.gamma_init,
                         config.xi_init, config.seed)
    mk = lambda: AdamState(beta1=config.adam_beta1, beta2=config.adam_beta2, eps=config.adam_eps)
    # init consumes its own stream; per-step noise uses a separate one derived from the seed
    rng = CounterRNG(config.seed ^ 0x5EED5EED)
    return TrainState(config, params, mk(), mk(), rng)


def posterior_means(params: ParameterStore, x: np.ndarray) -> np.ndarray:
    return encode(x, params).mu.data.copy()


def train_step(state: TrainState, x: np.ndarray) -> EpochRecord:
    """One full-sequence update. Random draws per step, in order: N*L reparameterization
    normals, then (with the discriminator on) one N*L block of shuffle keys."""
    cfg = state.config
    n, length = x.shape
    t0 = time.perf_counter()
    model_params = state.params
    disc_on = cfg.effective_disc_weight != 0.0
    noise = state.rng.normal((n, length))
    model_params.zero_grad()
    out = loss(cfg.method, x, model_params, cfg.hyper(), noise)
    total = out.total.item()
    if not np.isfinite(total):
        raise TrainingError(f"non-finite loss at epoch {state.epoch}", state.epoch, out.breakdown)
    ad.backward(out.total)
    grads = model_params.grads()
    adam_step(model_params.exclude("disc."), grads, state.adam, cfg.learning_rate)
    disc_value = 0.0
    if disc_on:
        perms = state.rng.row_permutations(n, length)
        disc = model_params.subset("disc.")
        disc.zero_grad()
        d_loss = discriminator_loss(out.z.data, disc, perms)
        ad.backward(d_loss)
        adam_step(disc, disc.grads(), state.disc_adam,
                  cfg.disc_learning_rate or cfg.learning_rate)
        disc_value = d_loss.item()
    state.epoch += 1
    b = out.breakdown
    return EpochRecord(state.epoch - 1, b["loss"], b["recon"], b["kl"], b["gen"], disc_value,
                       time.perf_counter() - t0)


def train(config: TrainConfig, data, truth: Optional[SourceSet] = None,
          state: Optional[TrainState] = None, progress=None) -> Tuple[RunReport, ParameterStore]:
    """Run ``config.epochs`` full-sequence steps (continuing from ``state`` if given)."""
    from .evaluation import max_correlation

    x = prepare_data(data, config.whiten)
    n, _ = x.shape
    if state is None:
        state = init_state(config, n)
    report = RunReport(config.method)
    last = None
    while state.epoch < config.epochs:
        try:
            rec = train_step(state, x)
        except TrainingError as err:
            err.last_breakdown = err.last_breakdown if last is None else last
            raise
        last = {"loss": rec.loss, "recon": rec.recon, "kl": rec.kl, "gen": rec.gen}
        if truth is not None and ((rec.epoch + 1) % config.eval_every == 0
                                  or rec.epoch + 1 == config.epochs):
            rec.max_corr = max_correlation(posterior_means(state.params, x),
                                           truth.sources[:, :x.shape[1]]).mean
        report.epochs.append(rec)
        if progress is not None:
            progress(rec)
    report.recovered = posterior_means(state.params, x)
    if "log_gamma" in state.params:
        report.gamma = np.exp(state.params["log_gamma"].data.reshape(-1))
    report.xi = np.maximum(np.exp(state.params["log_xi"].data.reshape(-1)), 1e-6)
    if truth is not None:
        report.final_max_corr = max_correlation(report.recovered,
                                                truth.sources[:, :x.shape[1]]).mean
    return report, state.params


# ---------------------------------------------------------------- checkpoints

MAGIC = b"SKRVCKPT"
VERSION = 1


def checkpoint_save(path, state_or_params, config: TrainConfig) -> None:
    """Layout: magic, u32 version, u32-length config text, u32 blob count, then per blob
    u16-length name, u32 rows, u32 cols, little-endian float64 data."""
    blobs: Dict[str, np.ndarray] = {}
    meta = ""
    if isinstance(state_or_params, TrainState):
        st = state_or_params
        blobs.update(st.params.snapshot())
        for tag, adam in (("adam", st.adam), ("disc_adam", st.disc_adam)):
            for k in adam.m:
                blobs[f"@{tag}.m/{k}"] = adam.m[k]
                blobs[f"@{tag}.v/{k}"] = adam.v[k]
        meta = (f"_epoch = {st.epoch}\n_rng_seed = {st.rng.seed}\n_rng_counter = {st.rng.counter}\n"
                f"_adam_step = {st.adam.step}\n_disc_adam_step = {st.disc_adam.step}\n")
    else:
        blobs.update(state_or_params.snapshot())
    text = (config.to_text() + meta).encode()
    parts = [MAGIC, struct.pack("<I", VERSION), struct.pack("<I", len(text)), text,
             struct.pack("<I", len(blobs))]
    for name, arr in blobs.items():
        arr = ad.as_matrix(arr)
        raw = name.encode()
        parts += [struct.pack("<H", len(raw)), raw, struct.pack("<II", *arr.shape),
                  arr.astype("<f8").tobytes()]
    Path(path).write_bytes(b"".join(parts))


def _read(buf: bytes, pos: int, n: int) -> Tuple[bytes, int]:
    if pos + n > len(buf):
        raise CheckpointError("truncated checkpoint")
    return buf[pos:pos + n], pos + n


def _load_raw(path):
    buf = Path(path).read_bytes()
    magic, pos = _read(buf, 0, len(MAGIC))
    if magic != MAGIC:
        raise CheckpointError("not a checkpoint (bad magic)")
    (version,), pos = struct.unpack("<I", _read(buf, pos, 4)[0]), pos + 4
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    (tlen,), pos = struct.unpack("<I", _read(buf, pos, 4)[0]), pos + 4
    text, pos = _read(buf, pos, tlen)
    (count,), pos = struct.unpack("<I", _read(buf, pos, 4)[0]), pos + 4
    blobs = {}
    for _ in range(count):
        (nlen,), pos = struct.unpack("<H", _read(buf, pos, 2)[0]), pos + 2
        name, pos = _read(buf, pos, nlen)
        shape, pos = _read(buf, pos, 8)
        rows, cols = struct.unpack("<II", shape)
        data, pos = _read(buf, pos, 8 * rows * cols)
        blobs[name.decode()] = np.frombuffer(data, dtype="<f8").reshape(rows, cols).astype(np.float64)
    if pos != len(buf):
        raise CheckpointError("trailing bytes after checkpoint payload")
    return text.decode(), blobs


def checkpoint_load(path) -> Tuple[ParameterStore, TrainConfig]:
    text, blobs = _load_raw(path)
    cfg_lines = "\n".join(l for l in text.splitlines() if not l.startswith("_"))
    config = TrainConfig.from_text(cfg_lines)
    return ParameterStore({k: v for k, v in blobs.items() if not k.startswith("@")}), config


def load_state(path) -> TrainState:
    """Restore parameters, optimizer moments and the RNG position for resuming."""
    from .config import parse_key_values
    text, blobs = _load_raw(path)
    meta = {k: v for k, v in parse_key_values(text, allow_private=True).items() if k.startswith("_")}
    if "_epoch" not in meta:
        raise CheckpointError("checkpoint holds parameters only; cannot resume")
    params, config = checkpoint_load(path)
    mk = lambda step: AdamState(beta1=config.adam_beta1, beta2=config.adam_beta2,
                                eps=config.adam_eps, step=step)
    adam, disc_adam = mk(int(meta["_adam_step"])), mk(int(meta["_disc_adam_step"]))
    for name, arr in blobs.items():
        if not name.startswith("@"):
            continue
        tag, key = name[1:].split("/", 1)
        target = adam if tag.startswith("adam.") else disc_adam
        (target.m if tag.endswith(".m") else target.v)[key] = arr.copy()
    rng = CounterRNG(int(meta["_rng_seed"]), int(meta["_rng_counter"]))
    return TrainState(config, params, adam, disc_adam, rng, int(meta["_epoch"]))
