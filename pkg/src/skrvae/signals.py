"""Synthetic band-limited sources, linear mixing and plain-text dataset I/O."""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Sequence, Tuple

import numpy as np
from scipy.signal import lfilter

from .rng import CounterRNG

DEFAULT_BANDS: Tuple[Tuple[float, float], ...] = ((0.005, 0.02), (0.04, 0.08), (0.15, 0.25))
MAX_CONDITION = 20.0
# Noise generated on each side of the kept window so the filter transients are discarded.
FILTER_MARGIN = 512


class ConfigurationError(ValueError):
    pass


class ParseError(ValueError):
    pass


@dataclass
class SourceSet:
    sources: np.ndarray
    bands: List[Tuple[float, float]]
    seed: int

    @property
    def n_components(self) -> int:
        return self.sources.shape[0]

    @property
    def length(self) -> int:
        return self.sources.shape[1]

    def truncate(self, length: int) -> "SourceSet":
        """Keep the first ``length`` samples (an exact prefix; rows are not re-standardized)."""
        if not 2 <= length <= self.length:
            raise ConfigurationError(f"cannot truncate length {self.length} to {length}")
        return SourceSet(self.sources[:, :length].copy(), list(self.bands), self.seed)


@dataclass
class MixingMatrix:
    a: np.ndarray
    seed: int


@dataclass
class Observation:
    x: np.ndarray
    source_seed: int = -1
    mixing_seed: int = -1
    length: int = field(default=0)

    def __post_init__(self):
        if not self.length:
            self.length = self.x.shape[1]


def validate_band(low: float, high: float) -> None:
    if not 0.0 < low < high < 0.5:
        raise ConfigurationError(f"band ({low}, {high}) must satisfy 0 < low < high < 0.5")


def bandpass_coefficients(low: float, high: float):
    """Second-order Butterworth band-pass (one biquad) via the prewarped bilinear transform.

    Frequencies are in cycles per sample. Returns ``(b, a)`` with ``a[0] == 1``.
    """
    validate_band(low, high)
    wl = np.tan(np.pi * low)
    wh = np.tan(np.pi * high)
    bw = wh - wl
    w0sq = wl * wh
    a0 = 1.0 + bw + w0sq
    b = np.array([bw, 0.0, -bw]) / a0
    a = np.array([1.0, (2.0 * w0sq - 2.0) / a0, (1.0 - bw + w0sq) / a0])
    return b, a


def bandpass(x, low: float, high: float) -> np.ndarray:
    """Zero-phase band-pass: the biquad run forward, then over the reversed output."""
    b, a = bandpass_coefficients(low, high)
    x = np.asarray(x, dtype=np.float64)
    y = lfilter(b, a, x)
    return lfilter(b, a, y[::-1])[::-1].copy()


def standardize_rows(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    centered = x - x.mean(axis=1, keepdims=True)
    std = centered.std(axis=1, keepdims=True)
    if np.any(std == 0.0):
        raise ConfigurationError("cannot standardize a constant row")
    out = centered / std
    # one refinement pass pulls mean/var to within a few ulps
    out -= out.mean(axis=1, keepdims=True)
    return out / out.std(axis=1, keepdims=True)


def generate_sources(
    n_components: int = 3,
    length: int = 10_000,
    seed: int = 0,
    bands: Sequence[Tuple[float, float]] = DEFAULT_BANDS,
) -> SourceSet:
    bands = [tuple(map(float, b)) for b in bands]
    if n_components != len(bands):
        raise ConfigurationError(f"{n_components} components but {len(bands)} bands")
    if length < 64:
        raise ConfigurationError("length must be at least 64")
    for low, high in bands:
        validate_band(low, high)
    centers = [0.5 * (lo + hi) for lo, hi in bands]
    if any(c1 >= c2 for c1, c2 in zip(centers, centers[1:])):
        raise ConfigurationError("band centre frequencies must be strictly increasing")

    rng = CounterRNG(seed)
    total = length + 2 * FILTER_MARGIN
    noise = rng.normal((n_components, total))
    rows = [bandpass(noise[i], lo, hi)[FILTER_MARGIN:FILTER_MARGIN + length]
            for i, (lo, hi) in enumerate(bands)]
    return SourceSet(standardize_rows(np.vstack(rows)), bands, int(seed))


def make_mixing(n: int, seed: int) -> MixingMatrix:
    if n < 2:
        raise ConfigurationError("mixing needs n >= 2")
    rng = CounterRNG(seed)
    while True:
        a = 2.0 * rng.uniform((n, n)) - 1.0
        if np.linalg.cond(a) <= MAX_CONDITION:
            return MixingMatrix(a, int(seed))


def mix(s: SourceSet, a: MixingMatrix) -> Observation:
    if a.a.shape != (s.n_components, s.n_components):
        raise ConfigurationError(
            f"mixing matrix {a.a.shape} does not match {s.n_components} sources")
    return Observation(a.a @ s.sources, s.seed, a.seed, s.length)


def save_csv(path, matrix, header: str = "") -> None:
    """One row per line, shortest round-trip decimals, optional ``#`` header lines."""
    m = np.atleast_2d(np.asarray(matrix, dtype=np.float64))
    lines = [f"# {h}" for h in header.splitlines()] if header else []
    lines += [",".join(repr(float(v)) for v in row) for row in m]
    Path(path).write_text("\n".join(lines) + "\n", newline="\n")


def load_csv(path) -> np.ndarray:
    rows = []
    width = None
    with open(path, "r", newline="") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\r\n")
            if not line.strip() or line.startswith("#"):
                continue
            try:
                row = [float(tok) for tok in line.split(",")]
            except ValueError:
                raise ParseError(f"{path}: line {lineno}: non-numeric token") from None
            if width is None:
                width = len(row)
            elif len(row) != width:
                raise ParseError(f"{path}: line {lineno}: expected {width} values, got {len(row)}")
            rows.append(row)
    if not rows:
        raise ParseError(f"{path}: no data rows")
    return np.array(rows, dtype=np.float64)


def write_manifest(path, entries: dict) -> None:
    lines = [f"{k} = {v}" for k, v in entries.items()]
    Path(path).write_text("\n".join(lines) + "\n", newline="\n")


def read_manifest(path) -> dict:
    out = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ParseError(f"{path}: line {lineno}: expected 'key = value'")
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    return out
