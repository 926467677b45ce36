"""Separation metrics and the per-step wall-clock scaling benchmark."""
from __future__ import annotations

import logging
import threading
import time
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import autograd as ad
from .autograd import Value
from .models import LatentPosterior, gp_kl, skr_kl
from .signals import SourceSet

log = logging.getLogger(__name__)

MIN_STEP_SECONDS = 1e-3


class DegenerateInputError(ValueError):
    pass


def pearson(a, b) -> float:
    a = np.asarray(a, dtype=np.float64).reshape(-1)
    b = np.asarray(b, dtype=np.float64).reshape(-1)
    if a.shape != b.shape or a.size < 2:
        raise ValueError("pearson needs two vectors of equal length >= 2")
    da = a - a.mean()
    db = b - b.mean()
    na = np.sqrt(np.dot(da, da))
    nb = np.sqrt(np.dot(db, db))
    if na == 0.0 or nb == 0.0:
        raise DegenerateInputError("constant input has no correlation")
    return float(np.clip(np.dot(da, db) / (na * nb), -1.0, 1.0))


@dataclass
class CorrelationReport:
    best: np.ndarray          # per recovered component, max |r| (or signed r)
    match: np.ndarray         # index of the best-matching source
    mean: float
    assigned_mean: float      # one-to-one greedy matching
    matrix: np.ndarray = field(repr=False)


def correlation_matrix(z_hat: np.ndarray, s: np.ndarray, absolute: bool = True) -> np.ndarray:
    """r[i, j] between recovered row i and source row j; constant recovered rows give 0."""
    z_hat = np.atleast_2d(z_hat)
    s = np.atleast_2d(s)
    r = np.zeros((z_hat.shape[0], s.shape[0]))
    for i, row in enumerate(z_hat):
        for j, src in enumerate(s):
            try:
                r[i, j] = pearson(row, src)
            except DegenerateInputError:
                log.warning("recovered component %d is constant; scoring it 0", i)
                r[i, j] = 0.0
    return np.abs(r) if absolute else r


def greedy_assignment(r: np.ndarray) -> List[Tuple[int, int]]:
    """Repeatedly take the largest remaining entry, removing its row and column."""
    r = r.astype(float).copy()
    pairs = []
    for _ in range(min(r.shape)):
        i, j = np.unravel_index(np.argmax(r), r.shape)
        pairs.append((int(i), int(j)))
        r[i, :] = -np.inf
        r[:, j] = -np.inf
    return sorted(pairs)


def max_correlation(z_hat, s, absolute: bool = True) -> CorrelationReport:
    sources = s.sources if isinstance(s, SourceSet) else np.asarray(s, dtype=np.float64)
    z_hat = np.atleast_2d(np.asarray(z_hat, dtype=np.float64))
    if z_hat.shape[1] != sources.shape[1]:
        raise ValueError(f"length mismatch: {z_hat.shape} vs {sources.shape}")
    r = correlation_matrix(z_hat, sources, absolute)
    best = r.max(axis=1)
    pairs = greedy_assignment(r)
    assigned = float(np.mean([r[i, j] for i, j in pairs]))
    return CorrelationReport(best, r.argmax(axis=1), float(best.mean()), assigned, r)


# ---------------------------------------------------------------- scaling benchmark

@dataclass
class ScalingReport:
    seconds: Dict[Tuple[str, int], float]           # median seconds per step
    exponents: Dict[str, float]
    scope: str = "step"
    samples: Dict[Tuple[str, int], List[float]] = field(default_factory=dict)

    def methods(self) -> List[str]:
        return sorted({m for m, _ in self.seconds})

    def lengths(self, method: str) -> List[int]:
        return sorted(l for m, l in self.seconds if m == method)

    def series(self, method: str) -> Tuple[np.ndarray, np.ndarray]:
        ls = self.lengths(method)
        return np.array(ls, float), np.array([self.seconds[(method, l)] for l in ls])


def fit_exponent(lengths: Sequence[float], seconds: Sequence[float]) -> float:
    """Least-squares slope of log(time) against log(length)."""
    if len(lengths) < 3:
        raise ValueError("exponent fit needs at least three lengths")
    slope, _ = np.polyfit(np.log(np.asarray(lengths, float)), np.log(np.asarray(seconds, float)), 1)
    return float(slope)


_timing_lock = threading.Lock()


class ConcurrentTimingError(RuntimeError):
    pass


def _prior_path_step(method: str, mu: Value, xi: Value, log_gamma: Value) -> None:
    mu.zero_grad(), xi.zero_grad(), log_gamma.zero_grad()
    post = LatentPosterior(mu, xi)
    gamma = ad.exp(log_gamma)
    kl = skr_kl(post, gamma) if method == "skr" else gp_kl(post, gamma)
    ad.backward(kl)


def _make_prior_inputs(n: int, length: int, seed: int = 0):
    from .rng import CounterRNG
    from .models import default_gamma_init
    rng = CounterRNG(seed)
    mu = Value(rng.normal((n, length)), requires_grad=True)
    xi = Value(np.full((n, 1), 0.5), requires_grad=True)
    log_gamma = Value(np.log(default_gamma_init(n)).reshape(n, 1), requires_grad=True)
    return mu, xi, log_gamma


def _full_step_runner(method: str, length: int, n: int, seed: int):
    from .config import parse_method
    from .signals import generate_sources, make_mixing, mix
    from .training import TrainConfig, init_state, prepare_data, train_step
    name, beta = parse_method(method)
    cfg = TrainConfig(method=name, beta=beta, epochs=10 ** 9, seed=seed)
    src = generate_sources(n, max(length, 64), seed, _bands(n))
    x = prepare_data(mix(src, make_mixing(n, seed + 1)))
    state = init_state(cfg, n)
    return lambda: train_step(state, x)


def _bands(n: int):
    from .signals import DEFAULT_BANDS
    if n <= len(DEFAULT_BANDS):
        return DEFAULT_BANDS[:n]
    edges = np.geomspace(0.005, 0.45, n + 1)
    return [(edges[i], edges[i + 1] * 0.9) for i in range(n)]


def time_epochs(methods, lengths: Sequence[int], repeats: int = 3, epochs_per_point: int = 3,
                scope: str = "step", n_components: int = 3, seed: int = 0) -> ScalingReport:
    """Median wall-clock seconds per training step for every (method, length).

    ``scope="step"`` times whole training steps (networks, prior, discriminator);
    ``scope="prior"`` times only the latent-prior KL forward and backward pass, the
    part whose cost the kernel choice determines. The first step of each point is a
    discarded warm-up.
    """
    if isinstance(methods, str):
        methods = [methods]
    lengths = list(lengths)
    if lengths != sorted(lengths):
        raise ValueError("lengths must be ascending")
    if repeats < 3:
        raise ValueError("repeats must be >= 3")
    if scope not in ("step", "prior"):
        raise ValueError("scope must be 'step' or 'prior'")
    if not _timing_lock.acquire(blocking=False):
        raise ConcurrentTimingError("another timing run is active in this process")
    try:
        seconds, samples = {}, {}
        for method in methods:
            for length in lengths:
                if scope == "prior":
                    inputs = _make_prior_inputs(n_components, length, seed)
                    step = lambda: _prior_path_step(method, *inputs)
                else:
                    step = _full_step_runner(method, length, n_components, seed)
                step()  # warm-up
                reps = epochs_per_point
                while True:
                    runs = []
                    for _ in range(repeats):
                        t0 = time.perf_counter()
                        for _ in range(reps):
                            step()
                        runs.append((time.perf_counter() - t0) / reps)
                    if min(runs) * reps >= MIN_STEP_SECONDS or reps >= 1 << 16:
                        break
                    reps *= 4
                samples[(method, length)] = runs
                seconds[(method, length)] = float(np.median(runs))
        exponents = {}
        for method in methods:
            ls = [l for l in lengths]
            if len(ls) >= 3:
                exponents[method] = fit_exponent(ls, [seconds[(method, l)] for l in ls])
        return ScalingReport(seconds, exponents, scope, samples)
    finally:
        _timing_lock.release()


def time_ratio(report: ScalingReport, slow: str, fast: str) -> Dict[int, float]:
    common = sorted(set(report.lengths(slow)) & set(report.lengths(fast)))
    return {l: report.seconds[(slow, l)] / report.seconds[(fast, l)] for l in common}


# ---------------------------------------------------------------- report formatting

def format_accuracy_grid(grid: Dict[Tuple[str, int], Optional[float]], methods: Sequence[str],
                         lengths: Sequence[int], labels: Optional[Dict[str, str]] = None) -> str:
    """Markdown table with one row per length and one column per method; missing cells say FAILED."""
    labels = labels or {}
    head = ["L"] + [labels.get(m, m) for m in methods]
    lines = ["| " + " | ".join(head) + " |", "|" + "---|" * len(head)]
    for length in lengths:
        cells = [str(length)]
        for m in methods:
            v = grid.get((m, length))
            cells.append("FAILED" if v is None else f"{v:.4f}")
        lines.append("| " + " | ".join(cells) + " |")
    return "\n".join(lines) + "\n"


def scaling_rows(report: ScalingReport) -> List[List[str]]:
    """CSV rows (method, length, median seconds, each repeat) sorted by method then length."""
    rows = [["method", "length", "seconds"] + [f"repeat{i}" for i in
                                               range(max(map(len, report.samples.values()), default=0))]]
    for m in report.methods():
        for length in report.lengths(m):
            rows.append([m, str(length), repr(report.seconds[(m, length)])]
                        + [repr(s) for s in report.samples.get((m, length), [])])
    return rows


def format_scaling_table(report: ScalingReport) -> str:
    methods = report.methods()
    lengths = sorted({l for _, l in report.seconds})
    lines = ["| L | " + " | ".join(f"{m} (s/step)" for m in methods) + " |",
             "|" + "---|" * (len(methods) + 1)]
    for length in lengths:
        cells = [f"{report.seconds[(m, length)]:.4g}" if (m, length) in report.seconds else "-"
                 for m in methods]
        lines.append(f"| {length} | " + " | ".join(cells) + " |")
    if report.exponents:
        lines.append("")
        lines.append("| method | fitted exponent |")
        lines.append("|---|---|")
        for m in methods:
            if m in report.exponents:
                lines.append(f"| {m} | {report.exponents[m]:.3f} |")
    return "\n".join(lines) + "\n"
