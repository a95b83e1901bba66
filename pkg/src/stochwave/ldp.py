"""Monte Carlo small-noise probabilities, the Gaussian rate oracle, and slope fits."""
from __future__ import annotations

import csv
import io
import json
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np
from scipy import stats

from .rate import EventSpec
from .solver import SolverConfig, additive_variance_field, homogeneous_trajectory, integrate

# A rung needs at least this many hits to enter the slope fit.
MIN_HITS = 10
CONFIDENCE = 0.95


def wilson_interval(hits: int, M: int) -> tuple[float, float]:
    ci = stats.binomtest(hits, M).proportion_ci(confidence_level=CONFIDENCE, method="wilson")
    return float(ci.low), float(ci.high)


def neg_eps_log(p: float, eps: float) -> float:
    if p <= 0:
        return math.inf
    return max(0.0, -eps * math.log(p))


def probit_rate(p: float, eps: float) -> float:
    """``eps * z^2 / 2`` with ``p = P(N(0,1) > z)``, clipped at ``z >= 0``.

    Same small-``eps`` limit as ``-eps log p``; exact at every ``eps`` when the
    hit functional is Gaussian.
    """
    if p <= 0:
        return math.inf
    z = max(float(stats.norm.isf(p)), 0.0)
    return 0.5 * eps * z * z


@dataclass
class ProbabilityEstimate:
    event: dict
    epsilon: float
    M: int
    hits: int
    p_hat: float
    lo: float
    hi: float
    seed: int
    unreliable: bool = False

    @property
    def neg_eps_log_p(self) -> float:
        return neg_eps_log(self.p_hat, self.epsilon)

    @property
    def neg_eps_log_interval(self) -> tuple[float, float]:
        return neg_eps_log(self.hi, self.epsilon), neg_eps_log(self.lo, self.epsilon)


def _batch_size(grid) -> int:
    return max(1, min(512, (1 << 21) // grid.N**3))


def _count_hits(event: EventSpec, config: SolverConfig, seed: int, start: int, stop: int) -> int:
    """Hit count over replicates ``start .. stop-1`` (each on its own stream)."""
    g = config.grid
    w = homogeneous_trajectory(config)
    hits = 0
    bs = _batch_size(g)
    for b0 in range(start, stop, bs):
        reps = tuple(range(b0, min(stop, b0 + bs)))
        if event.needs_path:
            sl = (slice(None),) + event.region.slices
            peak = np.zeros(len(reps))

            def track(j, u):
                np.maximum(peak, np.abs(u[sl] - w[j][event.region.slices]).reshape(len(reps), -1).max(axis=1), out=peak)

            integrate(config, None, seed, reps, on_step=track)
            vals = peak
        else:
            u_hat, _ = integrate(config, None, seed, reps)
            vals = event.final_value(g.irfft(u_hat) - w[-1], g)
        hits += int(np.count_nonzero(vals >= event.threshold))
    return hits


def _worker_task(args):
    return _count_hits(*args)


def default_workers() -> int:
    return len(os.sched_getaffinity(0)) if hasattr(os, "sched_getaffinity") else (os.cpu_count() or 1)


def estimate_probability(
    event: EventSpec, config: SolverConfig, epsilon: float, M: int, seed: int, workers: int = 1
) -> ProbabilityEstimate:
    """``P(u^eps in A)`` from ``M`` independent runs; replicate ``i`` always uses stream ``(seed, i)``."""
    if M < 100:
        raise ValueError("M must be >= 100")
    if not 0 < epsilon <= 1:
        raise ValueError(f"epsilon={epsilon} outside ]0,1]")
    cfg = config.replace(epsilon=epsilon)
    if workers <= 1:
        hits = _count_hits(event, cfg, seed, 0, M)
    else:
        edges = np.linspace(0, M, workers + 1).astype(int)
        tasks = [(event, cfg, seed, int(a), int(b)) for a, b in zip(edges[:-1], edges[1:]) if b > a]
        with ProcessPoolExecutor(max_workers=workers) as pool:
            hits = sum(pool.map(_worker_task, tasks))
    lo, hi = wilson_interval(hits, M)
    p = hits / M
    return ProbabilityEstimate(event.to_json(), epsilon, M, hits, p, min(lo, p), max(hi, p), seed, hits < MIN_HITS)


def functional_profile(event: EventSpec, config: SolverConfig) -> np.ndarray:
    """``|g_hat|^2`` of the hit functional on the full lattice."""
    g = config.grid
    if event.kind == "point_exceed":
        return np.ones(g.shape)
    if event.kind == "linear_exceed":
        return np.abs(g.fft(event.g)) ** 2
    raise ValueError("the Gaussian oracle covers point_exceed and linear_exceed only")


def variance_form(event: EventSpec, config: SolverConfig) -> float:
    """Variance of the hit functional of ``u - w`` for unit ``sigma`` and ``eps = 1``."""
    return float(np.sum(additive_variance_field(config) * functional_profile(event, config)))


def _require_additive(config: SolverConfig):
    c = config.coeffs
    if not (c.sigma.is_constant and c.b.is_zero):
        raise ValueError("the Gaussian oracle needs constant sigma and b = 0")
    if config.noise_mask is not None:
        raise ValueError("the Gaussian oracle does not cover masked noise")


def gaussian_rate_oracle(event: EventSpec, config: SolverConfig) -> float:
    """``r^2 / (2 sigma^2 Q)`` for the exactly Gaussian additive scheme."""
    _require_additive(config)
    s = config.coeffs.sigma.constant_value
    r = event.threshold
    if r == 0:
        return 0.0
    Q = variance_form(event, config)
    if s == 0 or Q == 0:
        return math.inf
    return r * r / (2 * s * s * Q)


def gaussian_neg_eps_log_p(event: EventSpec, config: SolverConfig, epsilon: float) -> float:
    """Exact ``-eps log P(F >= r)`` at one rung of the additive scheme."""
    _require_additive(config)
    s = config.coeffs.sigma.constant_value
    sd = abs(s) * math.sqrt(epsilon * variance_form(event, config))
    logp = float(stats.norm.logsf(event.threshold / sd))
    return -epsilon * logp


@dataclass
class SlopeReport:
    event: dict
    epsilons: list
    estimates: list
    reliable: list
    transform: str
    status: str
    rate_estimate: float | None = None
    slope: float | None = None
    log_fit_intercept: float | None = None
    oracle: float | None = None
    reference: float | None = None
    tolerance: float = 0.1
    relative_error: float | None = None
    passed: bool | None = None
    config_hash: str | None = None
    per_rung_rate: list = field(default_factory=list)

    def to_json(self) -> dict:
        out = asdict(self)
        out["estimates"] = [asdict(e) | {"neg_eps_log_p": e.neg_eps_log_p} for e in self.estimates]
        return out

    def dumps(self) -> str:
        return json.dumps(self.to_json(), indent=2, sort_keys=True)

    def to_csv(self) -> str:
        buf = io.StringIO()
        wr = csv.writer(buf, lineterminator="\r\n")
        header = ["epsilon", "M", "hits", "p_hat", "lo", "hi", "neg_eps_log_p", "neg_eps_log_p_lo", "neg_eps_log_p_hi"]
        if self.config_hash:
            header.append("config_hash")
        wr.writerow(header)
        for e in self.estimates:
            a, b = e.neg_eps_log_interval
            row = [repr(e.epsilon), e.M, e.hits, repr(e.p_hat), repr(e.lo), repr(e.hi), repr(e.neg_eps_log_p), repr(a), repr(b)]
            if self.config_hash:
                row.append(self.config_hash)
            wr.writerow(row)
        return buf.getvalue()


def _weighted_line(x, y, width):
    width = np.asarray(width, dtype=float)
    finite = width[np.isfinite(width) & (width > 0)]
    floor = (finite.min() if finite.size else 1.0) * 1e-3
    w = 1.0 / np.maximum(np.where(np.isfinite(width), width, np.inf), floor)
    slope, intercept = np.polyfit(np.asarray(x), np.asarray(y), 1, w=w)
    return float(intercept), float(slope)


def ldp_slope(
    event: EventSpec,
    config: SolverConfig,
    epsilons: Sequence[float],
    M: int,
    seed: int,
    oracle: float | None = None,
    reference: float | None = None,
    tolerance: float = 0.1,
    transform: str = "probit",
    workers: int = 1,
    config_hash: str | None = None,
) -> SlopeReport:
    """Estimate ``lim -eps log P`` from a ladder of Monte Carlo rungs.

    Each reliable rung contributes a per-rung rate (``probit``: ``eps z^2/2``;
    ``log``: ``-eps log p``) weighted by the inverse width of the same transform
    applied to the Wilson bounds; the intercept of a weighted line in ``eps`` is
    the rate estimate.  The plain ``-eps log p`` intercept is always reported too.
    """
    eps = [float(e) for e in epsilons]
    if any(not 0 < e <= 1 for e in eps):
        raise ValueError("ladder must lie in ]0,1]")
    if any(b >= a for a, b in zip(eps, eps[1:])):
        raise ValueError("ladder must be strictly decreasing")
    if transform not in ("probit", "log"):
        raise ValueError("transform must be 'probit' or 'log'")
    tf = probit_rate if transform == "probit" else neg_eps_log
    ests = [estimate_probability(event, config, e, M, seed, workers) for e in eps]
    reliable = [not e.unreliable for e in ests]
    per_rung = [tf(e.p_hat, e.epsilon) for e in ests]
    report = SlopeReport(
        event.to_json(), eps, ests, reliable, transform, "insufficient",
        oracle=oracle, reference=reference, tolerance=tolerance, config_hash=config_hash,
        per_rung_rate=per_rung,
    )
    idx = [i for i, ok in enumerate(reliable) if ok]
    if len(idx) < 3:
        return report
    x = [eps[i] for i in idx]
    y = [per_rung[i] for i in idx]
    width = [tf(ests[i].lo, eps[i]) - tf(ests[i].hi, eps[i]) for i in idx]
    report.rate_estimate, report.slope = _weighted_line(x, y, width)
    ylog = [ests[i].neg_eps_log_p for i in idx]
    wlog = [neg_eps_log(ests[i].lo, eps[i]) - neg_eps_log(ests[i].hi, eps[i]) for i in idx]
    report.log_fit_intercept, _ = _weighted_line(x, ylog, wlog)
    report.status = "fitted"
    target = oracle if oracle is not None else reference
    if target is not None:
        if target == 0:
            report.relative_error = abs(report.rate_estimate)
        else:
            report.relative_error = abs(report.rate_estimate - target) / abs(target)
        report.passed = report.relative_error <= tolerance
    return report
