"""Failure-rate baselines: crude Monte Carlo, importance sampling, exact binomial CIs.

Every estimator draws run ``i`` from the streams ``rng.child(i, 0)`` (initial
state) and ``rng.child(i, 1)`` (rollout), so estimates do not depend on the
order in which runs are evaluated.
"""

from __future__ import annotations

import csv
import math
import time
from dataclasses import dataclass
from typing import Protocol

import numpy as np
from scipy import integrate, stats

from almostsafe.errors import NumericError, PreconditionError
from almostsafe.scenario import FAILED, DomainBox, RandomSource, ScenarioSystem, rollout


@dataclass(frozen=True)
class RateEstimate:
    p_hat: float
    ci_lo: float
    ci_hi: float
    n: int
    method: str
    confidence: float = 0.9
    runs_wallclock: float = 0.0

    def __post_init__(self):
        if not (self.ci_lo <= self.p_hat <= self.ci_hi):
            raise NumericError(f"estimate {self.p_hat} outside its interval [{self.ci_lo}, {self.ci_hi}]")

    def contains(self, p: float) -> bool:
        return self.ci_lo <= p <= self.ci_hi


@dataclass(frozen=True)
class WeightedSample:
    s0: np.ndarray
    failed: bool
    weight: float


def clopper_pearson(k: int, n: int, confidence: float = 0.9) -> tuple[float, float]:
    """Exact binomial interval for ``k`` failures in ``n`` trials.

    At ``k = 0`` (resp. ``k = n``) the interval is one-sided, so the whole
    ``1 - confidence`` mass goes to the open end.
    """
    if n <= 0:
        raise PreconditionError("clopper_pearson needs n >= 1")
    if not 0 <= k <= n:
        raise PreconditionError(f"need 0 <= k <= n, got k={k}, n={n}")
    if not 0 < confidence < 1:
        raise PreconditionError("confidence must lie in (0, 1)")
    alpha = 1.0 - confidence
    if k == 0:
        return 0.0, 1.0 - alpha ** (1.0 / n)
    if k == n:
        return alpha ** (1.0 / n), 1.0
    lo = stats.beta.ppf(alpha / 2, k, n - k + 1)
    hi = stats.beta.ppf(1 - alpha / 2, k + 1, n - k)
    return float(lo), float(hi)


def mc_failure_rate(
    system: ScenarioSystem, n: int, K: int, rng: RandomSource, confidence: float = 0.9
) -> RateEstimate:
    """Share of runs reaching the failure region from uniform draws over the safe domain."""
    if n < 1:
        raise PreconditionError("need n >= 1 runs")
    t0 = time.perf_counter()
    k = 0
    for i in range(n):
        s0 = system.sample_safe(rng.child(i, 0).generator())
        k += rollout(system, s0, K, rng.child(i, 1)).outcome == FAILED
    lo, hi = clopper_pearson(k, n, confidence)
    return RateEstimate(k / n, lo, hi, n, "mc", confidence, time.perf_counter() - t0)


class Proposal(Protocol):
    """Initial-state distribution ``q`` with weights ``p/q`` against the nominal ``p``."""

    def sample(self, gen: np.random.Generator) -> tuple[np.ndarray, float]: ...


class NominalProposal:
    """``q = p``: uniform over the safe domain with unit weights."""

    def __init__(self, system: ScenarioSystem):
        self.system = system

    def sample(self, gen):
        return self.system.sample_safe(gen), 1.0


def is_samples(system, proposal: Proposal, n: int, K: int, rng: RandomSource) -> list[WeightedSample]:
    out = []
    for i in range(n):
        s0, w = proposal.sample(rng.child(i, 0).generator())
        if not (w > 0 and math.isfinite(w)):
            raise NumericError(f"proposal returned weight {w} at sample {i}")
        failed = rollout(system, s0, K, rng.child(i, 1)).outcome == FAILED
        out.append(WeightedSample(np.asarray(s0), bool(failed), float(w)))
    return out


def is_failure_rate(
    system: ScenarioSystem,
    proposal: Proposal,
    n: int,
    K: int,
    rng: RandomSource,
    confidence: float = 0.9,
) -> RateEstimate:
    """Weighted failure share with a normal-approximation interval."""
    if n < 1:
        raise PreconditionError("need n >= 1 runs")
    t0 = time.perf_counter()
    samples = is_samples(system, proposal, n, K, rng)
    y = np.array([s.weight * s.failed for s in samples])
    p_hat = float(y.mean())
    se = float(y.std(ddof=1) / math.sqrt(n)) if n > 1 else 0.0
    z = stats.norm.ppf(0.5 + confidence / 2)
    lo, hi = max(0.0, p_hat - z * se), min(1.0, p_hat + z * se)
    lo, hi = float(min(lo, p_hat)), float(max(hi, p_hat))
    return RateEstimate(p_hat, lo, hi, n, "is", confidence, time.perf_counter() - t0)


class SeparationTilt:
    """Relative-position proposal with density proportional to ``exp(-lam |dp|)``.

    The nominal distribution is uniform over the domain minus the collision
    disc ``|dp| <= d_s``; velocities stay uniform, so the weight only depends
    on ``|dp|``.  Positions are drawn by rejection from the uniform nominal.
    """

    def __init__(self, domain: DomainBox, d_s: float, lam: float = 0.5):
        if lam < 0:
            raise PreconditionError("tilt rate must be non-negative")
        self.domain, self.d_s, self.lam = domain, float(d_s), float(lam)
        (x0, y0), (x1, y1) = domain.lo[:2], domain.hi[:2]
        self.area = (x1 - x0) * (y1 - y0) - math.pi * d_s**2
        # split at the axes so the kink of |dp| at the origin sits on a corner
        xs = sorted({x0, x1, min(max(0.0, x0), x1)})
        ys = sorted({y0, y1, min(max(0.0, y0), y1)})
        box = 0.0
        for xa, xb in zip(xs, xs[1:]):
            for ya, yb in zip(ys, ys[1:]):
                box += integrate.dblquad(
                    lambda y, x: math.exp(-lam * math.hypot(x, y)), xa, xb, ya, yb, epsabs=1e-12, epsrel=1e-10
                )[0]
        # closed form of 2 pi int_0^d r exp(-lam r) dr
        if lam > 0:
            disc = 2 * math.pi * (1 - math.exp(-lam * d_s) * (1 + lam * d_s)) / lam**2
        else:
            disc = math.pi * d_s**2
        self.Z = box - disc

    def density(self, dp) -> float:
        r = math.hypot(dp[0], dp[1])
        return 0.0 if r <= self.d_s else math.exp(-self.lam * r) / self.Z

    def weight(self, dp) -> float:
        q = self.density(dp)
        if q <= 0:
            raise NumericError(f"zero proposal density at dp={tuple(dp)}")
        return (1.0 / self.area) / q

    def sample(self, gen):
        lo, hi = self.domain.lo, self.domain.hi
        while True:
            dp = gen.uniform(lo[:2], hi[:2])
            r = math.hypot(dp[0], dp[1])
            if r > self.d_s and gen.random() < math.exp(-self.lam * (r - self.d_s)):
                break
        s0 = np.concatenate([dp, gen.uniform(lo[2:], hi[2:])])
        return s0, self.weight(dp)


def bernoulli_system(p: float) -> ScenarioSystem:
    """State ``(u, flag)``: a run fails on its first step iff ``u < p``.

    Uniform draws over the safe part (``flag <= 0.5``) make ``u`` uniform on
    ``[0, 1]``, so the true failure rate is exactly ``p``.
    """

    def f(s, gen):
        return np.array([s[0], 1.0 if s[0] < p else 0.0])

    def failure(s):
        return s[1] > 0.5

    failure.batch = lambda S: np.atleast_2d(S)[:, 1] > 0.5
    return ScenarioSystem.from_map(DomainBox([0, 0], [1, 1]), failure, [1.0, 1.0], f, name="bernoulli")


class ThresholdTilt:
    """Mixture proposal for ``bernoulli_system``: with probability ``mix`` draw ``u`` below ``cut``."""

    def __init__(self, cut: float = 0.1, mix: float = 0.5):
        if not (0 < cut <= 1 and 0 <= mix < 1):
            raise PreconditionError("need 0 < cut <= 1 and 0 <= mix < 1")
        self.cut, self.mix = cut, mix

    def sample(self, gen):
        u = gen.uniform(0, self.cut) if gen.random() < self.mix else gen.random()
        q = (1 - self.mix) + (self.mix / self.cut if u < self.cut else 0.0)
        return np.array([u, gen.uniform(0, 0.5)]), 1.0 / q


def derived_estimate(rate: float, runs: int) -> RateEstimate:
    """Row for a failure rate read off a characterized set (no sampling interval)."""
    return RateEstimate(rate, rate, rate, runs, "derived")


def write_estimates_csv(path, estimates) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["method", "n", "p_hat", "ci_lo", "ci_hi", "runs_wallclock"])
        for e in estimates:
            w.writerow([e.method, e.n, repr(e.p_hat), repr(e.ci_lo), repr(e.ci_hi), f"{e.runs_wallclock:.3f}"])
