"""Multi-seed CBF study: characterize per policy and seed, validate, and compare with Monte Carlo."""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from almostsafe.cli import MC_STREAM, VALIDATE_STREAM, make_system
from almostsafe.config import ExperimentSpec
from almostsafe.covering import build_cover
from almostsafe.quantifier import (
    SafeSetResult,
    ValidationReport,
    characterize,
    consensus_distance,
    derived_failure_rate,
    validate_safe_set,
)
from almostsafe.rates import RateEstimate, mc_failure_rate
from almostsafe.scenario import RandomSource


@dataclass
class SeedOutcome:
    policy: str
    seed: int
    result: SafeSetResult
    derived_rate: float
    validation: ValidationReport | None
    seconds: float

    @property
    def stage_cardinalities(self) -> list[int]:
        return [h.cardinality for h in self.result.history]


@dataclass
class StudyOutcome:
    spec: ExperimentSpec
    runs: dict = field(default_factory=dict)  # policy -> list[SeedOutcome]
    mc: dict = field(default_factory=dict)  # policy -> RateEstimate

    def median_runs(self, policy: str, seeds=None) -> float:
        rows = [o for o in self.runs[policy] if seeds is None or o.seed in seeds]
        return float(np.median([o.result.runs for o in rows]))

    def by_seed(self, policy: str) -> dict[int, SeedOutcome]:
        return {o.seed: o for o in self.runs[policy]}

    def distances(self, seeds) -> list[float]:
        a, b = self.by_seed("cbf"), self.by_seed("pred")
        return [consensus_distance(a[s].result, b[s].result) for s in seeds]


def run_seed(spec: ExperimentSpec, policy: str, seed: int, validate: bool = True) -> SeedOutcome:
    system = make_system(spec, policy)
    t0 = time.perf_counter()
    res = characterize(system, system.domain, spec.schedule, spec.quantifier_config(), RandomSource(seed))
    ref = build_cover(system.domain, res.delta, system.failure)
    rep = None
    if validate and res.cardinality:
        final = spec.final
        rep = validate_safe_set(
            system, res.cover, final.eps, final.beta, spec.K, RandomSource(seed, (VALIDATE_STREAM,)),
            sbar=spec.quantifier_config().sbar,
        )
    return SeedOutcome(policy, seed, res, derived_failure_rate(res, ref), rep, time.perf_counter() - t0)


def run_study(spec: ExperimentSpec, seeds: dict, mc_policies=("pred",), log=print) -> StudyOutcome:
    """``seeds`` maps policy name to the seeds to characterize under it."""
    out = StudyOutcome(spec)
    for policy, policy_seeds in seeds.items():
        out.runs[policy] = []
        for seed in policy_seeds:
            o = run_seed(spec, policy, seed)
            out.runs[policy].append(o)
            v = o.validation
            log(
                f"{policy} seed={seed} card={o.result.cardinality} runs={o.result.runs} "
                f"derived={o.derived_rate:.5f} validation={'-' if v is None else (v.failures, v.escapes)} "
                f"{o.seconds:.1f}s"
            )
    for policy in mc_policies:
        system = make_system(spec, policy)
        est: RateEstimate = mc_failure_rate(
            system, spec.baselines.n_mc, spec.K, RandomSource(spec.seed, (MC_STREAM,)), spec.baselines.confidence
        )
        out.mc[policy] = est
        log(f"{policy} mc p_hat={est.p_hat:.5f} ci=[{est.ci_lo:.5f}, {est.ci_hi:.5f}] n={est.n}")
    return out
