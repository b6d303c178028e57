"""Almost-safe set quantification by pruning and exploration, with eps-delta decay.

``quantify`` runs one resolution: it keeps sampling band centroids until a
streak of ``required_samples(eps, beta)`` consecutive runs neither reaches
the failure region nor leaves the current cover.  ``characterize`` chains
such stages, refining the surviving cover between them and carrying the
excluded region forward.
"""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np

from almostsafe.covering import (
    CoverLattice,
    DiskGraph,
    ExcludedRegion,
    apply_exclusions,
    build_cover,
    critical_band_mask,
    refine,
    refinement_factors,
    remove_cells,
)
from almostsafe.errors import ConfigurationError, PreconditionError
from almostsafe.scenario import COMPLETED, DomainBox, RandomSource, ScenarioSystem, rollout

log = logging.getLogger(__name__)

SCHEDULE_COMPLETE = "schedule-complete"
BUDGET_EXHAUSTED = "budget-exhausted"
EMPTY_SET = "empty-set"


def required_samples(eps: float, beta: float) -> int:
    """Smallest N with N >= ln(beta) / ln(1 - eps)."""
    if not (0 < eps < 1) or not (0 < beta < 1):
        raise PreconditionError(f"eps and beta must lie in (0, 1), got {eps}, {beta}")
    ratio = math.log(beta) / math.log1p(-eps)
    return max(1, math.ceil(ratio - 1e-9))


@dataclass(frozen=True)
class QuantifierConfig:
    eps: float = 0.01
    beta: float = 0.1
    K: int = 100
    sbar: object = 0.5
    max_runs: int | None = None
    sampling: str = "uniform-over-band"
    prune_scope: str = "run"

    def __post_init__(self):
        if not (0 < self.eps < 1) or not (0 < self.beta < 1):
            raise ConfigurationError(f"eps, beta must lie in (0, 1): {self.eps}, {self.beta}")
        if self.K < 2:
            raise ConfigurationError("K must be >= 2")
        if np.any(np.asarray(self.sbar, dtype=float) <= 0):
            raise ConfigurationError("sbar must be positive")
        if self.sampling != "uniform-over-band":
            raise ConfigurationError(f"unknown sampling scheme {self.sampling!r}")
        if self.prune_scope not in ("run", "initial"):
            raise ConfigurationError(f"prune_scope must be 'run' or 'initial', got {self.prune_scope!r}")


@dataclass(frozen=True)
class Stage:
    eps: float
    beta: float
    delta: tuple


@dataclass
class DecaySchedule:
    """Ordered quantification stages plus a total run budget."""

    stages: list
    budget: int | None = None

    def __post_init__(self):
        if not self.stages:
            raise ConfigurationError("schedule needs at least one stage")
        self.stages = [
            Stage(float(s.eps), float(s.beta), tuple(float(d) for d in s.delta)) for s in self.stages
        ]
        for a, b in zip(self.stages, self.stages[1:]):
            if not b.eps < a.eps:
                raise ConfigurationError("eps must strictly decrease across stages")
            if b.beta > a.beta:
                raise ConfigurationError("beta must not increase across stages")
            if len(a.delta) != len(b.delta) or any(y > x for x, y in zip(a.delta, b.delta)):
                raise ConfigurationError("delta must be element-wise non-increasing")
            refinement_factors(a.delta, b.delta)

    @classmethod
    def geometric(cls, eps0, beta0, delta0, lam_eps, lam_beta, factors, n_stages, budget=None):
        """Stages ``eps_k = eps0 lam_eps^k`` with delta divided by ``factors`` each step."""
        if not (0 < lam_eps < 1) or not (0 < lam_beta <= 1):
            raise ConfigurationError("decay coefficients must lie in (0, 1)")
        delta = np.asarray(delta0, dtype=float)
        factors = np.broadcast_to(np.asarray(factors), delta.shape)
        stages = []
        for k in range(n_stages):
            stages.append(Stage(eps0 * lam_eps**k, beta0 * lam_beta**k, tuple(delta)))
            delta = delta / factors
        return cls(stages, budget)


@dataclass
class StageRecord:
    stage: int
    eps: float
    beta: float
    delta: tuple
    runs: int
    cardinality: int
    termination: str


@dataclass
class SafeSetResult:
    cover: CoverLattice
    graph: DiskGraph
    excluded: ExcludedRegion
    eps: float
    beta: float
    delta: tuple
    runs: int
    runs_per_stage: list
    history: list
    termination: str
    audit: list = field(default_factory=list)

    @property
    def cardinality(self) -> int:
        return self.cover.cardinality

    @property
    def validated(self) -> bool:
        return self.termination == SCHEDULE_COMPLETE

    def write_history_csv(self, path):
        n = len(self.delta)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["stage", "eps", "beta"] + [f"delta{d}" for d in range(n)] + ["runs", "cardinality", "termination"])
            for h in self.history:
                w.writerow([h.stage, repr(h.eps), repr(h.beta)] + [repr(d) for d in h.delta] + [h.runs, h.cardinality, h.termination])

    def write_audit_jsonl(self, path):
        with open(path, "w") as fh:
            for rec in self.audit:
                fh.write(json.dumps(rec, sort_keys=True) + "\n")


def _tuple(cover: CoverLattice, flat: int) -> list:
    return [int(v) for v in np.unravel_index(int(flat), cover.counts)]


class _Band:
    """Cached band sample space, recomputed only after the cover changes."""

    def __init__(self, cover, sbar):
        self.cover, self.sbar = cover, sbar
        self.cells = None
        self.warned = False

    def invalidate(self):
        self.cells = None

    def get(self) -> np.ndarray:
        if self.cells is None:
            cells = np.flatnonzero(critical_band_mask(self.cover, self.sbar))
            if cells.size == 0:
                cells = np.flatnonzero(self.cover.active)
                if cells.size and not self.warned:
                    log.info("empty critical band; sampling all %d active cells", cells.size)
                    self.warned = True
            self.cells = cells
        return self.cells


def quantify(
    system: ScenarioSystem,
    cover: CoverLattice,
    graph: DiskGraph,
    excluded: ExcludedRegion,
    cfg: QuantifierConfig,
    rng: RandomSource,
    stage: int = 0,
) -> SafeSetResult:
    """One resolution of pruning/exploration until a clean streak certifies the cover.

    The inputs are copied; the returned result owns the mutated structures.
    """
    cover, graph, excluded = cover.copy(), graph.copy(), excluded.copy()
    sbar = np.broadcast_to(np.asarray(cfg.sbar, dtype=float), cover.delta.shape)
    need = required_samples(cfg.eps, cfg.beta)
    band = _Band(cover, sbar)
    active = cover.active.reshape(-1)  # view: mutations through remove_cells show up here
    blocked: dict[int, bool] = {}
    audit = []
    streak = runs = 0
    termination = SCHEDULE_COMPLETE

    def admissible(f: int, state) -> bool:
        ok = blocked.get(f)
        if ok is None:
            c = cover.centroids(np.array([f]))[0]
            ok = not system.failure(c) and not excluded.contains(c)
            blocked[f] = ok
        return ok and not excluded.contains(state)

    while streak < need:
        if cfg.max_runs is not None and runs >= cfg.max_runs:
            termination = BUDGET_EXHAUSTED
            break
        cells = band.get()
        if cells.size == 0:
            termination = EMPTY_SET
            break
        pick = rng.child(stage, runs, 0).generator()
        f0 = int(cells[pick.integers(cells.size)])
        s0 = cover.centroids(np.array([f0]))[0]
        rec = rollout(system, s0, cfg.K, rng.child(stage, runs, 1))
        runs += 1
        flat = cover.flat_indices(rec.states)
        event, pruned, added = "none", [], []

        if rec.outcome != COMPLETED:
            seeds = {f0}
            if cfg.prune_scope == "run":
                # every in-domain cell the run passed through before the violation
                seeds.update(int(f) for f in flat[: rec.step] if f >= 0)
            doomed = graph.ancestors(seeds)
            pruned = sorted(doomed)
            remove_cells(cover, graph, pruned, excluded)
            event = "prune"
        else:
            for j in np.flatnonzero(~active[np.maximum(flat, 0)] & (flat >= 0)):
                f = int(flat[j])
                if active[f] or not admissible(f, rec.states[j]):
                    continue
                active[f] = True
                graph.add_edge(f0, f)
                added.append(f)
            if added:
                event = "explore"

        if event == "none":
            streak += 1
        else:
            streak = 0
            band.invalidate()
        audit.append(
            {
                "stage": stage,
                "run_index": runs - 1,
                "streak_counter": streak,
                "s0_cell": _tuple(cover, f0),
                "outcome": rec.outcome,
                "fail_step": rec.step,
                "event": event,
                "cells_pruned": [_tuple(cover, f) for f in pruned],
                "cells_added": [_tuple(cover, f) for f in added],
            }
        )
        if not active.any():
            termination = EMPTY_SET
            break

    if termination == SCHEDULE_COMPLETE and not active.any():
        termination = EMPTY_SET
    delta = tuple(float(d) for d in cover.delta)
    record = StageRecord(stage, cfg.eps, cfg.beta, delta, runs, cover.cardinality, termination)
    return SafeSetResult(
        cover, graph, excluded, cfg.eps, cfg.beta, delta, runs, [runs], [record], termination, audit
    )


def characterize(
    system: ScenarioSystem,
    domain: DomainBox,
    schedule: DecaySchedule,
    cfg: QuantifierConfig,
    rng: RandomSource,
) -> SafeSetResult:
    """Run quantification stage by stage, refining the surviving cover in between.

    ``cfg`` supplies K, sbar and the default budget; eps, beta and delta come
    from the schedule.
    """
    budget = schedule.budget if schedule.budget is not None else cfg.max_runs
    first = schedule.stages[0]
    excluded = ExcludedRegion()
    graph = DiskGraph()
    cover = build_cover(domain, first.delta, system.failure)
    runs_per_stage, history, audit = [], [], []
    used = 0
    result = None
    prev = first
    for k, st in enumerate(schedule.stages):
        if k > 0:
            cover = refine(cover, refinement_factors(prev.delta, st.delta))
            apply_exclusions(cover, system.failure, excluded)
            graph = DiskGraph()  # cell identities change under refinement
        remaining = None if budget is None else budget - used
        stage_cfg = replace(cfg, eps=st.eps, beta=st.beta, max_runs=remaining)
        result = quantify(system, cover, graph, excluded, stage_cfg, rng, stage=k)
        used += result.runs
        runs_per_stage.append(result.runs)
        history.extend(result.history)
        audit.extend(result.audit)
        cover, graph, excluded = result.cover, result.graph, result.excluded
        prev = st
        log.info(
            "stage %d eps=%g delta=%s: %d runs, %d cells, %s",
            k, st.eps, list(st.delta), result.runs, cover.cardinality, result.termination,
        )
        if result.termination != SCHEDULE_COMPLETE:
            break

    return SafeSetResult(
        cover,
        graph,
        excluded,
        result.eps,
        result.beta,
        result.delta,
        used,
        runs_per_stage,
        history,
        result.termination,
        audit,
    )


@dataclass
class ValidationReport:
    runs: int
    required: int
    failures: int
    escapes: int

    @property
    def passed(self) -> bool:
        return self.failures == 0 and self.runs >= self.required


def validate_safe_set(
    system: ScenarioSystem,
    cover: CoverLattice,
    eps: float,
    beta: float,
    K: int,
    rng: RandomSource,
    sbar=0.5,
) -> ValidationReport:
    """Fresh i.i.d. runs from band centroids; passes iff none reaches the failure region."""
    if cover.cardinality == 0:
        raise PreconditionError("cannot validate an empty cover")
    need = required_samples(eps, beta)
    cells = np.flatnonzero(critical_band_mask(cover, sbar))
    if cells.size == 0:
        cells = np.flatnonzero(cover.active)
    active = cover.active.reshape(-1)
    failures = escapes = 0
    for i in range(need):
        f0 = int(cells[rng.child(i, 0).generator().integers(cells.size)])
        rec = rollout(system, cover.centroids(np.array([f0]))[0], K, rng.child(i, 1))
        if rec.failed:
            failures += 1
        end = rec.step if rec.step is not None else len(rec.states)
        flat = cover.flat_indices(rec.states[:end])
        if np.any(flat < 0) or not np.all(active[np.maximum(flat, 0)]):
            escapes += 1
    return ValidationReport(need, need, failures, escapes)


def derived_failure_rate(result: SafeSetResult | CoverLattice, reference: CoverLattice) -> float:
    """One minus the share of reference cells that survived characterization."""
    cover = result.cover if isinstance(result, SafeSetResult) else result
    if not cover.same_grid(reference):
        raise PreconditionError("covers differ in domain or delta")
    ref = reference.cardinality
    if ref == 0:
        raise PreconditionError("reference cover is empty")
    return 1.0 - cover.cardinality / ref


def consensus_distance(a, b) -> float:
    """Jaccard distance between the active cells of two results."""
    ca = a.cover if isinstance(a, SafeSetResult) else a
    cb = b.cover if isinstance(b, SafeSetResult) else b
    if not ca.same_grid(cb):
        raise PreconditionError("consensus needs identical resolution and domain")
    union = np.count_nonzero(ca.active | cb.active)
    if union == 0:
        return 0.0
    return np.count_nonzero(ca.active ^ cb.active) / union
