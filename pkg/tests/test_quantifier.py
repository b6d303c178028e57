import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from almostsafe.covering import CoverLattice, DiskGraph, ExcludedRegion, build_cover
from almostsafe.errors import ConfigurationError, PreconditionError
from almostsafe.quantifier import (
    BUDGET_EXHAUSTED,
    EMPTY_SET,
    SCHEDULE_COMPLETE,
    DecaySchedule,
    QuantifierConfig,
    Stage,
    characterize,
    consensus_distance,
    derived_failure_rate,
    quantify,
    required_samples,
    validate_safe_set,
)
from almostsafe.scenario import COMPLETED, DomainBox, RandomSource, ScenarioSystem, rollout
from almostsafe.toys import TOYS, chain_1d, maximal_invariant_cells, sink_2d

LINE = DomainBox([-0.5], [9.5])


def line_system(f, fail=lambda s: s[0] >= 8.5):
    return ScenarioSystem.from_map(LINE, fail, [1.0], lambda s, g: np.array([f(s[0])]))


def walk_system():
    """Noisy drift on a grid; fails right of x = 7 (stochastic, so runs differ by seed)."""

    def f(s, gen):
        return np.clip(s + gen.choice([-0.5, 0.0, 0.5], size=2) + np.array([0.1, 0.0]), 0, 10)

    return ScenarioSystem.from_map(
        DomainBox([0.0, 0.0], [10.0, 10.0]), lambda s: s[0] > 7, [0.6, 0.5], f, exit_policy="saturate"
    )


def run_quantify(system, delta, eps=0.05, beta=0.1, K=20, sbar=1.0, seed=0, max_runs=None):
    cover = build_cover(system.domain, delta, system.failure)
    cfg = QuantifierConfig(eps=eps, beta=beta, K=K, sbar=sbar, max_runs=max_runs)
    return quantify(system, cover, DiskGraph(), ExcludedRegion(), cfg, RandomSource(seed))


@pytest.mark.parametrize(
    "eps,beta,n", [(0.5, 0.5, 1), (0.001, 0.1, 2302), (0.01, 0.01, 459), (0.005, 0.1, 460), (0.05, 0.1, 45)]
)
def test_required_samples(eps, beta, n):
    assert required_samples(eps, beta) == n


@settings(max_examples=200)
@given(eps=st.floats(1e-4, 0.99), beta=st.floats(1e-4, 0.99))
def test_required_samples_is_smallest_sufficient(eps, beta):
    n = required_samples(eps, beta)
    assert (1 - eps) ** n <= beta * (1 + 1e-9)
    if n > 1:
        assert (1 - eps) ** (n - 1) > beta * (1 - 1e-9)


@pytest.mark.parametrize("eps,beta", [(0, 0.1), (1, 0.1), (0.1, 0), (0.1, 1.5)])
def test_required_samples_domain(eps, beta):
    with pytest.raises(PreconditionError):
        required_samples(eps, beta)


def test_config_and_schedule_validation():
    with pytest.raises(ConfigurationError):
        QuantifierConfig(eps=0.0)
    with pytest.raises(ConfigurationError):
        QuantifierConfig(K=1)
    with pytest.raises(ConfigurationError):
        QuantifierConfig(sampling="importance")
    with pytest.raises(ConfigurationError):
        DecaySchedule([Stage(0.01, 0.1, (1.0,)), Stage(0.01, 0.1, (1.0,))])
    with pytest.raises(ConfigurationError):
        DecaySchedule([Stage(0.1, 0.1, (1.0,)), Stage(0.01, 0.2, (1.0,))])
    with pytest.raises(ConfigurationError):
        DecaySchedule([Stage(0.1, 0.1, (1.0,)), Stage(0.01, 0.1, (2.0,))])
    with pytest.raises(Exception):
        DecaySchedule([Stage(0.1, 0.1, (1.0,)), Stage(0.01, 0.1, (0.4,))])
    sched = DecaySchedule.geometric(0.05, 0.1, [5, 5, 1, 1, 1, 1], 0.5, 1.0, [10, 10, 5, 5, 5, 5], 2)
    assert sched.stages[1].delta == (0.5, 0.5, 0.2, 0.2, 0.2, 0.2)
    assert sched.stages[1].eps == 0.025


def chain_split(x):
    return max(x - 1, 0.0) if x < 5.5 else x + 1


def test_chain_toy_keeps_drain_cells():
    res = run_quantify(line_system(chain_split), [0.5], eps=0.01, beta=0.01)
    assert res.termination == SCHEDULE_COMPLETE
    kept = res.cover.centroids(np.flatnonzero(res.cover.active))[:, 0]
    assert kept.tolist() == [0, 1, 2, 3, 4, 5]


def test_identity_dynamics_keeps_full_cover_without_prunes():
    system = line_system(lambda x: x, fail=lambda s: False)
    res = run_quantify(system, [0.5])
    assert res.cardinality == 10
    assert all(r["event"] == "none" for r in res.audit)
    assert res.runs == required_samples(0.05, 0.1)


def test_everything_reaches_failure_gives_empty_set():
    res = run_quantify(line_system(lambda x: min(x + 1, 9.0)), [0.5])
    assert res.termination == EMPTY_SET and res.cardinality == 0


def test_budget_exhaustion_is_reported():
    res = run_quantify(walk_system(), [0.5, 0.5], eps=0.001, max_runs=30)
    assert res.termination == BUDGET_EXHAUSTED and res.runs == 30
    assert not res.validated


def test_exploration_recovers_cells_missing_from_initial_cover():
    system = line_system(chain_split)
    cover = build_cover(LINE, [0.5], system.failure)
    cover.active[:4] = False  # drop centroids 0..3 from the starting set
    cfg = QuantifierConfig(eps=0.01, beta=0.01, K=20, sbar=1.0)
    res = quantify(system, cover, DiskGraph(), ExcludedRegion(), cfg, RandomSource(0))
    kept = res.cover.centroids(np.flatnonzero(res.cover.active))[:, 0]
    assert kept.tolist() == [0, 1, 2, 3, 4, 5]
    assert any(r["event"] == "explore" for r in res.audit)
    assert len(res.graph) > 0


def test_quantify_does_not_mutate_inputs():
    system = line_system(chain_split)
    cover = build_cover(LINE, [0.5], system.failure)
    before = cover.active.copy()
    quantify(system, cover, DiskGraph(), ExcludedRegion(), QuantifierConfig(K=20, sbar=1.0), RandomSource(0))
    assert np.array_equal(cover.active, before)


def test_two_stage_chain_matches_oracle_at_each_resolution():
    toy = chain_1d()
    res = characterize(toy.system, toy.system.domain, toy.schedule, toy.config, RandomSource(3))
    assert [h.cardinality for h in res.history] == [6, 12]
    oracle = maximal_invariant_cells(toy.system, toy.step, (0.25,))
    assert np.array_equal(res.cover.active, oracle.active)


def test_single_stage_schedule_equals_quantify():
    toy = sink_2d()
    a = characterize(toy.system, toy.system.domain, toy.schedule, toy.config, RandomSource(1))
    st0 = toy.schedule.stages[0]
    cover = build_cover(toy.system.domain, st0.delta, toy.system.failure)
    cfg = QuantifierConfig(eps=st0.eps, beta=st0.beta, K=toy.config.K, sbar=toy.config.sbar)
    b = quantify(toy.system, cover, DiskGraph(), ExcludedRegion(), cfg, RandomSource(1))
    assert np.array_equal(a.cover.active, b.cover.active)
    assert a.audit == b.audit


@pytest.mark.parametrize("name", sorted(TOYS))
def test_toys_match_oracle(name):
    toy = TOYS[name]()
    oracle = maximal_invariant_cells(toy.system, toy.step, toy.schedule.stages[-1].delta)
    res = characterize(toy.system, toy.system.domain, toy.schedule, toy.config, RandomSource(0))
    assert np.array_equal(res.cover.active, oracle.active)


def test_oracle_on_hand_built_chain():
    toy = chain_1d()
    oracle = maximal_invariant_cells(toy.system, toy.step, (0.5,))
    assert oracle.centroids(np.flatnonzero(oracle.active))[:, 0].tolist() == [0, 1, 2, 3, 4, 5]


def replay_audit(system, result, K, seed, need):
    """Re-run every audited rollout and re-derive each event from scratch."""
    stage_cover = build_cover(system.domain, result.delta, system.failure)
    active = stage_cover.active.reshape(-1).copy()
    counts = stage_cover.counts
    excluded = set()
    edges = set()
    streak = 0
    for rec in result.audit:
        f0 = int(np.ravel_multi_index(rec["s0_cell"], counts))
        assert active[f0], "runs start from active cells"
        s0 = stage_cover.centroids(np.array([f0]))[0]
        run = rollout(system, s0, K, RandomSource(seed).child(rec["stage"], rec["run_index"], 1))
        assert run.outcome == rec["outcome"] and run.step == rec["fail_step"]
        flat = stage_cover.flat_indices(run.states)
        pruned = {int(np.ravel_multi_index(c, counts)) for c in rec["cells_pruned"]}
        added = {int(np.ravel_multi_index(c, counts)) for c in rec["cells_added"]}
        if run.outcome != COMPLETED:
            seeds = {f0} | {int(f) for f in flat[: run.step] if f >= 0}
            # ancestors by brute-force closure over the replayed edges
            anc = set(seeds)
            grew = True
            while grew:
                new = {a for a, b in edges if b in anc} - anc
                anc |= new
                grew = bool(new)
            assert pruned == anc
            assert rec["event"] == "prune" and not added
            for f in pruned:
                active[f] = False
                excluded.add(f)
            edges = {(a, b) for a, b in edges if a not in pruned and b not in pruned}
        else:
            assert not pruned
            for f in added:
                assert not active[f] and f not in excluded
                assert not system.failure(stage_cover.centroids(np.array([f]))[0])
                active[f] = True
                edges.add((f0, f))
            assert rec["event"] == ("explore" if added else "none")
        streak = streak + 1 if rec["event"] == "none" else 0
        assert rec["streak_counter"] == streak
    assert np.array_equal(active, result.cover.active.reshape(-1))
    if result.termination == SCHEDULE_COMPLETE:
        assert streak >= need


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_audit_log_replays_exactly(seed):
    system = walk_system()
    res = run_quantify(system, [0.5, 0.5], eps=0.05, beta=0.1, K=20, sbar=1.0, seed=seed)
    assert any(r["event"] == "prune" for r in res.audit)
    replay_audit(system, res, 20, seed, required_samples(0.05, 0.1))


def test_output_cover_avoids_failure_and_final_streak_is_clean():
    system = walk_system()
    res = run_quantify(system, [0.5, 0.5], seed=4)
    cents = res.cover.centroids(np.flatnonzero(res.cover.active))
    assert not system.failure_mask(cents).any()
    tail = res.audit[-required_samples(0.05, 0.1):]
    assert all(r["outcome"] == COMPLETED and r["event"] == "none" for r in tail)


def test_exclusions_never_reactivate_across_stages():
    system = walk_system()
    sched = DecaySchedule([Stage(0.1, 0.1, (1.0, 1.0)), Stage(0.05, 0.1, (0.5, 0.5)), Stage(0.02, 0.1, (0.25, 0.25))])
    res = characterize(system, system.domain, sched, QuantifierConfig(K=20, sbar=1.0), RandomSource(2))
    assert len(res.excluded) > 0
    for delta, idx in res.excluded.boxes():
        grid = CoverLattice(system.domain, delta)
        lo, hi = grid.cell_bounds(idx)
        fine_lo = res.cover.index_of(lo)
        fine_hi = res.cover.index_of(np.nextafter(hi, lo))
        block = res.cover.active[tuple(slice(a, b + 1) for a, b in zip(fine_lo, fine_hi))]
        assert not block.any()


def test_characterize_is_deterministic_and_accounts_runs():
    system = walk_system()
    sched = DecaySchedule([Stage(0.1, 0.1, (1.0, 1.0)), Stage(0.05, 0.1, (0.5, 0.5))], budget=5000)
    cfg = QuantifierConfig(K=20, sbar=1.0)
    a = characterize(system, system.domain, sched, cfg, RandomSource(9))
    b = characterize(system, system.domain, sched, cfg, RandomSource(9))
    assert np.array_equal(a.cover.active, b.cover.active)
    assert json.dumps(a.audit) == json.dumps(b.audit)
    assert sum(a.runs_per_stage) == a.runs == len(a.audit) <= 5000
    assert [h.runs for h in a.history] == a.runs_per_stage


def test_characterize_budget_spans_stages():
    system = walk_system()
    sched = DecaySchedule([Stage(0.1, 0.1, (1.0, 1.0)), Stage(0.01, 0.1, (0.5, 0.5))], budget=100)
    res = characterize(system, system.domain, sched, QuantifierConfig(K=20, sbar=1.0), RandomSource(0))
    assert res.termination == BUDGET_EXHAUSTED and res.runs == 100


def test_history_and_audit_files(tmp_path):
    toy = chain_1d()
    res = characterize(toy.system, toy.system.domain, toy.schedule, toy.config, RandomSource(0))
    res.write_history_csv(tmp_path / "h.csv")
    res.write_audit_jsonl(tmp_path / "a.jsonl")
    lines = (tmp_path / "h.csv").read_text().splitlines()
    assert lines[0] == "stage,eps,beta,delta0,runs,cardinality,termination"
    assert len(lines) == 3
    recs = [json.loads(x) for x in (tmp_path / "a.jsonl").read_text().splitlines()]
    assert len(recs) == res.runs
    assert set(recs[0]) == {
        "stage", "run_index", "streak_counter", "s0_cell", "outcome", "fail_step", "event", "cells_pruned", "cells_added",
    }


def test_validate_identity_passes():
    system = line_system(lambda x: x, fail=lambda s: False)
    cover = build_cover(LINE, [0.5])
    rep = validate_safe_set(system, cover, 0.05, 0.1, 10, RandomSource(0))
    assert rep.passed and rep.failures == 0 and rep.runs == 45


def test_validate_catches_cell_next_to_failure():
    toy = chain_1d()
    cover = maximal_invariant_cells(toy.system, toy.step, (0.5,))
    cover.active[8] = True  # centroid 8 steps straight into the failure cell
    rep = validate_safe_set(toy.system, cover, 0.01, 0.1, 10, RandomSource(0), sbar=1.0)
    assert not rep.passed and rep.failures >= 1


def test_validate_single_run_at_half():
    system = line_system(lambda x: x, fail=lambda s: False)
    rep = validate_safe_set(system, build_cover(LINE, [0.5]), 0.5, 0.5, 5, RandomSource(0))
    assert rep.runs == 1 and rep.required == 1


def test_validate_rejects_empty_cover():
    cover = build_cover(LINE, [0.5])
    cover.active[:] = False
    with pytest.raises(PreconditionError):
        validate_safe_set(line_system(lambda x: x), cover, 0.1, 0.1, 5, RandomSource(0))


def test_derived_failure_rate_arithmetic():
    dom = DomainBox([0.0], [2000.0])
    ref = CoverLattice(dom, [1.0])
    safe = ref.copy()
    safe.active[:10] = False
    assert math.isclose(derived_failure_rate(safe, ref), 0.01)
    assert derived_failure_rate(ref, ref) == 0.0
    empty = ref.copy()
    empty.active[:] = False
    with pytest.raises(PreconditionError):
        derived_failure_rate(ref, empty)
    with pytest.raises(PreconditionError):
        derived_failure_rate(CoverLattice(dom, [2.0]), ref)


def test_consensus_distance_extremes():
    dom = DomainBox([0.0], [8.0])
    a = CoverLattice(dom, [1.0])
    assert consensus_distance(a, a.copy()) == 0.0
    b, c = a.copy(), a.copy()
    b.active[:2] = False
    c.active[2:] = False
    assert consensus_distance(b, c) == 1.0
    with pytest.raises(PreconditionError):
        consensus_distance(a, CoverLattice(dom, [0.5]))
