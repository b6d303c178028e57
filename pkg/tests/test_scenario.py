import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from almostsafe.errors import ConfigurationError, NumericError, PreconditionError
from almostsafe.scenario import (
    COMPLETED,
    FAILED,
    LEFT_DOMAIN,
    DomainBox,
    RandomSource,
    ScenarioSystem,
    check_step_bound,
    compose_scenario,
    rollout,
    write_runs_jsonl,
)


def never(s):
    return False


class LinearEnv:
    """x' = A x + B u on a box; used to check the composition plumbing."""

    action_dim = 1

    def __init__(self, drift=0.0):
        self.domain = DomainBox([-10, -10], [10, 10])
        self.failure = never
        self.step_bound = [1.0, 1.0]
        self.drift = drift

    def reset(self, s0, gen):
        return np.array(s0, dtype=float)

    def step(self, x, u, gen):
        return np.array([x[0] + 0.1 * x[1] + self.drift, x[1] + 0.1 * u[0] + self.drift])

    def observe(self, x):
        return np.array(x)


class ScriptedPolicy:
    state_dim, action_dim = 2, 1

    def reset(self, x, gen):
        return {"gain": float(gen.uniform(0.5, 1.5))}

    def act(self, x, ctx, gen):
        return np.array([-ctx["gain"] * x[0] + gen.normal(0, 0.01)])


class ZeroPolicy:
    state_dim, action_dim = 2, 1

    def reset(self, x, gen):
        return None

    def act(self, x, ctx, gen):
        return np.zeros(1)


def identity_system(n=2):
    return ScenarioSystem.from_map(DomainBox.cube(-1, 1, n), never, 0.1, lambda s, g: s.copy())


def shift_system(c=1.0, fail_at=3.0, hi=10.0):
    return ScenarioSystem.from_map(
        DomainBox([0.0], [hi]), lambda s: s[0] == fail_at, [abs(c)], lambda s, g: s + c
    )


def test_domain_box_rejects_degenerate():
    with pytest.raises(ConfigurationError):
        DomainBox([0, 1], [1, 1])
    with pytest.raises(ConfigurationError):
        DomainBox([0], [1, 2])


def test_identity_rollout_keeps_state():
    x = np.array([0.3, -0.2])
    rec = rollout(identity_system(), x, 3, RandomSource(0))
    assert rec.outcome == COMPLETED and rec.step is None
    assert rec.states.shape == (4, 2)
    assert np.array_equal(rec.states, np.tile(x, (4, 1)))


def test_early_stop_on_failure():
    rec = rollout(shift_system(), [1.0], 10, RandomSource(0))
    assert rec.outcome == FAILED and rec.step == 2
    assert rec.states[:, 0].tolist() == [1.0, 2.0, 3.0]


def test_left_domain_terminates():
    sys_ = ScenarioSystem.from_map(DomainBox([0.0], [2.5]), never, [1.0], lambda s, g: s + 1)
    rec = rollout(sys_, [0.0], 10, RandomSource(0))
    assert rec.outcome == LEFT_DOMAIN and rec.step == 3


def test_saturating_dimension_clips_instead_of_exit():
    sys_ = ScenarioSystem.from_map(
        DomainBox([0.0], [2.5]), never, [1.0], lambda s, g: s + 1, exit_policy="saturate"
    )
    rec = rollout(sys_, [0.0], 5, RandomSource(0))
    assert rec.outcome == COMPLETED
    assert rec.states[-1, 0] == 2.5


def test_rollout_preconditions():
    with pytest.raises(PreconditionError):
        rollout(shift_system(), [3.0], 10, RandomSource(0))
    with pytest.raises(PreconditionError):
        rollout(shift_system(), [1.0], 1, RandomSource(0))
    with pytest.raises(PreconditionError):
        rollout(shift_system(), [11.0], 5, RandomSource(0))


def test_non_finite_state_reports_step():
    sys_ = ScenarioSystem.from_map(
        DomainBox([0.0], [10.0]), never, [1.0], lambda s, g: s + (np.nan if s[0] >= 2 else 1)
    )
    with pytest.raises(NumericError) as err:
        rollout(sys_, [0.0], 10, RandomSource(0))
    assert err.value.step == 3


def test_zero_acceleration_double_integrator_advances_exactly():
    env = LinearEnv()
    sys_ = compose_scenario(env, ZeroPolicy())
    rec = rollout(sys_, [0.0, 1.0], 5, RandomSource(0))
    assert np.allclose(np.diff(rec.states[:, 0]), 0.1, atol=1e-15)


def test_compose_identity_env_any_policy():
    class Ident(LinearEnv):
        def step(self, x, u, gen):
            return np.array(x)

    sys_ = compose_scenario(Ident(), ScriptedPolicy())
    rec = rollout(sys_, [1.0, 2.0], 4, RandomSource(3))
    assert np.array_equal(rec.states, np.tile([1.0, 2.0], (5, 1)))


def test_compose_drift_ignores_policy():
    class Drift(LinearEnv):
        def step(self, x, u, gen):
            return np.asarray(x) + 0.25

    sys_ = compose_scenario(Drift(), ScriptedPolicy())
    rec = rollout(sys_, [0.0, 0.0], 4, RandomSource(3))
    assert np.allclose(rec.states[:, 0], [0, 0.25, 0.5, 0.75, 1.0])


def test_compose_dimension_mismatch():
    class Wide(ZeroPolicy):
        action_dim = 2

    with pytest.raises(ConfigurationError):
        compose_scenario(LinearEnv(), Wide())

    class Tall(ZeroPolicy):
        state_dim = 3

    with pytest.raises(ConfigurationError):
        compose_scenario(LinearEnv(), Tall())


def test_composition_matches_manual_loop():
    env, pol = LinearEnv(), ScriptedPolicy()
    sys_ = compose_scenario(env, pol)
    s0 = np.array([1.0, -0.5])
    rec = rollout(sys_, s0, 20, RandomSource(11, (2, 7)))
    gen = RandomSource(11, (2, 7)).generator()
    x = env.reset(s0, gen)
    ctx = pol.reset(x, gen)
    manual = [s0]
    for _ in range(20):
        x = env.step(x, pol.act(x, ctx, gen), gen)
        manual.append(env.observe(x))
    assert np.array_equal(rec.states, np.array(manual))


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**63), path=st.lists(st.integers(0, 2**31), max_size=3))
def test_rollouts_are_deterministic(seed, path):
    sys_ = compose_scenario(LinearEnv(), ScriptedPolicy())
    a = rollout(sys_, [0.5, 0.5], 15, RandomSource(seed, path))
    b = rollout(sys_, [0.5, 0.5], 15, RandomSource(seed, path))
    assert np.array_equal(a.states, b.states) and a.outcome == b.outcome


def test_random_streams_depend_only_on_path():
    a = RandomSource(5).child(1, 2).generator().random(4)
    RandomSource(5).child(9).generator().random(100)
    b = RandomSource(5, (1, 2)).generator().random(4)
    c = RandomSource(5, (2, 1)).generator().random(4)
    assert np.array_equal(a, b)
    assert not np.array_equal(a, c)


@settings(max_examples=50, deadline=None)
@given(start=st.integers(0, 8), fail=st.integers(1, 9))
def test_no_failure_before_recorded_step(start, fail):
    sys_ = ScenarioSystem.from_map(
        DomainBox([0.0], [9.0]), lambda s: s[0] == fail, [1.0], lambda s, g: np.minimum(s + 1, 9)
    )
    if start == fail:
        return
    rec = rollout(sys_, [float(start)], 12, RandomSource(0))
    end = rec.step if rec.step is not None else len(rec.states)
    assert not any(sys_.failure(s) for s in rec.states[:end])
    if rec.outcome == FAILED:
        assert sys_.failure(rec.states[rec.step])


def test_step_bound_identity_no_violation():
    rep = check_step_bound(identity_system(), 50, RandomSource(0))
    assert np.all(rep.max_step == 0) and not rep.violated


def test_step_bound_violation_flagged():
    sys_ = ScenarioSystem.from_map(DomainBox([0.0], [100.0]), never, [1.0], lambda s, g: s + 2)
    rep = check_step_bound(sys_, 10, RandomSource(0))
    assert rep.violated and rep.max_step[0] == 2


def test_runs_serialize_to_jsonl(tmp_path):
    rec = rollout(shift_system(), [1.0], 10, RandomSource(4, (0, 1)))
    path = tmp_path / "runs.jsonl"
    write_runs_jsonl(path, [rec, rec], include_states=True)
    lines = path.read_text().splitlines()
    assert len(lines) == 2
    obj = json.loads(lines[0])
    assert obj["outcome"] == FAILED and obj["fail_step"] == 2 and obj["seed"] == 4
    assert obj["states"] == [[1.0], [2.0], [3.0]]
