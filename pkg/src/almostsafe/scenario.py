"""Black-box testing scenarios as stochastic dynamic systems.

A scenario couples an environment (which hides the test subject) with a
testing policy that drives every other actor.  Only the composed one-step
map is visible to the rest of the package: ``ScenarioSystem.start`` opens a
run and hands back a stepper closure that owns any per-run context (goal
positions, look-ahead horizons, absolute robot positions, ...).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Callable, Iterable, Protocol, Sequence

import numpy as np

from almostsafe.errors import ConfigurationError, NumericError, PreconditionError

Stepper = Callable[[np.ndarray], np.ndarray]

COMPLETED = "completed"
FAILED = "failed"
LEFT_DOMAIN = "left-domain"


@dataclass(frozen=True, eq=False)
class DomainBox:
    """Axis-aligned box ``lo <= s <= hi``."""

    lo: np.ndarray
    hi: np.ndarray

    def __post_init__(self):
        lo = np.asarray(self.lo, dtype=float).reshape(-1)
        hi = np.asarray(self.hi, dtype=float).reshape(-1)
        if lo.shape != hi.shape:
            raise ConfigurationError("lo and hi must have the same length")
        if not np.all(lo < hi):
            raise ConfigurationError(f"degenerate box: lo={lo}, hi={hi}")
        object.__setattr__(self, "lo", lo)
        object.__setattr__(self, "hi", hi)

    @classmethod
    def cube(cls, lo: float, hi: float, n: int) -> "DomainBox":
        return cls(np.full(n, lo), np.full(n, hi))

    @property
    def dimension(self) -> int:
        return self.lo.size

    @property
    def width(self) -> np.ndarray:
        return self.hi - self.lo

    def contains(self, s) -> bool:
        s = np.asarray(s, dtype=float)
        return bool(np.all(s >= self.lo) and np.all(s <= self.hi))

    def sample(self, gen: np.random.Generator, size=None) -> np.ndarray:
        if size is None:
            return gen.uniform(self.lo, self.hi)
        return gen.uniform(self.lo, self.hi, size=(size, self.dimension))

    def __eq__(self, other):
        if not isinstance(other, DomainBox):
            return NotImplemented
        return np.array_equal(self.lo, other.lo) and np.array_equal(self.hi, other.hi)

    def __hash__(self):
        return hash((tuple(self.lo), tuple(self.hi)))


class RandomSource:
    """Counter-based random streams addressed by a path of integers.

    The same ``(seed, path)`` always yields the same draws, irrespective of
    how many other streams were consumed before.  Paths are typically
    ``(stage, run, purpose)``.
    """

    def __init__(self, seed: int, path: Sequence[int] = ()):
        if seed < 0 or seed >= 2**64:
            raise ConfigurationError("seed must fit in 64 unsigned bits")
        self.seed = int(seed)
        self.path = tuple(int(p) for p in path)

    def child(self, *keys: int) -> "RandomSource":
        return RandomSource(self.seed, self.path + tuple(keys))

    def generator(self) -> np.random.Generator:
        seq = np.random.SeedSequence(self.seed, spawn_key=self.path)
        return np.random.Generator(np.random.Philox(seq))

    def __repr__(self):
        return f"RandomSource(seed={self.seed}, path={self.path})"


@dataclass
class ScenarioSystem:
    """The composed scenario map ``s(t+1) = f(s(t); w(t))``.

    ``start(s0, gen)`` begins one run and returns the stepper for it.
    ``exit_policy`` holds one entry per dimension: ``"saturate"`` clips the
    coordinate back into the domain, ``"terminate"`` ends the run when the
    coordinate leaves it.
    """

    domain: DomainBox
    failure: Callable[[np.ndarray], bool]
    step_bound: np.ndarray
    start: Callable[[np.ndarray, np.random.Generator], Stepper]
    exit_policy: tuple = None
    name: str = "scenario"

    def __post_init__(self):
        n = self.domain.dimension
        self.step_bound = np.broadcast_to(
            np.asarray(self.step_bound, dtype=float), (n,)
        ).copy()
        if not np.all(self.step_bound > 0):
            raise ConfigurationError("step bound must be positive")
        if self.exit_policy is None:
            self.exit_policy = ("terminate",) * n
        elif isinstance(self.exit_policy, str):
            self.exit_policy = (self.exit_policy,) * n
        else:
            self.exit_policy = tuple(self.exit_policy)
        if len(self.exit_policy) != n or not set(self.exit_policy) <= {"saturate", "terminate"}:
            raise ConfigurationError(f"bad exit policy {self.exit_policy!r}")
        self._saturate = np.array([p == "saturate" for p in self.exit_policy])

    @property
    def dimension(self) -> int:
        return self.domain.dimension

    @classmethod
    def from_map(cls, domain, failure, step_bound, f, **kw) -> "ScenarioSystem":
        """Wrap a memoryless map ``f(s, gen) -> s'``."""

        def start(s0, gen):
            return lambda s: f(s, gen)

        return cls(domain, failure, step_bound, start, **kw)

    def failure_mask(self, points: np.ndarray) -> np.ndarray:
        batch = getattr(self.failure, "batch", None)
        if batch is not None:
            return np.asarray(batch(points), dtype=bool)
        return np.fromiter((bool(self.failure(p)) for p in points), dtype=bool, count=len(points))

    def sample_safe(self, gen: np.random.Generator) -> np.ndarray:
        """Uniform draw from the domain minus the failure region (rejection)."""
        for _ in range(100_000):
            s = self.domain.sample(gen)
            if not self.failure(s):
                return s
        raise PreconditionError("failure region covers (almost) the entire domain")


class Environment(Protocol):
    """Dynamics with an action input; ``x`` is the environment's own state."""

    domain: DomainBox
    failure: Callable[[np.ndarray], bool]
    step_bound: np.ndarray
    action_dim: int

    def reset(self, s0: np.ndarray, gen: np.random.Generator): ...

    def step(self, x, action: np.ndarray, gen: np.random.Generator): ...

    def observe(self, x) -> np.ndarray: ...


class TestingPolicy(Protocol):
    state_dim: int
    action_dim: int

    def reset(self, x, gen: np.random.Generator): ...

    def act(self, x, ctx, gen: np.random.Generator) -> np.ndarray: ...


def compose_scenario(env: Environment, policy: TestingPolicy, name: str = None) -> ScenarioSystem:
    """Close the loop between an environment and a testing policy."""
    n = env.domain.dimension
    if policy.state_dim != n:
        raise ConfigurationError(
            f"policy expects {policy.state_dim}-dim states, environment has {n}"
        )
    if policy.action_dim != env.action_dim:
        raise ConfigurationError(
            f"policy emits {policy.action_dim}-dim actions, environment takes {env.action_dim}"
        )

    def start(s0, gen):
        box = [env.reset(s0, gen)]
        ctx = policy.reset(box[0], gen)

        def step(_s):
            action = policy.act(box[0], ctx, gen)
            box[0] = env.step(box[0], action, gen)
            return env.observe(box[0])

        return step

    return ScenarioSystem(
        env.domain,
        env.failure,
        env.step_bound,
        start,
        exit_policy=getattr(env, "exit_policy", None),
        name=name or f"{type(env).__name__}+{type(policy).__name__}",
    )


@dataclass(frozen=True)
class RunRecord:
    """One finite run ``s(0), ..., s(j)`` with its outcome.

    ``step`` is the index into ``states`` of the failing (or domain-leaving)
    state, ``None`` for completed runs.
    """

    states: np.ndarray
    outcome: str
    step: int | None
    seed: int
    path: tuple = ()

    @property
    def initial(self) -> np.ndarray:
        return self.states[0]

    @property
    def failed(self) -> bool:
        return self.outcome == FAILED

    def to_json(self, include_states: bool = False) -> dict:
        rec = {
            "seed": self.seed,
            "path": list(self.path),
            "s0": [float(v) for v in self.states[0]],
            "outcome": self.outcome,
            "fail_step": self.step,
        }
        if include_states:
            rec["states"] = self.states.tolist()
        return rec


def rollout(system: ScenarioSystem, s0, K: int, rng: RandomSource) -> RunRecord:
    """Propagate one run of at most ``K`` steps from ``s0``.

    Stops at the first state in the failure region or, for dimensions with a
    ``"terminate"`` exit policy, at the first state outside the domain.
    """
    if K < 2:
        raise PreconditionError("runs need K >= 2 steps")
    s0 = np.asarray(s0, dtype=float)
    if s0.shape != (system.dimension,):
        raise PreconditionError(f"initial state must have length {system.dimension}")
    if not system.domain.contains(s0):
        raise PreconditionError("initial state outside the domain")
    if system.failure(s0):
        raise PreconditionError("initial state lies in the failure region")

    gen = rng.generator()
    step = system.start(s0, gen)
    lo, hi, sat = system.domain.lo, system.domain.hi, system._saturate
    saturating = bool(sat.any())
    states = [s0]
    s = s0
    outcome, where = COMPLETED, None
    for j in range(1, K + 1):
        s = np.asarray(step(s), dtype=float)
        if s.shape != s0.shape:
            raise NumericError(f"stepper returned shape {s.shape}", step=j)
        if not np.isfinite(s).all():
            raise NumericError(f"non-finite state at step {j}: {s}", step=j)
        if saturating:
            s = np.where(sat, np.clip(s, lo, hi), s)
        states.append(s)
        if ((s < lo) | (s > hi)).any():
            outcome, where = LEFT_DOMAIN, j
            break
        if system.failure(s):
            outcome, where = FAILED, j
            break
    return RunRecord(np.array(states), outcome, where, rng.seed, rng.path)


@dataclass
class StepBoundReport:
    max_step: np.ndarray
    declared: np.ndarray
    n_probe: int
    violated: bool = field(init=False)

    def __post_init__(self):
        self.violated = bool(np.any(self.max_step > self.declared))


def check_step_bound(system: ScenarioSystem, n_probe: int, rng: RandomSource) -> StepBoundReport:
    """Probe the one-step displacement bound from uniform in-domain states."""
    if n_probe < 1:
        raise PreconditionError("n_probe must be >= 1")
    worst = np.zeros(system.dimension)
    pick = rng.child(0).generator()
    for i in range(n_probe):
        s = system.sample_safe(pick)
        gen = rng.child(1, i).generator()
        s1 = np.asarray(system.start(s, gen)(s), dtype=float)
        s1 = np.where(system._saturate, np.clip(s1, system.domain.lo, system.domain.hi), s1)
        worst = np.maximum(worst, np.abs(s1 - s))
    return StepBoundReport(worst, system.step_bound.copy(), n_probe)


def write_runs_jsonl(path, records: Iterable[RunRecord], include_states: bool = False):
    with open(path, "w") as fh:
        for rec in records:
            fh.write(json.dumps(rec.to_json(include_states)) + "\n")
