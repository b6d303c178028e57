"""Experiment configuration: sectioned ``key = value`` files with overrides.

Every key has a default here, unknown sections or keys are rejected, and
``ExperimentSpec.resolved_text`` writes the full configuration back out so a
run can be reproduced from its output directory alone.
"""

from __future__ import annotations

import configparser
import io
from dataclasses import dataclass, field, fields

from almostsafe.cbf import CbfParams
from almostsafe.errors import ConfigurationError
from almostsafe.quantifier import DecaySchedule, QuantifierConfig, Stage

ENVS = ("cbf", "toy-chain", "toy-sink", "toy-annulus")

_CBF_KEYS = [f.name for f in fields(CbfParams) if f.name != "dt"]

DEFAULTS: dict[str, dict[str, str]] = {
    "experiment": {
        "env": "cbf",
        "policy": "pred",
        "seed": "0",
        "budget": "none",
        "K": "100",
        "dt": "0.1",
    },
    "schedule": {
        "eps": "0.05, 0.01, 0.005",
        "beta": "0.1",
        "delta": "1 1 0.4 0.4 0.4 0.4",
        "sbar": "0.5",
        "prune_scope": "run",
    },
    "cbf": {k: repr(getattr(CbfParams(), k)) for k in _CBF_KEYS} | {"pos_bound": "6.0"},
    "baselines": {
        "n_mc": "10000",
        "n_is": "2000",
        "tilt_lambda": "0.5",
        "confidence": "0.9",
    },
    "slice": {
        "velocities": "0.6 0 -0.6 0; -0.6 0 0.6 0",
        "resolution": "8",
    },
    "consensus": {"seeds": "0 1 2 3 4"},
    "output": {"directory": "out"},
}


@dataclass(frozen=True)
class BaselineSpec:
    n_mc: int
    n_is: int
    tilt_lambda: float
    confidence: float


@dataclass(frozen=True)
class SliceSpec:
    """Position plane at fixed ``(v0x, v0y, v1x, v1y)``; ``resolution`` sub-samples per cell edge."""

    velocities: tuple
    resolution: int

    @property
    def tag(self) -> str:
        return "_".join(f"{v:g}" for v in self.velocities)


@dataclass
class ExperimentSpec:
    env: str
    policy: str
    seed: int
    budget: int | None
    K: int
    schedule: DecaySchedule
    sbar: tuple
    prune_scope: str
    cbf: CbfParams
    baselines: BaselineSpec
    slices: list
    consensus_seeds: list
    out_dir: str
    raw: dict = field(default_factory=dict, repr=False)

    @property
    def final(self) -> Stage:
        return self.schedule.stages[-1]

    def quantifier_config(self) -> QuantifierConfig:
        first = self.schedule.stages[0]
        sbar = self.sbar[0] if len(self.sbar) == 1 else self.sbar
        return QuantifierConfig(
            eps=first.eps, beta=first.beta, K=self.K, sbar=sbar, max_runs=self.budget, prune_scope=self.prune_scope
        )

    def resolved_text(self) -> str:
        cp = configparser.ConfigParser(interpolation=None)
        cp.optionxform = str
        for sec in DEFAULTS:
            cp[sec] = self.raw[sec]
        buf = io.StringIO()
        cp.write(buf)
        return buf.getvalue()


def _floats(text: str, what: str) -> list[float]:
    try:
        return [float(t) for t in text.replace(",", " ").split()]
    except ValueError:
        raise ConfigurationError(f"{what}: expected numbers, got {text!r}") from None


def _int(text: str, what: str, lo: int = 0) -> int:
    try:
        v = int(text)
    except ValueError:
        raise ConfigurationError(f"{what}: expected an integer, got {text!r}") from None
    if v < lo:
        raise ConfigurationError(f"{what} must be >= {lo}, got {v}")
    return v


def _float(text: str, what: str) -> float:
    vals = _floats(text, what)
    if len(vals) != 1:
        raise ConfigurationError(f"{what}: expected one number, got {text!r}")
    return vals[0]


def _stages(raw: dict) -> DecaySchedule:
    sec = raw["schedule"]
    eps = _floats(sec["eps"], "schedule.eps")
    betas = _floats(sec["beta"], "schedule.beta")
    deltas = [_floats(d, "schedule.delta") for d in sec["delta"].split(";") if d.strip()]
    n = len(eps)
    if not n:
        raise ConfigurationError("schedule.eps is empty")
    if len(betas) == 1:
        betas *= n
    if len(deltas) == 1:
        deltas *= n
    if len(betas) != n or len(deltas) != n:
        raise ConfigurationError("schedule.beta and schedule.delta need one entry or one per eps stage")
    for e, b in zip(eps, betas):
        if not (0 < e < 1 and 0 < b < 1):
            raise ConfigurationError(f"eps and beta must lie in (0, 1): eps={e}, beta={b}")
    return DecaySchedule([Stage(e, b, tuple(d)) for e, b, d in zip(eps, betas, deltas)])


def parse(texts: list[str] = (), overrides: list[str] = (), seed: int | None = None, out: str | None = None):
    """Build an ``ExperimentSpec`` from config file contents and ``section.key=value`` overrides."""
    raw = {sec: dict(vals) for sec, vals in DEFAULTS.items()}

    def put(sec, key, value, origin):
        if sec not in raw:
            raise ConfigurationError(f"{origin}: unknown section [{sec}]")
        if key not in raw[sec]:
            raise ConfigurationError(f"{origin}: unknown key {sec}.{key}")
        raw[sec][key] = value.strip()

    for i, text in enumerate(texts):
        cp = configparser.ConfigParser(interpolation=None)
        cp.optionxform = str
        try:
            cp.read_string(text, source=f"config#{i}")
        except configparser.Error as exc:
            raise ConfigurationError(str(exc)) from None
        for sec in cp.sections():
            for key, value in cp[sec].items():
                put(sec, key, value, f"config#{i}")
    for item in overrides:
        lhs, sep, value = item.partition("=")
        sec, dot, key = lhs.strip().partition(".")
        if not sep or not dot:
            raise ConfigurationError(f"--set expects section.key=value, got {item!r}")
        put(sec, key, value, "--set")
    if seed is not None:
        raw["experiment"]["seed"] = str(seed)
    if out is not None:
        raw["output"]["directory"] = out
    return build(raw)


def build(raw: dict) -> ExperimentSpec:
    ex = raw["experiment"]
    env = ex["env"]
    if env not in ENVS:
        raise ConfigurationError(f"experiment.env must be one of {ENVS}, got {env!r}")
    policy = ex["policy"]
    if policy not in ("cbf", "pred"):
        raise ConfigurationError(f"experiment.policy must be cbf or pred, got {policy!r}")
    seed = _int(ex["seed"], "experiment.seed")
    if seed >= 2**64:
        raise ConfigurationError("experiment.seed must fit in 64 bits")
    budget = None if ex["budget"].lower() in ("", "none") else _int(ex["budget"], "experiment.budget", 1)
    K = _int(ex["K"], "experiment.K", 2)
    dt = _float(ex["dt"], "experiment.dt")

    schedule = _stages(raw)
    schedule.budget = budget
    sbar = tuple(_floats(raw["schedule"]["sbar"], "schedule.sbar"))
    if not sbar or any(v <= 0 for v in sbar):
        raise ConfigurationError("schedule.sbar must be positive")
    dim = len(schedule.stages[0].delta)
    if len(sbar) not in (1, dim):
        raise ConfigurationError(f"schedule.sbar needs 1 or {dim} entries")
    prune_scope = raw["schedule"]["prune_scope"]
    if prune_scope not in ("run", "initial"):
        raise ConfigurationError("schedule.prune_scope must be run or initial")

    cbf_kw = {k: _float(raw["cbf"][k], f"cbf.{k}") for k in _CBF_KEYS}
    cbf = CbfParams(dt=dt, **cbf_kw)
    if env == "cbf" and dim != 6:
        raise ConfigurationError(f"cbf env needs 6-dimensional delta, got {dim}")

    b = raw["baselines"]
    baselines = BaselineSpec(
        _int(b["n_mc"], "baselines.n_mc", 1),
        _int(b["n_is"], "baselines.n_is", 1),
        _float(b["tilt_lambda"], "baselines.tilt_lambda"),
        _float(b["confidence"], "baselines.confidence"),
    )
    if baselines.tilt_lambda < 0 or not 0 < baselines.confidence < 1:
        raise ConfigurationError("baselines: tilt_lambda >= 0 and confidence in (0, 1) required")

    res = _int(raw["slice"]["resolution"], "slice.resolution", 1)
    slices = []
    for chunk in raw["slice"]["velocities"].split(";"):
        if not chunk.strip():
            continue
        v = _floats(chunk, "slice.velocities")
        if len(v) != 4:
            raise ConfigurationError(f"slice velocities need 4 numbers, got {chunk!r}")
        if any(abs(x) > cbf.v_max for x in v):
            raise ConfigurationError(f"slice velocities {v} exceed v_max={cbf.v_max}")
        slices.append(SliceSpec(tuple(v), res))

    seeds = [_int(s, "consensus.seeds") for s in raw["consensus"]["seeds"].replace(",", " ").split()]
    if not seeds:
        raise ConfigurationError("consensus.seeds is empty")

    return ExperimentSpec(
        env, policy, seed, budget, K, schedule, sbar, prune_scope, cbf, baselines, slices, seeds,
        raw["output"]["directory"], raw,
    )
