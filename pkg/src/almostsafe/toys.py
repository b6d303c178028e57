"""Deterministic lattice-preserving toy scenarios and their exact safe sets.

Each toy maps centroids of its reference grid onto centroids, so the
maximal invariant subset of the grid can be computed exhaustively and
compared cell-for-cell against sampled characterization.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from almostsafe.covering import CoverLattice, build_cover
from almostsafe.quantifier import DecaySchedule, QuantifierConfig, Stage
from almostsafe.scenario import DomainBox, ScenarioSystem


class Predicate:
    """Failure predicate with an optional vectorized form."""

    def __init__(self, single, batch):
        self._single, self.batch = single, batch

    def __call__(self, s) -> bool:
        return bool(self._single(s))


@dataclass
class Toy:
    name: str
    system: ScenarioSystem
    step: callable
    schedule: DecaySchedule
    config: QuantifierConfig


def _chain_step(s, gen=None):
    x = s[0]
    return np.array([max(x - 1.0, 0.0) if x < 5.5 else x + 1.0])


def chain_1d() -> Toy:
    """States drain to 0 below 5.5 and march into the failure cell at 9 above it."""
    domain = DomainBox([-0.5], [9.5])
    fail = Predicate(lambda s: s[0] >= 8.5, lambda S: S[:, 0] >= 8.5)
    system = ScenarioSystem.from_map(domain, fail, [1.0], _chain_step, name="toy-chain")
    schedule = DecaySchedule([Stage(0.01, 0.01, (0.5,)), Stage(0.001, 0.01, (0.25,))])
    return Toy("chain", system, _chain_step, schedule, QuantifierConfig(K=30, sbar=1.0))


def _sink_step(s, gen=None):
    return s - np.sign(np.round(s))


def _in_patch(S):
    return (S[..., 0] >= 1.5) & (S[..., 0] <= 2.5) & (S[..., 1] >= 1.5) & (S[..., 1] <= 3.5)


def sink_2d() -> Toy:
    """Diagonal contraction toward the origin past an unsafe patch."""
    domain = DomainBox([-5.5, -5.5], [5.5, 5.5])
    fail = Predicate(lambda s: 1.5 <= s[0] <= 2.5 and 1.5 <= s[1] <= 3.5, _in_patch)
    system = ScenarioSystem.from_map(domain, fail, [1.0, 1.0], _sink_step, name="toy-sink")
    schedule = DecaySchedule([Stage(0.001, 0.01, (0.5, 0.5))])
    return Toy("sink", system, _sink_step, schedule, QuantifierConfig(K=30, sbar=1.0))


def _ring(x, y):
    return max(abs(x), abs(y))


def _annulus_step(s, gen=None):
    x, y = int(round(s[0])), int(round(s[1]))
    r = _ring(x, y)
    if r <= 2:
        return np.array([x - np.sign(x), y - np.sign(y)], dtype=float)
    # clockwise one cell along the square ring
    if y == r and x < r:
        x += 1
    elif x == r and y > -r:
        y -= 1
    elif y == -r and x > -r:
        x -= 1
    else:
        y += 1
    if r == 4 and x < 0 and y < 0:
        x, y = x + (abs(x) == 4) * 1, y + (abs(y) == 4) * 1
    elif r == 5 and x > 0 and y > 0:
        x, y = x + (abs(x) == 5) * 1, y + (abs(y) == 5) * 1
    return np.array([x, y], dtype=float)


def _in_annulus(S):
    r = np.max(np.abs(S), axis=-1)
    return (r >= 2.5) & (r <= 3.5)


def annulus_2d() -> Toy:
    """Rotation on square rings around an unsafe annulus; ring 4 decays into it."""
    domain = DomainBox([-6.5, -6.5], [6.5, 6.5])
    fail = Predicate(lambda s: 2.5 <= max(abs(s[0]), abs(s[1])) <= 3.5, _in_annulus)
    system = ScenarioSystem.from_map(domain, fail, [2.0, 2.0], _annulus_step, name="toy-annulus")
    schedule = DecaySchedule([Stage(0.001, 0.01, (0.5, 0.5))])
    return Toy("annulus", system, _annulus_step, schedule, QuantifierConfig(K=40, sbar=2.0))


TOYS = {"chain": chain_1d, "sink": sink_2d, "annulus": annulus_2d}


def maximal_invariant_cells(system: ScenarioSystem, step, delta) -> CoverLattice:
    """Largest set of grid cells closed under the centroid map, by fixed-point deletion.

    A cell survives while its centroid's image stays in the domain, avoids
    the failure region, and lands in a surviving cell.
    """
    cover = build_cover(system.domain, delta, system.failure)
    flat = np.flatnonzero(cover.active)
    cents = cover.centroids(flat)
    images = np.array([step(c) for c in cents])
    target = cover.flat_indices(images)
    bad_image = (target < 0) | system.failure_mask(images)
    alive = cover.active.reshape(-1)
    changed = True
    while changed:
        changed = False
        for f, t, bad in zip(flat, target, bad_image):
            if alive[f] and (bad or not alive[t]):
                alive[f] = False
                changed = True
    return cover
