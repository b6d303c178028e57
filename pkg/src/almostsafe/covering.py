"""Extended delta-covering lattices, disk graphs, and the s-bar critical band.

A ``CoverLattice`` tiles a ``DomainBox`` with ``m_i = ceil(width_i / 2 delta_i)``
cells per dimension.  Cell ``k`` spans ``[lo + 2k delta, lo + 2(k+1) delta)``,
the last cell per dimension is closed and truncated at ``hi``.  Which cells
belong to the cover is a dense boolean mask, so cells are addressed both by
integer tuples and by flat indices into that mask.
"""

from __future__ import annotations

import csv
import logging
import math
from collections import defaultdict, deque
from typing import Callable, Iterable, NamedTuple

import numpy as np
from scipy import ndimage

from almostsafe.errors import PreconditionError, ResourceError
from almostsafe.scenario import DomainBox

log = logging.getLogger(__name__)

MAX_CELLS = 50_000_000
_TOL = 1e-9

OUTSIDE = "outside"
INACTIVE = "inactive"
ACTIVE = "active"


class Lookup(NamedTuple):
    status: str
    index: tuple | None


def _counts(domain: DomainBox, delta: np.ndarray) -> tuple:
    return tuple(int(math.ceil(w / (2 * d) - _TOL)) for w, d in zip(domain.width, delta))


class CoverLattice:
    """Grid of delta-neighbourhoods over a box, with an active mask."""

    def __init__(self, domain: DomainBox, delta, active: np.ndarray | None = None):
        delta = np.broadcast_to(np.asarray(delta, dtype=float), (domain.dimension,)).copy()
        if not np.all(delta > 0):
            raise PreconditionError(f"delta must be positive, got {delta}")
        self.domain = domain
        self.delta = delta
        self.counts = _counts(domain, delta)
        total = math.prod(self.counts)
        if total > MAX_CELLS:
            raise ResourceError(f"lattice of {total} cells exceeds limit {MAX_CELLS}")
        if active is None:
            active = np.ones(self.counts, dtype=bool)
        if active.shape != self.counts:
            raise PreconditionError(f"mask shape {active.shape} != lattice {self.counts}")
        self.active = active

    # -- geometry ---------------------------------------------------------
    @property
    def n_cells(self) -> int:
        return self.active.size

    @property
    def cardinality(self) -> int:
        return int(self.active.sum())

    def copy(self) -> "CoverLattice":
        return CoverLattice(self.domain, self.delta, self.active.copy())

    def same_grid(self, other: "CoverLattice") -> bool:
        return self.domain == other.domain and np.allclose(self.delta, other.delta)

    def centroid(self, index) -> np.ndarray:
        k = np.asarray(index, dtype=float)
        return np.minimum(self.domain.lo + (2 * k + 1) * self.delta, self.domain.hi)

    def centroids(self, flat: np.ndarray) -> np.ndarray:
        """Centroids for an array of flat indices, shape ``(len(flat), n)``."""
        multi = np.stack(np.unravel_index(flat, self.counts), axis=-1)
        return np.minimum(self.domain.lo + (2 * multi + 1) * self.delta, self.domain.hi)

    def cell_bounds(self, index) -> tuple[np.ndarray, np.ndarray]:
        k = np.asarray(index, dtype=float)
        lo = self.domain.lo + 2 * k * self.delta
        return lo, np.minimum(lo + 2 * self.delta, self.domain.hi)

    def index_of(self, s) -> tuple | None:
        """Lattice cell containing ``s`` (ignoring activity), ``None`` if outside."""
        s = np.asarray(s, dtype=float)
        if np.any(s < self.domain.lo) or np.any(s > self.domain.hi):
            return None
        k = np.floor((s - self.domain.lo) / (2 * self.delta)).astype(int)
        k = np.minimum(k, np.asarray(self.counts) - 1)
        return tuple(int(v) for v in k)

    def flat_indices(self, states: np.ndarray) -> np.ndarray:
        """Flat cell index for each row of ``states``; -1 where outside the domain."""
        states = np.atleast_2d(states)
        lo, hi = self.domain.lo, self.domain.hi
        inside = np.all((states >= lo) & (states <= hi), axis=1)
        k = np.floor((states - lo) / (2 * self.delta)).astype(np.int64)
        k = np.clip(k, 0, np.asarray(self.counts) - 1)
        flat = np.ravel_multi_index(tuple(k.T), self.counts)
        return np.where(inside, flat, -1)

    def cell_of(self, s) -> Lookup:
        index = self.index_of(s)
        if index is None:
            return Lookup(OUTSIDE, None)
        return Lookup(ACTIVE if self.active[index] else INACTIVE, index)

    def active_indices(self) -> list[tuple]:
        return [tuple(int(v) for v in k) for k in np.argwhere(self.active)]

    def __contains__(self, index) -> bool:
        return bool(self.active[tuple(index)])

    def __repr__(self):
        return (
            f"CoverLattice(counts={self.counts}, delta={self.delta.tolist()}, "
            f"active={self.cardinality}/{self.n_cells})"
        )

    def to_csv(self, path, sbar=None):
        """One row per active cell: index tuple, centroid tuple, status."""
        band = critical_band_mask(self, sbar) if sbar is not None else None
        n = self.domain.dimension
        flat = np.flatnonzero(self.active)
        cents = self.centroids(flat)
        multi = np.stack(np.unravel_index(flat, self.counts), axis=-1)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow([f"i{d}" for d in range(n)] + [f"c{d}" for d in range(n)] + ["status"])
            for f, idx, c in zip(flat, multi, cents):
                status = "band" if band is not None and band.flat[f] else "active"
                w.writerow([int(v) for v in idx] + [repr(float(v)) for v in c] + [status])


def read_cover_csv(path, domain: DomainBox, delta) -> CoverLattice:
    """Rebuild a cover from ``CoverLattice.to_csv`` output on the given grid."""
    cover = CoverLattice(domain, delta)
    cover.active[...] = False
    n = domain.dimension
    with open(path, newline="") as fh:
        r = csv.reader(fh)
        header = next(r)
        if header[:n] != [f"i{d}" for d in range(n)]:
            raise PreconditionError(f"{path}: expected {n}-dimensional cell indices")
        for row in r:
            idx = tuple(int(v) for v in row[:n])
            if any(i < 0 or i >= m for i, m in zip(idx, cover.counts)):
                raise PreconditionError(f"{path}: cell {idx} outside the {cover.counts} grid")
            cover.active[idx] = True
    return cover


def _failure_mask(failure, points: np.ndarray) -> np.ndarray:
    batch = getattr(failure, "batch", None)
    if batch is not None:
        return np.asarray(batch(points), dtype=bool)
    return np.fromiter((bool(failure(p)) for p in points), dtype=bool, count=len(points))


def apply_exclusions(cover: CoverLattice, failure=None, excluded: "ExcludedRegion" = None) -> int:
    """Deactivate cells whose centroid is a failure state or excluded; returns count."""
    flat = np.flatnonzero(cover.active)
    if flat.size == 0:
        return 0
    cents = cover.centroids(flat)
    drop = np.zeros(flat.size, dtype=bool)
    if failure is not None:
        drop |= _failure_mask(failure, cents)
    if excluded is not None and len(excluded):
        drop |= excluded.contains_many(cents)
    cover.active.flat[flat[drop]] = False
    return int(drop.sum())


def build_cover(
    domain: DomainBox,
    delta,
    failure: Callable | None = None,
    excluded: "ExcludedRegion | None" = None,
) -> CoverLattice:
    """Activate every lattice cell whose centroid avoids both exclusions."""
    cover = CoverLattice(domain, delta)
    apply_exclusions(cover, failure, excluded)
    if cover.cardinality == 0:
        log.warning("cover over %s with delta %s is empty", domain, cover.delta)
    return cover


def refine(cover: CoverLattice, factors) -> CoverLattice:
    """Split each cell into ``prod(factors)`` children that inherit activity."""
    factors = np.broadcast_to(np.asarray(factors), cover.delta.shape)
    if np.any(factors < 1) or np.any(factors != np.round(factors)):
        raise PreconditionError(f"refinement factors must be positive integers, got {factors}")
    factors = factors.astype(int)
    delta = cover.delta / factors
    counts = _counts(cover.domain, delta)
    if math.prod(counts) > MAX_CELLS:
        raise ResourceError(f"refined lattice of {math.prod(counts)} cells exceeds limit")
    mask = cover.active
    for axis, f in enumerate(factors):
        if f > 1:
            mask = np.repeat(mask, f, axis=axis)
    mask = mask[tuple(slice(0, m) for m in counts)]
    return CoverLattice(cover.domain, delta, np.ascontiguousarray(mask))


def refinement_factors(coarse, fine) -> np.ndarray:
    """Integer per-dimension factors taking ``coarse`` delta to ``fine``."""
    ratio = np.asarray(coarse, dtype=float) / np.asarray(fine, dtype=float)
    factors = np.round(ratio)
    if np.any(factors < 1) or not np.allclose(ratio, factors, rtol=1e-9, atol=1e-9):
        raise PreconditionError(f"delta {fine} is not an integer refinement of {coarse}")
    return factors.astype(int)


class DiskGraph:
    """Directed graph over cell indices with fast ancestor queries."""

    def __init__(self):
        self._out: dict = defaultdict(set)
        self._in: dict = defaultdict(set)
        self.rejected_self_loops = 0

    def copy(self) -> "DiskGraph":
        g = DiskGraph()
        for k, v in self._out.items():
            if v:
                g._out[k] = set(v)
        for k, v in self._in.items():
            if v:
                g._in[k] = set(v)
        g.rejected_self_loops = self.rejected_self_loops
        return g

    @property
    def vertices(self) -> set:
        return {k for k, v in self._out.items() if v} | {k for k, v in self._in.items() if v}

    @property
    def edges(self) -> set:
        return {(a, b) for a, bs in self._out.items() for b in bs}

    def __len__(self):
        return sum(len(v) for v in self._out.values())

    def add_edge(self, a, b) -> bool:
        """Add ``a -> b``; self-loops are counted and dropped."""
        if a == b:
            self.rejected_self_loops += 1
            return False
        if b in self._out[a]:
            return False
        self._out[a].add(b)
        self._in[b].add(a)
        return True

    def ancestors(self, targets: Iterable) -> set:
        """``targets`` plus every vertex with a directed path into them."""
        seen = set(targets)
        queue = deque(seen)
        while queue:
            v = queue.popleft()
            for u in self._in.get(v, ()):
                if u not in seen:
                    seen.add(u)
                    queue.append(u)
        return seen

    def remove(self, cells: Iterable):
        for v in cells:
            for w in self._out.pop(v, ()):
                self._in[w].discard(v)
            for u in self._in.pop(v, ()):
                self._out[u].discard(v)


class ExcludedRegion:
    """Union of lattice cells recorded at possibly several resolutions.

    Cells are kept per resolution so that exclusions found on a coarse grid
    still apply after refinement.  The region only grows.
    """

    def __init__(self):
        self._levels: dict = {}

    def copy(self) -> "ExcludedRegion":
        r = ExcludedRegion()
        r._levels = {k: (grid, set(cells)) for k, (grid, cells) in self._levels.items()}
        return r

    def __len__(self):
        return sum(len(c) for _, c in self._levels.values())

    @staticmethod
    def _key(cover: CoverLattice):
        return (tuple(cover.domain.lo), tuple(cover.domain.hi), tuple(np.round(cover.delta, 12)))

    def add(self, cover: CoverLattice, flat_cells: Iterable[int]):
        key = self._key(cover)
        if key not in self._levels:
            self._levels[key] = (CoverLattice(cover.domain, cover.delta, np.zeros(cover.counts, bool)), set())
        self._levels[key][1].update(int(f) for f in flat_cells)

    def contains(self, s) -> bool:
        return bool(self.contains_many(np.atleast_2d(s))[0])

    def contains_many(self, points: np.ndarray) -> np.ndarray:
        points = np.atleast_2d(points)
        hit = np.zeros(len(points), dtype=bool)
        for grid, cells in self._levels.values():
            if not cells:
                continue
            flat = grid.flat_indices(points)
            hit |= np.fromiter((f in cells for f in flat), dtype=bool, count=len(flat))
        return hit

    def boxes(self) -> list[tuple[np.ndarray, tuple]]:
        """``(delta, index)`` pairs for every excluded cell."""
        out = []
        for grid, cells in self._levels.values():
            for f in sorted(cells):
                out.append((grid.delta.copy(), tuple(int(v) for v in np.unravel_index(f, grid.counts))))
        return out


def remove_cells(cover: CoverLattice, graph: DiskGraph, cells: Iterable, excluded: ExcludedRegion):
    """Deactivate ``cells`` (tuples or flat ints), drop their edges, exclude them."""
    flat, keys = set(), set()
    for c in cells:
        if np.isscalar(c):
            flat.add(int(c))
            keys.add(int(c))
        else:
            c = tuple(int(v) for v in c)
            flat.add(int(np.ravel_multi_index(c, cover.counts)))
            keys.add(c)
    if not flat:
        return cover, graph, excluded
    idx = np.fromiter(flat, dtype=np.int64)
    cover.active.flat[idx] = False
    # graph vertices may be flat ints (quantifier) or tuples (callers)
    graph.remove(keys | flat)
    excluded.add(cover, flat)
    return cover, graph, excluded


def _neighbour_reach(cover: CoverLattice, sbar: np.ndarray) -> np.ndarray:
    # cell k+m starts (2m-1)*delta from centroid k; reachable iff that is <= sbar
    return np.floor((sbar / cover.delta + 1) / 2 + _TOL).astype(int)


def critical_band_mask(cover: CoverLattice, sbar) -> np.ndarray:
    """Active cells whose centroid is within inf-distance ``sbar`` of the uncovered set."""
    sbar = np.broadcast_to(np.asarray(sbar, dtype=float), cover.delta.shape)
    active = cover.active
    if not active.any():
        return np.zeros_like(active)
    if np.any(sbar < cover.delta):
        log.debug("sbar %s below delta %s: band may miss neighbours", sbar, cover.delta)
    reach = _neighbour_reach(cover, sbar)
    structure = np.ones(tuple(2 * r + 1 for r in reach), dtype=bool)
    # exterior is handled by exact centroid distances below, not by padding
    interior = ndimage.binary_erosion(active, structure=structure, border_value=1)
    band = active & ~interior
    lo, hi = cover.domain.lo, cover.domain.hi
    for axis, m in enumerate(cover.counts):
        k = np.arange(m)
        c = np.minimum(lo[axis] + (2 * k + 1) * cover.delta[axis], hi[axis])
        near = (c - lo[axis] <= sbar[axis] + _TOL) | (hi[axis] - c <= sbar[axis] + _TOL)
        if near.any():
            shape = [1] * active.ndim
            shape[axis] = m
            band |= active & near.reshape(shape)
    return band


def critical_band(cover: CoverLattice, sbar) -> set:
    return {tuple(int(v) for v in k) for k in np.argwhere(critical_band_mask(cover, sbar))}
