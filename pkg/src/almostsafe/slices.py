"""Position-plane slices of a characterized set at fixed robot velocities.

Each position cell of the lattice is looked up at the slice velocities and
compared against the barrier level set ``h = 0`` evaluated at its centroid.
The CSV is the contract; the SVG is a quick diagnostic.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np

from almostsafe.cbf import CbfParams, barrier_value
from almostsafe.covering import CoverLattice, critical_band_mask

SAFE, UNSAFE, FAILURE = "safe", "unsafe", "failure"


@dataclass(frozen=True)
class SliceCell:
    i: int
    j: int
    px: float
    py: float
    status: str
    band: bool
    h: float
    side: str


def _side(px, py, dv) -> str:
    s = px * dv[0] + py * dv[1]
    return "receding" if s > 0 else ("approaching" if s < 0 else "tangent")


def slice_cells(cover: CoverLattice, velocities, params: CbfParams, sbar=0.5) -> list[SliceCell]:
    """Classify every position cell at the given ``(v0x, v0y, v1x, v1y)``."""
    v = np.asarray(velocities, dtype=float)
    dv = v[2:4] - v[0:2]
    band = critical_band_mask(cover, sbar)
    # velocity part of the lattice index is shared by the whole plane
    probe = cover.index_of(np.concatenate([cover.domain.lo[:2], v]))
    if probe is None:
        raise ValueError(f"velocities {tuple(v)} lie outside the lattice")
    vel_idx = probe[2:]
    rows = []
    for i in range(cover.counts[0]):
        for j in range(cover.counts[1]):
            idx = (i, j) + tuple(vel_idx)
            c = cover.centroid(idx)
            px, py = float(c[0]), float(c[1])
            d = math.hypot(px, py)
            h = barrier_value((px, py), dv, params) if d > params.d_s else float("nan")
            if d <= params.d_s:
                status = FAILURE
            else:
                status = SAFE if cover.active[idx] else UNSAFE
            rows.append(SliceCell(i, j, px, py, status, bool(band[idx]), h, _side(px, py, dv)))
    return rows


def gap_share(rows: list[SliceCell], side: str) -> float:
    """Characterized-unsafe cells with ``h >= 0`` on one side, per band cell on that side."""
    band = sum(r.band for r in rows if r.side == side)
    if band == 0:
        return 0.0
    beyond = sum(r.status == UNSAFE and r.h >= 0 for r in rows if r.side == side)
    return beyond / band


def write_slice_csv(path, rows: list[SliceCell]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["i", "j", "px", "py", "status", "band", "h", "side"])
        for r in rows:
            w.writerow([r.i, r.j, repr(r.px), repr(r.py), r.status, int(r.band), repr(r.h), r.side])


_FILL = {SAFE: "#6b9bd1", UNSAFE: "#f2f2f2", FAILURE: "#444444"}


def write_slice_svg(path, cover: CoverLattice, rows: list[SliceCell], velocities, params: CbfParams, resolution=8):
    """Cells coloured by status, ``h < 0`` shaded red on a finer grid, collision disc outlined."""
    lo, hi = cover.domain.lo[:2], cover.domain.hi[:2]
    size = 480.0
    scale = size / float(max(hi - lo))
    w, hgt = (hi - lo) * scale

    def X(x):
        return (x - lo[0]) * scale

    def Y(y):
        return (hi[1] - y) * scale  # y axis up

    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{w:.1f}" height="{hgt:.1f}" viewBox="0 0 {w:.1f} {hgt:.1f}">']
    step = 2 * cover.delta[:2]
    for r in rows:
        x0 = lo[0] + r.i * step[0]
        y0 = lo[1] + r.j * step[1]
        x1, y1 = min(x0 + step[0], hi[0]), min(y0 + step[1], hi[1])
        out.append(
            f'<rect x="{X(x0):.2f}" y="{Y(y1):.2f}" width="{(x1 - x0) * scale:.2f}" height="{(y1 - y0) * scale:.2f}" '
            f'fill="{_FILL[r.status]}" stroke="#ffffff" stroke-width="0.5"/>'
        )
    v = np.asarray(velocities, dtype=float)
    dv = v[2:4] - v[0:2]
    nx = cover.counts[0] * resolution
    ny = cover.counts[1] * resolution
    fx = (hi[0] - lo[0]) / nx
    fy = (hi[1] - lo[1]) / ny
    for a in range(nx):
        for b in range(ny):
            px, py = lo[0] + (a + 0.5) * fx, lo[1] + (b + 0.5) * fy
            if math.hypot(px, py) > params.d_s and barrier_value((px, py), dv, params) < 0:
                out.append(
                    f'<rect x="{X(px - fx / 2):.2f}" y="{Y(py + fy / 2):.2f}" width="{fx * scale:.2f}" '
                    f'height="{fy * scale:.2f}" fill="#d62728" fill-opacity="0.45"/>'
                )
    out.append(
        f'<circle cx="{X(0):.2f}" cy="{Y(0):.2f}" r="{params.d_s * scale:.2f}" fill="none" stroke="#000" stroke-width="1.5"/>'
    )
    label = ", ".join(f"{x:g}" for x in v)
    out.append(f'<text x="6" y="16" font-family="sans-serif" font-size="12">v = ({label})</text>')
    out.append("</svg>")
    with open(path, "w") as fh:
        fh.write("\n".join(out) + "\n")
