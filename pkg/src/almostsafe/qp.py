"""Projection QPs: ``min ||a - a_ref||^2`` over a box and a few half-spaces.

Constraints are ``(row, bound)`` pairs meaning ``row @ a >= bound``.  With
one half-space the problem is solved exactly by walking the breakpoints of
its monotone dual function; otherwise a dual active-set method is used.
"""

from __future__ import annotations

from typing import NamedTuple, Sequence

import numpy as np

FEAS_TOL = 1e-9


class LinearConstraint(NamedTuple):
    row: np.ndarray
    bound: float


class QPResult(NamedTuple):
    x: np.ndarray
    feasible: bool


def _project_one(a_ref, c, b, lo, hi):
    """Exact minimizer for a single half-space plus box, or None if infeasible.

    The KKT point is ``clip(a_ref + lam c)`` for the smallest ``lam >= 0`` that
    satisfies ``c @ a >= b``; ``c @ clip(a_ref + lam c)`` is nondecreasing and
    piecewise linear in ``lam``.
    """
    n = len(a_ref)
    x = [min(max(a_ref[i], lo[i]), hi[i]) for i in range(n)]
    g = sum(c[i] * x[i] for i in range(n))
    if g >= b - FEAS_TOL:
        return x
    gmax = sum(c[i] * (hi[i] if c[i] > 0 else lo[i]) for i in range(n))
    if gmax < b - FEAS_TOL:
        return None
    # per coordinate: free on [t_enter, t_exit] where it moves with slope c_i^2
    events = []
    for i in range(n):
        ci = c[i]
        if ci == 0.0:
            continue
        if ci > 0:
            t_in = (lo[i] - a_ref[i]) / ci
            t_out = (hi[i] - a_ref[i]) / ci
        else:
            t_in = (hi[i] - a_ref[i]) / ci
            t_out = (lo[i] - a_ref[i]) / ci
        if t_out <= 0:
            continue
        t_in = max(t_in, 0.0)
        events.append((t_in, ci * ci))
        events.append((t_out, -ci * ci))
    events.sort()
    lam, slope = 0.0, 0.0
    for t, ds in events:
        if t > lam and slope > 0:
            reach = g + slope * (t - lam)
            if reach >= b:
                lam += (b - g) / slope
                break
            g, lam = reach, t
        elif t > lam:
            lam = t
        slope += ds
    else:
        if slope > 0:
            lam += (b - g) / slope
    return [min(max(a_ref[i] + lam * c[i], lo[i]), hi[i]) for i in range(n)]


def _dual_active_set(a_ref, C, b, max_iter=200):
    """Goldfarb-Idnani dual method for ``min ||x - a_ref||^2, C x >= b`` (unit Hessian)."""
    x = np.array(a_ref, dtype=float)
    n = x.size
    active: list[int] = []
    u = np.zeros(0)
    for _ in range(max_iter):
        s = C @ x - b
        p = int(np.argmin(s))
        if s[p] >= -FEAS_TOL:
            return x
        npl = C[p]
        u_plus = np.append(u, 0.0)
        while True:
            if active:
                N = C[active].T
                r, *_ = np.linalg.lstsq(N, npl, rcond=None)
                z = npl - N @ r
            else:
                r = np.zeros(0)
                z = npl.copy()
            t1, k = np.inf, -1
            for j in range(len(active)):
                if r[j] > 1e-12:
                    ratio = u_plus[j] / r[j]
                    if ratio < t1:
                        t1, k = ratio, j
            zz = z @ z
            t2 = -(C[p] @ x - b[p]) / zz if zz > 1e-14 * max(1.0, npl @ npl) else np.inf
            if not np.isfinite(t1) and not np.isfinite(t2):
                return None
            t = min(t1, t2)
            if np.isfinite(t2):
                x = x + t * z
            u_plus[:-1] -= t * r
            u_plus[-1] += t
            if t == t2:
                active.append(p)
                u = u_plus
                break
            active.pop(k)
            u_plus = np.delete(u_plus, k)
    raise RuntimeError("dual active-set iteration limit reached")


def solve_qp(a_ref, constraints: Sequence[LinearConstraint], lo, hi) -> QPResult:
    """Nearest point to ``a_ref`` in the box ``[lo, hi]`` satisfying every constraint.

    Returns ``feasible=False`` and ``x=None`` when the set is empty; callers
    pick their own fallback action.
    """
    a_ref = np.asarray(a_ref, dtype=float)
    lo = np.asarray(lo, dtype=float)
    hi = np.asarray(hi, dtype=float)
    if np.any(lo > hi):
        raise ValueError("empty box")
    if len(constraints) == 0:
        return QPResult(np.clip(a_ref, lo, hi), True)
    if len(constraints) == 1:
        row, bound = constraints[0]
        x = _project_one(list(a_ref), list(np.asarray(row, dtype=float)), float(bound), list(lo), list(hi))
        return QPResult(None, False) if x is None else QPResult(np.array(x), True)
    n = a_ref.size
    eye = np.eye(n)
    C = np.vstack([np.asarray(r, dtype=float) for r, _ in constraints] + [eye, -eye])
    b = np.concatenate([[float(v) for _, v in constraints], lo, -hi])
    x = _dual_active_set(a_ref, C, b)
    if x is None:
        return QPResult(None, False)
    return QPResult(np.clip(x, lo, hi), True)


def project_one_fast(a_ref, row, bound, lo, hi):
    """List-in, list-out single-constraint solve used in the simulation inner loop."""
    return _project_one(a_ref, row, bound, lo, hi)
