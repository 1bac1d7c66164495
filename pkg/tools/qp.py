"""
Minimal-correction safety filter.

    u_safe = argmin ||u - u_nom||^2   s.t.  a_i . u + c_i >= 0,  lo <= u <= hi

The Hessian is the identity, so the unconstrained optimum is u_nom itself and
a dual active-set iteration (Goldfarb-Idnani) is the natural fit: start at
u_nom, add the most violated constraint, take the step that keeps the active
constraints tight, and drop constraints whose multipliers would turn
negative. Infeasibility shows up as a violated constraint whose normal lies
in the span of the active normals with no multiplier left to release.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

logger = logging.getLogger(__name__)

MAX_CONTROL_DIM = 16
FEASIBILITY_TOL = 1e-12
KKT_TOL = 1e-8
_DEPENDENT_TOL = 1e-12


@dataclass(frozen=True)
class LinearConstraint:
    """a . u + c >= 0"""

    a: np.ndarray
    c: float
    label: str = ""

    def __post_init__(self):
        a = np.asarray(self.a, dtype=float).reshape(-1)
        if not (np.all(np.isfinite(a)) and np.isfinite(self.c)):
            raise ValueError(f"Constraint {self.label or '?'} has non-finite coefficients")
        object.__setattr__(self, "a", a)
        object.__setattr__(self, "c", float(self.c))

    def slack(self, u: np.ndarray) -> float:
        return float(self.a @ u + self.c)


@dataclass
class FilterResult:
    u_safe: np.ndarray
    active: bool
    correction: float
    active_set: list[int] = field(default_factory=list)
    multipliers: list[float] = field(default_factory=list)
    iterations: int = 0


class InfeasibleError(RuntimeError):
    """No control satisfies the constraint set; `subset` certifies it."""

    def __init__(self, subset: Sequence[int], labels: Sequence[str]):
        names = ", ".join(labels[i] or f"#{i}" for i in subset)
        super().__init__(f"Constraint set is infeasible (certificate: {names})")
        self.subset = list(subset)
        self.labels = [labels[i] for i in subset]


def box_constraints(
    m: int, u_box: Sequence[tuple[Optional[float], Optional[float]]]
) -> list[LinearConstraint]:
    """Per-axis bounds as rows: u_i - lo >= 0 and hi - u_i >= 0."""
    if len(u_box) != m:
        raise ValueError(f"u_box has {len(u_box)} axes, control has {m}")
    rows = []
    for i, (lo, hi) in enumerate(u_box):
        e = np.zeros(m)
        e[i] = 1.0
        if lo is not None:
            rows.append(LinearConstraint(e, -float(lo), label=f"u[{i}]>={lo}"))
        if hi is not None:
            rows.append(LinearConstraint(-e, float(hi), label=f"u[{i}]<={hi}"))
    return rows


def qp_filter(
    u_nom: Sequence[float],
    constraints: Sequence[LinearConstraint],
    u_box: Optional[Sequence[tuple[Optional[float], Optional[float]]]] = None,
    max_iter: int = 200,
) -> FilterResult:
    """Project u_nom onto the feasible polyhedron. Raises InfeasibleError."""
    u0 = np.asarray(u_nom, dtype=float).reshape(-1)
    m = u0.shape[0]
    if m > MAX_CONTROL_DIM:
        raise ValueError(f"Control dimension {m} exceeds {MAX_CONTROL_DIM}")
    rows = list(constraints) + (box_constraints(m, u_box) if u_box is not None else [])
    for row in rows:
        if row.a.shape[0] != m:
            raise ValueError(f"Constraint {row.label or '?'} has dimension {row.a.shape[0]}, expected {m}")
    labels = [row.label for row in rows]
    if not rows:
        return FilterResult(u_safe=u0.copy(), active=False, correction=0.0)

    A = np.vstack([row.a for row in rows])
    c = np.array([row.c for row in rows])

    u = u0.copy()
    active: list[int] = []
    lam: list[float] = []
    iterations = 0

    while True:
        slacks = A @ u + c
        candidates = [i for i in range(len(rows)) if i not in active and slacks[i] < -FEASIBILITY_TOL]
        if not candidates:
            break
        p = min(candidates, key=lambda i: slacks[i])
        lam_p = 0.0
        while True:
            iterations += 1
            if iterations > max_iter:
                raise RuntimeError(f"Active-set iteration did not converge in {max_iter} steps")
            if active:
                N = A[active]
                r = np.linalg.solve(N @ N.T, N @ A[p])
                z = A[p] - N.T @ r
            else:
                r = np.zeros(0)
                z = A[p].copy()

            # longest dual step that keeps every active multiplier non-negative
            t_dual, drop = np.inf, -1
            for k, rk in enumerate(r):
                if rk > _DEPENDENT_TOL and lam[k] / rk < t_dual:
                    t_dual, drop = lam[k] / rk, k

            zz = float(z @ z)
            if zz <= _DEPENDENT_TOL * max(1.0, float(A[p] @ A[p])):
                if drop < 0:
                    raise InfeasibleError(sorted(active + [p]), labels)
                # a_p is a combination of active normals: release one of them
                lam = [lk - t_dual * rk for lk, rk in zip(lam, r)]
                lam_p += t_dual
                del active[drop], lam[drop]
                continue

            t_primal = -float(A[p] @ u + c[p]) / zz
            t = min(t_primal, t_dual)
            u = u + t * z
            lam = [lk - t * rk for lk, rk in zip(lam, r)]
            lam_p += t
            if t_primal <= t_dual:
                active.append(p)
                lam.append(lam_p)
                break
            del active[drop], lam[drop]

    residual = float(np.linalg.norm(u - u0 - (A[active].T @ np.array(lam) if active else 0.0)))
    if residual > KKT_TOL:
        logger.warning("qp_filter KKT residual %.3e exceeds %.1e", residual, KKT_TOL)
    worst = float(np.min(A @ u + c))
    if worst < -KKT_TOL:
        logger.warning("qp_filter finished with slack %.3e", worst)
    return FilterResult(
        u_safe=u,
        active=bool(active),
        correction=float(np.linalg.norm(u - u0)),
        active_set=list(active),
        multipliers=list(lam),
        iterations=iterations,
    )
