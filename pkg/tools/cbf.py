"""
Control barrier function constraints for control-affine plants.

For xdot = f(x) + g(x) u and a barrier h with relative degree 1 the safety
condition  grad h . (f + g u) + k h >= 0  is linear in u:

    a = g(x)^T grad h(x)        c = grad h(x) . f(x) + k h(x)

Barriers whose state is the commanded control itself ("input barriers", e.g.
a speed limit) are enforced by cutting planes inside the filter instead.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, replace
from typing import Callable, Mapping, Optional, Sequence, Union

import numpy as np

from tools.expression import BarrierAst, Call, CompiledBarrier, compile_barrier, free_symbols
from tools.qp import FilterResult, InfeasibleError, LinearConstraint, box_constraints, qp_filter

logger = logging.getLogger(__name__)

RELATIVE_DEGREE_TOL = 1e-9


class BarrierError(ValueError):
    pass


class RelativeDegreeError(BarrierError):
    """g(x)^T grad h(x) vanishes: the control does not enter hdot."""

    def __init__(self, norm: float, label: str = ""):
        where = f" for {label}" if label else ""
        super().__init__(
            f"Relative-degree violation{where}: |g^T grad h| = {norm:.3e} <= {RELATIVE_DEGREE_TOL:g}"
        )
        self.norm = norm


# --- Plants ---


@dataclass(frozen=True)
class PlantModel:
    name: str
    n: int
    m: int
    drift: Callable[[np.ndarray], np.ndarray]
    control_matrix: Callable[[np.ndarray], np.ndarray]

    def f(self, x: np.ndarray) -> np.ndarray:
        fx = np.asarray(self.drift(x), dtype=float).reshape(-1)
        if fx.shape != (self.n,):
            raise BarrierError(f"{self.name}: drift has shape {fx.shape}, expected ({self.n},)")
        return fx

    def g(self, x: np.ndarray) -> np.ndarray:
        gx = np.asarray(self.control_matrix(x), dtype=float)
        if gx.shape != (self.n, self.m):
            raise BarrierError(
                f"{self.name}: control matrix has shape {gx.shape}, expected ({self.n}, {self.m})"
            )
        return gx

    def step(self, x: Sequence[float], u: Sequence[float], dt: float) -> np.ndarray:
        """One forward-Euler step."""
        x = np.asarray(x, dtype=float)
        return x + dt * (self.f(x) + self.g(x) @ np.asarray(u, dtype=float))

    def with_drift(self, extra: Sequence[float]) -> "PlantModel":
        """Same plant with an additional constant drift term (e.g. a moving obstacle)."""
        extra = np.asarray(extra, dtype=float)
        base = self.drift
        return replace(self, drift=lambda x: base(x) + extra)


def single_integrator(n: int = 2) -> PlantModel:
    eye = np.eye(n)
    zero = np.zeros(n)
    return PlantModel("single_integrator", n, n, lambda x: zero, lambda x: eye)


def planar_cell() -> PlantModel:
    """Robot position (x0, x1) driven by a velocity command; human position (x2, x3) exogenous."""
    g = np.vstack([np.eye(2), np.zeros((2, 2))])
    zero = np.zeros(4)
    return PlantModel("planar_cell", 4, 2, lambda x: zero, lambda x: g)


PLANTS: dict[str, Callable[[], PlantModel]] = {
    "single_integrator": single_integrator,
    "planar_cell": planar_cell,
}


def make_plant(name: str) -> PlantModel:
    try:
        return PLANTS[name]()
    except KeyError:
        raise BarrierError(f"Unknown plant {name!r}; choose from {', '.join(sorted(PLANTS))}") from None


# --- Composition ---


def compose_min(barriers: Sequence[BarrierAst], state_dim: Optional[int] = None) -> BarrierAst:
    """h = min(h1, min(h2, ...)); h >= 0 iff every component is >= 0."""
    if not barriers:
        raise BarrierError("compose_min needs at least one barrier")
    if state_dim is not None:
        for k, barrier in enumerate(barriers):
            indices, _ = free_symbols(barrier)
            if indices and max(indices) >= state_dim:
                raise BarrierError(
                    f"Barrier #{k} references x[{max(indices)}] beyond state dimension {state_dim}"
                )
    composed = barriers[-1]
    for barrier in reversed(barriers[:-1]):
        composed = Call("min", (barrier, composed))
    return composed


# --- Constraint construction ---


def _compiled(ast: Union[BarrierAst, CompiledBarrier]) -> CompiledBarrier:
    return ast if isinstance(ast, CompiledBarrier) else compile_barrier(ast)


def cbf_constraint(
    ast: Union[BarrierAst, CompiledBarrier],
    x: Sequence[float],
    params: Mapping[str, float],
    plant: PlantModel,
    alpha_gain: float,
    label: str = "",
) -> LinearConstraint:
    """Linear constraint a . u + c >= 0 encoding hdot >= -k h."""
    if alpha_gain <= 0:
        raise BarrierError(f"alpha_gain must be positive, got {alpha_gain}")
    x = np.asarray(x, dtype=float)
    if x.shape != (plant.n,):
        raise BarrierError(f"State has dimension {x.shape[0]}, plant {plant.name} expects {plant.n}")
    h, grad = _compiled(ast).value_and_grad(x, params)
    return constraint_from_gradient(h, grad, x, plant, alpha_gain, label)


def constraint_from_gradient(
    h: float,
    grad: np.ndarray,
    x: np.ndarray,
    plant: PlantModel,
    alpha_gain: float,
    label: str = "",
) -> LinearConstraint:
    """cbf_constraint for an h and grad h already evaluated at x."""
    a = plant.g(x).T @ grad
    norm = float(np.linalg.norm(a))
    if norm <= RELATIVE_DEGREE_TOL:
        raise RelativeDegreeError(norm, label)
    c = float(grad @ plant.f(x)) + alpha_gain * h
    return LinearConstraint(a, c, label=label)


@dataclass
class InputBarrier:
    """A barrier whose state vector is (a selection of) the commanded control."""

    barrier: CompiledBarrier
    params: Mapping[str, float]
    components: Sequence[int]  # x[i] <- u[components[i]]
    label: str = ""

    def value_and_grad(self, u: np.ndarray) -> tuple[float, np.ndarray]:
        x = [float(u[c]) for c in self.components]
        h, gx = self.barrier.value_and_grad(x, self.params)
        gu = np.zeros(u.shape[0])
        for i, c in enumerate(self.components):
            gu[c] += gx[i]
        return h, gu

    def value(self, u: np.ndarray) -> float:
        return self.barrier.value([float(u[c]) for c in self.components], self.params)

    def cut(self, point: np.ndarray) -> LinearConstraint:
        # h(point) + grad h(point) . (u - point) >= 0
        h, g = self.value_and_grad(point)
        return LinearConstraint(g, h - float(g @ point), label=f"{self.label}@cut")

    def boundary_toward_origin(self, u: np.ndarray, steps: int = 60) -> np.ndarray:
        """Largest s*u (s in [0, 1]) with h >= 0, when the origin is safe."""
        zero = np.zeros_like(u)
        if self.value(zero) < 0:
            return u
        lo, hi = 0.0, 1.0
        for _ in range(steps):
            mid = 0.5 * (lo + hi)
            if self.value(mid * u) >= 0:
                lo = mid
            else:
                hi = mid
        return lo * u


def filter_control(
    u_nom: Sequence[float],
    constraints: Sequence[LinearConstraint],
    input_barriers: Sequence[InputBarrier] = (),
    u_box: Optional[Sequence[tuple[Optional[float], Optional[float]]]] = None,
    max_rounds: int = 20,
    tol: float = 1e-9,
) -> FilterResult:
    """qp_filter plus cutting-plane enforcement of input barriers."""
    u_nom = np.asarray(u_nom, dtype=float)
    cuts: list[LinearConstraint] = [
        ib.cut(ib.boundary_toward_origin(u_nom)) for ib in input_barriers if ib.value(u_nom) < 0
    ]
    result = qp_filter(u_nom, list(constraints) + cuts, u_box)
    for _ in range(max_rounds):
        violated = [ib for ib in input_barriers if ib.value(result.u_safe) < -tol]
        if not violated:
            return result
        cuts += [ib.cut(ib.boundary_toward_origin(result.u_safe)) for ib in violated]
        result = qp_filter(u_nom, list(constraints) + cuts, u_box)

    if not any(ib.value(result.u_safe) < -tol for ib in input_barriers):
        return result
    zero = np.zeros_like(u_nom)
    rows = list(constraints) + ([] if u_box is None else box_constraints(len(u_nom), u_box))
    if any(row.slack(zero) < -tol for row in rows) or any(ib.value(zero) < 0 for ib in input_barriers):
        raise InfeasibleError(list(range(len(constraints))), [row.label for row in constraints])
    lo, hi = 0.0, 1.0
    for _ in range(60):
        mid = 0.5 * (lo + hi)
        if all(ib.value(mid * result.u_safe) >= 0 for ib in input_barriers):
            lo = mid
        else:
            hi = mid
    u_safe = lo * result.u_safe
    logger.info("Input barriers fell back to radial scaling by %.6f", lo)
    return FilterResult(
        u_safe=u_safe,
        active=True,
        correction=float(np.linalg.norm(u_safe - u_nom)),
        active_set=result.active_set,
        multipliers=result.multipliers,
        iterations=result.iterations,
    )
