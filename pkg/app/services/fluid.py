"""Fluid relaxation: a deterministic LP over per-period action fractions, and the static policy it induces."""
import logging
from dataclasses import dataclass, field
from typing import Dict, Optional

import numpy as np

from app.core.config import settings
from app.core.errors import CapacityError, LPSolveError
from app.services.dp import boundary_binomial
from app.services.model import Instance, action_outcomes, format_offer

logger = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class FluidLP:
    """max c.x  s.t.  A_eq x = b_eq (one row per period), A_ub x <= b_ub (one row per slot type), x >= 0.

    Column (t, k) = t * 2^J + k holds z_k for the period with NK - t periods to go.
    rates[k, j] is the fluid share of one period's demand that books type j under action w^k.
    """
    instance: Instance
    scale: int
    n_periods: int
    rates: np.ndarray
    c: np.ndarray
    A_eq: np.ndarray
    b_eq: np.ndarray
    A_ub: np.ndarray
    b_ub: np.ndarray

    @property
    def n_actions(self) -> int:
        return self.rates.shape[0]

    @property
    def n_variables(self) -> int:
        return self.n_periods * self.n_actions


@dataclass(frozen=True, eq=False)
class FluidSolution:
    lp: FluidLP
    z: np.ndarray
    objective: float
    residual_capacity: np.ndarray
    status: str
    pivots: int
    residuals: Dict[str, float] = field(default_factory=dict)


def build_fluid(instance: Instance, scale: int = 1) -> FluidLP:
    if scale < 1:
        raise CapacityError("scale must be a positive integer")
    n_actions = 1 << instance.n_slot_types
    n_periods = instance.horizon * scale
    n_vars = n_periods * n_actions
    if n_vars > settings.LP_VARIABLE_BUDGET:
        raise CapacityError(
            f"fluid LP needs {n_vars} variables, budget is {settings.LP_VARIABLE_BUDGET}",
            detail={"variables": n_vars, "budget": settings.LP_VARIABLE_BUDGET},
        )
    rates, _ = action_outcomes(instance, range(n_actions))

    c = np.tile(rates.sum(axis=1), n_periods)
    A_eq = np.kron(np.eye(n_periods), np.ones((1, n_actions)))
    b_eq = np.ones(n_periods)
    # capacity only binds at the end of the horizon since M_j(n) never increases
    A_ub = np.tile(rates.T, (1, n_periods))
    b_ub = (instance.capacity * scale).astype(float)
    logger.info(f"Built fluid LP: {n_periods} periods x {n_actions} actions, scale K={scale}")
    return FluidLP(instance, scale, n_periods, rates, c, A_eq, b_eq, A_ub, b_ub)


def _simplex(lp: FluidLP):
    """Dense tableau simplex with Bland's rule, started from the all-closed action plus capacity slacks."""
    n_eq, n_ub, n_vars = lp.A_eq.shape[0], lp.A_ub.shape[0], lp.n_variables
    n_rows, n_cols = n_eq + n_ub, n_vars + n_ub
    if (n_rows + 1) * (n_cols + 1) > settings.CELL_BUDGET:
        raise CapacityError(f"simplex tableau of {n_rows} x {n_cols} exceeds the cell budget")

    T = np.zeros((n_rows + 1, n_cols + 1))
    T[:n_eq, :n_vars] = lp.A_eq
    T[:n_eq, -1] = lp.b_eq
    T[n_eq:n_rows, :n_vars] = lp.A_ub
    T[n_eq:n_rows, n_vars:n_cols] = np.eye(n_ub)
    T[n_eq:n_rows, -1] = lp.b_ub
    # reduced costs; the starting basis has zero cost so they equal c
    T[-1, :n_vars] = lp.c

    basis = np.concatenate([np.arange(n_eq) * lp.n_actions, n_vars + np.arange(n_ub)])
    pivot_tol = settings.LP_PIVOT_TOL

    pivots = 0
    while True:
        entering = np.flatnonzero(T[-1, :-1] > pivot_tol)
        if entering.size == 0:
            break
        col = entering[0]
        column = T[:-1, col]
        rows = np.flatnonzero(column > pivot_tol)
        if rows.size == 0:
            raise LPSolveError("fluid LP is unbounded", detail={"column": int(col)})
        ratios = T[rows, -1] / column[rows]
        tied = rows[ratios <= ratios.min() + 1e-12]
        row = tied[np.argmin(basis[tied])]

        T[row] /= T[row, col]
        factors = T[:, col].copy()
        factors[row] = 0.0
        T -= np.outer(factors, T[row])
        basis[row] = col

        pivots += 1
        if pivots > settings.LP_MAX_PIVOTS:
            raise LPSolveError(f"simplex exceeded {settings.LP_MAX_PIVOTS} pivots")

    x = np.zeros(n_cols)
    x[basis] = T[:-1, -1]
    return x[:n_vars], pivots


def solve_fluid(lp: FluidLP) -> FluidSolution:
    x, pivots = _simplex(lp)
    x = np.where(np.abs(x) < settings.LP_PIVOT_TOL, 0.0, x)

    residuals = {
        "equality": float(np.abs(lp.A_eq @ x - lp.b_eq).max(initial=0.0)),
        "capacity": float(np.maximum(lp.A_ub @ x - lp.b_ub, 0.0).max(initial=0.0)),
        "negativity": float(np.maximum(-x, 0.0).max(initial=0.0)),
    }
    z = x.reshape(lp.n_periods, lp.n_actions)
    booked = z @ lp.rates
    objective = float(lp.c @ x)
    residuals["objective"] = abs(objective - float(booked.sum()))

    worst = max(residuals.values())
    if worst > settings.LP_FEASIBILITY_TOL:
        raise LPSolveError("fluid LP solution violates its constraints", detail=residuals)

    # residual[n] = M(n) with n periods to go; M(NK) is the starting capacity
    start = lp.instance.capacity * lp.scale
    used = np.cumsum(booked, axis=0)
    residual = np.vstack([start, start - used])[::-1]

    logger.info(
        f"Fluid LP solved: {lp.A_eq.shape[0] + lp.A_ub.shape[0]} rows, {lp.n_variables} columns, "
        f"{pivots} pivots, Z={objective:.6f}"
    )
    return FluidSolution(lp, z, objective, residual, "optimal", pivots, residuals)


def fluid_value(instance: Instance, scale: int = 1) -> float:
    """Z_{NK}(bK)."""
    return solve_fluid(build_fluid(instance, scale)).objective


def extract_pstar(solution: FluidSolution):
    """Time average of the optimal action fractions."""
    from app.services.policies import StaticRandomizedPolicy

    p = solution.z.mean(axis=0)
    p = np.maximum(p, 0.0)
    return StaticRandomizedPolicy(p / p.sum())


def upsilon(instance: Instance, p) -> np.ndarray:
    """Probability that a type-j slot is taken in one period under π^p while every type is available."""
    probs = np.asarray(getattr(p, "p", p), dtype=float)
    rates, _ = action_outcomes(instance, range(1 << instance.n_slot_types))
    return probs @ rates


def binomial_lower_bound(instance: Instance, p, n: int, m=None) -> float:
    """Σ_j E[min(Bin(n, Υ_j), m_j)], a lower bound on the value of π^p."""
    m = instance.capacity if m is None else np.asarray(m)
    ups = upsilon(instance, p)
    return float(sum(boundary_binomial(instance, float(u), int(mj), n) for u, mj in zip(ups, m)))


def fluid_report(solution: FluidSolution, p_star: Optional[object] = None) -> Dict:
    p_star = p_star or extract_pstar(solution)
    return {
        "Z": solution.objective,
        "scale": solution.lp.scale,
        "p_star": {str(k): float(v) for k, v in enumerate(p_star.p) if v > 0},
        "labels": {str(k): format_offer(k) for k, v in enumerate(p_star.p) if v > 0},
        "residuals": solution.residuals,
        "status": solution.status,
        "pivots": solution.pivots,
    }
