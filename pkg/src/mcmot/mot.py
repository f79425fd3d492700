"""Classical discrete MOT: the bound LP and its semi-static hedge.

The LP variables are the coupling masses on the full product grid; rows are
the per-asset per-maturity marginal equalities plus, for every step and every
joint history point, a denominator-free martingale equality. The row duals of
an optimal solve are the hedge: marginal-row duals price a static vanilla
portfolio, martingale-row duals are the dynamic positions in the underlyings.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import lp_backend
from .coupling import CouplingTensor, ProjectionKey, martingale_residual
from .lp_backend import LinearProgram, LPSolution, SolverConfig
from .marginals import MarginalSystem, validate_system
from .payoffs import PayoffSpec, tabulate

MARTINGALE_RESIDUAL_TOL = 1e-8
SUBHEDGE_TOL = 1e-7
DUAL_MATCH_TOL = 1e-6


class HedgeError(Exception):
    """Dual certificate failed verification against the primal bound."""


@dataclass(frozen=True)
class MotInstance:
    system: MarginalSystem
    payoff: PayoffSpec
    direction: str    # "min" | "max"

    def __post_init__(self):
        if self.direction not in ("min", "max"):
            raise ValueError(f"direction must be 'min' or 'max', got {self.direction!r}")


@dataclass
class MotLayout:
    """Index maps from LP rows/columns back to grid objects.

    ``marginal_rows[(asset, t)]`` is (first row, count) for the maturity-t
    marginal family; ``martingale_rows[(asset, t)]`` is (first row, count,
    history shape) for step t -> t+1. Relaxation builders extend this with
    projection-variable and envelope bookkeeping.
    """

    shape: tuple
    n: int
    num_mass_vars: int
    marginal_rows: dict = field(default_factory=dict)
    martingale_rows: dict = field(default_factory=dict)
    # filled by the relaxation builder; empty for the classical LP
    aux_vars: dict = field(default_factory=dict)       # key -> (offset, grid shape)
    defining_rows: dict = field(default_factory=dict)  # key -> (first row, count)
    w_vars: dict = field(default_factory=dict)         # side -> (offset, grid shape, t)
    envelope_rows: dict = field(default_factory=dict)  # side -> (first row, count)


@dataclass
class HedgeReport:
    """Semi-static hedge extracted from LP row duals.

    ``static_legs[asset][t]`` is a value per support point (a vanilla
    portfolio), ``dynamic_legs[asset][t]`` a value per joint history point of
    step t (a trading position). ``envelope_adjustment`` is the per-path dual
    contribution of relaxation rows; it is identically zero for the classical
    LP, and the pointwise hedge inequality below includes it so the check is
    exact in both cases. ``subhedge_slack`` is min(payoff - portfolio) for a
    min problem and min(portfolio - payoff) for a max problem.
    """

    static_legs: dict
    dynamic_legs: dict
    subhedge_slack: float
    static_value: float
    capacity_value: float
    dual_value: float
    envelope_adjustment: np.ndarray

    def to_dict(self, system: MarginalSystem) -> dict:
        def keyed(asset, legs):
            laws = system.laws(asset)
            return [
                {f"{asset}{t + 1}@{pt:g}": float(v) for pt, v in zip(laws[t].points, leg)}
                for t, leg in enumerate(legs)
            ]

        return {
            "static_legs": {a: keyed(a, self.static_legs[a]) for a in ("X", "Y")},
            "dynamic_legs": {
                a: [leg.tolist() for leg in self.dynamic_legs[a]] for a in ("X", "Y")
            },
            "subhedge_slack": self.subhedge_slack,
            "static_value": self.static_value,
            "capacity_value": self.capacity_value,
            "dual_value": self.dual_value,
        }


@dataclass
class BoundResult:
    value: float
    coupling: CouplingTensor
    hedge: HedgeReport
    residuals: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "value": self.value,
            "residuals": self.residuals,
            "hedge": self.hedge.to_dict(self.coupling.system),
        }


def build_mot_lp(instance: MotInstance) -> LinearProgram:
    """Marginal + joint-filtration martingale rows over coupling-mass variables.

    The per-maturity total-mass rows are implied by the marginal families and
    are not added. The returned program carries a :class:`MotLayout` at
    ``lp.layout``.
    """
    system = instance.system
    payoff = tabulate(instance.payoff, system)
    shape = system.shape()
    n = system.n_maturities
    nvar = int(np.prod(shape))
    idx = np.arange(nvar).reshape(shape)

    lp = LinearProgram(nvar, direction=instance.direction)
    lp.set_bounds(np.arange(nvar), 0.0, 1.0)
    lp.set_objective(np.arange(nvar), payoff.ravel())
    layout = MotLayout(shape=shape, n=n, num_mass_vars=nvar)
    _add_marginal_rows(lp, layout, system, idx)
    _add_martingale_rows(lp, layout, system, idx)
    lp.layout = layout
    return lp


def _add_marginal_rows(lp, layout, system, idx):
    n = system.n_maturities
    for asset, axis0 in (("X", 0), ("Y", n)):
        for t, law in enumerate(system.laws(asset)):
            cols = np.moveaxis(idx, axis0 + t, 0).reshape(law.points.size, -1)
            first = lp.add_rows(cols, np.ones_like(cols, dtype=float),
                                ["="] * cols.shape[0], law.masses)
            layout.marginal_rows[(asset, t)] = (first, cols.shape[0])


def _add_martingale_rows(lp, layout, system, idx):
    n = system.n_maturities
    shape = idx.shape
    for asset, axis0 in (("X", 0), ("Y", n)):
        laws = system.laws(asset)
        for t in range(n - 1):
            hist_axes = tuple(range(t + 1)) + tuple(range(n, n + t + 1))
            tail_axes = tuple(ax for ax in range(2 * n) if ax not in hist_axes)
            perm = hist_axes + tail_axes
            hist_shape = tuple(shape[a] for a in hist_axes)
            n_hist = int(np.prod(hist_shape))
            cols = idx.transpose(perm).reshape(n_hist, -1)
            cur = laws[t].points
            nxt = laws[t + 1].points
            w_shape = [1] * (2 * n)
            w_shape[axis0 + t] = cur.size
            w_cur = cur.reshape(w_shape)
            w_shape = [1] * (2 * n)
            w_shape[axis0 + t + 1] = nxt.size
            w_nxt = nxt.reshape(w_shape)
            weights = np.broadcast_to(w_nxt - w_cur, shape).transpose(perm)
            coefs = weights.reshape(n_hist, -1)
            first = lp.add_rows(cols, coefs, ["="] * n_hist, np.zeros(n_hist))
            layout.martingale_rows[(asset, t)] = (first, n_hist, hist_shape)


def solve_mot(instance: MotInstance,
              config: Optional[SolverConfig] = None) -> BoundResult:
    """Optimal bound, the attaining coupling, and the dual hedge."""
    report = validate_system(instance.system)
    if not report.passed:
        raise ValueError("marginal system fails validation; see validate_system")
    lp = build_mot_lp(instance)
    solution = lp_backend.solve(lp, config)
    if solution.status == "infeasible":
        raise ValueError("MOT LP infeasible: convex order must be violated")
    if solution.status != "optimal":
        raise lp_backend.LPError(f"MOT solve ended with status {solution.status}")
    return _package_result(lp, solution, instance, config)


def _package_result(lp, solution, instance, config) -> BoundResult:
    nvar = lp.layout.num_mass_vars
    coupling = CouplingTensor(instance.system,
                              np.clip(solution.primal[:nvar], 0.0, 1.0).reshape(lp.layout.shape))
    resid = martingale_residual(coupling)
    if resid > MARTINGALE_RESIDUAL_TOL:
        raise lp_backend.LPNumericalError(
            f"optimizer martingale residual {resid:.3e} exceeds {MARTINGALE_RESIDUAL_TOL}")
    hedge = extract_dual_hedge(lp, solution, instance)
    return BoundResult(
        value=solution.objective_value,
        coupling=coupling,
        hedge=hedge,
        residuals={
            "martingale": resid,
            "primal_infeasibility": solution.max_primal_infeasibility,
            "dual_infeasibility": solution.max_dual_infeasibility,
        },
    )


def extract_dual_hedge(lp: LinearProgram, solution: LPSolution,
                       instance: MotInstance) -> HedgeReport:
    """Map row duals to hedge legs and verify the pointwise hedge inequality.

    For a min problem the inequality is payoff >= static + dynamic + adjustment
    everywhere on the grid (sub-hedge); for a max problem it flips (super-
    hedge). The adjustment collects the duals of projection-variable defining
    rows, so it vanishes for the classical LP where no such rows exist. The
    reconstructed dual objective must match the primal bound.
    """
    if solution.status != "optimal":
        raise HedgeError(f"cannot extract a hedge from status {solution.status!r}")
    layout = lp.layout
    system = instance.system
    n = layout.n
    shape = layout.shape
    duals = solution.duals

    static_legs = {"X": [], "Y": []}
    static_value = 0.0
    portfolio = np.zeros(shape)
    for asset, axis0 in (("X", 0), ("Y", n)):
        for t, law in enumerate(system.laws(asset)):
            first, count = layout.marginal_rows[(asset, t)]
            leg = duals[first:first + count].copy()
            static_legs[asset].append(leg)
            static_value += float(leg @ law.masses)
            bshape = [1] * (2 * n)
            bshape[axis0 + t] = count
            portfolio = portfolio + leg.reshape(bshape)

    dynamic_legs = {"X": [], "Y": []}
    for asset, axis0 in (("X", 0), ("Y", n)):
        laws = system.laws(asset)
        for t in range(n - 1):
            first, n_hist, hist_shape = layout.martingale_rows[(asset, t)]
            leg = duals[first:first + n_hist].copy()
            dynamic_legs[asset].append(leg)
            cur = laws[t].points
            nxt = laws[t + 1].points
            bshape = [1] * (2 * n)
            bshape[axis0 + t] = cur.size
            w_cur = cur.reshape(bshape)
            bshape = [1] * (2 * n)
            bshape[axis0 + t + 1] = nxt.size
            w_nxt = nxt.reshape(bshape)
            hist_axes = tuple(range(t + 1)) + tuple(range(n, n + t + 1))
            leg_shape = [1] * (2 * n)
            for zz, ax in enumerate(hist_axes):
                leg_shape[ax] = hist_shape[zz]
            portfolio = portfolio + leg.reshape(leg_shape) * (w_nxt - w_cur)

    adjustment = np.zeros(shape)
    for key, (first, count) in layout.defining_rows.items():
        grid_shape = layout.aux_vars[key][1]
        table = duals[first:first + count].reshape(grid_shape)
        adjustment = adjustment + _broadcast_family(table, key, n, shape)

    payoff = tabulate(instance.payoff, system)
    if instance.direction == "min":
        slack = float(np.min(payoff - portfolio - adjustment))
    else:
        slack = float(np.min(portfolio + adjustment - payoff))
    dual_value = lp_backend.dual_objective(solution, lp)

    if slack < -SUBHEDGE_TOL:
        raise HedgeError(f"hedge inequality violated by {slack:.3e} (tol {SUBHEDGE_TOL})")
    if abs(dual_value - solution.objective_value) > DUAL_MATCH_TOL * (1 + abs(solution.objective_value)):
        raise HedgeError(
            f"dual objective {dual_value!r} does not match primal {solution.objective_value!r}")

    return HedgeReport(
        static_legs=static_legs,
        dynamic_legs=dynamic_legs,
        subhedge_slack=slack,
        static_value=static_value,
        capacity_value=dual_value - static_value,
        dual_value=dual_value,
        envelope_adjustment=adjustment,
    )


def _broadcast_family(table: np.ndarray, key: ProjectionKey, n: int,
                      shape: tuple) -> np.ndarray:
    """Lift a family-grid table to the full tensor shape."""
    keep = key.axes(n)
    order = np.argsort(keep)             # canonical order -> tensor order
    arr = np.transpose(table, order) if list(order) != list(range(len(keep))) else table
    bshape = [1] * (2 * n)
    for ax in keep:
        bshape[ax] = shape[ax]
    return arr.reshape(bshape)
