"""Spatial branch-and-bound for the exact bicausal coupling bounds.

The bilinear nonanticipativity equalities make the exact problem non-convex.
Each node solves the envelope relaxation on a refined capacity box; branching
splits one (family, grid entry) box at the node optimizer's projected value, so
child boxes partition the parent and the envelopes tighten toward the exact
products. Incumbents are couplings whose nonanticipativity residuals are below
tolerance: taken from node optimizers when already residual-feasible, else
produced by :func:`repair_incumbent`.

A min run maintains a certified lower bound (best open relaxation value) and an
incumbent upper bound; termination declares the interval. Max runs mirror.
"""

from __future__ import annotations

import heapq
import itertools
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import lp_backend
from .coupling import (CouplingTensor, ProjectionKey, anticausality_residual,
                       causality_residual, coupling_to_dict, martingale_residual,
                       project, project_masses)
from .lp_backend import LinearProgram, SolverConfig
from .marginals import MarginalSystem, validate_system
from .mccormick import (CapacityBounds, McCormickInstance, SIDES, _lift,
                        build_mccormick_lp, family_keys, product_envelope_widths,
                        side_factors)
from .mot import MotLayout, _add_martingale_rows
from .payoffs import tabulate


class BranchRefusal(Exception):
    """No splittable entry: the node optimizer is residual-feasible and should
    become an incumbent instead of being branched."""


@dataclass
class BnBConfig:
    gap_tol: float = 1e-3            # absolute certified-interval width
    residual_tol: float = 1e-8       # nonanticipativity tolerance for incumbents
    node_budget: int = 10000
    time_budget: float = 300.0       # seconds
    repair_every: int = 5            # run repair at every k-th node otherwise
    repair_restarts: int = 3         # extra root repairs from random path laws
    seed: int = 0                    # drives the restart draws only
    split_margin: float = 0.1        # clamp split point into [L+m(U-L), U-m(U-L)]
    min_split_width: float = 1e-6
    workers: int = 1                 # >1 solves child relaxations in a thread pool
    solver: SolverConfig = field(default_factory=SolverConfig)


@dataclass
class BnBNode:
    box: CapacityBounds
    relaxation_value: float
    depth: int
    # caches for scoring; not part of the node identity
    solution: Optional[lp_backend.LPSolution] = None
    layout: Optional[MotLayout] = None


@dataclass
class BnBReport:
    lower_bound: float
    upper_bound: float
    incumbent: Optional[CouplingTensor]
    nodes_explored: int
    max_residual_of_incumbent: float
    terminated: str                  # gap-closed | node-budget | time-budget
    direction: str = "min"
    incumbent_value: Optional[float] = None

    def to_dict(self, include_coupling: bool = False) -> dict:
        doc = {
            "lower_bound": self.lower_bound,
            "upper_bound": self.upper_bound,
            "nodes_explored": self.nodes_explored,
            "max_residual_of_incumbent": self.max_residual_of_incumbent,
            "terminated": self.terminated,
            "direction": self.direction,
            "incumbent_value": self.incumbent_value,
        }
        if include_coupling and self.incumbent is not None:
            doc["incumbent"] = coupling_to_dict(self.incumbent)
        return doc


def _node_residual(coupling: CouplingTensor) -> float:
    n = coupling.n_maturities
    worst = 0.0
    for t in range(1, n):
        worst = max(worst, causality_residual(coupling, t),
                    anticausality_residual(coupling, t))
    return worst


def branch(node: BnBNode, coupling: CouplingTensor,
           config: Optional[BnBConfig] = None) -> tuple[BnBNode, BnBNode]:
    """Split the highest-scoring (family, entry) box at the coupling's value.

    The score of an entry accumulates, over every w grid point it participates
    in, the width of its product's own envelope at the coupling's projections,
    weighted by the magnitude of the entry's defining-row dual (a small floor
    keeps pure width ordering when duals vanish). Ties break toward the lowest
    (family order, flat entry) pair. Raises :class:`BranchRefusal` when no
    entry is both loose and splittable.
    """
    config = config or BnBConfig()
    system = coupling.system
    n = coupling.n_maturities
    keys = family_keys(n)
    values = {key: project(coupling, key) for key in keys}

    contrib = {key: np.zeros_like(values[key]) for key in keys}
    for side in SIDES:
        for t in range(1, n):
            factors = side_factors(side, t)
            w_shape = values[factors[0][0]].shape
            widths = product_envelope_widths(values, node.box, side, t, n, w_shape)
            products = [
                _lift(values[ka], ka, w_shape, n) * _lift(values[kb], kb, w_shape, n)
                for ka, kb in factors
            ]
            # only points where the bilinear equality actually fails matter;
            # the failing side is the one whose envelope still has room
            violation = np.abs(products[0] - products[1])
            violation = np.where(violation > config.residual_tol, violation, 0.0)
            total_width = widths[0] + widths[1] + 1e-300
            for width, (key_a, key_b) in zip(widths, factors):
                share = violation * np.where(width > config.residual_tol,
                                             width / total_width, 0.0)
                contrib[key_a] += _collapse(share, key_a, n)
                contrib[key_b] += _collapse(share, key_b, n)

    weights = _dual_weights(node, keys, values)
    best = None
    for order, key in enumerate(keys):
        lo, hi = node.box.tables[key]
        score = contrib[key] * weights[key]
        score = np.where(hi - lo >= config.min_split_width, score, 0.0)
        flat = int(np.argmax(score))
        top = float(score.ravel()[flat])
        if top > 0.0 and (best is None or top > best[0]):
            best = (top, order, key, np.unravel_index(flat, score.shape))
    if best is None:
        raise BranchRefusal("all envelope widths within tolerance or boxes exhausted")

    _, _, key, entry = best
    lo = float(node.box.lower(key)[entry])
    hi = float(node.box.upper(key)[entry])
    margin = config.split_margin * (hi - lo)
    split = float(np.clip(values[key][entry], lo + margin, hi - margin))
    left = BnBNode(node.box.replace_entry(key, entry, lo, split),
                   node.relaxation_value, node.depth + 1)
    right = BnBNode(node.box.replace_entry(key, entry, split, hi),
                    node.relaxation_value, node.depth + 1)
    return left, right


def _collapse(width: np.ndarray, key: ProjectionKey, n: int) -> np.ndarray:
    """Sum a w-grid table onto the factor family's grid."""
    t = key.t
    if key.kind in ("x_full_with_y", "y_full_with_x"):
        return width
    if key.kind in ("x_prefix", "y_prefix"):
        return width.sum(axis=tuple(range(t, n + 1)))
    if key.kind in ("x_prefix_with_y", "y_prefix_with_x"):
        return width.sum(axis=tuple(range(t, n)))
    return width.sum(axis=n)


_DUAL_FLOOR = 1e-9


def _dual_weights(node: BnBNode, keys, values) -> dict:
    if node.solution is None or node.layout is None:
        return {key: np.ones_like(values[key]) for key in keys}
    weights = {}
    for key in keys:
        first, count = node.layout.defining_rows[key]
        duals = np.abs(node.solution.duals[first:first + count])
        weights[key] = duals.reshape(values[key].shape) + _DUAL_FLOOR
    return weights


# ---------------- incumbent repair ----------------

def repair_incumbent(coupling: CouplingTensor, system: MarginalSystem, *,
                     payoff: Optional[np.ndarray] = None, direction: str = "min",
                     residual_tol: float = 1e-8,
                     bounds: Optional[CapacityBounds] = None,
                     config: Optional[SolverConfig] = None,
                     max_rounds: int = 3) -> Optional[CouplingTensor]:
    """Polish a marginal+martingale-feasible coupling into a bicausal one by
    alternating bilinear half-steps.

    Each round pins one asset's path law (projected onto exact martingale laws
    first), which makes that side's nonanticipativity rows linear, and
    re-solves the restricted LP over the remaining coupling freedom with the
    other asset free; the refreshed free-side law is then pinned for the next
    half-step. A final solve with both laws pinned is exactly bicausal, and the
    product of the pinned laws always keeps it feasible. Rounds stop when the
    objective stops improving. Returns None only if a tolerance check fails.
    """
    if _node_residual(coupling) <= residual_tol:
        return coupling
    n = system.n_maturities
    flat_payoff = None if payoff is None else np.asarray(payoff, dtype=float).ravel()

    def exactify(masses):
        x = _exact_martingale_path_law(
            project_masses(masses, ProjectionKey("x_full"), n), system.x_laws, config)
        y = _exact_martingale_path_law(
            project_masses(masses, ProjectionKey("y_full"), n), system.y_laws, config)
        return x, y

    x_law, y_law = exactify(coupling.masses)
    if x_law is None or y_law is None:
        return None
    candidate = None
    best_val = None
    for _ in range(max_rounds):
        if flat_payoff is not None:
            half = _solve_restricted(system, x_law, None, flat_payoff, direction, config)
            if half is not None:
                y_law = _exact_martingale_path_law(
                    project_masses(half, ProjectionKey("y_full"), n), system.y_laws, config)
            half = _solve_restricted(system, None, y_law, flat_payoff, direction, config)
            if half is not None:
                x_law = _exact_martingale_path_law(
                    project_masses(half, ProjectionKey("x_full"), n), system.x_laws, config)
        if x_law is None or y_law is None:
            return None
        pinned = _solve_restricted(system, x_law, y_law, flat_payoff, direction, config)
        if pinned is None:
            return None
        candidate = pinned
        if flat_payoff is None:
            break
        val = float(flat_payoff @ candidate.ravel())
        if best_val is not None and not (val < best_val - 1e-12 if direction == "min"
                                         else val > best_val + 1e-12):
            break
        best_val = val

    repaired = CouplingTensor(system, np.clip(candidate, 0.0, 1.0)
                              .reshape(system.shape()))
    if _node_residual(repaired) > residual_tol:
        return None
    if martingale_residual(repaired) > 1e-8:
        return None
    if bounds is not None and not _within_capacity(repaired, bounds, residual_tol):
        return None
    return repaired


def _within_capacity(coupling: CouplingTensor, bounds: CapacityBounds,
                     tol: float) -> bool:
    for key in bounds.keys():
        table = project(coupling, key)
        if np.any(table < bounds.lower(key) - tol):
            return False
        if np.any(table > bounds.upper(key) + tol):
            return False
    return True


def _exact_martingale_path_law(law: np.ndarray, marginal_laws: tuple,
                               config: Optional[SolverConfig]) -> Optional[np.ndarray]:
    """Min-L1 projection of a path-law tensor onto exact martingale path laws."""
    n = len(marginal_laws)
    shape = law.shape
    size = int(np.prod(shape))
    if n == 1:
        return marginal_laws[0].masses.copy()
    idx = np.arange(size).reshape(shape)
    # vars: law (size) + split pair (2 * size) for the L1 objective
    lp = LinearProgram(3 * size)
    lp.set_bounds(np.arange(size), 0.0, 1.0)
    lp.set_bounds(np.arange(size, 3 * size), 0.0, np.inf)
    lp.set_objective(np.arange(size, 3 * size), np.ones(2 * size))
    for t, mlaw in enumerate(marginal_laws):
        cols = np.moveaxis(idx, t, 0).reshape(shape[t], -1)
        lp.add_rows(cols, np.ones_like(cols, dtype=float), ["="] * shape[t], mlaw.masses)
    for t in range(n - 1):
        cur = marginal_laws[t].points
        nxt = marginal_laws[t + 1].points
        pre_shape = shape[:t + 1]
        n_pre = int(np.prod(pre_shape))
        perm = tuple(range(t + 1)) + tuple(range(t + 1, n))
        cols = idx.transpose(perm).reshape(n_pre, -1)
        w_shape = [1] * n
        w_shape[t] = cur.size
        w_cur = cur.reshape(w_shape)
        w_shape = [1] * n
        w_shape[t + 1] = nxt.size
        w_nxt = nxt.reshape(w_shape)
        coefs = np.broadcast_to(w_nxt - w_cur, shape).transpose(perm).reshape(n_pre, -1)
        lp.add_rows(cols, coefs, ["="] * n_pre, np.zeros(n_pre))
    # law - p + q = input  =>  p + q = |law - input| at optimum
    cols = np.column_stack([np.arange(size), size + np.arange(size), 2 * size + np.arange(size)])
    coefs = np.broadcast_to(np.array([1.0, -1.0, 1.0]), cols.shape)
    lp.add_rows(cols, coefs, ["="] * size, law.ravel())
    sol = lp_backend.solve(lp, config)
    if sol.status != "optimal":
        return None
    return sol.primal[:size].reshape(shape)


def _random_martingale_path_law(marginal_laws: tuple, rng,
                                config: Optional[SolverConfig]) -> Optional[np.ndarray]:
    """A martingale path law drawn by optimizing a random objective (a vertex
    of the martingale polytope); used for randomized incumbent restarts."""
    n = len(marginal_laws)
    if n == 1:
        return marginal_laws[0].masses.copy()
    shape = tuple(l.points.size for l in marginal_laws)
    size = int(np.prod(shape))
    idx = np.arange(size).reshape(shape)
    lp = LinearProgram(size)
    lp.set_bounds(np.arange(size), 0.0, 1.0)
    lp.set_objective(np.arange(size), rng.standard_normal(size))
    for t, mlaw in enumerate(marginal_laws):
        cols = np.moveaxis(idx, t, 0).reshape(shape[t], -1)
        lp.add_rows(cols, np.ones_like(cols, dtype=float), ["="] * shape[t], mlaw.masses)
    for t in range(n - 1):
        cur = marginal_laws[t].points
        nxt = marginal_laws[t + 1].points
        pre_shape = shape[:t + 1]
        n_pre = int(np.prod(pre_shape))
        cols = idx.reshape(n_pre, -1)
        w_shape = [1] * n
        w_shape[t] = cur.size
        w_cur = cur.reshape(w_shape)
        w_shape = [1] * n
        w_shape[t + 1] = nxt.size
        w_nxt = nxt.reshape(w_shape)
        coefs = np.broadcast_to(w_nxt - w_cur, shape).reshape(n_pre, -1)
        lp.add_rows(cols, coefs, ["="] * n_pre, np.zeros(n_pre))
    sol = lp_backend.solve(lp, config)
    if sol.status != "optimal":
        return None
    return sol.primal.reshape(shape)


def _solve_restricted(system: MarginalSystem, x_law: Optional[np.ndarray],
                      y_law: Optional[np.ndarray],
                      flat_payoff: Optional[np.ndarray], direction: str,
                      config: Optional[SolverConfig]) -> Optional[np.ndarray]:
    """Restricted LP: pinned path law(s) make the matching nonanticipativity
    rows linear; unpinned assets keep plain marginal rows and stay free.
    Joint-filtration martingale rows are always imposed."""
    n = system.n_maturities
    shape = system.shape()
    nvar = int(np.prod(shape))
    idx = np.arange(nvar).reshape(shape)
    perm = tuple(range(n, 2 * n)) + tuple(range(n))
    lp = LinearProgram(nvar, direction=direction)
    lp.set_bounds(np.arange(nvar), 0.0, 1.0)
    if flat_payoff is not None:
        lp.set_objective(np.arange(nvar), flat_payoff)

    if x_law is not None:
        cols = idx.reshape(int(np.prod(shape[:n])), -1)
        lp.add_rows(cols, np.ones_like(cols, dtype=float), ["="] * cols.shape[0],
                    x_law.ravel())
    else:
        for t, law in enumerate(system.x_laws):
            cols = np.moveaxis(idx, t, 0).reshape(law.points.size, -1)
            lp.add_rows(cols, np.ones_like(cols, dtype=float),
                        ["="] * cols.shape[0], law.masses)
    if y_law is not None:
        cols = idx.transpose(perm).reshape(int(np.prod(shape[n:])), -1)
        lp.add_rows(cols, np.ones_like(cols, dtype=float), ["="] * cols.shape[0],
                    y_law.ravel())
    else:
        for t, law in enumerate(system.y_laws):
            cols = np.moveaxis(idx, n + t, 0).reshape(law.points.size, -1)
            lp.add_rows(cols, np.ones_like(cols, dtype=float),
                        ["="] * cols.shape[0], law.masses)

    layout = MotLayout(shape=shape, n=n, num_mass_vars=nvar)
    _add_martingale_rows(lp, layout, system, idx)
    if x_law is not None:
        _add_pinned_nonanticipativity(lp, idx, x_law, n)
    if y_law is not None:
        _add_pinned_nonanticipativity(lp, np.transpose(idx, perm), y_law, n)

    sol = lp_backend.solve(lp, config)
    if sol.status != "optimal":
        return None
    return sol.primal.reshape(shape)


def _add_pinned_nonanticipativity(lp, idx, path_law, n):
    """pin(prefix) * pi(path, other_t) - pin(path) * pi(prefix, other_t) = 0 rows.

    ``idx`` has the conditioning asset's axes first (already transposed for the
    anticausal side); duplicate columns in a row are summed by the assembler.
    """
    shape = idx.shape
    own_shape = shape[:n]
    other_shape = shape[n:]
    for t in range(1, n):
        prefix = path_law.sum(axis=tuple(range(t, n))) if t < n else path_law
        n_other = other_shape[t - 1]
        for path_multi in np.ndindex(*own_shape):
            pre_val = float(prefix[path_multi[:t]])
            full_val = float(path_law[path_multi])
            for j in range(n_other):
                sel_full = path_multi + tuple(
                    j if ax == t - 1 else slice(None) for ax in range(n))
                cols_full = idx[sel_full].ravel()
                sel_pre = path_multi[:t] + (slice(None),) * (n - t) + tuple(
                    j if ax == t - 1 else slice(None) for ax in range(n))
                cols_pre = idx[sel_pre].ravel()
                cols = np.concatenate([cols_full, cols_pre])
                coefs = np.concatenate([np.full(cols_full.size, pre_val),
                                        np.full(cols_pre.size, -full_val)])
                lp.add_row(cols, coefs, "=", 0.0)


# ---------------- the search ----------------

def solve_bicausal(instance: McCormickInstance,
                   config: Optional[BnBConfig] = None) -> BnBReport:
    """Certified interval for the exact bicausal bound.

    Best-first on the relaxation bound; deterministic in single-worker mode
    (score ties break to the lowest multi-index, heap ties to insertion order).
    Budget exhaustion returns the partial certified interval rather than
    raising.
    """
    config = config or BnBConfig()
    report = validate_system(instance.system)
    if not report.passed:
        raise ValueError("marginal system fails validation; see validate_system")

    system = instance.system
    sgn = 1.0 if instance.direction == "min" else -1.0
    payoff = tabulate(instance.payoff, system)
    start = time.monotonic()

    counter = itertools.count()
    heap: list = []
    closed_floor = np.inf        # signed bound over fully resolved subtrees
    incumbent: Optional[CouplingTensor] = None
    incumbent_value = np.inf     # signed
    nodes = 0                    # relaxation LPs solved on tree nodes
    pops = 0
    terminated = "gap-closed"

    def solve_box(box: CapacityBounds):
        nonlocal nodes
        node_instance = McCormickInstance(system, instance.payoff, box, instance.direction)
        lp = build_mccormick_lp(node_instance)
        nodes += 1
        try:
            sol = lp_backend.solve(lp, config.solver)
        except lp_backend.LPNumericalError:
            return None, None
        if sol.status != "optimal":
            return None, None
        return sol, lp.layout

    def push(box, sol, layout, depth, floor):
        node = BnBNode(box, sol.objective_value, depth, solution=sol, layout=layout)
        heapq.heappush(heap, (max(sgn * sol.objective_value, floor), next(counter), node))

    root_sol, root_layout = solve_box(instance.bounds)
    if root_sol is None:
        raise ValueError("root relaxation infeasible: capacity bounds exclude every "
                         "martingale coupling")
    push(instance.bounds, root_sol, root_layout, 0, -np.inf)

    # seeded random path laws diversify the first incumbents; node optimizers
    # tend to repeat the same relaxation-optimal laws
    rng = np.random.default_rng(config.seed)
    for _ in range(config.repair_restarts):
        x_law = _random_martingale_path_law(system.x_laws, rng, config.solver)
        y_law = _random_martingale_path_law(system.y_laws, rng, config.solver)
        if x_law is None or y_law is None:
            continue
        candidate = _solve_restricted(system, x_law, y_law, payoff.ravel(),
                                      instance.direction, config.solver)
        if candidate is None:
            continue
        restart = CouplingTensor(system, np.clip(candidate, 0.0, 1.0))
        if _node_residual(restart) > config.residual_tol:
            continue
        if not _within_capacity(restart, instance.bounds, config.residual_tol):
            continue
        value = sgn * float(payoff.ravel() @ restart.masses.ravel())
        if value < incumbent_value:
            incumbent, incumbent_value = restart, value

    pool = ThreadPoolExecutor(max_workers=config.workers) if config.workers > 1 else None
    try:
        while heap:
            if time.monotonic() - start > config.time_budget:
                terminated = "time-budget"
                break
            if nodes >= config.node_budget:
                terminated = "node-budget"
                break
            bound, _, node = heapq.heappop(heap)
            if incumbent is not None and bound >= incumbent_value - config.gap_tol:
                heapq.heappush(heap, (bound, -1, node))  # retains the certified floor
                break
            pops += 1
            masses = np.clip(node.solution.primal[:node.layout.num_mass_vars], 0.0, 1.0)
            coupling = CouplingTensor(system, masses.reshape(system.shape()))
            residual = _node_residual(coupling)
            if residual <= config.residual_tol:
                value = sgn * float(payoff.ravel() @ masses)
                if value < incumbent_value:
                    incumbent, incumbent_value = coupling, value
                closed_floor = min(closed_floor, bound)
                continue
            tried_repair = (residual <= 10.0 * config.residual_tol or incumbent is None
                            or pops % config.repair_every == 0)
            if tried_repair:
                repaired = repair_incumbent(
                    coupling, system, payoff=payoff, direction=instance.direction,
                    residual_tol=config.residual_tol, bounds=instance.bounds,
                    config=config.solver)
                if repaired is not None:
                    value = sgn * float(payoff.ravel() @ repaired.masses.ravel())
                    if value < incumbent_value:
                        incumbent, incumbent_value = repaired, value
            if incumbent is not None and bound >= incumbent_value - config.gap_tol:
                closed_floor = min(closed_floor, bound)  # repair resolved this region
                continue
            try:
                children = branch(node, coupling, config)
            except BranchRefusal:
                # residual is above tolerance here, so the optimizer itself is
                # not a valid incumbent; the relaxation value still closes the
                # subtree's bound contribution
                if not tried_repair:
                    repaired = repair_incumbent(
                        coupling, system, payoff=payoff, direction=instance.direction,
                        residual_tol=config.residual_tol, bounds=instance.bounds,
                        config=config.solver)
                    if repaired is not None:
                        value = sgn * float(payoff.ravel() @ repaired.masses.ravel())
                        if value < incumbent_value:
                            incumbent, incumbent_value = repaired, value
                closed_floor = min(closed_floor, bound)
                continue
            if pool is not None:
                results = list(pool.map(lambda ch: solve_box(ch.box), children))
            else:
                results = [solve_box(ch.box) for ch in children]
            for child, (sol, layout) in zip(children, results):
                if sol is None:
                    continue  # infeasible child: subtree resolved at +inf
                push(child.box, sol, layout, child.depth, bound)
    finally:
        if pool is not None:
            pool.shutdown(wait=False)

    open_floor = min((b for b, _, _ in heap), default=np.inf)
    signed_lower = min(open_floor, closed_floor)
    if incumbent is not None:
        signed_lower = min(signed_lower, incumbent_value)

    inc_residual = _node_residual(incumbent) if incumbent is not None else np.inf
    value = None if incumbent is None else sgn * incumbent_value
    if instance.direction == "min":
        lower = sgn * signed_lower if np.isfinite(signed_lower) else -np.inf
        upper = value if value is not None else np.inf
    else:
        upper = -signed_lower if np.isfinite(signed_lower) else np.inf
        lower = value if value is not None else -np.inf
    return BnBReport(
        lower_bound=lower,
        upper_bound=upper,
        incumbent=incumbent,
        nodes_explored=nodes,
        max_residual_of_incumbent=inc_residual,
        terminated=terminated,
        direction=instance.direction,
        incumbent_value=value,
    )
