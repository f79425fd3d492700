"""Solver-agnostic sparse LP representation and solve contract.

Every optimization module in the package builds a :class:`LinearProgram` and
hands it to :func:`solve`. The concrete algorithm is HiGHS (dual simplex by
default) through ``scipy.optimize.linprog``; it is the single place a different
solver binding would plug in.

Dual sign convention (documented so hedge extraction is sign-stable): duals are
the sensitivity of the reported objective value to the row right-hand side. For
a minimize problem this makes duals of ``>=`` rows nonnegative and duals of
``<=`` rows nonpositive; for a maximize problem the signs mirror.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterator, Optional, Sequence

import numpy as np
from scipy.optimize import linprog
from scipy.sparse import coo_matrix


class LPError(Exception):
    """Base class for solver-contract failures."""


class LPNumericalError(LPError):
    """Raised when the backend reports success but the certificates miss tolerance."""


@dataclass
class SolverConfig:
    feasibility_tol: float = 1e-8      # max primal/dual infeasibility accepted
    optimality_tol: float = 1e-6       # relative primal-dual gap accepted
    method: str = "highs-ds"           # deterministic dual simplex
    maxiter: Optional[int] = None
    time_limit: Optional[float] = None


_SENSES = ("<=", "=", ">=")


@dataclass
class _RowBlock:
    # one block = many rows with identical nonzero count, stored as 2-D arrays
    cols: np.ndarray       # (k, nnz) int
    coefs: np.ndarray      # (k, nnz) float
    senses: np.ndarray     # (k,) of "<=", "=", ">="
    rhs: np.ndarray        # (k,)
    labels: Optional[list] = None


class LinearProgram:
    """Sparse LP: bounded variables, sparse rows with sense and rhs, linear objective.

    Rows are appended in blocks for cheap vectorized construction; row indices
    are global in insertion order. ``layout`` is a free slot for builders to
    attach index maps (variable offsets, row ranges) used by downstream
    extraction code.
    """

    def __init__(self, num_vars: int, direction: str = "min",
                 objective_constant: float = 0.0):
        if direction not in ("min", "max"):
            raise ValueError(f"direction must be 'min' or 'max', got {direction!r}")
        self.num_vars = int(num_vars)
        self.direction = direction
        self.objective_constant = float(objective_constant)
        self._objective = np.zeros(self.num_vars)
        self._lower = np.zeros(self.num_vars)
        self._upper = np.full(self.num_vars, np.inf)
        self._blocks: list[_RowBlock] = []
        self._num_rows = 0
        self.var_labels: Optional[list] = None
        self.layout = None

    # ---------------- construction ----------------

    def set_objective(self, cols, coefs) -> None:
        cols = np.asarray(cols, dtype=int).ravel()
        self._objective[cols] = np.asarray(coefs, dtype=float).ravel()

    def set_bounds(self, cols, lower, upper) -> None:
        cols = np.asarray(cols, dtype=int).ravel()
        lo = np.broadcast_to(np.asarray(lower, dtype=float).ravel(), cols.shape)
        hi = np.broadcast_to(np.asarray(upper, dtype=float).ravel(), cols.shape)
        if np.any(lo > hi):
            raise ValueError("variable lower bound exceeds upper bound")
        self._lower[cols] = lo
        self._upper[cols] = hi

    def add_row(self, cols, coefs, sense: str, rhs: float, label=None) -> int:
        return self.add_rows(np.asarray(cols, dtype=int).ravel()[None, :],
                             np.asarray(coefs, dtype=float).ravel()[None, :],
                             [sense], [rhs],
                             None if label is None else [label])

    def add_rows(self, cols, coefs, senses, rhs, labels=None) -> int:
        """Append a block of rows sharing a nonzero count; returns first row index."""
        cols = np.atleast_2d(np.asarray(cols, dtype=int))
        coefs = np.atleast_2d(np.asarray(coefs, dtype=float))
        coefs = np.broadcast_to(coefs, cols.shape).copy()
        senses = np.broadcast_to(np.asarray(senses, dtype=object), cols.shape[:1]).copy()
        rhs = np.broadcast_to(np.asarray(rhs, dtype=float), cols.shape[:1]).copy()
        if cols.size and (cols.min() < 0 or cols.max() >= self.num_vars):
            raise ValueError("row references a variable index out of range")
        for s in np.unique(senses.astype(str)):
            if s not in _SENSES:
                raise ValueError(f"unknown row sense {s!r}")
        first = self._num_rows
        self._blocks.append(_RowBlock(cols, coefs, senses, rhs, labels))
        self._num_rows += cols.shape[0]
        return first

    # ---------------- introspection ----------------

    @property
    def num_rows(self) -> int:
        return self._num_rows

    @property
    def objective(self) -> np.ndarray:
        return self._objective

    @property
    def var_bounds(self) -> tuple[np.ndarray, np.ndarray]:
        return self._lower, self._upper

    def iter_rows(self) -> Iterator[tuple[int, np.ndarray, np.ndarray, str, float, object]]:
        """Yield (index, cols, coefs, sense, rhs, label) for every row."""
        k = 0
        for blk in self._blocks:
            for r in range(blk.cols.shape[0]):
                label = blk.labels[r] if blk.labels is not None else None
                yield k, blk.cols[r], blk.coefs[r], str(blk.senses[r]), float(blk.rhs[r]), label
                k += 1

    def row_senses(self) -> np.ndarray:
        if self._blocks:
            return np.concatenate([b.senses for b in self._blocks]).astype(str)
        return np.empty(0, dtype=str)

    def row_rhs(self) -> np.ndarray:
        if self._blocks:
            return np.concatenate([b.rhs for b in self._blocks])
        return np.empty(0)

    def matrix(self) -> coo_matrix:
        """All rows as one sparse matrix in global row order."""
        parts_r, parts_c, parts_v = [], [], []
        base = 0
        for blk in self._blocks:
            k, nnz = blk.cols.shape
            parts_r.append(np.repeat(np.arange(base, base + k), nnz))
            parts_c.append(blk.cols.ravel())
            parts_v.append(blk.coefs.ravel())
            base += k
        if not parts_r:
            return coo_matrix((0, self.num_vars))
        return coo_matrix(
            (np.concatenate(parts_v), (np.concatenate(parts_r), np.concatenate(parts_c))),
            shape=(self._num_rows, self.num_vars),
        )


@dataclass
class LPSolution:
    """Primal/dual certificate of one solve.

    ``duals`` follow the sign convention in the module docstring.
    ``lower_bound_duals``/``upper_bound_duals`` are the sensitivities to the
    variable bounds; they enter the dual objective alongside the row duals.
    """

    status: str                         # optimal | infeasible | unbounded | iteration-limit
    objective_value: float
    primal: np.ndarray
    duals: np.ndarray
    lower_bound_duals: np.ndarray
    upper_bound_duals: np.ndarray
    max_primal_infeasibility: float
    max_dual_infeasibility: float
    message: str = ""


_STATUS_MAP = {0: "optimal", 1: "iteration-limit", 2: "infeasible", 3: "unbounded"}


def solve(lp: LinearProgram, config: Optional[SolverConfig] = None) -> LPSolution:
    """Solve ``lp``; status "optimal" carries certificates within tolerances.

    Deterministic for identical input and config (fixed simplex pivoting in
    HiGHS). Raises :class:`LPNumericalError` if the backend claims optimality
    but the recomputed primal/dual measures or the duality gap miss tolerance.
    """
    config = config or SolverConfig()
    senses = lp.row_senses()
    rhs = lp.row_rhs()
    mat = lp.matrix().tocsr()

    eq_mask = senses == "="
    ub_mask = ~eq_mask
    # normalize ">=" rows to "<=" by negation; dual signs restored below
    flip = np.where(senses == ">=", -1.0, 1.0)

    A_eq = mat[eq_mask] if eq_mask.any() else None
    b_eq = rhs[eq_mask] if eq_mask.any() else None
    A_ub = None
    b_ub = None
    if ub_mask.any():
        scale = flip[ub_mask]
        A_ub = mat[ub_mask].multiply(scale[:, None]).tocsr()
        b_ub = rhs[ub_mask] * scale

    sign = 1.0 if lp.direction == "min" else -1.0
    lower, upper = lp.var_bounds
    options = {
        "presolve": True,
        "primal_feasibility_tolerance": max(1e-10, config.feasibility_tol * 1e-2),
        "dual_feasibility_tolerance": max(1e-10, config.feasibility_tol * 1e-2),
    }
    if config.maxiter is not None:
        options["maxiter"] = config.maxiter
    if config.time_limit is not None:
        options["time_limit"] = config.time_limit

    res = linprog(sign * lp.objective, A_ub=A_ub, b_ub=b_ub, A_eq=A_eq, b_eq=b_eq,
                  bounds=np.column_stack([lower, upper]), method=config.method,
                  options=options)

    status = _STATUS_MAP.get(res.status)
    if status is None:
        raise LPNumericalError(f"solver reported numerical failure: {res.message}")
    if status != "optimal":
        return LPSolution(status=status, objective_value=np.nan,
                          primal=np.asarray(res.x) if res.x is not None else np.empty(0),
                          duals=np.empty(0), lower_bound_duals=np.empty(0),
                          upper_bound_duals=np.empty(0),
                          max_primal_infeasibility=np.inf,
                          max_dual_infeasibility=np.inf,
                          message=str(res.message))

    x = np.asarray(res.x)
    objective = sign * res.fun + lp.objective_constant

    # reassemble duals in global row order, undoing the ">=" flip and the
    # max-direction negation so they are sensitivities of the reported value
    duals = np.zeros(lp.num_rows)
    if eq_mask.any():
        duals[eq_mask] = res.eqlin.marginals
    if ub_mask.any():
        duals[ub_mask] = res.ineqlin.marginals * flip[ub_mask]
    duals *= sign
    z_lower = sign * np.asarray(res.lower.marginals)
    z_upper = sign * np.asarray(res.upper.marginals)

    primal_inf = _primal_infeasibility(mat, senses, rhs, lower, upper, x)
    dual_inf = _dual_infeasibility(lp, mat, duals, z_lower, z_upper)

    sol = LPSolution(status="optimal", objective_value=float(objective), primal=x,
                     duals=duals, lower_bound_duals=z_lower, upper_bound_duals=z_upper,
                     max_primal_infeasibility=primal_inf,
                     max_dual_infeasibility=dual_inf, message=str(res.message))

    if primal_inf > config.feasibility_tol or dual_inf > config.feasibility_tol:
        raise LPNumericalError(
            f"optimal status with infeasibility beyond tolerance "
            f"(primal {primal_inf:.3e}, dual {dual_inf:.3e}, tol {config.feasibility_tol:.1e})")
    gap = duality_gap(sol, lp)
    if gap > config.optimality_tol * (1.0 + abs(objective)):
        raise LPNumericalError(
            f"duality gap {gap:.3e} exceeds {config.optimality_tol:.1e} relative")
    return sol


def dual_objective(solution: LPSolution, lp: LinearProgram) -> float:
    """Dual objective value: row duals times rhs plus variable-bound contributions."""
    if solution.status != "optimal":
        raise LPError(f"dual objective undefined for status {solution.status!r}")
    value = float(solution.duals @ lp.row_rhs()) + lp.objective_constant
    lower, upper = lp.var_bounds
    value += _bound_term(solution.lower_bound_duals, lower)
    value += _bound_term(solution.upper_bound_duals, upper)
    return value


def duality_gap(solution: LPSolution, lp: LinearProgram) -> float:
    """|primal objective - dual objective|, bound contributions included."""
    return abs(solution.objective_value - dual_objective(solution, lp))


def _bound_term(duals: np.ndarray, bounds: np.ndarray) -> float:
    finite = np.isfinite(bounds)
    return float(duals[finite] @ bounds[finite])


def _primal_infeasibility(mat, senses, rhs, lower, upper, x) -> float:
    worst = max(float(np.max(lower - x, initial=0.0)),
                float(np.max(x - upper, initial=0.0)))
    if mat.shape[0]:
        ax = mat @ x
        resid = ax - rhs
        viol = np.where(senses == "=", np.abs(resid),
                        np.where(senses == "<=", np.maximum(resid, 0.0),
                                 np.maximum(-resid, 0.0)))
        worst = max(worst, float(viol.max()))
    return worst


def _dual_infeasibility(lp, mat, duals, z_lower, z_upper) -> float:
    # stationarity: c - A^T y - z_lb - z_ub = 0 for the reported-sign duals
    resid = lp.objective - (mat.T @ duals) - z_lower - z_upper
    return float(np.max(np.abs(resid), initial=0.0))


def write_lp_text(lp: LinearProgram, path: str) -> None:
    """Export in CPLEX LP text format for cross-checking with external solvers."""
    def term(j: int, c: float) -> str:
        return f"{'+' if c >= 0 else '-'} {abs(c):.17g} x{j} "

    lines = ["Minimize" if lp.direction == "min" else "Maximize", " obj: "]
    obj_terms = [term(j, c) for j, c in enumerate(lp.objective) if c != 0.0]
    lines[1] += "".join(obj_terms) if obj_terms else "0 x0"
    lines.append("Subject To")
    sense_txt = {"<=": "<=", "=": "=", ">=": ">="}
    for k, cols, coefs, sense, rhs, label in lp.iter_rows():
        name = f"r{k}" if label is None else str(label).replace(" ", "_")
        body = "".join(term(int(j), float(c)) for j, c in zip(cols, coefs) if c != 0.0)
        lines.append(f" {name}: {body or '0 x0 '}{sense_txt[sense]} {rhs:.17g}")
    lines.append("Bounds")
    lower, upper = lp.var_bounds
    for j in range(lp.num_vars):
        lo = f"{lower[j]:.17g}" if np.isfinite(lower[j]) else "-inf"
        hi = f"{upper[j]:.17g}" if np.isfinite(upper[j]) else "+inf"
        lines.append(f" {lo} <= x{j} <= {hi}")
    lines.append("End")
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")
