"""Capacity bounds and the envelope relaxation of the bicausal coupling problem.

Each bilinear nonanticipativity equality ``pi(path, other_t) * pi(prefix) =
pi(prefix, other_t) * pi(path)`` is replaced by a single box-bounded variable w
per grid point, constrained by the four envelope inequalities of each product.
With the default capacity bounds (zero lower, min-of-participating-marginals
upper) the relaxed feasible set always contains the independent martingale
coupling, so the relaxation is never vacuously infeasible.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Iterable, Optional

import numpy as np

from . import lp_backend
from .coupling import CouplingTensor, ProjectionKey, project
from .lp_backend import LinearProgram, SolverConfig
from .marginals import MarginalSystem, validate_system
from .mot import (BoundResult, MotLayout, _add_marginal_rows,
                  _add_martingale_rows, _package_result)
from .payoffs import PayoffSpec, tabulate

BOUNDS_SCHEMA = "mcmot-bounds-v1"

SIDES = ("causality", "anticausality")


def family_keys(n: int) -> tuple:
    """All projection families the relaxation constrains, in canonical order."""
    keys = [ProjectionKey("x_full"), ProjectionKey("y_full")]
    for t in range(1, n):
        keys += [
            ProjectionKey("x_full_with_y", t),
            ProjectionKey("x_prefix", t),
            ProjectionKey("x_prefix_with_y", t),
            ProjectionKey("y_full_with_x", t),
            ProjectionKey("y_prefix", t),
            ProjectionKey("y_prefix_with_x", t),
        ]
    return tuple(keys)


def family_shape(key: ProjectionKey, system: MarginalSystem) -> tuple:
    shape = system.shape()
    return tuple(shape[ax] for ax in key.axes(system.n_maturities))


def side_factors(side: str, t: int) -> tuple:
    """The two (value, box) factor pairs of the step-t bilinear equality."""
    if side == "causality":
        return ((ProjectionKey("x_full_with_y", t), ProjectionKey("x_prefix", t)),
                (ProjectionKey("x_prefix_with_y", t), ProjectionKey("x_full")))
    if side == "anticausality":
        return ((ProjectionKey("y_full_with_x", t), ProjectionKey("y_prefix", t)),
                (ProjectionKey("y_prefix_with_x", t), ProjectionKey("y_full")))
    raise ValueError(f"unknown side {side!r}")


@dataclass(frozen=True)
class CapacityBounds:
    """Per-family lower/upper mass tables; entrywise 0 <= L <= U <= 1."""

    tables: dict    # ProjectionKey -> (L, U) float arrays

    def __post_init__(self):
        frozen = {}
        for key, (lo, hi) in self.tables.items():
            lo = np.asarray(lo, dtype=float)
            hi = np.asarray(hi, dtype=float)
            if lo.shape != hi.shape:
                raise ValueError(f"bounds for {key.label()} have mismatched shapes")
            if np.any(lo < 0) or np.any(hi > 1) or np.any(lo > hi):
                raise ValueError(f"bounds for {key.label()} violate 0 <= L <= U <= 1")
            lo.setflags(write=False)
            hi.setflags(write=False)
            frozen[key] = (lo, hi)
        object.__setattr__(self, "tables", frozen)

    def lower(self, key: ProjectionKey) -> np.ndarray:
        return self.tables[key][0]

    def upper(self, key: ProjectionKey) -> np.ndarray:
        return self.tables[key][1]

    def keys(self) -> Iterable[ProjectionKey]:
        return self.tables.keys()

    def replace_entry(self, key: ProjectionKey, index: tuple,
                      lower: float, upper: float) -> "CapacityBounds":
        """Copy-on-write refinement of one entry (used by branch-and-bound)."""
        lo = self.tables[key][0].copy()
        hi = self.tables[key][1].copy()
        lo[index] = lower
        hi[index] = upper
        tables = dict(self.tables)
        tables[key] = (lo, hi)
        return CapacityBounds(tables)

    def check_shapes(self, system: MarginalSystem) -> None:
        for key in family_keys(system.n_maturities):
            if key not in self.tables:
                raise ValueError(f"bounds missing family {key.label()}")
            if self.tables[key][0].shape != family_shape(key, system):
                raise ValueError(f"bounds for {key.label()} have wrong shape")


def default_bounds(system: MarginalSystem) -> CapacityBounds:
    """Zero lower bounds; upper bound = min of the marginal masses of exactly
    the coordinates appearing in each family's key. Implied by the marginal
    constraints, so every feasible coupling satisfies them."""
    n = system.n_maturities

    def mass(asset, t):
        return system.laws(asset)[t].masses

    def min_table(parts):
        grids = np.meshgrid(*parts, indexing="ij")
        return np.minimum.reduce(grids) if len(grids) > 1 else grids[0]

    tables = {}
    for key in family_keys(n):
        t = key.t
        if key.kind == "x_full":
            parts = [mass("X", s) for s in range(n)]
        elif key.kind == "y_full":
            parts = [mass("Y", s) for s in range(n)]
        elif key.kind == "x_prefix":
            parts = [mass("X", s) for s in range(t)]
        elif key.kind == "y_prefix":
            parts = [mass("Y", s) for s in range(t)]
        elif key.kind == "x_full_with_y":
            parts = [mass("X", s) for s in range(n)] + [mass("Y", t - 1)]
        elif key.kind == "x_prefix_with_y":
            parts = [mass("X", s) for s in range(t)] + [mass("Y", t - 1)]
        elif key.kind == "y_full_with_x":
            parts = [mass("Y", s) for s in range(n)] + [mass("X", t - 1)]
        else:  # y_prefix_with_x
            parts = [mass("Y", s) for s in range(t)] + [mass("X", t - 1)]
        upper = min_table(parts)
        tables[key] = (np.zeros_like(upper), upper)
    return CapacityBounds(tables)


@dataclass(frozen=True)
class McCormickInstance:
    system: MarginalSystem
    payoff: PayoffSpec
    bounds: CapacityBounds
    direction: str

    def __post_init__(self):
        if self.direction not in ("min", "max"):
            raise ValueError(f"direction must be 'min' or 'max', got {self.direction!r}")
        self.bounds.check_shapes(self.system)


def _lift_dims(key: ProjectionKey, n: int) -> tuple:
    """Reshape dims that lift a family table onto its side's w grid."""
    t = key.t
    if key.kind in ("x_full_with_y", "y_full_with_x"):
        return None  # identity
    if key.kind in ("x_prefix", "y_prefix"):
        return ("prefix", t)
    if key.kind in ("x_prefix_with_y", "y_prefix_with_x"):
        return ("prefix_with", t)
    return ("full", None)


def _lift(table: np.ndarray, key: ProjectionKey, w_shape: tuple, n: int) -> np.ndarray:
    dims = _lift_dims(key, n)
    if dims is None:
        return np.broadcast_to(table, w_shape)
    mode, t = dims
    if mode == "prefix":
        arr = table.reshape(table.shape + (1,) * (n - t + 1))
    elif mode == "prefix_with":
        arr = table.reshape(table.shape[:-1] + (1,) * (n - t) + table.shape[-1:])
    else:
        arr = table.reshape(table.shape + (1,))
    return np.broadcast_to(arr, w_shape)


def build_mccormick_lp(instance: McCormickInstance) -> LinearProgram:
    """The classical LP plus projection variables, box-bounded w variables, and
    the eight envelope rows per w grid point for each side and step.

    Projection variables carry the capacity bounds directly as variable
    bounds; each is tied to the coupling by one defining equality per grid
    point, which keeps every envelope row three-sparse.
    """
    system = instance.system
    n = system.n_maturities
    shape = system.shape()
    nvar = int(np.prod(shape))
    idx = np.arange(nvar).reshape(shape)

    keys = family_keys(n)
    total_aux = sum(int(np.prod(family_shape(k, system))) for k in keys)
    n_w = sum(int(np.prod(family_shape(ProjectionKey("x_full_with_y", t), system)))
              + int(np.prod(family_shape(ProjectionKey("y_full_with_x", t), system)))
              for t in range(1, n))

    lp = LinearProgram(nvar + total_aux + n_w, direction=instance.direction)
    lp.set_bounds(np.arange(nvar), 0.0, 1.0)
    lp.set_objective(np.arange(nvar), tabulate(instance.payoff, system).ravel())
    layout = MotLayout(shape=shape, n=n, num_mass_vars=nvar)
    _add_marginal_rows(lp, layout, system, idx)
    _add_martingale_rows(lp, layout, system, idx)

    pos = nvar
    for key in keys:
        grid = family_shape(key, system)
        size = int(np.prod(grid))
        layout.aux_vars[key] = (pos, grid)
        cols = np.arange(pos, pos + size)
        lp.set_bounds(cols, instance.bounds.lower(key).ravel(),
                      instance.bounds.upper(key).ravel())
        keep = key.axes(n)
        drop = tuple(ax for ax in range(2 * n) if ax not in keep)
        mass_cols = idx.transpose(keep + drop).reshape(size, -1)
        block_cols = np.hstack([mass_cols, cols[:, None]])
        coefs = np.ones_like(block_cols, dtype=float)
        coefs[:, -1] = -1.0
        first = lp.add_rows(block_cols, coefs, ["="] * size, np.zeros(size))
        layout.defining_rows[key] = (first, size)
        pos += size

    for side in SIDES:
        for t in range(1, n):
            w_grid = family_shape(side_factors(side, t)[0][0], system)
            size = int(np.prod(w_grid))
            layout.w_vars[(side, t)] = (pos, w_grid)
            lp.set_bounds(np.arange(pos, pos + size), 0.0, 1.0)
            first = _add_envelope_rows(lp, layout, instance, side, t, pos, w_grid)
            layout.envelope_rows[(side, t)] = (first, 8 * size)
            pos += size

    lp.layout = layout
    return lp


def _add_envelope_rows(lp, layout, instance, side, t, w_offset, w_grid) -> int:
    n = instance.system.n_maturities
    size = int(np.prod(w_grid))
    w_cols = np.arange(w_offset, w_offset + size)
    first = None
    for key_a, key_b in side_factors(side, t):
        off_a, grid_a = layout.aux_vars[key_a]
        off_b, grid_b = layout.aux_vars[key_b]
        a_cols = _lift(np.arange(off_a, off_a + int(np.prod(grid_a))).reshape(grid_a),
                       key_a, w_grid, n).ravel()
        b_cols = _lift(np.arange(off_b, off_b + int(np.prod(grid_b))).reshape(grid_b),
                       key_b, w_grid, n).ravel()
        La = _lift(instance.bounds.lower(key_a), key_a, w_grid, n).ravel()
        Ua = _lift(instance.bounds.upper(key_a), key_a, w_grid, n).ravel()
        Lb = _lift(instance.bounds.lower(key_b), key_b, w_grid, n).ravel()
        Ub = _lift(instance.bounds.upper(key_b), key_b, w_grid, n).ravel()
        cols = np.column_stack([w_cols, b_cols, a_cols])
        # w >= La*b + Lb*a - La*Lb ; w >= Ua*b + Ub*a - Ua*Ub
        # w <= Ua*b + Lb*a - Ua*Lb ; w <= La*b + Ub*a - La*Ub
        for sense, ca, cb, rhs in (
            (">=", La, Lb, La * Lb),
            (">=", Ua, Ub, Ua * Ub),
            ("<=", Ua, Lb, Ua * Lb),
            ("<=", La, Ub, La * Ub),
        ):
            coefs = np.column_stack([np.ones(size), -ca, -cb])
            row = lp.add_rows(cols, coefs, [sense] * size, -rhs)
            if first is None:
                first = row
    return first


def solve_mccormick(instance: McCormickInstance,
                    config: Optional[SolverConfig] = None) -> BoundResult:
    """Optimal value of the relaxation with the attaining coupling and hedge.

    The returned coupling satisfies marginals, martingale, capacity and all
    envelope rows within the solver tolerance; its nonanticipativity residuals
    are generally positive (that is the relaxation)."""
    report = validate_system(instance.system)
    if not report.passed:
        raise ValueError("marginal system fails validation; see validate_system")
    lp = build_mccormick_lp(instance)
    solution = lp_backend.solve(lp, config)
    if solution.status == "infeasible":
        raise ValueError(
            "relaxation LP infeasible: user-supplied capacity bounds exclude every "
            "martingale coupling (defaults are always feasible)")
    if solution.status != "optimal":
        raise lp_backend.LPError(f"relaxation solve ended with status {solution.status}")
    return _package_result(lp, solution, instance, config)


def envelope_gap(coupling: CouplingTensor, bounds: CapacityBounds, t: int,
                 point: tuple, side: str = "causality") -> float:
    """Width of the feasible w-interval at one grid point, given the coupling's
    own projections: min over the upper envelopes of both bilinear products
    minus max over the lower envelopes, intersected with the [0, 1] w box.

    Nonnegative whenever the coupling satisfies the envelope system; collapses
    to zero where a factor's box is pinned (the envelope is exact at corners).
    """
    low, high = _interval_at(coupling, bounds, t, point, side)
    return float(min(high, 1.0) - max(low, 0.0))


def _interval_at(coupling, bounds, t, point, side):
    n = coupling.n_maturities
    point = tuple(point)
    lows, highs = [], []
    for key_a, key_b in side_factors(side, t):
        a_idx = _factor_index(key_a, point, n)
        b_idx = _factor_index(key_b, point, n)
        a = project(coupling, key_a)[a_idx]
        b = project(coupling, key_b)[b_idx]
        La, Ua = bounds.lower(key_a)[a_idx], bounds.upper(key_a)[a_idx]
        Lb, Ub = bounds.lower(key_b)[b_idx], bounds.upper(key_b)[b_idx]
        lows += [La * b + Lb * a - La * Lb, Ua * b + Ub * a - Ua * Ub]
        highs += [Ua * b + Lb * a - Ua * Lb, La * b + Ub * a - La * Ub]
    return max(lows), min(highs)


def _factor_index(key: ProjectionKey, w_point: tuple, n: int) -> tuple:
    """Map a w-grid point (path..., other_t) to the factor family's grid point."""
    if key.kind in ("x_prefix", "y_prefix"):
        return w_point[:key.t]
    if key.kind in ("x_prefix_with_y", "y_prefix_with_x"):
        return w_point[:key.t] + (w_point[-1],)
    if key.kind in ("x_full", "y_full"):
        return w_point[:n]
    return w_point


def product_envelope_widths(values: dict, bounds: CapacityBounds, side: str,
                            t: int, n: int, w_shape: tuple) -> list:
    """Per-product own-envelope widths over the whole w grid (vectorized).

    ``values`` maps each family key to its projection table. The width of a
    product's envelope at the current factor values bounds how far the
    relaxation can place w from the true product, so it is the branching
    signal; it shrinks to zero as the factor boxes collapse.
    """
    out = []
    for key_a, key_b in side_factors(side, t):
        a = _lift(values[key_a], key_a, w_shape, n)
        b = _lift(values[key_b], key_b, w_shape, n)
        La = _lift(bounds.lower(key_a), key_a, w_shape, n)
        Ua = _lift(bounds.upper(key_a), key_a, w_shape, n)
        Lb = _lift(bounds.lower(key_b), key_b, w_shape, n)
        Ub = _lift(bounds.upper(key_b), key_b, w_shape, n)
        low = np.maximum(La * b + Lb * a - La * Lb, Ua * b + Ub * a - Ua * Ub)
        high = np.minimum(Ua * b + Lb * a - Ua * Lb, La * b + Ub * a - La * Ub)
        out.append(high - low)
    return out


# ---------------- serialization ----------------

def bounds_to_dict(bounds: CapacityBounds) -> dict:
    families = {}
    for key in bounds.keys():
        lo, hi = bounds.tables[key]
        entries = []
        for multi in np.ndindex(lo.shape):
            entries.append({"index": list(multi),
                            "lower": float(lo[multi]), "upper": float(hi[multi])})
        families[key.label()] = {"shape": list(lo.shape), "entries": entries}
    return {"schema_version": BOUNDS_SCHEMA, "families": families}


def _parse_key(label: str) -> ProjectionKey:
    if "[" in label:
        kind, rest = label.split("[", 1)
        return ProjectionKey(kind, int(rest.rstrip("]")))
    return ProjectionKey(label)


def bounds_from_dict(doc: dict) -> CapacityBounds:
    if doc.get("schema_version") != BOUNDS_SCHEMA:
        raise ValueError(
            f"expected schema_version {BOUNDS_SCHEMA!r}, got {doc.get('schema_version')!r}")
    tables = {}
    for label, fam in doc["families"].items():
        shape = tuple(fam["shape"])
        lo = np.zeros(shape)
        hi = np.zeros(shape)
        for entry in fam["entries"]:
            lo[tuple(entry["index"])] = entry["lower"]
            hi[tuple(entry["index"])] = entry["upper"]
        tables[_parse_key(label)] = (lo, hi)
    return CapacityBounds(tables)


def load_bounds(path: str) -> CapacityBounds:
    with open(path) as fh:
        return bounds_from_dict(json.load(fh))


def save_bounds(bounds: CapacityBounds, path: str) -> None:
    with open(path, "w") as fh:
        json.dump(bounds_to_dict(bounds), fh, indent=2)
