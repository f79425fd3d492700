"""Bid/ask-aware LP calibration of discrete risk-neutral marginals.

One LP fits a joint discrete measure across all maturities of one asset: the
support at each maturity is that maturity's strike grid (plus optional extra
points priced by no quote), fitted call prices must sit as close to the bid/ask
band as possible, and martingale rows across maturities make the recovered
marginals convex-order consistent by construction. Prices, strikes and the
martingale condition are all expressed in forward-scaled units, so every
recovered marginal has unit mean regardless of the forward term structure.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import lp_backend
from .lp_backend import LinearProgram, SolverConfig
from .marginals import MarginalLaw, SupportGrid, check_convex_order

CALIBRATION_SCHEMA = "mcmot-calib-v1"

FEASIBLE_TOL = 1e-7


class CalibrationError(Exception):
    pass


class CalibrationInfeasible(CalibrationError):
    """No risk-neutral measure exists on the strike grids; carries the row
    families that still need slack after an elastic re-solve."""

    def __init__(self, families):
        self.families = dict(families)
        super().__init__(
            "calibration LP infeasible; elastic slack remains in: "
            + ", ".join(f"{k} ({v:.3e})" for k, v in self.families.items()))


@dataclass(frozen=True)
class OptionQuote:
    maturity_index: int
    strike: float
    bid: float
    ask: float

    def __post_init__(self):
        if not (0 <= self.bid <= self.ask):
            raise ValueError(f"need 0 <= bid <= ask, got bid={self.bid}, ask={self.ask}")
        if self.strike <= 0:
            raise ValueError("strike must be positive")


@dataclass(frozen=True)
class MarketSlice:
    maturity_index: int
    forward: float
    discount: float
    quotes: tuple
    extra_support: tuple = ()    # support points priced by no quote

    def __post_init__(self):
        object.__setattr__(self, "quotes", tuple(self.quotes))
        object.__setattr__(self, "extra_support", tuple(float(s) for s in self.extra_support))
        if self.forward <= 0:
            raise ValueError("forward must be positive")
        if not (0 < self.discount <= 1):
            raise ValueError("discount factor must lie in (0, 1]")
        strikes = [q.strike for q in self.quotes]
        if any(k2 <= k1 for k1, k2 in zip(strikes, strikes[1:])):
            raise ValueError("quotes must be sorted by strictly increasing strike")
        if any(q.maturity_index != self.maturity_index for q in self.quotes):
            raise ValueError("quote maturity does not match the slice")

    def support(self) -> np.ndarray:
        pts = np.array([q.strike for q in self.quotes] + list(self.extra_support))
        return np.unique(pts)


def scale_quotes(slice_: MarketSlice) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Scaled (ask, bid, strike) arrays: prices by discount*forward, strikes by forward."""
    df = slice_.discount * slice_.forward
    a = np.array([q.ask for q in slice_.quotes]) / df
    b = np.array([q.bid for q in slice_.quotes]) / df
    k = np.array([q.strike for q in slice_.quotes]) / slice_.forward
    return a, b, k


@dataclass
class CalibLayout:
    support: list               # raw support per maturity
    scaled_support: list        # support / forward per maturity
    shape: tuple
    num_joint: int
    c_offset: int
    split_offset: int
    quote_index: list           # (slice position, quote position) per c variable
    row_families: dict = field(default_factory=dict)   # family -> (first, count)


@dataclass
class CalibrationResult:
    joint: np.ndarray                 # mass tensor over the product of strike grids
    marginals: list                   # per-maturity MarginalLaw on scaled supports
    fitted_scaled_prices: list        # per slice, array aligned with its quotes
    objective: float
    spread_floor: float               # sum of scaled |ask - bid|
    all_quotes_feasible: bool

    def to_dict(self) -> dict:
        return {
            "schema_version": CALIBRATION_SCHEMA,
            "shape": list(self.joint.shape),
            "joint": self.joint.ravel().tolist(),
            "marginals": [
                {"points": m.points.tolist(), "masses": m.masses.tolist()}
                for m in self.marginals
            ],
            "fitted_scaled_prices": [arr.tolist() for arr in self.fitted_scaled_prices],
            "objective": self.objective,
            "spread_floor": self.spread_floor,
            "all_quotes_feasible": self.all_quotes_feasible,
        }


def build_calibration_lp(slices: Sequence[MarketSlice]) -> LinearProgram:
    """Joint-measure LP: pricing equalities per quote, martingale rows per
    prefix path, unit-forward mean rows, the probability-mass row, and
    nonnegative split pairs that linearize |c - ask| + |c - bid|."""
    slices = sorted(slices, key=lambda s: s.maturity_index)
    if not slices:
        raise ValueError("need at least one market slice")
    for s in slices:
        if not s.quotes:
            raise ValueError(f"slice at maturity {s.maturity_index} has no quotes")

    support = [s.support() for s in slices]
    scaled = [sup / s.forward for sup, s in zip(support, slices)]
    shape = tuple(len(sup) for sup in support)
    n = len(slices)
    num_joint = int(np.prod(shape))
    idx = np.arange(num_joint).reshape(shape)

    n_quotes = sum(len(s.quotes) for s in slices)
    c_offset = num_joint
    split_offset = num_joint + n_quotes
    lp = LinearProgram(split_offset + 4 * n_quotes, direction="min")
    lp.set_bounds(np.arange(num_joint), 0.0, 1.0)
    lp.set_bounds(np.arange(c_offset, split_offset), -np.inf, np.inf)
    lp.set_bounds(np.arange(split_offset, split_offset + 4 * n_quotes), 0.0, np.inf)
    lp.set_objective(np.arange(split_offset, split_offset + 4 * n_quotes),
                     np.ones(4 * n_quotes))

    layout = CalibLayout(support=support, scaled_support=scaled, shape=shape,
                         num_joint=num_joint, c_offset=c_offset,
                         split_offset=split_offset, quote_index=[])

    def axis_coefs(t, values):
        bshape = [1] * n
        bshape[t] = shape[t]
        return np.broadcast_to(np.asarray(values).reshape(bshape), shape).ravel()

    q_var = c_offset
    sp = split_offset
    first_pricing = lp.num_rows
    for si, (slice_, sup_scaled) in enumerate(zip(slices, scaled)):
        a, b, _ = scale_quotes(slice_)
        for qi, quote in enumerate(slice_.quotes):
            k = quote.strike / slice_.forward
            coefs = axis_coefs(si, np.maximum(sup_scaled - k, 0.0))
            lp.add_row(np.concatenate([idx.ravel(), [q_var]]),
                       np.concatenate([coefs, [-1.0]]), "=", 0.0)
            lp.add_row([q_var, sp, sp + 1], [1.0, -1.0, 1.0], "=", float(a[qi]))
            lp.add_row([q_var, sp + 2, sp + 3], [1.0, -1.0, 1.0], "=", float(b[qi]))
            layout.quote_index.append((si, qi))
            q_var += 1
            sp += 4
    layout.row_families["pricing"] = (first_pricing, lp.num_rows - first_pricing)

    first_mart = lp.num_rows
    for t in range(n - 1):
        pre_shape = shape[:t + 1]
        n_pre = int(np.prod(pre_shape))
        cols = idx.reshape(n_pre, -1)
        ratio_next = axis_coefs(t + 1, scaled[t + 1]).reshape(shape).reshape(n_pre, -1)
        ratio_cur = axis_coefs(t, scaled[t]).reshape(shape).reshape(n_pre, -1)
        lp.add_rows(cols, ratio_next - ratio_cur, ["="] * n_pre, np.zeros(n_pre))
    layout.row_families["martingale"] = (first_mart, lp.num_rows - first_mart)

    # unit-mean rows in forward-scaled units: same equation as requiring the
    # raw mean to equal the forward, and exactly scale-invariant numerically
    first_mean = lp.num_rows
    for t in range(n):
        lp.add_row(idx.ravel(), axis_coefs(t, scaled[t]), "=", 1.0)
    layout.row_families["mean"] = (first_mean, n)

    first_mass = lp.num_rows
    lp.add_row(idx.ravel(), np.ones(num_joint), "=", 1.0)
    layout.row_families["mass"] = (first_mass, 1)

    lp.layout = layout
    return lp


def calibrate(slices: Sequence[MarketSlice], asset_id: str = "S",
              config: Optional[SolverConfig] = None) -> CalibrationResult:
    """Fit the joint measure; marginals are reported on forward-scaled supports.

    The recovered marginals share unit mean and pass the convex-order check by
    construction; a violation would indicate solver trouble and raises.
    """
    slices = sorted(slices, key=lambda s: s.maturity_index)
    lp = build_calibration_lp(slices)
    layout = lp.layout
    solution = lp_backend.solve(lp, config)
    if solution.status == "infeasible":
        raise CalibrationInfeasible(_diagnose_infeasible(lp, config))
    if solution.status != "optimal":
        raise CalibrationError(f"calibration solve ended with status {solution.status}")

    joint = np.clip(solution.primal[:layout.num_joint], 0.0, 1.0).reshape(layout.shape)
    n = len(layout.shape)
    marginals = []
    for t in range(n):
        axes = tuple(ax for ax in range(n) if ax != t)
        masses = joint.sum(axis=axes) if axes else joint
        grid = SupportGrid(asset_id, t + 1, layout.scaled_support[t])
        marginals.append(MarginalLaw(grid, masses))
        if abs(float(masses @ layout.scaled_support[t]) - 1.0) > 1e-8:
            raise CalibrationError(f"scaled mean at maturity {t + 1} drifted from 1")
    for t in range(n - 1):
        ordered, worst = check_convex_order(marginals[t], marginals[t + 1])
        if not ordered:
            raise CalibrationError(
                f"recovered marginals break convex order at step {t + 1} "
                f"(violation {worst:.3e}); this should be impossible for a "
                "martingale joint measure")

    fitted = []
    pos = layout.c_offset
    for slice_ in slices:
        cnt = len(slice_.quotes)
        fitted.append(solution.primal[pos:pos + cnt].copy())
        pos += cnt
    spread_floor = float(sum(np.sum(np.abs(a - b))
                             for a, b, _ in (scale_quotes(s) for s in slices)))
    objective = solution.objective_value
    return CalibrationResult(
        joint=joint,
        marginals=marginals,
        fitted_scaled_prices=fitted,
        objective=objective,
        spread_floor=spread_floor,
        all_quotes_feasible=bool(objective <= spread_floor + FEASIBLE_TOL),
    )


def _diagnose_infeasible(lp: LinearProgram, config) -> dict:
    """Elastic re-solve: slack every row, minimize total slack, report the row
    families that cannot reach zero."""
    layout = lp.layout
    n_rows = lp.num_rows
    elastic = LinearProgram(lp.num_vars + 2 * n_rows, direction="min")
    lower, upper = lp.var_bounds
    elastic.set_bounds(np.arange(lp.num_vars), lower, upper)
    elastic.set_bounds(np.arange(lp.num_vars, elastic.num_vars), 0.0, np.inf)
    elastic.set_objective(np.arange(lp.num_vars, elastic.num_vars),
                          np.ones(2 * n_rows))
    for k, cols, coefs, sense, rhs, _ in lp.iter_rows():
        cols = np.concatenate([cols, [lp.num_vars + 2 * k, lp.num_vars + 2 * k + 1]])
        coefs = np.concatenate([coefs, [1.0, -1.0]])
        elastic.add_row(cols, coefs, sense, rhs)
    sol = lp_backend.solve(elastic, config)
    slack = sol.primal[lp.num_vars:].reshape(n_rows, 2).sum(axis=1)
    families = {}
    for name, (first, count) in layout.row_families.items():
        total = float(slack[first:first + count].sum())
        if total > 1e-9:
            families[name] = total
    return families


def feasibility_diagnosis(result: CalibrationResult,
                          slices: Sequence[MarketSlice]) -> dict:
    """Per-quote fit report: fitted price, distance to [bid, ask], objective
    excess (|c-a| + |c-b| - (a-b), i.e. twice the distance), and a flag.
    The per-quote excesses sum to objective - spread_floor."""
    slices = sorted(slices, key=lambda s: s.maturity_index)
    quotes = []
    for slice_, fitted in zip(slices, result.fitted_scaled_prices):
        a, b, k = scale_quotes(slice_)
        for qi, quote in enumerate(slice_.quotes):
            c = float(fitted[qi])
            distance = max(0.0, b[qi] - c, c - a[qi])
            excess = abs(c - a[qi]) + abs(c - b[qi]) - (a[qi] - b[qi])
            quotes.append({
                "maturity_index": slice_.maturity_index,
                "strike": quote.strike,
                "fitted_scaled_price": c,
                "distance": distance,
                "excess": excess,
                "feasible": distance <= FEASIBLE_TOL,
            })
    return {
        "quotes": quotes,
        "aggregate_excess": result.objective - result.spread_floor,
        "all_quotes_feasible": result.all_quotes_feasible,
    }


# ---------------- file interfaces ----------------

def load_chain_csv(chain_path: str, market_path: str) -> list[MarketSlice]:
    """Option chain CSV (maturity_index,strike,bid,ask) plus a JSON sidecar
    {maturity_index: {forward, discount[, extra_support]}}."""
    by_maturity: dict = {}
    with open(chain_path, newline="") as fh:
        reader = csv.DictReader(fh)
        required = {"maturity_index", "strike", "bid", "ask"}
        if reader.fieldnames is None or not required.issubset(reader.fieldnames):
            raise ValueError(
                f"chain CSV must have header columns {sorted(required)}, "
                f"got {reader.fieldnames}")
        for line, row in enumerate(reader, start=2):
            try:
                quote = OptionQuote(int(row["maturity_index"]), float(row["strike"]),
                                    float(row["bid"]), float(row["ask"]))
            except (TypeError, ValueError) as exc:
                raise ValueError(f"{chain_path}:{line}: {exc}") from exc
            by_maturity.setdefault(quote.maturity_index, []).append(quote)
    with open(market_path) as fh:
        market = json.load(fh)
    slices = []
    for mat, quotes in sorted(by_maturity.items()):
        meta = market.get(str(mat)) or market.get(mat)
        if meta is None:
            raise ValueError(f"market sidecar missing maturity_index {mat}")
        quotes.sort(key=lambda q: q.strike)
        slices.append(MarketSlice(
            maturity_index=mat,
            forward=float(meta["forward"]),
            discount=float(meta["discount"]),
            quotes=tuple(quotes),
            extra_support=tuple(meta.get("extra_support", ())),
        ))
    return slices
