"""Discrete per-asset, per-maturity risk-neutral marginals and their feasibility checks.

A coupled martingale model for two assets exists exactly when, for each asset,
the marginals across maturities share the same mean and increase in convex
order. Those are the checks this module provides; everything downstream assumes
a system that passes :func:`validate_system`.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

MARGINALS_SCHEMA = "mcmot-marginals-v1"

MASS_TOL = 1e-10


@dataclass(frozen=True)
class SupportGrid:
    """Price levels of one asset at one maturity; strictly increasing, finite, >= 0."""

    asset_id: str
    maturity_index: int       # 1-based
    points: np.ndarray

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=float)
        pts.setflags(write=False)
        object.__setattr__(self, "points", pts)
        if pts.ndim != 1 or pts.size < 1:
            raise ValueError("support grid needs at least one point")
        if not np.all(np.isfinite(pts)) or np.any(pts < 0):
            raise ValueError("support points must be finite and nonnegative")
        if pts.size > 1 and np.any(np.diff(pts) <= 0):
            raise ValueError("support points must be strictly increasing")
        if self.maturity_index < 1:
            raise ValueError("maturity_index is 1-based")

    @property
    def size(self) -> int:
        return self.points.size


@dataclass(frozen=True)
class MarginalLaw:
    """A discrete distribution on a support grid. Zero-mass points are retained."""

    grid: SupportGrid
    masses: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.masses, dtype=float)
        m.setflags(write=False)
        object.__setattr__(self, "masses", m)
        if m.shape != self.grid.points.shape:
            raise ValueError("masses must align with the support grid")
        if np.any(m < -MASS_TOL) or np.any(m > 1.0 + MASS_TOL):
            raise ValueError("masses must lie in [0, 1]")
        if abs(m.sum() - 1.0) > MASS_TOL:
            raise ValueError(f"masses sum to {m.sum()!r}, expected 1 within {MASS_TOL}")

    @property
    def points(self) -> np.ndarray:
        return self.grid.points


@dataclass(frozen=True)
class MarginalSystem:
    """Two assets (X, Y), each with one marginal per maturity in time order.

    Construction checks structure only; the feasibility conditions (equal
    means, convex order) are reported by :func:`validate_system` so that
    deliberately broken systems can be built and diagnosed.
    """

    x_laws: tuple
    y_laws: tuple

    def __post_init__(self):
        object.__setattr__(self, "x_laws", tuple(self.x_laws))
        object.__setattr__(self, "y_laws", tuple(self.y_laws))
        if len(self.x_laws) != len(self.y_laws) or not self.x_laws:
            raise ValueError("both assets need the same positive number of maturities")

    @property
    def n_maturities(self) -> int:
        return len(self.x_laws)

    def laws(self, asset: str) -> tuple:
        if asset == "X":
            return self.x_laws
        if asset == "Y":
            return self.y_laws
        raise KeyError(f"unknown asset {asset!r}")

    def shape(self) -> tuple:
        """Full product-grid extents: X supports then Y supports."""
        return tuple(l.points.size for l in self.x_laws) + \
            tuple(l.points.size for l in self.y_laws)


@dataclass
class ValidationConfig:
    mean_tol: float = 1e-8     # absolute, prices normalized to O(10-100)
    call_tol: float = 1e-10    # slack allowed in call-value comparisons


@dataclass
class PairVerdict:
    asset: str
    earlier_maturity: int
    later_maturity: int
    mean_gap: float
    ordered: bool
    worst_violation: float


@dataclass
class ValidationReport:
    entries: list = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(e.ordered for e in self.entries)

    def to_dict(self) -> dict:
        return {
            "passed": self.passed,
            "pairs": [
                {
                    "asset": e.asset,
                    "earlier_maturity": e.earlier_maturity,
                    "later_maturity": e.later_maturity,
                    "mean_gap": e.mean_gap,
                    "ordered": e.ordered,
                    "worst_violation": e.worst_violation,
                }
                for e in self.entries
            ],
        }


def mean(law: MarginalLaw) -> float:
    return float(law.points @ law.masses)


def call_value(law: MarginalLaw, strike: float) -> float:
    """E[(S - strike)^+] under the law."""
    return float(np.maximum(law.points - strike, 0.0) @ law.masses)


def check_convex_order(earlier: MarginalLaw, later: MarginalLaw,
                       config: Optional[ValidationConfig] = None) -> tuple[bool, float]:
    """Is ``earlier`` dominated by ``later`` in convex order?

    For discrete laws with equal means it is necessary and sufficient that call
    values are nondecreasing at every strike in the union of the two supports
    (discrete call functions are piecewise linear with kinks exactly there).
    Returns (ordered, worst positive call-value excess).
    """
    config = config or ValidationConfig()
    mean_gap = abs(mean(earlier) - mean(later))
    strikes = np.union1d(earlier.points, later.points)
    early_calls = np.maximum(earlier.points[None, :] - strikes[:, None], 0.0) @ earlier.masses
    late_calls = np.maximum(later.points[None, :] - strikes[:, None], 0.0) @ later.masses
    worst = float(np.max(early_calls - late_calls, initial=0.0))
    ordered = mean_gap <= config.mean_tol and worst <= config.call_tol
    return ordered, max(worst, 0.0)


def validate_system(system: MarginalSystem,
                    config: Optional[ValidationConfig] = None) -> ValidationReport:
    """Mean gap and convex-order verdict per asset and consecutive maturity pair."""
    config = config or ValidationConfig()
    report = ValidationReport()
    for asset in ("X", "Y"):
        laws = system.laws(asset)
        for t in range(len(laws) - 1):
            ordered, worst = check_convex_order(laws[t], laws[t + 1], config)
            report.entries.append(PairVerdict(
                asset=asset,
                earlier_maturity=t + 1,
                later_maturity=t + 2,
                mean_gap=abs(mean(laws[t]) - mean(laws[t + 1])),
                ordered=ordered,
                worst_violation=worst,
            ))
    return report


# ---------------- serialization ----------------

def system_to_dict(system: MarginalSystem) -> dict:
    def laws_out(laws):
        return [{"points": l.points.tolist(), "masses": l.masses.tolist()} for l in laws]

    return {
        "schema_version": MARGINALS_SCHEMA,
        "assets": {"X": laws_out(system.x_laws), "Y": laws_out(system.y_laws)},
    }


def system_from_dict(doc: dict) -> MarginalSystem:
    if doc.get("schema_version") != MARGINALS_SCHEMA:
        raise ValueError(
            f"expected schema_version {MARGINALS_SCHEMA!r}, got {doc.get('schema_version')!r}")
    try:
        assets = doc["assets"]
        laws = {}
        for asset in ("X", "Y"):
            laws[asset] = tuple(
                MarginalLaw(SupportGrid(asset, t + 1, np.asarray(entry["points"], dtype=float)),
                            np.asarray(entry["masses"], dtype=float))
                for t, entry in enumerate(assets[asset]))
    except KeyError as exc:
        raise ValueError(f"marginals document missing field {exc}") from exc
    return MarginalSystem(laws["X"], laws["Y"])


def save_system(system: MarginalSystem, path: str) -> None:
    with open(path, "w") as fh:
        json.dump(system_to_dict(system), fh, indent=2)


def load_system(path: str) -> MarginalSystem:
    with open(path) as fh:
        return system_from_dict(json.load(fh))
