"""Exotic payoff catalog: two built-in two-period payoffs plus user value tables."""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .marginals import MarginalSystem

PAYOFF_SCHEMA = "mcmot-payoff-v1"

KINDS = ("basket_asian_call", "max_squared_increment", "table")


@dataclass(frozen=True)
class PayoffSpec:
    kind: str
    strike: Optional[float] = None
    table: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown payoff kind {self.kind!r}")
        if self.kind == "basket_asian_call":
            if self.strike is None or self.strike < 0:
                raise ValueError("basket_asian_call needs a strike >= 0")
        if self.kind == "table":
            if self.table is None:
                raise ValueError("table payoff needs a value tensor")
            tab = np.asarray(self.table, dtype=float)
            tab.setflags(write=False)
            object.__setattr__(self, "table", tab)
            if not np.all(np.isfinite(tab)):
                raise ValueError("table payoff has non-finite values")

    @staticmethod
    def basket_asian_call(strike: float) -> "PayoffSpec":
        return PayoffSpec("basket_asian_call", strike=strike)

    @staticmethod
    def max_squared_increment() -> "PayoffSpec":
        return PayoffSpec("max_squared_increment")

    @staticmethod
    def from_table(values) -> "PayoffSpec":
        return PayoffSpec("table", table=np.asarray(values, dtype=float))

    def describe(self) -> str:
        if self.kind == "basket_asian_call":
            return f"basket_asian_call(strike={self.strike})"
        if self.kind == "table":
            return f"table(shape={self.table.shape})"
        return self.kind


def evaluate(payoff: PayoffSpec, x_path: Sequence[float], y_path: Sequence[float],
             indices: Optional[tuple] = None) -> float:
    """Payoff value on one price path pair.

    The built-in kinds are defined for two maturities. Table payoffs look up
    by grid indices, which must then be supplied.
    """
    x = np.asarray(x_path, dtype=float)
    y = np.asarray(y_path, dtype=float)
    if payoff.kind == "table":
        if indices is None:
            raise ValueError("table payoff lookup needs grid indices")
        return float(payoff.table[tuple(indices)])
    if x.size != 2 or y.size != 2:
        raise ValueError(f"{payoff.kind} is defined for exactly 2 maturities")
    if payoff.kind == "basket_asian_call":
        return float(max((x[0] + x[1] + y[0] + y[1]) / 4.0 - payoff.strike, 0.0))
    return float(max((x[1] - x[0]) ** 2, (y[1] - y[0]) ** 2))


def tabulate(payoff: PayoffSpec, system: MarginalSystem) -> np.ndarray:
    """Payoff values on the full product grid, aligned with coupling indexing."""
    shape = system.shape()
    n = system.n_maturities
    if payoff.kind == "table":
        tab = np.asarray(payoff.table, dtype=float)
        if tab.shape != shape:
            raise ValueError(f"table shape {tab.shape} does not match grid {shape}")
        return tab.copy()
    if n != 2:
        raise ValueError(f"{payoff.kind} is defined for exactly 2 maturities")
    x1 = system.x_laws[0].points
    x2 = system.x_laws[1].points
    y1 = system.y_laws[0].points
    y2 = system.y_laws[1].points
    if payoff.kind == "basket_asian_call":
        avg = (x1[:, None, None, None] + x2[None, :, None, None]
               + y1[None, None, :, None] + y2[None, None, None, :]) / 4.0
        values = np.maximum(avg - payoff.strike, 0.0)
    else:
        dx2 = np.square(x2[None, :] - x1[:, None])[:, :, None, None]
        dy2 = np.square(y2[None, :] - y1[:, None])[None, None, :, :]
        values = np.maximum(dx2, dy2)
    if not np.all(np.isfinite(values)):
        raise ValueError("payoff produced non-finite values on the grid")
    return values


def payoff_to_dict(payoff: PayoffSpec) -> dict:
    if payoff.kind != "table":
        raise ValueError("only table payoffs serialize to the table schema")
    return {
        "schema_version": PAYOFF_SCHEMA,
        "shape": list(payoff.table.shape),
        "values": payoff.table.ravel().tolist(),
    }


def payoff_from_dict(doc: dict) -> PayoffSpec:
    if doc.get("schema_version") != PAYOFF_SCHEMA:
        raise ValueError(
            f"expected schema_version {PAYOFF_SCHEMA!r}, got {doc.get('schema_version')!r}")
    values = np.asarray(doc["values"], dtype=float).reshape(tuple(doc["shape"]))
    return PayoffSpec.from_table(values)


def load_payoff_table(path: str) -> PayoffSpec:
    with open(path) as fh:
        return payoff_from_dict(json.load(fh))


def save_payoff_table(payoff: PayoffSpec, path: str) -> None:
    with open(path, "w") as fh:
        json.dump(payoff_to_dict(payoff), fh, indent=2)
