"""Bundled demo instance and seeded random generators used by tests and docs."""

from __future__ import annotations

from importlib import resources

import numpy as np

from .calibration import MarketSlice, OptionQuote
from .marginals import MarginalLaw, MarginalSystem, SupportGrid
from .payoffs import PayoffSpec

DEMO_MARGINALS_RESOURCE = "demo_marginals.json"


def _law(asset, t, points, masses):
    return MarginalLaw(SupportGrid(asset, t, np.asarray(points, dtype=float)),
                       np.asarray(masses, dtype=float))


def demo_system() -> MarginalSystem:
    """Two stocks (spot 10 and 20), two maturities, three prices each.

    The packaged copy lives at ``mcmot/data/demo_marginals.json``; the classical
    bounds for :func:`demo_payoff` on this system are [20.93, 24.40], the
    envelope-relaxed bounds [21.50, 24.40] and the exact bicausal bounds
    [21.64, 24.40] (two decimals).
    """
    return MarginalSystem(
        x_laws=(
            _law("X", 1, [9.0, 10.0, 11.0], [0.2, 0.6, 0.2]),
            _law("X", 2, [0.0, 10.0, 20.0], [0.1, 0.8, 0.1]),
        ),
        y_laws=(
            _law("Y", 1, [16.0, 20.0, 24.0], [0.3, 0.4, 0.3]),
            _law("Y", 2, [14.0, 20.0, 26.0], [0.2, 0.6, 0.2]),
        ),
    )


def demo_payoff() -> PayoffSpec:
    return PayoffSpec.max_squared_increment()


def demo_marginals_path() -> str:
    """Filesystem path of the packaged demo marginals JSON."""
    return str(resources.files("mcmot").joinpath("data", DEMO_MARGINALS_RESOURCE))


# ---------------- random instances ----------------

def _random_martingale_kernel(rng, x_points, y_points, mixes: int = 3) -> np.ndarray:
    """Row-stochastic kernel with row means equal to x_points, built by mixing
    straddling two-point transitions (exact means by construction)."""
    k = np.zeros((len(x_points), len(y_points)))
    for i, x in enumerate(x_points):
        split = np.searchsorted(y_points, x)
        for _ in range(mixes):
            lo = int(rng.integers(0, max(split, 1)))
            hi = int(rng.integers(min(split, len(y_points) - 1), len(y_points)))
            a, b = y_points[lo], y_points[hi]
            if b - a < 1e-12:
                k[i, lo] += 1.0
                continue
            w = (b - x) / (b - a)
            k[i, lo] += w
            k[i, hi] += 1.0 - w
        k[i] /= k[i].sum()
    return k


def _random_marginal_pair(rng, asset, n_early, n_late, lo, hi):
    late_pts = np.sort(rng.uniform(lo, hi, n_late))
    while np.unique(late_pts).size < n_late or np.min(np.diff(late_pts)) < 1e-3:
        late_pts = np.sort(rng.uniform(lo, hi, n_late))
    span = late_pts[-1] - late_pts[0]
    early_pts = np.sort(rng.uniform(late_pts[0] + 0.05 * span,
                                    late_pts[-1] - 0.05 * span, n_early))
    while np.unique(early_pts).size < n_early or (
            n_early > 1 and np.min(np.diff(early_pts)) < 1e-3):
        early_pts = np.sort(rng.uniform(late_pts[0] + 0.05 * span,
                                        late_pts[-1] - 0.05 * span, n_early))
    early_masses = rng.dirichlet(np.ones(n_early) * 2.0)
    kernel = _random_martingale_kernel(rng, early_pts, late_pts)
    late_masses = early_masses @ kernel
    return (
        _law(asset, 1, early_pts, early_masses),
        _law(asset, 2, late_pts, late_masses),
    )


def random_martingale_system(rng, min_points: int = 2, max_points: int = 4) -> MarginalSystem:
    """Two-maturity system with convex order enforced by construction."""
    sizes = rng.integers(min_points, max_points + 1, size=4)
    x_laws = _random_marginal_pair(rng, "X", sizes[0], sizes[1], 5.0, 15.0)
    y_laws = _random_marginal_pair(rng, "Y", sizes[2], sizes[3], 15.0, 25.0)
    return MarginalSystem(x_laws, y_laws)


def random_table_payoff(rng, system: MarginalSystem, scale: float = 10.0) -> PayoffSpec:
    return PayoffSpec.from_table(rng.uniform(0.0, scale, size=system.shape()))


def synthetic_chain(rng, n_strikes_range=(3, 6), spread: float = 0.01,
                    forward_range=(40.0, 60.0)) -> tuple:
    """Two-maturity option chain generated from a known discrete martingale
    measure on the strike grids, with symmetric scaled spreads.

    Strikes whose fair scaled price is too close to the spread to keep the bid
    nonnegative are passed through as extra support points instead of quotes,
    so the quoted floor is exactly (number of quotes) * 2 * spread. Returns
    (slices, joint measure, supports).
    """
    forward = float(rng.uniform(*forward_range))
    while True:
        n1 = int(rng.integers(*n_strikes_range, endpoint=True))
        n2 = int(rng.integers(*n_strikes_range, endpoint=True))
        s2 = np.sort(rng.uniform(0.6 * forward, 1.4 * forward, n2))
        if np.unique(s2).size < n2 or np.min(np.diff(s2)) < 1e-3 * forward:
            continue
        span = s2[-1] - s2[0]
        s1 = np.sort(rng.uniform(s2[0] + 0.05 * span, s2[-1] - 0.05 * span, n1))
        if np.unique(s1).size < n1 or (n1 > 1 and np.min(np.diff(s1)) < 1e-3 * forward):
            continue
        mu1 = rng.dirichlet(np.ones(n1) * 2.0)
        # shift supports so the measure's mean equals the forward at both dates
        drift = forward - float(mu1 @ s1)
        s1 = s1 + drift
        s2 = s2 + drift
        if s1.min() <= 0 or s2.min() <= 0:
            continue
        kernel = _random_martingale_kernel(rng, s1, s2)
        joint = mu1[:, None] * kernel
        mu2 = joint.sum(axis=0)

        slices = []
        ok = True
        for t, (pts, masses) in enumerate(((s1, mu1), (s2, mu2)), start=1):
            discount = float(rng.uniform(0.95, 1.0))
            scaled_pts = pts / forward
            quotes, extra = [], []
            for i, strike in enumerate(pts):
                fair = float(np.maximum(scaled_pts - strike / forward, 0.0) @ masses)
                if fair >= spread + 0.005:
                    df = discount * forward
                    quotes.append(OptionQuote(t, float(strike),
                                              (fair - spread) * df, (fair + spread) * df))
                else:
                    extra.append(float(strike))
            if not quotes:
                ok = False
                break
            slices.append(MarketSlice(t, forward, discount, tuple(quotes), tuple(extra)))
        if ok:
            return slices, joint, (s1, s2)
