"""Joint couplings on the full product support: projections, residuals, construction.

A coupling over two assets with N maturities is a dense mass tensor indexed
``(i_1..i_N, j_1..j_N)`` where ``i_t`` walks X's support at maturity t and
``j_t`` walks Y's. Axes 0..N-1 are the X block, axes N..2N-1 the Y block.

Conditional quantities are always cleared of denominators (multiplied through
by the history mass), so zero-mass histories impose no constraint and every
residual is a plain max over grid points.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .lp_backend import LinearProgram, SolverConfig, solve
from .marginals import MarginalLaw, MarginalSystem

COUPLING_SCHEMA = "mcmot-coupling-v1"

MASS_TOL = 1e-8

PROJECTION_KINDS = (
    "x_prefix", "x_full", "x_full_with_y", "x_prefix_with_y",
    "y_prefix", "y_full", "y_full_with_x", "y_prefix_with_x",
    "single_x", "single_y",
)

_NEEDS_T = {k for k in PROJECTION_KINDS if k not in ("x_full", "y_full")}


class ConvexOrderError(Exception):
    """No martingale law exists for the given marginals (convex order broken)."""


@dataclass(frozen=True)
class CouplingTensor:
    """Immutable joint mass tensor tied to the system that defines its grid."""

    system: MarginalSystem
    masses: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.masses, dtype=float)
        m.setflags(write=False)
        object.__setattr__(self, "masses", m)
        if m.shape != self.system.shape():
            raise ValueError(f"mass tensor shape {m.shape} does not match system "
                             f"shape {self.system.shape()}")
        if np.any(m < -MASS_TOL) or np.any(m > 1.0 + MASS_TOL):
            raise ValueError("coupling masses must lie in [0, 1]")
        if abs(m.sum() - 1.0) > MASS_TOL:
            raise ValueError(f"coupling masses sum to {m.sum()!r}, expected 1")

    @property
    def n_maturities(self) -> int:
        return self.system.n_maturities


@dataclass(frozen=True)
class ProjectionKey:
    """Names a marginalization of the full tensor.

    Kinds and their grids (t is 1-based where required):
      x_prefix(t)        -> (x_1..x_t)
      x_full             -> (x_1..x_N)
      x_full_with_y(t)   -> (x_1..x_N, y_t)
      x_prefix_with_y(t) -> (x_1..x_t, y_t)
      single_x(t)        -> (x_t,)
    and the x<->y mirrors.
    """

    kind: str
    t: Optional[int] = None

    def __post_init__(self):
        if self.kind not in PROJECTION_KINDS:
            raise ValueError(f"unknown projection kind {self.kind!r}")
        if self.kind in _NEEDS_T and self.t is None:
            raise ValueError(f"projection kind {self.kind!r} requires t")
        if self.kind not in _NEEDS_T and self.t is not None:
            raise ValueError(f"projection kind {self.kind!r} takes no t")

    def axes(self, n: int) -> tuple:
        """Kept axes of the 2N tensor, in the projected grid's canonical order."""
        if self.t is not None and not (1 <= self.t <= n):
            raise ValueError(f"t={self.t} out of range for N={n}")
        t = self.t
        x = tuple(range(n))
        y = tuple(range(n, 2 * n))
        table = {
            "x_prefix": lambda: x[:t],
            "x_full": lambda: x,
            "x_full_with_y": lambda: x + (y[t - 1],),
            "x_prefix_with_y": lambda: x[:t] + (y[t - 1],),
            "y_prefix": lambda: y[:t],
            "y_full": lambda: y,
            "y_full_with_x": lambda: y + (x[t - 1],),
            "y_prefix_with_x": lambda: y[:t] + (x[t - 1],),
            "single_x": lambda: (x[t - 1],),
            "single_y": lambda: (y[t - 1],),
        }
        return table[self.kind]()

    def label(self) -> str:
        return self.kind if self.t is None else f"{self.kind}[{self.t}]"


def project_masses(masses: np.ndarray, key: ProjectionKey, n: int) -> np.ndarray:
    """Sum out all axes not kept by the key; result axes follow the key's order."""
    keep = key.axes(n)
    drop = tuple(ax for ax in range(2 * n) if ax not in keep)
    out = masses.sum(axis=drop) if drop else masses
    # np.sum keeps surviving axes in tensor order; reorder to the key's order
    surviving = [ax for ax in range(2 * n) if ax in keep]
    order = [surviving.index(ax) for ax in keep]
    if order != sorted(order):
        out = np.transpose(out, order)
    return out


def project(coupling: CouplingTensor, key: ProjectionKey) -> np.ndarray:
    return project_masses(coupling.masses, key, coupling.n_maturities)


# ---------------- residuals ----------------

def _nonanticipativity_residual(masses: np.ndarray, n: int, t: int) -> float:
    """Max pointwise gap of pi(x_{1:N}, y_t) * pi(x_{1:t}) = pi(x_{1:t}, y_t) * pi(x_{1:N})."""
    if not (1 <= t <= n - 1):
        raise ValueError(f"t={t} out of range 1..{n - 1}")
    full_y = project_masses(masses, ProjectionKey("x_full_with_y", t), n)   # (*mx, n_t)
    prefix = project_masses(masses, ProjectionKey("x_prefix", t), n)        # mx[:t]
    prefix_y = project_masses(masses, ProjectionKey("x_prefix_with_y", t), n)
    full = project_masses(masses, ProjectionKey("x_full", t=None), n)       # mx
    tail = n - t
    pre_b = prefix.reshape(prefix.shape + (1,) * (tail + 1))
    pre_y_b = prefix_y.reshape(prefix.shape + (1,) * tail + prefix_y.shape[-1:])
    gap = full_y * pre_b - pre_y_b * full[..., None]
    return float(np.abs(gap).max())


def _swap_blocks(masses: np.ndarray, n: int) -> np.ndarray:
    return np.transpose(masses, tuple(range(n, 2 * n)) + tuple(range(n)))


def causality_residual(coupling: CouplingTensor, t: int) -> float:
    """0 iff Y's past is conditionally independent of X's future at step t, pointwise."""
    return _nonanticipativity_residual(coupling.masses, coupling.n_maturities, t)


def anticausality_residual(coupling: CouplingTensor, t: int) -> float:
    """Mirror of :func:`causality_residual` with the X and Y roles swapped."""
    n = coupling.n_maturities
    return _nonanticipativity_residual(_swap_blocks(coupling.masses, n), n, t)


def testfunction_causality_gap(coupling: CouplingTensor, t: int,
                               h: np.ndarray, g: np.ndarray) -> float:
    """Test-function characterization of the step-t causality constraint.

    ``h`` is a value table on the Y-prefix grid (y_1..y_t), ``g`` one on the
    full X grid. Returns sum over the full grid of
    ``h(y_{1:t}) * [g(x_{1:N}) - E[g | x_{1:t}]] * pi``, with the conditional
    expectation taken under the coupling's own X-path law and the bracket set
    to 0 on zero-mass histories. Zero for all (h, g) iff the plan is causal.
    """
    n = coupling.n_maturities
    masses = coupling.masses
    if not (1 <= t <= n):
        raise ValueError(f"t={t} out of range 1..{n}")
    h = np.asarray(h, dtype=float)
    g = np.asarray(g, dtype=float)
    if h.shape != masses.shape[n:n + t]:
        raise ValueError(f"h table shape {h.shape} does not match Y prefix grid")
    if g.shape != masses.shape[:n]:
        raise ValueError(f"g table shape {g.shape} does not match X full grid")

    x_law = project_masses(masses, ProjectionKey("x_full", t=None), n)
    tail_axes = tuple(range(t, n))
    prefix_mass = x_law.sum(axis=tail_axes) if tail_axes else x_law
    g_weighted = (g * x_law).sum(axis=tail_axes) if tail_axes else g * x_law
    with np.errstate(invalid="ignore", divide="ignore"):
        cond_mean = np.where(prefix_mass > 0.0, g_weighted / np.where(prefix_mass > 0, prefix_mass, 1.0), 0.0)

    bracket = g - cond_mean.reshape(cond_mean.shape + (1,) * (n - t))
    bracket = np.where((prefix_mass > 0.0).reshape(prefix_mass.shape + (1,) * (n - t)),
                       bracket, 0.0)
    h_b = h.reshape((1,) * n + h.shape + (1,) * (n - t))
    term = h_b * bracket.reshape(bracket.shape + (1,) * n) * masses
    return float(term.sum())


def martingale_residual(coupling: CouplingTensor) -> float:
    """Worst martingale violation under the joint filtration, denominator-free.

    For each step t and joint history (x_{1:t}, y_{1:t}) the quantity is
    ``|sum over tails of (x_{t+1} - x_t) * pi|`` and the Y analog; the max over
    all of them is returned.
    """
    return _mart_residual(coupling, joint=True)


def individual_martingale_residual(coupling: CouplingTensor) -> float:
    """Same as :func:`martingale_residual` but conditioning on own history only."""
    return _mart_residual(coupling, joint=False)


def _mart_residual(coupling: CouplingTensor, joint: bool) -> float:
    n = coupling.n_maturities
    masses = coupling.masses
    worst = 0.0
    for asset_axis0, laws in ((0, coupling.system.x_laws), (n, coupling.system.y_laws)):
        for t in range(n - 1):
            cur = laws[t].points
            nxt = laws[t + 1].points
            ax_cur = asset_axis0 + t
            ax_nxt = asset_axis0 + t + 1
            shape = [1] * (2 * n)
            shape[ax_cur] = cur.size
            w_cur = cur.reshape(shape)
            shape = [1] * (2 * n)
            shape[ax_nxt] = nxt.size
            w_nxt = nxt.reshape(shape)
            term = masses * (w_nxt - w_cur)
            if joint:
                keep = set(range(t + 1)) | set(range(n, n + t + 1))
            else:
                keep = set(range(asset_axis0, asset_axis0 + t + 1))
            drop = tuple(ax for ax in range(2 * n) if ax not in keep)
            resid = term.sum(axis=drop)
            worst = max(worst, float(np.abs(resid).max()))
    return worst


# ---------------- construction ----------------

def build_martingale_law(asset_laws: Sequence[MarginalLaw],
                         config: Optional[SolverConfig] = None) -> np.ndarray:
    """A joint law over one asset's path space with the given marginals and
    zero one-asset martingale residual, via an LP feasibility solve.

    Succeeds whenever the marginals are in convex order; infeasibility is
    surfaced as :class:`ConvexOrderError`.
    """
    laws = list(asset_laws)
    n = len(laws)
    if n == 1:
        return laws[0].masses.copy()
    shape = tuple(l.points.size for l in laws)
    nvar = int(np.prod(shape))
    idx = np.arange(nvar).reshape(shape)
    lp = LinearProgram(nvar)
    lp.set_bounds(np.arange(nvar), 0.0, 1.0)
    for t, law in enumerate(laws):
        for i in range(shape[t]):
            sel = [slice(None)] * n
            sel[t] = i
            lp.add_row(idx[tuple(sel)].ravel(), np.ones(idx[tuple(sel)].size), "=",
                       float(law.masses[i]))
    for t in range(n - 1):
        cur = laws[t].points
        nxt = laws[t + 1].points
        pre_shape = shape[:t + 1]
        for flat in range(int(np.prod(pre_shape))):
            multi = np.unravel_index(flat, pre_shape)
            sel = tuple(multi) + (slice(None),) * (n - t - 1)
            cols = idx[sel]
            coefs = np.broadcast_to(
                (nxt - cur[multi[t]]).reshape((-1,) + (1,) * (n - t - 2)), cols.shape)
            lp.add_row(cols.ravel(), coefs.ravel(), "=", 0.0)
    sol = solve(lp, config)
    if sol.status != "optimal":
        raise ConvexOrderError(
            f"no martingale law for these marginals (LP {sol.status}); "
            "convex order is violated")
    return sol.primal.reshape(shape)


def independent_martingale_coupling(system: MarginalSystem,
                                    config: Optional[SolverConfig] = None) -> CouplingTensor:
    """Product of per-asset martingale path laws; causality, anticausality and
    martingale residuals all vanish."""
    x_law = build_martingale_law(system.x_laws, config)
    y_law = build_martingale_law(system.y_laws, config)
    masses = np.multiply.outer(x_law, y_law)
    return CouplingTensor(system, masses)


# ---------------- serialization ----------------

def coupling_to_dict(coupling: CouplingTensor) -> dict:
    return {
        "schema_version": COUPLING_SCHEMA,
        "shape": list(coupling.masses.shape),
        "masses": coupling.masses.ravel().tolist(),
    }


def coupling_from_dict(doc: dict, system: MarginalSystem) -> CouplingTensor:
    if doc.get("schema_version") != COUPLING_SCHEMA:
        raise ValueError(
            f"expected schema_version {COUPLING_SCHEMA!r}, got {doc.get('schema_version')!r}")
    shape = tuple(doc["shape"])
    masses = np.asarray(doc["masses"], dtype=float).reshape(shape)
    return CouplingTensor(system, masses)
