import numpy as np
import pytest

from mcmot.coupling import (CouplingTensor, ProjectionKey, causality_residual,
                            independent_martingale_coupling, project)
from mcmot.fixtures import random_martingale_system, random_table_payoff
from mcmot.marginals import MarginalLaw, MarginalSystem, SupportGrid
from mcmot.mccormick import (CapacityBounds, McCormickInstance, bounds_from_dict,
                             bounds_to_dict, build_mccormick_lp, default_bounds,
                             envelope_gap, family_keys, load_bounds, save_bounds,
                             solve_mccormick)
from mcmot.mot import MotInstance, solve_mot
from mcmot.payoffs import PayoffSpec


def law(points, masses, asset="X", t=1):
    return MarginalLaw(SupportGrid(asset, t, np.asarray(points, float)),
                       np.asarray(masses, float))


@pytest.fixture(scope="module")
def demo_mc(demo, demo_cost):
    bounds = default_bounds(demo)
    lo = solve_mccormick(McCormickInstance(demo, demo_cost, bounds, "min"))
    hi = solve_mccormick(McCormickInstance(demo, demo_cost, bounds, "max"))
    return bounds, lo, hi


def test_default_bounds_min_rule(demo):
    bounds = default_bounds(demo)
    # upper at (x1=9, x2=0, y1=16) is min{0.2, 0.1, 0.3}
    key = ProjectionKey("x_full_with_y", 1)
    assert bounds.upper(key)[0, 0, 0] == pytest.approx(0.1)
    for fam in family_keys(demo.n_maturities):
        assert np.all(bounds.lower(fam) == 0.0)


def test_default_bounds_point_masses():
    system = MarginalSystem(
        (law([10.0], [1.0]), law([10.0], [1.0], t=2)),
        (law([20.0], [1.0], asset="Y"), law([20.0], [1.0], asset="Y", t=2)))
    bounds = default_bounds(system)
    for fam in family_keys(2):
        assert np.all(bounds.upper(fam) == 1.0)


def test_w_variable_counts(demo, demo_cost):
    lp = build_mccormick_lp(McCormickInstance(demo, demo_cost, default_bounds(demo), "min"))
    layout = lp.layout
    assert int(np.prod(layout.w_vars[("causality", 1)][1])) == 27
    assert int(np.prod(layout.w_vars[("anticausality", 1)][1])) == 27
    assert layout.envelope_rows[("causality", 1)][1] == 8 * 27


def test_demo_relaxed_bounds(demo_mc):
    _, lo, hi = demo_mc
    assert lo.value == pytest.approx(21.50, abs=0.01)
    assert hi.value == pytest.approx(24.40, abs=0.01)


def test_relaxed_optimizer_keeps_marginals(demo, demo_mc):
    _, lo, _ = demo_mc
    np.testing.assert_allclose(
        project(lo.coupling, ProjectionKey("single_x", 2)),
        demo.x_laws[1].masses, atol=1e-8)


def test_relaxed_optimizer_not_bicausal(demo_mc):
    # the relaxation pays for its tightening: its optimizer may keep a
    # positive nonanticipativity residual
    _, lo, _ = demo_mc
    assert causality_residual(lo.coupling, 1) > 1e-4


def test_hedge_includes_envelope_adjustment(demo_mc):
    _, lo, hi = demo_mc
    for result in (lo, hi):
        assert result.hedge.subhedge_slack >= -1e-7
        assert result.hedge.static_value + result.hedge.capacity_value == pytest.approx(
            result.value, rel=1e-6, abs=1e-6)
    assert np.any(lo.hedge.envelope_adjustment != 0.0)


def test_constant_payoff(demo):
    payoff = PayoffSpec.from_table(np.full(demo.shape(), 5.5))
    bounds = default_bounds(demo)
    lo = solve_mccormick(McCormickInstance(demo, payoff, bounds, "min")).value
    hi = solve_mccormick(McCormickInstance(demo, payoff, bounds, "max")).value
    assert lo == pytest.approx(5.5, abs=1e-9)
    assert hi == pytest.approx(5.5, abs=1e-9)


def test_vacuous_bounds_keep_instance_feasible(demo, demo_cost):
    tables = {key: (np.zeros(tab[0].shape), np.ones(tab[0].shape))
              for key, tab in default_bounds(demo).tables.items()}
    vacuous = CapacityBounds(tables)
    lo_mot = solve_mot(MotInstance(demo, demo_cost, "min")).value
    hi_mot = solve_mot(MotInstance(demo, demo_cost, "max")).value
    lo = solve_mccormick(McCormickInstance(demo, demo_cost, vacuous, "min")).value
    hi = solve_mccormick(McCormickInstance(demo, demo_cost, vacuous, "max")).value
    assert lo_mot - 1e-7 <= lo <= hi <= hi_mot + 1e-7


def test_point_mass_system_stays_feasible():
    system = MarginalSystem(
        (law([10.0], [1.0]), law([10.0], [1.0], t=2)),
        (law([20.0], [1.0], asset="Y"), law([20.0], [1.0], asset="Y", t=2)))
    result = solve_mccormick(McCormickInstance(
        system, PayoffSpec.max_squared_increment(), default_bounds(system), "min"))
    assert result.value == pytest.approx(0.0, abs=1e-10)


def test_relaxation_sandwich_random(rng):
    for _ in range(4):
        system = random_martingale_system(rng, 2, 3)
        payoff = random_table_payoff(rng, system)
        lo_mot = solve_mot(MotInstance(system, payoff, "min")).value
        hi_mot = solve_mot(MotInstance(system, payoff, "max")).value
        bounds = default_bounds(system)
        lo = solve_mccormick(McCormickInstance(system, payoff, bounds, "min")).value
        hi = solve_mccormick(McCormickInstance(system, payoff, bounds, "max")).value
        assert lo_mot - 1e-7 <= lo <= hi + 1e-9 <= hi_mot + 1e-7


def test_tighter_bounds_tighten_values(demo, demo_cost):
    base = default_bounds(demo)
    witness = independent_martingale_coupling(demo)
    tables = {}
    for key in base.keys():
        proj = project(witness, key)
        upper = np.minimum(base.upper(key), proj + 0.02)
        tables[key] = (base.lower(key).copy(), upper)
    tighter = CapacityBounds(tables)
    lo0 = solve_mccormick(McCormickInstance(demo, demo_cost, base, "min")).value
    hi0 = solve_mccormick(McCormickInstance(demo, demo_cost, base, "max")).value
    lo1 = solve_mccormick(McCormickInstance(demo, demo_cost, tighter, "min")).value
    hi1 = solve_mccormick(McCormickInstance(demo, demo_cost, tighter, "max")).value
    assert lo1 >= lo0 - 1e-7
    assert hi1 <= hi0 + 1e-7


def test_envelope_gap_nonnegative_on_feasible(demo, demo_mc):
    bounds, lo, _ = demo_mc
    for side, grid in ((("causality"), (3, 3, 3)), (("anticausality"), (3, 3, 3))):
        for point in np.ndindex(grid):
            assert envelope_gap(lo.coupling, bounds, 1, point, side) >= -1e-9


def test_envelope_gap_zero_at_pinned_point(demo):
    coupling = independent_martingale_coupling(demo)
    base = default_bounds(demo)
    point = (0, 0, 0)
    x_full = ProjectionKey("x_full")
    value = float(project(coupling, x_full)[point[:2]])
    pinned = base.replace_entry(x_full, point[:2], value, value)
    assert envelope_gap(coupling, pinned, 1, point) == pytest.approx(0.0, abs=1e-12)


def test_independent_coupling_within_default_bounds(demo):
    coupling = independent_martingale_coupling(demo)
    bounds = default_bounds(demo)
    for key in bounds.keys():
        proj = project(coupling, key)
        assert np.all(proj <= bounds.upper(key) + 1e-9)
        assert np.all(proj >= bounds.lower(key) - 1e-9)


def test_capacity_bounds_validation(demo):
    base = default_bounds(demo)
    key = ProjectionKey("x_full")
    bad = {k: tab for k, tab in base.tables.items()}
    bad[key] = (np.full(bad[key][0].shape, 0.5), np.full(bad[key][0].shape, 0.4))
    with pytest.raises(ValueError):
        CapacityBounds(bad)
    incomplete = dict(base.tables)
    del incomplete[key]
    with pytest.raises(ValueError):
        McCormickInstance(demo, PayoffSpec.max_squared_increment(),
                          CapacityBounds(incomplete), "min")


def test_bounds_serialization_round_trip(demo, tmp_path):
    bounds = default_bounds(demo)
    doc = bounds_to_dict(bounds)
    assert doc["schema_version"] == "mcmot-bounds-v1"
    back = bounds_from_dict(doc)
    for key in bounds.keys():
        np.testing.assert_allclose(back.upper(key), bounds.upper(key))
        np.testing.assert_allclose(back.lower(key), bounds.lower(key))
    path = tmp_path / "bounds.json"
    save_bounds(bounds, str(path))
    loaded = load_bounds(str(path))
    key = ProjectionKey("x_full_with_y", 1)
    np.testing.assert_allclose(loaded.upper(key), bounds.upper(key))
