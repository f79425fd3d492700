import numpy as np
import pytest

from mcmot.coupling import independent_martingale_coupling, martingale_residual
from mcmot.fixtures import random_martingale_system, random_table_payoff
from mcmot.lp_backend import duality_gap, solve
from mcmot.marginals import MarginalLaw, MarginalSystem, SupportGrid
from mcmot.mot import MotInstance, build_mot_lp, extract_dual_hedge, solve_mot
from mcmot.payoffs import PayoffSpec, tabulate


def law(points, masses, asset="X", t=1):
    return MarginalLaw(SupportGrid(asset, t, np.asarray(points, float)),
                       np.asarray(masses, float))


@pytest.fixture(scope="module")
def demo_bounds(demo, demo_cost):
    lo = solve_mot(MotInstance(demo, demo_cost, "min"))
    hi = solve_mot(MotInstance(demo, demo_cost, "max"))
    return lo, hi


def test_demo_bound_values(demo_bounds):
    lo, hi = demo_bounds
    # published two-decimal bounds for the demo instance
    assert lo.value == pytest.approx(20.93, abs=0.01)
    assert hi.value == pytest.approx(24.40, abs=0.01)


def test_demo_coupling_certificates(demo_bounds):
    for result in demo_bounds:
        assert martingale_residual(result.coupling) <= 1e-8
        assert result.residuals["martingale"] <= 1e-8


def test_demo_lp_dimensions(demo, demo_cost):
    lp = build_mot_lp(MotInstance(demo, demo_cost, "min"))
    assert lp.num_vars == 81                     # 3^4 grid points
    # 4 marginal families of 3 rows + 2 * 9 martingale rows
    assert lp.num_rows == 12 + 18


def test_demo_hedge_certificates(demo_bounds):
    lo, hi = demo_bounds
    assert lo.hedge.subhedge_slack >= -1e-7
    assert hi.hedge.subhedge_slack >= -1e-7
    assert lo.hedge.dual_value == pytest.approx(20.93, abs=0.01)
    # classical LP has no relaxation rows: dual value is carried by statics
    assert lo.hedge.capacity_value == pytest.approx(0.0, abs=1e-6)
    assert np.all(lo.hedge.envelope_adjustment == 0.0)
    assert lo.hedge.static_value == pytest.approx(lo.value, rel=1e-6)


def test_constant_payoff_pins_both_bounds(demo):
    payoff = PayoffSpec.from_table(np.full(demo.shape(), 7.0))
    lo = solve_mot(MotInstance(demo, payoff, "min")).value
    hi = solve_mot(MotInstance(demo, payoff, "max")).value
    assert lo == pytest.approx(7.0, abs=1e-9)
    assert hi == pytest.approx(7.0, abs=1e-9)


def test_point_mass_system_forced_value():
    system = MarginalSystem(
        (law([10.0], [1.0]), law([10.0], [1.0], t=2)),
        (law([20.0], [1.0], asset="Y"), law([20.0], [1.0], asset="Y", t=2)))
    payoff = PayoffSpec.max_squared_increment()
    result = solve_mot(MotInstance(system, payoff, "min"))
    assert result.value == pytest.approx(0.0, abs=1e-10)
    assert result.coupling.masses[0, 0, 0, 0] == pytest.approx(1.0)


def test_single_maturity_constant():
    system = MarginalSystem(
        (law([9.0, 11.0], [0.5, 0.5]),), (law([20.0, 21.0], [0.5, 0.5], asset="Y"),))
    payoff = PayoffSpec.from_table(np.full((2, 2), 4.25))
    for direction in ("min", "max"):
        assert solve_mot(MotInstance(system, payoff, direction)).value == pytest.approx(4.25)


def test_invalid_system_rejected(demo):
    bad_x2 = law([0.0, 10.0, 20.0], [0.075, 0.8, 0.125], t=2)
    system = MarginalSystem((demo.x_laws[0], bad_x2), demo.y_laws)
    with pytest.raises(ValueError):
        solve_mot(MotInstance(system, PayoffSpec.max_squared_increment(), "min"))


def test_sandwich_against_independent_coupling(rng):
    for _ in range(4):
        system = random_martingale_system(rng, 2, 3)
        payoff = random_table_payoff(rng, system)
        table = tabulate(payoff, system)
        independent = independent_martingale_coupling(system)
        expectation = float((independent.masses * table).sum())
        lo = solve_mot(MotInstance(system, payoff, "min")).value
        hi = solve_mot(MotInstance(system, payoff, "max")).value
        assert lo <= expectation + 1e-8
        assert expectation <= hi + 1e-8


def test_translation_equivariance(demo, rng):
    base = rng.random(demo.shape())
    kappa = 3.7
    lo0 = solve_mot(MotInstance(demo, PayoffSpec.from_table(base), "min")).value
    hi0 = solve_mot(MotInstance(demo, PayoffSpec.from_table(base), "max")).value
    lo1 = solve_mot(MotInstance(demo, PayoffSpec.from_table(base + kappa), "min")).value
    hi1 = solve_mot(MotInstance(demo, PayoffSpec.from_table(base + kappa), "max")).value
    assert lo1 == pytest.approx(lo0 + kappa, abs=1e-8)
    assert hi1 == pytest.approx(hi0 + kappa, abs=1e-8)


def test_monotone_in_payoff(demo, rng):
    base = rng.random(demo.shape())
    bump = base + rng.random(demo.shape())
    for direction in ("min", "max"):
        small = solve_mot(MotInstance(demo, PayoffSpec.from_table(base), direction)).value
        large = solve_mot(MotInstance(demo, PayoffSpec.from_table(bump), direction)).value
        assert large >= small - 1e-8


def test_dual_certificate_random_systems(rng):
    for _ in range(3):
        system = random_martingale_system(rng, 2, 3)
        payoff = random_table_payoff(rng, system)
        for direction in ("min", "max"):
            instance = MotInstance(system, payoff, direction)
            lp = build_mot_lp(instance)
            sol = solve(lp)
            assert duality_gap(sol, lp) <= 1e-6 * (1 + abs(sol.objective_value))
            hedge = extract_dual_hedge(lp, sol, instance)
            assert hedge.subhedge_slack >= -1e-7
            assert hedge.dual_value == pytest.approx(sol.objective_value,
                                                     rel=1e-6, abs=1e-6)


def test_degenerate_single_point_hedge_identity():
    system = MarginalSystem(
        (law([10.0], [1.0]),), (law([20.0], [1.0], asset="Y"),))
    payoff = PayoffSpec.from_table(np.array([[13.0]]))
    result = solve_mot(MotInstance(system, payoff, "min"))
    assert result.value == pytest.approx(13.0)
    assert result.hedge.dual_value == pytest.approx(13.0, rel=1e-6)


def test_bound_result_serialization(demo_bounds):
    doc = demo_bounds[0].to_dict()
    assert doc["value"] == pytest.approx(20.93, abs=0.01)
    assert "martingale" in doc["residuals"]
    statics = doc["hedge"]["static_legs"]["X"]
    assert len(statics) == 2 and len(statics[0]) == 3
    assert all("@" in key for key in statics[0])
