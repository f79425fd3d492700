import itertools

import numpy as np
import pytest

from mcmot.payoffs import (PayoffSpec, evaluate, payoff_from_dict, payoff_to_dict,
                           tabulate)


def test_max_squared_increment_example():
    payoff = PayoffSpec.max_squared_increment()
    assert evaluate(payoff, [10.0, 20.0], [20.0, 20.0]) == 100.0
    assert evaluate(payoff, [10.0, 10.0], [20.0, 26.0]) == 36.0


def test_basket_asian_call_boundaries():
    payoff = PayoffSpec.basket_asian_call(15.0)
    assert evaluate(payoff, [10.0, 20.0], [10.0, 20.0]) == 0.0   # at the money
    zero_strike = PayoffSpec.basket_asian_call(0.0)
    assert evaluate(zero_strike, [10.0, 20.0], [30.0, 40.0]) == pytest.approx(25.0)


def test_tabulate_demo_extremes(demo):
    table = tabulate(PayoffSpec.max_squared_increment(), demo)
    assert table.shape == demo.shape()
    # largest X move is 9 -> 20, beating the largest Y move squared (10^2)
    assert table.max() == pytest.approx(121.0)
    assert table[0, 2].max() == pytest.approx(121.0)


def test_tabulate_matches_evaluate_pointwise(demo):
    payoff = PayoffSpec.basket_asian_call(15.0)
    table = tabulate(payoff, demo)
    x1 = demo.x_laws[0].points
    x2 = demo.x_laws[1].points
    y1 = demo.y_laws[0].points
    y2 = demo.y_laws[1].points
    for i1, i2, j1, j2 in itertools.product(range(3), repeat=4):
        expected = evaluate(payoff, [x1[i1], x2[i2]], [y1[j1], y2[j2]])
        assert table[i1, i2, j1, j2] == pytest.approx(expected, abs=1e-12)


def test_table_kind_is_identity(demo, rng):
    values = rng.random(demo.shape())
    payoff = PayoffSpec.from_table(values)
    np.testing.assert_array_equal(tabulate(payoff, demo), values)


def test_constant_table(demo):
    payoff = PayoffSpec.from_table(np.full(demo.shape(), 3.5))
    assert np.all(tabulate(payoff, demo) == 3.5)


def test_basket_monotone_in_strike(demo):
    strikes = np.linspace(0.0, 30.0, 16)
    tables = [tabulate(PayoffSpec.basket_asian_call(k), demo) for k in strikes]
    for earlier, later in zip(tables, tables[1:]):
        assert np.all(later <= earlier + 1e-12)


def test_dimension_checks(demo):
    payoff = PayoffSpec.max_squared_increment()
    with pytest.raises(ValueError):
        evaluate(payoff, [1.0, 2.0, 3.0], [1.0, 2.0, 3.0])
    with pytest.raises(ValueError):
        tabulate(PayoffSpec.from_table(np.zeros((2, 2))), demo)
    with pytest.raises(ValueError):
        PayoffSpec.from_table(np.array([np.inf]))
    with pytest.raises(ValueError):
        PayoffSpec.basket_asian_call(-1.0)
    with pytest.raises(ValueError):
        PayoffSpec("digital")


def test_table_lookup_needs_indices():
    payoff = PayoffSpec.from_table(np.arange(16.0).reshape(2, 2, 2, 2))
    assert evaluate(payoff, [0, 0], [0, 0], indices=(1, 0, 1, 0)) == 10.0
    with pytest.raises(ValueError):
        evaluate(payoff, [0, 0], [0, 0])


def test_payoff_json_round_trip(rng):
    payoff = PayoffSpec.from_table(rng.random((2, 3, 2, 3)))
    doc = payoff_to_dict(payoff)
    assert doc["schema_version"] == "mcmot-payoff-v1"
    back = payoff_from_dict(doc)
    np.testing.assert_allclose(back.table, payoff.table)
    with pytest.raises(ValueError):
        payoff_to_dict(PayoffSpec.max_squared_increment())
