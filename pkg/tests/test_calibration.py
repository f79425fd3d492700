import numpy as np
import pytest

from mcmot.calibration import (CalibrationInfeasible, MarketSlice, OptionQuote,
                               build_calibration_lp, calibrate,
                               feasibility_diagnosis, load_chain_csv, scale_quotes)
from mcmot.fixtures import synthetic_chain
from mcmot.marginals import check_convex_order


def quote(t, strike, bid, ask):
    return OptionQuote(t, strike, bid, ask)


def test_scale_quotes_arithmetic():
    slice_ = MarketSlice(1, forward=100.0, discount=0.99,
                         quotes=(quote(1, 100.0, 4.0, 5.0),))
    a, b, k = scale_quotes(slice_)
    assert a[0] == pytest.approx(5.0 / 99.0)       # 0.050505...
    assert b[0] == pytest.approx(4.0 / 99.0)
    assert k[0] == pytest.approx(1.0)              # strike at the forward


def test_scale_quotes_identity_when_unit():
    slice_ = MarketSlice(1, forward=1.0, discount=1.0,
                         quotes=(quote(1, 0.8, 0.1, 0.2),))
    a, b, k = scale_quotes(slice_)
    assert (a[0], b[0], k[0]) == (0.2, 0.1, 0.8)


def test_joint_variable_count():
    slices = [
        MarketSlice(1, 100.0, 1.0, tuple(quote(1, s, 1.0, 2.0) for s in (90.0, 100.0, 110.0))),
        MarketSlice(2, 100.0, 1.0, tuple(quote(2, s, 1.0, 2.0) for s in (80.0, 100.0, 120.0))),
    ]
    lp = build_calibration_lp(slices)
    assert lp.layout.num_joint == 9


def test_two_point_exact_quote():
    # measure {90: .5, 110: .5} has mean 100 and prices the 90-call at 0.1 scaled
    slice_ = MarketSlice(1, 100.0, 1.0, (quote(1, 90.0, 9.0, 11.0),
                                         quote(1, 110.0, 0.0, 0.5)))
    result = calibrate([slice_])
    assert result.objective == pytest.approx(result.spread_floor, abs=1e-9)
    assert result.all_quotes_feasible


def test_round_trip_recovery(rng):
    for spread in (0.01, 0.05):
        slices, joint, supports = synthetic_chain(rng, spread=spread)
        result = calibrate(slices)
        n_quotes = sum(len(s.quotes) for s in slices)
        assert result.objective == pytest.approx(2 * spread * n_quotes, abs=1e-7)
        assert result.spread_floor == pytest.approx(2 * spread * n_quotes, abs=1e-9)
        assert result.all_quotes_feasible
        for slice_, fitted in zip(slices, result.fitted_scaled_prices):
            a, b, _ = scale_quotes(slice_)
            assert np.all(fitted >= b - 1e-9)
            assert np.all(fitted <= a + 1e-9)
        ordered, worst = check_convex_order(result.marginals[0], result.marginals[1])
        assert ordered, worst


def test_marginals_have_unit_scaled_mean(rng):
    slices, _, _ = synthetic_chain(rng)
    result = calibrate(slices)
    for law in result.marginals:
        assert float(law.points @ law.masses) == pytest.approx(1.0, abs=1e-8)


def test_scaled_martingale_rows_hold(rng):
    slices, _, _ = synthetic_chain(rng)
    result = calibrate(slices)
    k1 = result.marginals[0].points
    k2 = result.marginals[1].points
    drift = ((k2[None, :] - k1[:, None]) * result.joint).sum(axis=1)
    assert np.abs(drift).max() <= 1e-8


def test_infeasible_quote_detected(rng):
    slices, _, _ = synthetic_chain(rng, spread=0.01)
    # push one ask below the scaled intrinsic floor (1 - k)+ at an ITM strike
    target = None
    for si, slice_ in enumerate(slices):
        for qi, q in enumerate(slice_.quotes):
            if q.strike / slice_.forward < 0.95:
                target = (si, qi)
                break
        if target:
            break
    assert target is not None, "chain lacks an ITM quote; reseed the test"
    si, qi = target
    slice_ = slices[si]
    q = slice_.quotes[qi]
    floor = (1.0 - q.strike / slice_.forward) * slice_.discount * slice_.forward
    bad = OptionQuote(q.maturity_index, q.strike, 0.25 * floor, 0.5 * floor)
    quotes = list(slice_.quotes)
    quotes[qi] = bad
    slices[si] = MarketSlice(slice_.maturity_index, slice_.forward, slice_.discount,
                             tuple(quotes), slice_.extra_support)
    result = calibrate(slices)
    assert not result.all_quotes_feasible
    assert result.objective > result.spread_floor + 1e-7
    diag = feasibility_diagnosis(result, slices)
    flagged = [d for d in diag["quotes"] if not d["feasible"]]
    assert any(d["strike"] == bad.strike and d["maturity_index"] == bad.maturity_index
               for d in flagged)


def test_diagnosis_decomposes_objective(rng):
    slices, _, _ = synthetic_chain(rng, spread=0.05)
    result = calibrate(slices)
    diag = feasibility_diagnosis(result, slices)
    total = sum(d["excess"] for d in diag["quotes"])
    assert diag["aggregate_excess"] == pytest.approx(total, abs=1e-7)
    assert diag["aggregate_excess"] == pytest.approx(0.0, abs=1e-7)


def test_point_mass_single_strike():
    slice_ = MarketSlice(1, 50.0, 1.0, (quote(1, 50.0, 0.0, 0.0),))
    result = calibrate([slice_])
    assert result.marginals[0].points[0] == pytest.approx(1.0)
    assert result.marginals[0].masses[0] == pytest.approx(1.0)
    assert result.all_quotes_feasible


def test_scale_invariance(rng):
    slices, _, _ = synthetic_chain(rng, spread=0.01)
    base = calibrate(slices)
    lam = 3.0
    scaled_first = MarketSlice(
        slices[0].maturity_index,
        slices[0].forward * lam,
        slices[0].discount,
        tuple(OptionQuote(q.maturity_index, q.strike * lam, q.bid * lam, q.ask * lam)
              for q in slices[0].quotes),
        tuple(s * lam for s in slices[0].extra_support),
    )
    rescaled = calibrate([scaled_first] + slices[1:])
    np.testing.assert_allclose(rescaled.joint, base.joint, atol=1e-9)


def test_no_measure_is_diagnosed():
    # forward far above every strike: the mean row cannot hold
    slice_ = MarketSlice(1, 200.0, 1.0, (quote(1, 90.0, 1.0, 2.0),
                                         quote(1, 110.0, 0.5, 1.0)))
    with pytest.raises(CalibrationInfeasible) as exc:
        calibrate([slice_])
    assert "mean" in exc.value.families


def test_quote_and_slice_validation():
    with pytest.raises(ValueError):
        OptionQuote(1, 100.0, 2.0, 1.0)       # bid above ask
    with pytest.raises(ValueError):
        OptionQuote(1, -5.0, 0.0, 1.0)
    with pytest.raises(ValueError):
        MarketSlice(1, 100.0, 1.0, (quote(1, 110.0, 0.0, 1.0), quote(1, 90.0, 0.0, 1.0)))
    with pytest.raises(ValueError):
        MarketSlice(1, -1.0, 1.0, ())
    with pytest.raises(ValueError):
        MarketSlice(1, 100.0, 1.5, ())
    with pytest.raises(ValueError):
        build_calibration_lp([MarketSlice(1, 100.0, 1.0, ())])


def test_chain_csv_loader(tmp_path, rng):
    slices, _, _ = synthetic_chain(rng, spread=0.01)
    chain = tmp_path / "chain.csv"
    lines = ["maturity_index,strike,bid,ask"]
    for s in slices:
        for q in s.quotes:
            lines.append(f"{q.maturity_index},{q.strike},{q.bid},{q.ask}")
    chain.write_text("\n".join(lines) + "\n")
    sidecar = tmp_path / "market.json"
    import json
    sidecar.write_text(json.dumps({
        str(s.maturity_index): {
            "forward": s.forward,
            "discount": s.discount,
            "extra_support": list(s.extra_support),
        } for s in slices
    }))
    loaded = load_chain_csv(str(chain), str(sidecar))
    assert len(loaded) == len(slices)
    result = calibrate(loaded)
    assert result.all_quotes_feasible
    doc = result.to_dict()
    assert doc["schema_version"] == "mcmot-calib-v1"


def test_chain_csv_bad_header(tmp_path):
    chain = tmp_path / "chain.csv"
    chain.write_text("maturity,strike,bid,ask\n1,100,1,2\n")
    sidecar = tmp_path / "market.json"
    sidecar.write_text("{}")
    with pytest.raises(ValueError):
        load_chain_csv(str(chain), str(sidecar))


def test_chain_csv_bad_row_reports_line(tmp_path):
    chain = tmp_path / "chain.csv"
    chain.write_text("maturity_index,strike,bid,ask\n1,100,2,1\n")
    sidecar = tmp_path / "market.json"
    sidecar.write_text('{"1": {"forward": 100, "discount": 1.0}}')
    with pytest.raises(ValueError, match=":2:"):
        load_chain_csv(str(chain), str(sidecar))
