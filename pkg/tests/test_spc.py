import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from costwatch.kpi import RatioSeries
from costwatch.spc import (
    DEFAULT_GRID,
    NullModelSpec,
    ThresholdSet,
    build_change_series,
    cusum_statistic,
    empirical_far,
    learn_thresholds,
    run_cusum,
)


def ratio(values, se=1.0):
    v = np.asarray(values, dtype=float)
    defined = np.isfinite(v)
    return RatioSeries("cost_per_enrollee", v, np.where(defined, se, np.nan), defined)


def hand_cusum(x, k):
    up, down, su, sd = [], [], 0.0, 0.0
    for xi in x:
        su = max(0.0, su + xi - k)
        sd = max(0.0, sd - xi - k)
        up.append(su)
        down.append(sd)
    return np.array(up), np.array(down)


finite_x = st.lists(st.floats(-8, 8, allow_nan=False), min_size=1, max_size=30)


class TestChangeSeries:
    def test_constant_series(self):
        ch = build_change_series(ratio([7.0] * 30), T=12)
        assert np.all(ch.c == 0) and np.all(ch.x == 0)
        assert len(ch.c) == 30 - 1 - 12

    def test_direct_evaluation(self):
        # t = 0..P with the change terms starting at t = T+1
        ch = build_change_series(ratio([10, 10, 10, 13]), T=1)
        assert np.allclose(ch.c, [0, 3])
        assert np.allclose(ch.se_c, np.sqrt(2))
        assert np.allclose(ch.x, [0, 3 / np.sqrt(2)])
        short = build_change_series(ratio([10, 10, 13]), T=1)
        assert np.allclose(short.c, [3]) and short.P == 2

    def test_censoring(self):
        ch = build_change_series(ratio([0, 0, 12, -20]), T=1, censor_cap=8)
        assert np.allclose(ch.x, [8, -8])
        assert np.all(np.abs(ch.x) <= ch.censor_cap)

    def test_undefined_periods_are_imputed(self):
        ch = build_change_series(ratio([1, 1, np.nan, 5, 2]), T=1)
        assert np.isnan(ch.c[0]) and np.isnan(ch.c[1])
        assert ch.x[0] == 0 and ch.x[1] == 0
        assert list(ch.imputed) == [True, True, False]

    def test_zero_se(self):
        ch = build_change_series(ratio([1, 1, 1, 2], se=0.0), T=1, censor_cap=5)
        assert list(ch.x) == [0.0, 5.0]

    def test_errors(self):
        with pytest.raises(ValueError, match="too short"):
            build_change_series(ratio([1, 2]), T=1)
        with pytest.raises(ValueError, match="undefined"):
            build_change_series(ratio([np.nan] * 5), T=1)
        with pytest.raises(ValueError):
            build_change_series(ratio([1, 2, 3]), T=1, censor_cap=0)

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.floats(-1e3, 1e3), min_size=4, max_size=40), st.floats(0.5, 20))
    def test_cap_bound(self, values, cap):
        ch = build_change_series(ratio(values, se=0.3), T=2, censor_cap=cap)
        assert np.all(np.abs(ch.x) <= cap)


class TestCusum:
    th = ThresholdSet.symmetric(4.0, 5.0, 7.0)

    def test_null_series(self):
        res = run_cusum(np.zeros(12), self.th)
        assert np.all(res.s_up == 0) and np.all(res.s_down == 0)
        assert res.direction == "none" and res.confidence == "N" and res.label == "↕N"

    def test_up_example(self):
        res = run_cusum([2, 2, 2], ThresholdSet.symmetric(4.0, 4.6, 6.0))
        assert np.allclose(res.s_up, [1.5, 3.0, 4.5])
        assert res.direction == "up" and res.confidence == "M" and res.label == "↑M"

    def test_down_example(self):
        res = run_cusum([-2, -2, -2, -2], ThresholdSet.symmetric(4.0, 5.0, 6.5))
        assert res.s_down[-1] == 6.0
        assert res.direction == "down" and res.confidence == "S" and res.label == "↓S"

    def test_end_of_window_vs_any_time(self):
        x = [3, 3, 3, -3, -3, -3, -3]
        th = ThresholdSet.symmetric(4.0, 5.0, 20.0)
        eow = run_cusum(x, th, reporting="end_of_window")
        assert eow.direction == "down"
        anyt = run_cusum(x, th, reporting="any_time")
        # up peaks at 7.5 early, down reaches 10 later
        assert anyt.direction == "mixed" and anyt.confidence == "S"
        assert anyt.flagged_at == 2

    def test_auto_reset_records_crossings(self):
        x = [4.0] * 8
        th = ThresholdSet.symmetric(2.0, 4.0, 6.0)
        res = run_cusum(x, th, mode="auto_reset", reporting="any_time")
        assert res.crossings == ((2, "up"), (4, "up"), (6, "up"), (8, "up"))
        non = run_cusum(x, th, mode="non_restarting")
        assert non.crossings == () and non.s_up[-1] == 28.0

    def test_change_series_input_carries_periods(self):
        ch = build_change_series(ratio(np.r_[np.zeros(13), np.full(12, 5.0)]), T=12)
        res = run_cusum(ch, self.th, reporting="any_time")
        assert res.kpi == "cost_per_enrollee"
        assert res.flagged_at == int(ch.periods[1])
        rows = res.trajectory_rows()
        assert len(rows) == 12 and rows[0][0] == 13

    def test_rejects_bad_input(self):
        with pytest.raises(ValueError):
            run_cusum([np.nan], self.th)
        with pytest.raises(ValueError):
            run_cusum([0.0], self.th, mode="sometimes")
        with pytest.raises(ValueError):
            run_cusum([0.0], self.th, reporting="never")

    @settings(max_examples=100, deadline=None)
    @given(finite_x, st.floats(0, 2))
    def test_matches_hand_recursion_and_is_non_negative(self, x, k):
        th = ThresholdSet.symmetric(4.0, 5.0, 7.0, drift_k=k)
        res = run_cusum(x, th)
        up, down = hand_cusum(x, k)
        assert np.array_equal(res.s_up, up) and np.array_equal(res.s_down, down)
        assert np.all(res.s_up >= 0) and np.all(res.s_down >= 0)
        assert (res.confidence == "N") == (res.s_up[-1] <= 4.0 and res.s_down[-1] <= 4.0)

    @settings(max_examples=100, deadline=None)
    @given(finite_x, st.floats(0, 3))
    def test_shift_equivariance(self, x, delta):
        base = run_cusum(x, self.th)
        shifted = run_cusum(np.asarray(x) + delta, self.th)
        assert np.all(shifted.s_up >= base.s_up - 1e-12)
        assert np.all(shifted.s_down <= base.s_down + 1e-12)

    @settings(max_examples=100, deadline=None)
    @given(st.lists(st.floats(-1.5, 1.5), min_size=1, max_size=6))
    def test_modes_agree_without_crossings(self, x):
        th = ThresholdSet.symmetric(10.0, 11.0, 12.0)
        a = run_cusum(x, th, mode="auto_reset")
        b = run_cusum(x, th, mode="non_restarting")
        assert np.array_equal(a.s_up, b.s_up) and np.array_equal(a.s_down, b.s_down)

    @settings(max_examples=50, deadline=None)
    @given(st.lists(finite_x, min_size=1, max_size=5).filter(lambda rows: len({len(r) for r in rows}) == 1))
    def test_vectorized_statistic_matches_scalar(self, rows):
        x = np.array(rows)
        for reporting in ("end_of_window", "any_time"):
            stat = cusum_statistic(x, 0.5, reporting)
            for row, s in zip(x, stat):
                up, down = hand_cusum(row, 0.5)
                expect = max(up[-1], down[-1]) if reporting == "end_of_window" else max(up.max(), down.max())
                assert s == pytest.approx(expect)


class TestThresholdSet:
    def test_invariants(self):
        with pytest.raises(ValueError):
            ThresholdSet.symmetric(3.0, 3.0, 4.0)
        with pytest.raises(ValueError):
            ThresholdSet.symmetric(1.0, 2.0, 3.0, target_far={"M": 0.05, "S": 0.05, "VS": 0.01})
        with pytest.raises(ValueError):
            ThresholdSet.symmetric(-1.0, 2.0, 3.0)
        with pytest.raises(ValueError):
            ThresholdSet(h={"M": (1, 1), "S": (2, 2)})

    def test_round_trip(self):
        th = ThresholdSet(h={"M": (1.0, 1.5), "S": (2.0, 2.5), "VS": (3.0, 3.5)}, drift_k=0.25)
        assert ThresholdSet.from_dict(th.to_dict()) == th
        assert th.up("S") == 2.0 and th.down("S") == 2.5


class TestNullModel:
    def test_white_noise_shape_and_determinism(self):
        m = NullModelSpec(series_length=12)
        a = m.simulate(np.random.default_rng(1), 5)
        b = m.simulate(np.random.default_rng(1), 5)
        assert a.shape == (5, 12) and np.array_equal(a, b)

    def test_arma_validation(self):
        with pytest.raises(ValueError):
            NullModelSpec(kind="arma", ar=(1.2,))
        with pytest.raises(ValueError):
            NullModelSpec(kind="arma", ma=(1.5,))
        with pytest.raises(ValueError):
            NullModelSpec(variance=0.0)
        with pytest.raises(ValueError):
            NullModelSpec(kind="garch")

    def test_ar1_autocorrelation(self):
        m = NullModelSpec(kind="arma", ar=(0.6,), series_length=400)
        x = m.simulate(np.random.default_rng(3), 50)
        r = np.mean([np.corrcoef(row[:-1], row[1:])[0, 1] for row in x])
        assert r == pytest.approx(0.6, abs=0.05)


class TestLearnThresholds:
    null = NullModelSpec(series_length=12)

    def test_degenerate_target_picks_smallest_grid_value(self):
        th = learn_thresholds(self.null, target_far={"M": 1.0, "S": 0.05, "VS": 0.01}, n_sims=1000, seed=1)
        assert th.up("M") == DEFAULT_GRID[0]

    def test_deterministic_given_seed(self):
        a = learn_thresholds(self.null, n_sims=2000, seed=9)
        b = learn_thresholds(self.null, n_sims=2000, seed=9)
        assert a == b
        assert a.up("M") < a.up("S") < a.up("VS")

    def test_unreachable_target_names_tier(self):
        with pytest.raises(ValueError, match="VS"):
            learn_thresholds(self.null, n_sims=1000, grid=np.arange(0, 3.5, 0.25), seed=0)

    def test_input_validation(self):
        with pytest.raises(ValueError):
            learn_thresholds(self.null, n_sims=10)
        with pytest.raises(ValueError):
            learn_thresholds(self.null, n_sims=1000, grid=[2.0, 1.0])

    def test_monotone_even_on_coarse_grid(self):
        th = learn_thresholds(self.null, n_sims=1000, grid=np.arange(0, 30, 5.0), seed=2)
        assert th.up("M") < th.up("S") < th.up("VS")

    def test_self_consistency_on_fresh_draw(self):
        th = learn_thresholds(self.null, n_sims=4000, seed=4)
        far = empirical_far(th, self.null, n_sims=4000, seed=12345)
        for tier, target in th.target_far.items():
            assert abs(far[tier] - target) <= 0.02
