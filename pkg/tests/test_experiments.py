import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

import allocator.experiments as ex
from allocator.closed_form_policy import evolve_wealth_batch
from allocator.market_model import CALIBRATED_PARAMS, heston_recursion
from allocator.utility import UtilitySpec

P = CALIBRATED_PARAMS
positive_paths = st.lists(st.floats(0.01, 1e4), min_size=3, max_size=60)


def md_brute(X):
    """Literal running-extrema formula."""
    best = 0.0
    for n in range(len(X)):
        best = max(best, 1 - min(X[:n + 1]) / max(X[:n + 1]))
    return best


def peak_brute(X):
    best, peak = 0.0, X[0]
    for x in X:
        peak = max(peak, x)
        best = max(best, 1 - x / peak)
    return best


class TestPerformanceStats:
    def test_risk_free_growth(self):
        r, dt = 0.03, 1 / 252
        X = 2.0 * np.exp(r * dt * np.arange(253))
        s = ex.performance_stats(X, dt, r)
        assert abs(s.mean) < 1e-10 and s.sd == 0.0 and s.sharpe is None
        assert s.peak_drawdown == 0.0
        # extrema from inception: the starting value is the global minimum
        assert s.max_drawdown == pytest.approx(-math.expm1(-r), rel=1e-12)

    def test_constant_wealth(self):
        s = ex.performance_stats(np.full(100, 5.0), 1 / 252, 0.02)
        assert s.mean == pytest.approx(-0.02, rel=1e-12) and s.sharpe is None
        assert s.max_drawdown == 0.0 and s.peak_drawdown == 0.0

    def test_hand_example(self):
        s = ex.performance_stats([100.0, 80.0, 120.0], 1.0, 0.0)
        assert s.max_drawdown == pytest.approx(1 / 3, rel=1e-15)
        assert s.peak_drawdown == pytest.approx(0.2, rel=1e-15)
        assert s.n_days == 2

    def test_sd_annualization(self):
        rng = np.random.default_rng(0)
        dt = 1 / 252
        X = np.exp(np.cumsum(np.r_[0, 0.2 * math.sqrt(dt) * rng.standard_normal(20000)]))
        s = ex.performance_stats(X, dt, 0.0)
        assert s.sd == pytest.approx(0.2, rel=0.02)

    @given(positive_paths)
    def test_drawdowns_brute_force(self, X):
        s = ex.performance_stats(X, 1 / 252, 0.01)
        assert s.max_drawdown == md_brute(X)
        assert s.peak_drawdown == pytest.approx(peak_brute(X), rel=1e-15, abs=0)
        assert s.peak_drawdown <= s.max_drawdown

    @given(positive_paths, st.floats(0.05, 20.0))
    def test_sharpe_scale_invariant(self, X, k):
        dt, r = 1 / 252, 0.01
        R = np.diff(np.log(X)) / dt - r
        if R.std() < 1e-9 * max(1.0, np.abs(R).max()):
            return
        Rs = R / k
        assert (Rs.mean() / Rs.std(ddof=1)) == pytest.approx(R.mean() / R.std(ddof=1), rel=1e-13)

    def test_batch_matches_single(self):
        X = np.exp(np.cumsum(np.random.default_rng(1).normal(0, 0.01, (4, 50)), axis=1))
        b = ex.performance_stats_batch(X, 1 / 252, 0.01)
        for i in range(4):
            s = ex.performance_stats(X[i], 1 / 252, 0.01)
            assert b["mean"][i] == s.mean and b["sharpe"][i] == s.sharpe and b["md"][i] == s.max_drawdown

    def test_validation(self):
        with pytest.raises(ValueError):
            ex.performance_stats([1.0, 2.0], 1.0, 0.0)
        with pytest.raises(ValueError):
            ex.performance_stats([1.0, -2.0, 3.0], 1.0, 0.0)


class TestRegimes:
    def test_monotone(self):
        assert ex.classify_regimes(np.linspace(1, 5, 30)).segments == ((0, 30, "bull"),)

    def test_drop(self):
        seg = ex.classify_regimes([100.0, 95.0, 84.0, 83.0]).segments
        assert seg == ((0, 2, "bull"), (2, 4, "bear"))

    def test_hand_trace(self):
        seg = ex.classify_regimes([100.0, 90.0, 84.0, 95.0, 101.0, 102.0]).segments
        assert seg == ((0, 2, "bull"), (2, 4, "bear"), (4, 6, "bull"))

    def test_exact_threshold(self):
        seg = ex.classify_regimes([100.0, 85.0, 102.0]).segments
        assert seg == ((0, 1, "bull"), (1, 2, "bear"), (2, 3, "bull"))

    @given(st.lists(st.floats(1.0, 200.0), min_size=1, max_size=80))
    def test_partition(self, S):
        seg = ex.classify_regimes(S)
        assert seg.segments[0][0] == 0 and seg.segments[-1][1] == len(S)
        for a, b in zip(seg.segments, seg.segments[1:]):
            assert a[1] == b[0] and a[2] != b[2]
        assert len(seg.labels()) == len(S)

    def test_validation(self):
        with pytest.raises(ValueError):
            ex.classify_regimes([])
        with pytest.raises(ValueError):
            ex.classify_regimes([1.0, 0.0])


class TestShuffle:
    def test_sorted_identity(self):
        assert list(ex.shuffle_permutation([0.3, 0.2, 0.1, 0.0, -0.1], "good_ahead")) == [0, 1, 2, 3, 4]

    def test_hand_example(self):
        ret = [0.10, 0.01, 0.30, -0.05, 0.20]
        assert [i + 1 for i in ex.shuffle_permutation(ret, "good_ahead")] == [3, 5, 1, 2, 4]
        assert [i + 1 for i in ex.shuffle_permutation(ret, "bad_ahead")] == [4, 2, 1, 3, 5]
        assert list(ex.shuffle_permutation(ret, "none")) == [0, 1, 2, 3, 4]

    @given(st.lists(st.floats(-1, 1), min_size=4, max_size=15), st.sampled_from(ex.SHUFFLE_MODES),
           st.integers(0, 1000))
    def test_round_trip(self, ret, mode, seed):
        years = len(ret)
        spy = 5
        rng = np.random.default_rng(seed)
        d1, d2 = rng.standard_normal((2, years * spy))
        s1, s2 = ex.hysteresis_shuffle(d1, d2, ret, spy, mode)
        perm = ex.shuffle_permutation(ret, mode)
        back = np.empty_like(s1.reshape(years, spy))
        back[perm] = s1.reshape(years, spy)
        assert np.array_equal(back.ravel(), d1)
        assert sorted(s2) == sorted(d2)

    def test_batched(self):
        rng = np.random.default_rng(3)
        d1, d2 = rng.standard_normal((2, 3, 5 * 4))
        ret = rng.standard_normal((3, 5))
        b1, _ = ex.hysteresis_shuffle(d1, d2, ret, 4, "bad_ahead")
        for i in range(3):
            s1, _ = ex.hysteresis_shuffle(d1[i], d2[i], ret[i], 4, "bad_ahead")
            assert np.array_equal(b1[i], s1)

    def test_validation(self):
        with pytest.raises(ValueError):
            ex.shuffle_permutation([0.1, 0.2, 0.3], "good_ahead")
        with pytest.raises(ValueError):
            ex.shuffle_permutation([0.1] * 5, "sideways")
        with pytest.raises(ValueError):
            ex.hysteresis_shuffle(np.zeros(10), np.zeros(10), [0.0] * 5, 3)


def small_config(**kw):
    base = dict(x0_ratios=(1.0, 3.0), T_grid=(5.0,), n_paths=60, seed=9, chunk_size=25)
    base.update(kw)
    return ex.StudyConfig(**base)


class TestStudies:
    def test_zero_noise(self, monkeypatch):
        def zeros(seed, ids, n, dt):
            return np.zeros((len(ids), n)), np.zeros((len(ids), n))
        monkeypatch.setattr(ex, "market_increments", zeros)
        cfg = small_config(n_paths=1, x0_ratios=(2.0,))
        rows = ex.run_study(cfg)
        n = 5 * 252
        _, V = heston_recursion(P, 100.0, P.theta_bar, np.zeros((1, n)), np.zeros((1, n)), cfg.dt)
        X, _, _ = evolve_wealth_batch(P, cfg.spec, V, np.zeros((1, n)), 2.0, 5.0, cfg.dt)
        s = ex.performance_stats(X[0], cfg.dt, P.r)
        assert rows[0]["mean"] == s.mean and rows[0]["md"] == s.max_drawdown
        assert rows[0]["sd"] == s.sd and rows[0]["mean_se"] == 0.0

    def test_rows_and_crra(self):
        rows = ex.run_study(small_config())
        assert [r["X0_ratio"] for r in rows] == [1.0, 3.0, math.inf]
        assert all(r["n_used"] + r["breaches"] == 60 for r in rows)
        assert set(ex.STUDY_HEADER) <= set(rows[0])

    def test_worker_and_chunk_invariance(self, monkeypatch):
        monkeypatch.setenv("ALLOCATOR_THREADS", "1")
        a = ex.run_study(small_config(chunk_size=7))
        monkeypatch.setenv("ALLOCATOR_THREADS", "4")
        b = ex.run_study(small_config(chunk_size=60))
        c = ex.run_study(small_config(chunk_size=13))
        assert a == b == c

    def test_bad_thread_env(self, monkeypatch):
        monkeypatch.setenv("ALLOCATOR_THREADS", "lots")
        with pytest.raises(ValueError):
            ex.run_study(small_config())

    def test_rate_grid(self):
        rows = ex.run_study(small_config(r_grid=(0.0, 0.03), x0_ratios=(2.0,)))
        assert [(r["r"], r["X0_ratio"]) for r in rows] == [(0.0, 2.0), (0.0, math.inf), (0.03, 2.0), (0.03, math.inf)]

    def test_config_validation(self):
        with pytest.raises(ValueError):
            ex.StudyConfig(x0_ratios=())
        with pytest.raises(ValueError):
            ex.StudyConfig(T_grid=(1.003,))
        with pytest.raises(ValueError):
            ex.StudyConfig(shuffle_mode="random")

    def test_crra_quantiles_coincide(self):
        res = ex.scaled_policy_quantiles(small_config(n_paths=20))
        for row in res[math.inf]:
            assert max(row[1:]) - min(row[1:]) <= 1e-15
        assert len(res[math.inf]) == 5 * 4

    def test_normalization_identity(self):
        cfg = small_config(n_paths=3)
        n = 5 * 252
        S, V, dW1 = ex._market(cfg, np.arange(3), 5.0)
        _, q, _ = evolve_wealth_batch(P, cfg.spec, V, dW1, 3.0, 5.0, cfg.dt)
        from allocator.closed_form_policy import crra_weight
        pi = q[:, :n] * crra_weight(np.arange(n) * cfg.dt, 5.0, P, 4.0)
        np.testing.assert_allclose((pi / pi.mean(axis=1, keepdims=True)).mean(axis=1), 1.0, rtol=1e-13)

    def test_ratio_study_crra_absent(self):
        res = ex.policy_ratio_study(small_config(spec=UtilitySpec(4.0), n_paths=10), 5.0, 2.0)
        assert res["corr_S"] is None and res["n_defined_S"] == 0

    def test_ratio_study_equal_wealth_absent(self):
        res = ex.policy_ratio_study(small_config(n_paths=10), 3.0, 3.0, keep_series=True)
        assert res["corr_S"] is None
        assert np.all(res["ratio_series"] == 1.0)

    def test_ratio_study_signs(self):
        res = ex.policy_ratio_study(small_config(n_paths=100), 5.0, 2.0)
        assert res["corr_S"] < -0.5
        assert res["n_defined_RV"] == 100

    def test_hysteresis_structure(self):
        res = ex.hysteresis_study(small_config(n_paths=30, x0_ratios=(1.0,)))
        assert {r["scenario"] for r in res["rows"]} == set(ex.SHUFFLE_MODES)
        g = res["gaps"][0]
        assert "sd_good_minus_none" in g and "sd_good_minus_none_se" in g

    def test_shuffled_market_same_increments(self):
        cfg = small_config(n_paths=2, shuffle_mode="good_ahead")
        _, _, a = ex._market(cfg, np.arange(2), 5.0)
        _, _, b = ex._market(replace(cfg, shuffle_mode="none"), np.arange(2), 5.0)
        assert not np.array_equal(a, b)
        for i in range(2):
            assert sorted(a[i]) == sorted(b[i])
