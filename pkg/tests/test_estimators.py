"""Core estimators: QRV (blocked/subsampled/absolute), QRQ, feasible
intervals, and the benchmark family (RV, BPV, TRV, MedRV, MinRV)."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from qrv.constants import ABSOLUTE, MomentKey, lookup
from qrv.errors import ConfigError, DataError
from qrv.estimators import (
    BLOCKED,
    SUBSAMPLED,
    EstimateResult,
    QuantileConfig,
    ReturnSeries,
    bpv,
    feasible_ci,
    log_returns,
    medrv,
    minrv,
    qrq,
    qrv,
    rv,
    symmetric_squared_quantile,
    trv,
)
from qrv.simulate import ModelSpec, simulate_path

FOUR = (0.80, 0.85, 0.90, 0.95)


def _bm_series(N, seed):
    return simulate_path(ModelSpec("BM", {}), N, seed).returns()


# ---------------------------------------------------------------------------
# domain types

class TestReturnSeries:
    def test_basic(self):
        s = ReturnSeries([0.01, -0.02, 0.0])
        assert s.n == 3
        assert s.span == 1.0

    def test_rejects_bad_shapes_and_values(self):
        with pytest.raises(DataError):
            ReturnSeries([])
        with pytest.raises(DataError):
            ReturnSeries([[0.1, 0.2]])
        with pytest.raises(DataError):
            ReturnSeries([0.1, float("nan")])
        with pytest.raises(ConfigError):
            ReturnSeries([0.1], span=0.0)

    def test_returns_are_frozen(self):
        s = ReturnSeries([0.01, 0.02])
        with pytest.raises(ValueError):
            s.returns[0] = 5.0


class TestLogReturns:
    def test_constant_prices(self):
        assert log_returns([1.0, 1.0, 1.0]).returns.tolist() == [0.0, 0.0]

    def test_ln_e(self):
        assert log_returns([1.0, math.e]).returns.tolist() == [1.0]

    def test_direct_arithmetic(self):
        got = log_returns([100.0, 101.0, 99.99]).returns
        assert got == pytest.approx([math.log(1.01), math.log(99.99 / 101.0)], rel=1e-15)

    def test_errors(self):
        with pytest.raises(DataError):
            log_returns([1.0, -2.0])
        with pytest.raises(DataError):
            log_returns([1.0])


class TestQuantileConfig:
    def test_weight_validation(self):
        with pytest.raises(ConfigError):
            QuantileConfig(lambdas=(0.90,), weights=(0.5,), m=20)
        with pytest.raises(ConfigError):
            QuantileConfig(lambdas=(0.90, 0.95), weights=(1.0,), m=20)

    def test_lambda_m_integrality(self):
        with pytest.raises(ConfigError, match="integer"):
            QuantileConfig(lambdas=(0.91,), weights=(1.0,), m=20)

    def test_mode_and_variant_enums(self):
        with pytest.raises(ConfigError):
            QuantileConfig(lambdas=(0.90,), weights=(1.0,), m=20, mode="rolling")
        with pytest.raises(ConfigError):
            QuantileConfig(lambdas=(0.90,), weights=(1.0,), m=20, variant="robust")

    def test_asymptotic_optimal_weights(self):
        cfg = QuantileConfig.asymptotic_optimal(lambdas=FOUR, m=20)
        assert math.fsum(cfg.weights) == pytest.approx(1.0, abs=1e-15)
        assert np.allclose(cfg.weights, (0.18916, 0.13293, 0.20927, 0.46864), atol=5e-6)


class TestEstimateResult:
    def test_ci_must_contain_value(self):
        with pytest.raises(ConfigError):
            EstimateResult(value=1.0, ci=(2.0, 3.0, 0.95))

    def test_stderr_nonnegative(self):
        with pytest.raises(ConfigError):
            EstimateResult(value=1.0, stderr=-0.1)

    def test_negative_value_allowed(self):
        # bias-corrected noise estimators can legitimately go below zero
        assert EstimateResult(value=-1e-6).value == -1e-6


# ---------------------------------------------------------------------------
# symmetric squared quantile

class TestSymmetricSquaredQuantile:
    def test_worked_example(self):
        assert symmetric_squared_quantile([-2, -1, 0.5, 3], 4, 0.75) == 1.25

    def test_zero_block(self):
        assert symmetric_squared_quantile([0.0] * 4, 4, 0.75) == 0.0

    def test_sign_flip_invariance(self):
        block = [-2.0, -1.0, 0.5, 3.0]
        flipped = [-x for x in block]
        assert symmetric_squared_quantile(block, 4, 0.75) == \
            symmetric_squared_quantile(flipped, 4, 0.75)

    def test_length_mismatch(self):
        with pytest.raises(ConfigError):
            symmetric_squared_quantile([1.0, 2.0], 4, 0.75)


# ---------------------------------------------------------------------------
# qrv

class TestQRV:
    def cfg(self, mode=BLOCKED, lambdas=(0.90,), m=20, variant="signed-symmetric"):
        w = tuple([1.0 / len(lambdas)] * len(lambdas))
        return QuantileConfig(lambdas=lambdas, weights=w, m=m, mode=mode, variant=variant)

    def test_zero_returns(self):
        s = ReturnSeries(np.zeros(100))
        assert qrv(s, self.cfg()).value == 0.0

    def test_scale_equivariance_exact(self):
        s = _bm_series(200, 3)
        doubled = ReturnSeries(2.0 * s.returns)
        for mode in (BLOCKED, SUBSAMPLED):
            a = qrv(s, self.cfg(mode)).value
            b = qrv(doubled, self.cfg(mode)).value
            assert b == 4.0 * a

    def test_bm_seed_level_accuracy(self):
        # one fixed path, bound from the feasible CLT with theta = 2.41
        iv, iq = 0.0391, 0.0391 ** 2
        cfg = QuantileConfig.asymptotic_optimal(lambdas=FOUR, m=20)
        est = qrv(_bm_series(1000, 12), cfg)
        assert abs(est.value - iv) < 3.0 * math.sqrt(2.41 * iq / 1000.0)

    def test_blocked_truncation_diagnostics(self):
        s = _bm_series(45, 4)
        est = qrv(s, self.cfg(m=20))
        assert est.diagnostics["blocks_used"] == 2.0
        assert est.diagnostics["returns_truncated"] == 5.0
        assert est.diagnostics["rescale_factor"] == pytest.approx(45.0 / 40.0)

    def test_blocked_needs_full_block(self):
        with pytest.raises(DataError):
            qrv(_bm_series(19, 4), self.cfg(m=20))

    def test_missing_constant_names_key(self):
        s = _bm_series(100, 4)
        with pytest.raises(ConfigError, match="m=25"):
            qrv(s, self.cfg(m=25, lambdas=(0.92,)))

    def test_subsampled_window_counts(self):
        s = _bm_series(60, 6)
        signed = qrv(s, self.cfg(SUBSAMPLED, m=20))
        assert signed.diagnostics["windows_used"] == 60 - 20 + 1
        absolute = qrv(s, self.cfg(SUBSAMPLED, lambdas=(0.5,), m=2, variant=ABSOLUTE))
        assert absolute.diagnostics["windows_used"] == 60 - 2

    def test_block_local_permutation_invariance(self):
        s = _bm_series(100, 8)
        shuffled = s.returns.copy()
        shuffled[20:40] = shuffled[20:40][::-1]  # permute inside block 2 only
        assert qrv(ReturnSeries(shuffled), self.cfg(m=20)).value == \
            qrv(s, self.cfg(m=20)).value

    def test_jump_robustness_on_fixed_path(self):
        # one jump carrying 20% of total variation: rv moves by the jump's
        # share, qrv by under 2%
        from qrv.simulate import add_jumps
        path = simulate_path(ModelSpec("BM", {}), 1000, 21)
        jumped = add_jumps(path, 1, 0.25, seed=21)
        cfg = QuantileConfig.asymptotic_optimal(lambdas=FOUR, m=20)
        q0 = qrv(path.returns(), cfg).value
        q1 = qrv(jumped.returns(), cfg).value
        assert abs(q1 - q0) / q0 < 0.02
        rv_shift = rv(jumped.returns()) - rv(path.returns())
        jump_contribution = float(np.sum(np.asarray(jumped.jump_sizes) ** 2))
        assert rv_shift == pytest.approx(jump_contribution, rel=0.25)

    def test_outlier_robustness_on_fixed_path(self):
        from qrv.simulate import add_outlier
        path = simulate_path(ModelSpec("BM", {}), 1000, 22)
        bumped = add_outlier(path, 0.25, seed=22)
        cfg = self.cfg(m=20)  # lambda=0.90: (1-0.90)*20 - 1 = 1 spare slot
        q0 = qrv(path.returns(), cfg).value
        q1 = qrv(bumped.returns(), cfg).value
        assert abs(q1 - q0) / q0 < 0.02

    @given(hnp.arrays(np.float64, 40,
                      elements=st.floats(-0.05, 0.05, allow_nan=False)),
           st.floats(0.1, 10.0))
    @settings(max_examples=40, deadline=None)
    def test_equivariance_property(self, r, scale):
        r[0] += 0.01  # keep the series from being identically zero
        s = ReturnSeries(r)
        scaled = ReturnSeries(scale * r)
        a = qrv(s, self.cfg(m=20, mode=SUBSAMPLED)).value
        b = qrv(scaled, self.cfg(m=20, mode=SUBSAMPLED)).value
        assert b == pytest.approx(scale ** 2 * a, rel=1e-12)


class TestQRQ:
    def test_zero_returns(self):
        cfg = QuantileConfig(lambdas=(0.90,), weights=(1.0,), m=20)
        assert qrq(ReturnSeries(np.zeros(100)), cfg).value == 0.0

    def test_quartic_homogeneity(self):
        cfg = QuantileConfig(lambdas=(0.90,), weights=(1.0,), m=20)
        s = _bm_series(200, 5)
        doubled = ReturnSeries(2.0 * s.returns)
        assert qrq(doubled, cfg).value == 16.0 * qrq(s, cfg).value

    def test_consistency_for_iq(self):
        # long-sample mean across seeds settles on IQ = sigma^4
        cfg = QuantileConfig(lambdas=(0.90,), weights=(1.0,), m=20)
        iq = 0.0391 ** 2
        vals = [qrq(_bm_series(16_000, seed), cfg).value for seed in range(1000)]
        assert np.mean(vals) == pytest.approx(iq, rel=0.02)


class TestFeasibleCI:
    def _iv(self, v=0.04):
        return EstimateResult(value=v)

    def test_degenerate_interval_at_zero_iq(self):
        out = feasible_ci(self._iv(), EstimateResult(value=0.0), 2.41, 1000)
        assert out.stderr == 0.0
        assert out.ci[0] == out.ci[1] == out.value

    def test_worked_arithmetic(self):
        out = feasible_ci(self._iv(), EstimateResult(value=1.5288e-3), 2.41, 1000)
        assert out.stderr == pytest.approx(1.9195e-3, abs=1e-7)
        half = out.ci[1] - out.value
        assert half == pytest.approx(1.959964 * out.stderr, rel=1e-6)
        assert out.ci[0] <= out.value <= out.ci[1]

    def test_validation(self):
        with pytest.raises(ConfigError):
            feasible_ci(self._iv(), self._iv(), -1.0, 1000)
        with pytest.raises(ConfigError):
            feasible_ci(self._iv(), self._iv(), 2.41, 0)
        with pytest.raises(ConfigError):
            feasible_ci(self._iv(), self._iv(), 2.41, 1000, level=1.0)


# ---------------------------------------------------------------------------
# benchmark estimators

class TestBenchmarkEstimators:
    def test_rv_exact(self):
        assert rv(ReturnSeries([0.01, -0.02])) == pytest.approx(0.0005, rel=1e-15)

    def test_bpv_exact(self):
        got = bpv(ReturnSeries([0.01, -0.02]))
        assert got == pytest.approx((math.pi / 2.0) * 2e-4, rel=1e-15)

    def test_minimum_lengths(self):
        one = ReturnSeries([0.01])
        with pytest.raises(DataError):
            bpv(one)
        with pytest.raises(DataError):
            minrv(one)
        with pytest.raises(DataError):
            medrv(ReturnSeries([0.01, 0.02]))

    def test_trv_indicator_limits(self):
        s = ReturnSeries([0.01, -0.02, 0.015])
        assert trv(s, c=1e-9) == 0.0
        assert trv(s, c=1e9) == rv(s)

    def test_trv_diagnostics_and_default_threshold(self):
        s = _bm_series(500, 9)
        diag = {}
        val = trv(s, diagnostics=diag)
        assert val <= rv(s)
        assert diag["truncated_returns"] >= 0.0
        assert val == trv(s, c=6.0 * math.sqrt(bpv(s)))

    def test_trv_validation(self):
        s = ReturnSeries([0.01, 0.02])
        with pytest.raises(ConfigError):
            trv(s, omega_bar=0.5)
        with pytest.raises(ConfigError):
            trv(s, c=-1.0)

    def test_medrv_nesting(self, gauss_series):
        # absolute subsampled QRV(m=3, 2/3) covers the first N-3 median
        # windows; MedRV adds the final one and its small-sample factor
        s, n = gauss_series, gauss_series.n
        nu3 = lookup(MomentKey(m=3, lam=2 / 3, variant=ABSOLUTE)).value
        cfg = QuantileConfig(lambdas=(2 / 3,), weights=(1.0,), m=3,
                             mode=SUBSAMPLED, variant=ABSOLUTE)
        q3 = qrv(s, cfg).value
        last = float(np.sort(np.abs(s.returns[-3:]))[1])
        expected = q3 * (n - 3) / (n - 2) + (n / (n - 2)) * last ** 2 / nu3
        assert medrv(s) == pytest.approx(expected, rel=1e-10)

    def test_minrv_nesting(self, gauss_series):
        s, n = gauss_series, gauss_series.n
        nu2 = lookup(MomentKey(m=2, lam=0.5, variant=ABSOLUTE)).value
        cfg = QuantileConfig(lambdas=(0.5,), weights=(1.0,), m=2,
                             mode=SUBSAMPLED, variant=ABSOLUTE)
        q2 = qrv(s, cfg).value
        last = float(min(abs(s.returns[-1]), abs(s.returns[-2])))
        expected = q2 * (n - 2) / (n - 1) + (n / (n - 1)) * last ** 2 / nu2
        assert minrv(s) == pytest.approx(expected, rel=1e-10)

    @given(hnp.arrays(np.float64, 30, elements=st.floats(-0.1, 0.1)),
           st.floats(0.5, 2.0))
    @settings(max_examples=40, deadline=None)
    def test_rv_is_sum_of_squares(self, r, scale):
        s = ReturnSeries(r + 1e-6)
        assert rv(s) == pytest.approx(float(np.sum(s.returns ** 2)), rel=1e-14)


# ---------------------------------------------------------------------------
# statistical behavior across seeds

class TestSamplingBehavior:
    def test_unbiased_and_subsampling_helps(self):
        # both estimators center on IV; overlapping windows cut the variance
        cfg_b = QuantileConfig.asymptotic_optimal(lambdas=FOUR, m=20, mode=BLOCKED)
        cfg_s = QuantileConfig.asymptotic_optimal(lambdas=FOUR, m=20, mode=SUBSAMPLED)
        iv = 0.0391
        blocked, sub = [], []
        for seed in range(4000):
            s = _bm_series(1000, seed)
            blocked.append(qrv(s, cfg_b).value)
            sub.append(qrv(s, cfg_s).value)
        blocked, sub = np.asarray(blocked), np.asarray(sub)
        for vals in (blocked, sub):
            se = vals.std(ddof=1) / math.sqrt(len(vals))
            assert abs(vals.mean() - iv) < 4.0 * se
        # variance comparison with a 3-sigma allowance on the difference
        vb, vs = blocked.var(ddof=1), sub.var(ddof=1)
        diff_se = math.sqrt(2.0 / len(blocked)) * max(vb, vs)
        assert vs <= vb + 3.0 * diff_se

    def test_rmse_rate(self):
        # root-N rate: quadrupling N roughly halves the RMSE
        cfg = QuantileConfig.asymptotic_optimal(lambdas=FOUR, m=20)
        rmses = []
        for N in (1000, 4000):
            errs = []
            for seed in range(2000):
                path = simulate_path(ModelSpec("BM", {}), N, seed)
                errs.append((qrv(path.returns(), cfg).value - path.true_iv) ** 2)
            rmses.append(math.sqrt(np.mean(errs)))
        assert 0.4 <= rmses[1] / rmses[0] <= 0.6
