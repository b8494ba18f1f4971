"""Order-statistic scaling constants: keys, cache, moments, Theta matrices.

Monte Carlo values are checked two ways: against independent brute-force
oracles drawn with a different generator, and against closed forms where
they exist. Shipped-cache values are frozen at full precision.
"""

import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.stats import chi2, norm

from qrv.constants import (
    ABSOLUTE,
    SIGNED,
    STAT_QUARTIC,
    Integration,
    MomentKey,
    MonteCarlo,
    ScalingEntry,
    ScalingTable,
    ThetaMatrix,
    default_table,
    joint_order_stat_density,
    lookup,
    nu_asymptotic,
    nu_iq,
    nu_moment,
    optimal_weights,
    theta_asymptotic,
    theta_blocked,
    theta_subsampled,
)
from qrv.errors import CacheError, ConfigError, NegativeWeightWarning, NumericalError


# ---------------------------------------------------------------------------
# MomentKey

class TestMomentKey:
    def test_signed_lambda_range(self):
        MomentKey(m=20, lam=0.90)
        with pytest.raises(ConfigError):
            MomentKey(m=20, lam=0.50)
        with pytest.raises(ConfigError):
            MomentKey(m=20, lam=1.00)

    def test_lambda_m_integrality(self):
        with pytest.raises(ConfigError, match="integer"):
            MomentKey(m=20, lam=0.99)   # 19.8
        MomentKey(m=100, lam=0.99)

    def test_absolute_range_and_floor(self):
        MomentKey(m=2, lam=0.5, variant=ABSOLUTE)
        with pytest.raises(ConfigError):
            MomentKey(m=2, lam=1.0, variant=ABSOLUTE)
        # lambda*m must select at least the first order statistic
        with pytest.raises(ConfigError):
            MomentKey(m=4, lam=0.0, variant=ABSOLUTE)

    def test_cross_key_symmetric(self):
        a = MomentKey(m=20, lam=0.90, lam2=0.80)
        b = MomentKey(m=20, lam=0.80, lam2=0.90)
        assert a.canonical() == b.canonical()

    def test_equal_lambdas_collapse_to_power(self):
        # a diagonal cross moment is the same expectation as the r=2 moment
        a = MomentKey(m=20, lam=0.90, lam2=0.90)
        b = MomentKey(m=20, lam=0.90, r=2.0)
        assert a.canonical() == b.canonical()

    def test_lag_zero_means_same_block(self):
        key = MomentKey(m=20, lam=0.90, lam2=0.95, lag=0)
        assert key.lag is None
        assert key.canonical() == MomentKey(m=20, lam=0.90, lam2=0.95).canonical()

    def test_lag_bounds(self):
        MomentKey(m=20, lam=0.90, lam2=0.90, lag=1)
        with pytest.raises(ConfigError):
            MomentKey(m=20, lam=0.90, lam2=0.90, lag=-1)
        with pytest.raises(ConfigError):
            MomentKey(m=20, lam=0.90, lam2=0.90, lag=21)

    @given(st.sampled_from([(20, 0.80), (20, 0.85), (20, 0.90), (20, 0.95),
                            (40, 0.90), (100, 0.98), (4, 0.75)]))
    def test_canonical_is_stable(self, pair):
        m, lam = pair
        key = MomentKey(m=m, lam=lam)
        rebuilt = MomentKey(m=m, lam=lam)
        assert key.canonical() == rebuilt.canonical()


# ---------------------------------------------------------------------------
# cache

class TestScalingTable:
    def _entry(self, value=1.5):
        return ScalingEntry(MomentKey(m=4, lam=0.75), value, 1e-4,
                            "monte-carlo", 100_000, 7)

    def test_roundtrip_through_file(self, tmp_path):
        path = tmp_path / "cache.jsonl"
        table = ScalingTable(path)
        table.add(self._entry())
        reloaded = ScalingTable(path)
        got = reloaded.get(MomentKey(m=4, lam=0.75))
        assert got == self._entry()

    def test_append_only_collision(self, tmp_path):
        table = ScalingTable(tmp_path / "cache.jsonl")
        table.add(self._entry(1.5))
        table.add(self._entry(1.5))  # identical re-add is a no-op
        with pytest.raises(CacheError, match="append-only"):
            table.add(self._entry(1.6))

    def test_readonly_stays_in_memory(self, tmp_path):
        path = tmp_path / "cache.jsonl"
        ScalingTable(path)  # create with header only
        before = path.read_text()
        table = ScalingTable(path, readonly=True)
        table.add(self._entry())
        assert table.get(MomentKey(m=4, lam=0.75)) is not None
        assert path.read_text() == before

    def test_bad_header_rejected(self, tmp_path):
        path = tmp_path / "cache.jsonl"
        path.write_text('{"format": "something-else", "version": 99}\n')
        with pytest.raises(CacheError, match="header"):
            ScalingTable(path)

    def test_shipped_cache_loads(self):
        table = default_table()
        assert len(table) > 1900

    def test_lookup_never_computes(self):
        missing = MomentKey(m=24, lam=0.75)
        with pytest.raises(ConfigError, match="missing scaling constant"):
            lookup(missing)


# ---------------------------------------------------------------------------
# closed forms and asymptotic scalars

class TestClosedForms:
    def test_absolute_min_of_two(self):
        # E[min(|U1|,|U2|)^2] = (pi-2)/pi
        entry = lookup(MomentKey(m=2, lam=0.5, variant=ABSOLUTE))
        assert entry.method == "closed-form"
        assert entry.value == pytest.approx((math.pi - 2.0) / math.pi, abs=1e-15)
        assert entry.value == pytest.approx(0.3634, abs=5e-5)

    def test_absolute_median_of_three(self):
        entry = lookup(MomentKey(m=3, lam=2.0 / 3.0, variant=ABSOLUTE))
        assert entry.method == "closed-form"
        assert entry.value == pytest.approx(
            (6.0 - 4.0 * math.sqrt(3.0) + math.pi) / math.pi, abs=1e-15)

    def test_nu_asymptotic_signed(self):
        assert nu_asymptotic(0.90) == pytest.approx(2 * 1.281552 ** 2, abs=1e-4)
        assert nu_asymptotic(0.95) == pytest.approx(2 * 1.644854 ** 2, abs=1e-4)

    def test_nu_asymptotic_absolute_chi2(self):
        # d_lambda of chi2(1) equals c_{(1+lambda)/2}^2
        got = nu_asymptotic(0.80, variant=ABSOLUTE)
        assert got == pytest.approx(1.64237, abs=1e-4)
        assert got == pytest.approx(float(norm.ppf(0.90)) ** 2, rel=1e-12)

    def test_nu_asymptotic_range_errors(self):
        with pytest.raises(ConfigError):
            nu_asymptotic(0.40)
        with pytest.raises(ConfigError):
            nu_asymptotic(1.0, variant=ABSOLUTE)


# ---------------------------------------------------------------------------
# Monte Carlo moments vs independent oracles

def _brute_force_signed(m, lam, reps, seed, quartic=False):
    """Average x_(hi)^2 + x_(lo)^2 (or fourth powers) over sorted normal m-vectors."""
    rng = np.random.default_rng(seed)  # deliberately not the package generator
    hi = int(round(lam * m)) - 1
    lo = m - int(round(lam * m))
    p = 4 if quartic else 2
    total = np.empty(reps)
    done = 0
    while done < reps:
        n = min(reps - done, 2_000_000 // m)
        x = np.sort(rng.standard_normal((n, m)), axis=1)
        total[done:done + n] = x[:, hi] ** p + x[:, lo] ** p
        done += n
    return float(total.mean()), float(total.std(ddof=1) / math.sqrt(reps))


class TestNuMoment:
    def test_signed_m4_vs_brute_force(self):
        cached = lookup(MomentKey(m=4, lam=0.75))
        oracle, oracle_se = _brute_force_signed(4, 0.75, 2_000_000, seed=991)
        se = math.hypot(cached.stderr, oracle_se)
        assert abs(cached.value - oracle) < 3.0 * se

    def test_quartic_m4_vs_brute_force(self):
        cached = nu_iq(4, 0.75)
        oracle, oracle_se = _brute_force_signed(4, 0.75, 2_000_000, seed=992, quartic=True)
        se = math.hypot(cached.stderr, oracle_se)
        assert abs(cached.value - oracle) < 3.0 * se

    def test_determinism_bit_identical(self):
        key = MomentKey(m=5, lam=0.8)
        mc = MonteCarlo(replications=200_000, seed=31)
        a = nu_moment(key, mc, table=ScalingTable())
        b = nu_moment(key, mc, table=ScalingTable())
        assert a.value == b.value and a.stderr == b.stderr

    def test_result_lands_in_table(self):
        table = ScalingTable()
        key = MomentKey(m=5, lam=0.8)
        entry = nu_moment(key, MonteCarlo(200_000, seed=3), table=table)
        assert table.get(key) == entry

    def test_m400_near_asymptote(self):
        entry = lookup(MomentKey(m=400, lam=0.95))
        assert abs(entry.value - nu_asymptotic(0.95)) < 0.2

    def test_quartic_m400_near_asymptote(self):
        c95 = float(norm.ppf(0.95))
        entry = lookup(MomentKey(m=400, lam=0.95, stat=STAT_QUARTIC))
        assert abs(entry.value - 2.0 * c95 ** 4) < 0.5

    def test_convergence_in_m(self):
        # the gap to the large-m limit shrinks across m = 20, 100, 400
        limit = nu_asymptotic(0.90)
        gaps = [abs(lookup(MomentKey(m=m, lam=0.90)).value - limit)
                for m in (20, 100, 400)]
        ses = [lookup(MomentKey(m=m, lam=0.90)).stderr for m in (20, 100, 400)]
        assert gaps[0] > gaps[1] + 3 * math.hypot(ses[0], ses[1])
        assert gaps[1] > gaps[2] + 3 * math.hypot(ses[1], ses[2])

    def test_frozen_cache_values(self):
        # values shipped in the cache, pinned at full precision
        assert lookup(MomentKey(m=20, lam=0.90)).value == pytest.approx(
            2.803719976867881, rel=1e-12)
        assert lookup(MomentKey(m=10, lam=0.90)).value == pytest.approx(
            2.4347635842291786, rel=1e-12)
        assert lookup(MomentKey(m=4, lam=0.75)).value == pytest.approx(
            0.8973036792398289, rel=1e-12)


class TestIntegrationBackend:
    def test_density_zero_above_diagonal(self):
        assert joint_order_stat_density(1.0, 0.0, 10, 0.9) == 0.0

    def test_density_normalizes(self):
        from scipy.integrate import dblquad
        total, _ = dblquad(
            lambda y, x: joint_order_stat_density(x, y, 6, 5.0 / 6.0),
            -8.0, 8.0, lambda x: x, lambda x: 8.0)
        assert total == pytest.approx(1.0, abs=1e-4)

    def test_integration_matches_monte_carlo(self):
        key = MomentKey(m=10, lam=0.90)
        mc = lookup(key)
        integ = nu_moment(key, Integration(), table=ScalingTable())
        assert integ.method == "integration"
        assert abs(integ.value - mc.value) < 3.0 * mc.stderr

    def test_integration_rejects_unsupported(self):
        with pytest.raises(ConfigError):
            nu_moment(MomentKey(m=4, lam=0.75, stat=STAT_QUARTIC),
                      Integration(), table=ScalingTable())


# ---------------------------------------------------------------------------
# Theta matrices

class TestTheta:
    def test_blocked_reference_values(self):
        assert theta_blocked(20, (0.90,)).values[0, 0] == pytest.approx(3.10, abs=0.05)
        assert theta_blocked(100, (0.95,)).values[0, 0] == pytest.approx(3.07, abs=0.05)
        assert theta_blocked(40, (0.85,)).values[0, 0] == pytest.approx(3.58, abs=0.05)

    def test_subsampled_reference_values(self):
        assert theta_subsampled(20, (0.90,)).values[0, 0] == pytest.approx(2.67, abs=0.05)
        assert theta_subsampled(40, (0.95,)).values[0, 0] == pytest.approx(2.62, abs=0.05)

    def test_subsampling_never_hurts(self):
        for m, lam in ((20, 0.90), (40, 0.95), (400, 0.90)):
            b = theta_blocked(m, (lam,))
            s = theta_subsampled(m, (lam,))
            slack = 3.0 * math.hypot(b.stderr[0, 0], s.stderr[0, 0])
            assert s.values[0, 0] <= b.values[0, 0] + slack

    def test_asymptotic_closed_form(self):
        assert theta_asymptotic((0.90,)).values[0, 0] == pytest.approx(3.16, abs=0.005)
        assert theta_asymptotic((0.95,)).values[0, 0] == pytest.approx(3.13, abs=0.005)

    def test_asymptotic_symmetry(self):
        th = theta_asymptotic((0.80, 0.85, 0.90, 0.95))
        assert np.allclose(th.values, th.values.T, atol=0)

    def test_blocked_matrix_is_psd_and_symmetric(self):
        th = theta_blocked(20, (0.80, 0.85, 0.90, 0.95))
        assert np.allclose(th.values, th.values.T)
        assert np.linalg.eigvalsh(th.values).min() > 0

    def test_monotone_in_m(self):
        # single-lambda blocked theta is nondecreasing in m
        vals, errs = [], []
        for m in (20, 40, 100):
            th = theta_blocked(m, (0.95,))
            vals.append(th.values[0, 0])
            errs.append(th.stderr[0, 0])
        assert vals[1] >= vals[0] - 3 * math.hypot(errs[0], errs[1])
        assert vals[2] >= vals[1] - 3 * math.hypot(errs[1], errs[2])

    def test_blocked_converges_to_asymptotic(self):
        limit = theta_asymptotic((0.90,)).values[0, 0]
        got = theta_blocked(400, (0.90,)).values[0, 0]
        assert abs(got - limit) < 0.1

    @pytest.mark.xfail(
        strict=True,
        reason="the overlapping-window constants converge to their own limit, "
               "not the blocked one: at m=400 the gap is ~0.23 and is many "
               "standard errors wide, so the shared-limit claim fails as stated",
    )
    def test_subsampled_converges_to_asymptotic(self):
        limit = theta_asymptotic((0.90,)).values[0, 0]
        got = theta_subsampled(400, (0.90,)).values[0, 0]
        assert abs(got - limit) < 0.1

    def test_subsampled_m400_is_stable_evidence(self):
        # companion to the xfail above: the m=400 gap is not Monte Carlo noise
        limit = theta_asymptotic((0.90,)).values[0, 0]
        th = theta_subsampled(400, (0.90,))
        gap = abs(th.values[0, 0] - limit)
        assert gap > 3.0 * th.stderr[0, 0]

    def test_validation_rejects_asymmetric(self):
        with pytest.raises(NumericalError, match="symmetric"):
            ThetaMatrix(np.array([[1.0, 0.2], [0.3, 1.0]]), "blocked", (0.9, 0.95), m=20)


# ---------------------------------------------------------------------------
# optimal weights

class TestOptimalWeights:
    def test_single_quantile(self):
        th = theta_blocked(20, (0.90,))
        sol = optimal_weights(th)
        assert sol.weights == (1.0,)
        assert sol.achieved_theta == pytest.approx(th.values[0, 0])

    def test_identity_matrix(self):
        th = ThetaMatrix(np.eye(2), "asymptotic", (0.90, 0.95))
        sol = optimal_weights(th)
        assert sol.weights == pytest.approx((0.5, 0.5))
        assert sol.achieved_theta == pytest.approx(0.5)

    def test_achieved_on_blocked_m20(self):
        th = theta_blocked(20, (0.80, 0.85, 0.90, 0.95))
        w = np.asarray(optimal_weights(theta_asymptotic((0.80, 0.85, 0.90, 0.95))).weights)
        assert th.attained(w) == pytest.approx(2.41, abs=0.03)

    def test_weights_sum_to_one(self):
        sol = optimal_weights(theta_blocked(20, (0.80, 0.85, 0.90, 0.95)))
        assert math.fsum(sol.weights) == pytest.approx(1.0, abs=1e-15)

    def test_frozen_asymptotic_solution(self):
        sol = optimal_weights(theta_asymptotic((0.80, 0.85, 0.90, 0.95)))
        assert np.allclose(sol.weights, (0.18916, 0.13293, 0.20927, 0.46864), atol=5e-6)
        assert sol.achieved_theta == pytest.approx(2.4153, abs=5e-5)

    @given(st.lists(st.floats(0.01, 1.0), min_size=4, max_size=4),
           st.integers(0, 2 ** 31))
    @settings(max_examples=60, deadline=None)
    def test_no_weight_vector_does_better(self, raw, seed):
        th = theta_asymptotic((0.80, 0.85, 0.90, 0.95))
        sol = optimal_weights(th)
        beta = np.asarray(raw)
        beta = beta / beta.sum()
        assert th.attained(beta) >= sol.achieved_theta - 1e-12

    def test_negative_weight_warns(self):
        vals = np.array([[1.0, 0.95], [0.95, 1.0]])  # near-collinear rows
        th = ThetaMatrix(vals, "asymptotic", (0.90, 0.95))
        with warnings.catch_warnings():
            warnings.simplefilter("error")
            optimal_weights(th)  # symmetric case: no warning
        skew = ThetaMatrix(np.array([[0.5, 0.9], [0.9, 2.0]]), "asymptotic", (0.90, 0.95))
        with pytest.warns(NegativeWeightWarning):
            optimal_weights(skew)

    def test_singular_matrix_raises(self):
        th = ThetaMatrix(np.ones((2, 2)), "asymptotic", (0.90, 0.95))
        with pytest.raises(NumericalError, match="cond"):
            optimal_weights(th)
