"""Noise-robust quantile variance estimation via pre-averaging.

Market-microstructure noise makes raw squared returns explode (RV grows
like N * omega^2); averaging K consecutive returns with a weight function
h shrinks the noise by 1/K while keeping a diffusive signal of order
K/N. Blocks of m pre-averaged returns, spaced K-1 apart, then go through
the same symmetric-quantile machinery as the noise-free estimator, with a
bias correction for the residual noise variance.

Contents: the weight-function type with exact and Riemann psi constants,
pre-averaged returns, noise-variance estimators, the corrected estimator
qrv_star, its feasible asymptotic covariance qrv_star_avar, a Monte Carlo
covariance oracle used to test that estimator, and the multi-scale RV
benchmark msrv.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import constants as const
from ._rng import STREAM_ORACLE, substream
from .constants import SIGNED, MomentKey, MonteCarlo, QuantileVector, ScalingTable
from .errors import ConfigError, DataError, NumericalError
from .estimators import DEFAULT_LAMBDAS, EstimateResult, ReturnSeries

AUTOCOVARIANCE = "autocovariance"
HALF_RV = "half-rv"


@dataclass(frozen=True)
class PiecewiseLinearWeight:
    """Weight function h on [0,1], linear between knots, h(0)=h(1)=0.

    Everything downstream needs only h itself plus the overlap integrals
    w_h(u) = int_0^{1-u} h(y)h(y+u) dy and the analogue w_dh for the
    derivative. Both are computed exactly: h*h-shifted is piecewise
    quadratic (Simpson on each piece is exact) and h'*h'-shifted is
    piecewise constant.
    """

    knots: tuple[float, ...]
    values: tuple[float, ...]

    def __post_init__(self):
        t = tuple(float(x) for x in self.knots)
        v = tuple(float(x) for x in self.values)
        object.__setattr__(self, "knots", t)
        object.__setattr__(self, "values", v)
        if len(t) != len(v) or len(t) < 2:
            raise ConfigError("weight table needs matching knots and values, 2+ points")
        if t[0] != 0.0 or t[-1] != 1.0:
            raise ConfigError("weight knots must start at 0 and end at 1")
        if any(b <= a for a, b in zip(t, t[1:])):
            raise ConfigError("weight knots must be strictly increasing")
        if not all(math.isfinite(x) for x in v):
            raise ConfigError("weight values must be finite")
        if v[0] != 0.0 or v[-1] != 0.0:
            raise ConfigError("weight function must vanish at 0 and 1")
        if all(x == 0.0 for x in v):
            raise ConfigError("weight function is identically zero")

    def __call__(self, x):
        return np.interp(x, self.knots, self.values)

    def _slope(self, x: float) -> float:
        # derivative on the open segment containing x; right-continuous at knots
        t, v = self.knots, self.values
        i = min(np.searchsorted(t, x, side="right") - 1, len(t) - 2)
        i = max(i, 0)
        return (v[i + 1] - v[i]) / (t[i + 1] - t[i])

    def _breakpoints(self, u: float) -> np.ndarray:
        hi = 1.0 - u
        pts = {0.0, hi}
        for t in self.knots:
            if 0.0 < t < hi:
                pts.add(t)
            s = t - u
            if 0.0 < s < hi:
                pts.add(s)
        return np.array(sorted(pts))

    def overlap(self, u: float) -> float:
        """w_h(u) = int_0^{1-u} h(y) h(y+u) dy, exact."""
        if not 0.0 <= u <= 1.0:
            raise ConfigError(f"overlap lag must be in [0, 1], got {u}")
        if u == 1.0:
            return 0.0
        total = 0.0
        pts = self._breakpoints(u)
        for a, b in zip(pts, pts[1:]):
            mid = 0.5 * (a + b)
            fa = float(self(a) * self(a + u))
            fm = float(self(mid) * self(mid + u))
            fb = float(self(b) * self(b + u))
            total += (b - a) / 6.0 * (fa + 4.0 * fm + fb)
        return total

    def derivative_overlap(self, u: float) -> float:
        """w_dh(u) = int_0^{1-u} h'(y) h'(y+u) dy, exact."""
        if not 0.0 <= u <= 1.0:
            raise ConfigError(f"overlap lag must be in [0, 1], got {u}")
        if u == 1.0:
            return 0.0
        total = 0.0
        pts = self._breakpoints(u)
        for a, b in zip(pts, pts[1:]):
            mid = 0.5 * (a + b)
            total += (b - a) * self._slope(mid) * self._slope(mid + u)
        return total

    @property
    def psi1(self) -> float:
        return self.derivative_overlap(0.0)

    @property
    def psi2(self) -> float:
        return self.overlap(0.0)


TRIANGULAR = PiecewiseLinearWeight(knots=(0.0, 0.5, 1.0), values=(0.0, 0.5, 0.0))


@dataclass(frozen=True)
class PsiConstants:
    """Riemann-sum and exact weight-function constants for one (K, h, N)."""

    psi1_n: float
    psi2_n: float
    psi1: float
    psi2: float
    c_empirical: float

    def __post_init__(self):
        for name in ("psi1_n", "psi2_n", "psi1", "psi2", "c_empirical"):
            if getattr(self, name) <= 0.0:
                raise ConfigError(f"{name} must be strictly positive")


def psi_constants(K: int, weight_fn: PiecewiseLinearWeight = TRIANGULAR,
                  N: int | None = None) -> PsiConstants:
    """Finite-K Riemann sums and exact integrals for the weight function.

    psi1_n = K * sum (h(j/K) - h((j-1)/K))^2, psi2_n = (1/K) * sum h(j/K)^2.
    The estimators use the Riemann forms throughout (they match the finite
    sums actually computed); the exact integrals are their K -> inf limits.
    c_empirical = K / sqrt(N) when N is given, else the constants are
    returned with c_empirical = 1 as a placeholder.
    """
    if not isinstance(K, (int, np.integer)) or K < 2:
        raise ConfigError(f"pre-averaging window K must be an integer >= 2, got {K!r}")
    if not isinstance(weight_fn, PiecewiseLinearWeight):
        raise ConfigError("weight_fn must be a PiecewiseLinearWeight")
    j = np.arange(0, K + 1) / K
    h = weight_fn(j)
    psi1_n = float(K * np.sum(np.diff(h) ** 2))
    psi2_n = float(np.sum(h[1:K] ** 2) / K)
    if N is None:
        c = 1.0
    else:
        if not isinstance(N, (int, np.integer)) or N < 1:
            raise ConfigError(f"N must be a positive integer, got {N!r}")
        c = K / math.sqrt(N)
    return PsiConstants(psi1_n=psi1_n, psi2_n=psi2_n,
                        psi1=weight_fn.psi1, psi2=weight_fn.psi2, c_empirical=c)


def preaveraged_returns(series: ReturnSeries, K: int,
                        weight_fn: PiecewiseLinearWeight = TRIANGULAR) -> np.ndarray:
    """Weighted local return sums: ybar_j = sum_{i=1}^{K-1} h(i/K) r_{j+i}.

    j runs over every position where the window fits, 0..N-K+1, so the
    result has N-K+2 entries (for K=2 that is one per return, matching
    ybar_j = h(1/2) r_j exactly).
    """
    if not isinstance(K, (int, np.integer)) or K < 2:
        raise ConfigError(f"pre-averaging window K must be an integer >= 2, got {K!r}")
    if not isinstance(weight_fn, PiecewiseLinearWeight):
        raise ConfigError("weight_fn must be a PiecewiseLinearWeight")
    if series.n < K:
        raise DataError(f"need at least K={K} returns, got {series.n}")
    wts = np.asarray(weight_fn(np.arange(1, K) / K), dtype=float)
    return np.convolve(series.returns, wts[::-1], mode="valid")


@dataclass(frozen=True)
class NoiseEstimate:
    """Estimated noise variance omega^2, in squared log-price units."""

    omega2: float
    method: str
    clamped: bool = False

    def __post_init__(self):
        if self.omega2 < 0.0:
            raise ConfigError(f"omega2 must be nonnegative, got {self.omega2}")
        if self.method not in (AUTOCOVARIANCE, HALF_RV, "exact"):
            raise ConfigError(f"unknown noise method {self.method!r}")


def noise_variance(series: ReturnSeries, method: str = AUTOCOVARIANCE) -> NoiseEstimate:
    """Estimate the noise variance from observed returns.

    autocovariance: -sum(r_{i+1} r_i) / (N-1); i.i.d. noise makes adjacent
    observed returns MA(1) with first autocovariance -omega^2. Negative raw
    values (common on nearly noise-free data) clamp to 0 with a flag.
    half-rv: sum(r^2) / (2N), valid when noise dominates the signal.
    """
    r = series.returns
    n = series.n
    if method == AUTOCOVARIANCE:
        if n < 2:
            raise DataError("autocovariance noise estimate needs at least 2 returns")
        raw = -float(np.sum(r[1:] * r[:-1])) / (n - 1)
        return NoiseEstimate(omega2=max(raw, 0.0), method=method, clamped=raw < 0.0)
    if method == HALF_RV:
        return NoiseEstimate(omega2=float(r @ r) / (2.0 * n), method=method)
    raise ConfigError(f"unknown noise method {method!r}")


def default_preavg_window(N: int) -> int:
    """Conservative default K ~ sqrt(N)/3 when no tuned value is supplied."""
    if N < 1:
        raise ConfigError(f"N must be positive, got {N}")
    return max(2, math.ceil(math.sqrt(N) / 3.0))


@dataclass(frozen=True)
class PreAvgConfig:
    """Parameters of the noise-corrected estimator.

    K pre-averaging window, m block count of pre-averaged returns, and the
    quantile levels plus weights exactly as in the noise-free estimator
    (signed symmetric variant; the statistic is built from signed values).
    """

    K: int
    lambdas: QuantileVector
    weights: tuple[float, ...]
    m: int = 40
    weight_fn: PiecewiseLinearWeight = TRIANGULAR

    def __post_init__(self):
        if not isinstance(self.K, (int, np.integer)) or self.K < 2:
            raise ConfigError(f"pre-averaging window K must be an integer >= 2, got {self.K!r}")
        object.__setattr__(self, "K", int(self.K))
        if not isinstance(self.weight_fn, PiecewiseLinearWeight):
            raise ConfigError("weight_fn must be a PiecewiseLinearWeight")
        lams = self.lambdas
        if not isinstance(lams, QuantileVector):
            lams = QuantileVector(tuple(lams))
        object.__setattr__(self, "lambdas", lams)
        w = tuple(float(x) for x in self.weights)
        object.__setattr__(self, "weights", w)
        if len(w) != len(lams):
            raise ConfigError(f"{len(w)} weights for {len(lams)} quantiles")
        if abs(sum(w) - 1.0) > 1e-12:
            raise ConfigError(f"weights must sum to 1 within 1e-12, got {sum(w)}")
        if not isinstance(self.m, (int, np.integer)) or self.m < 2:
            raise ConfigError(f"block length m must be an integer >= 2, got {self.m!r}")
        object.__setattr__(self, "m", int(self.m))
        for lam in lams:
            const._check_lambda(self.m, lam, SIGNED)

    @classmethod
    def asymptotic_optimal(cls, K: int, lambdas=DEFAULT_LAMBDAS, m: int = 40,
                           weight_fn: PiecewiseLinearWeight = TRIANGULAR) -> "PreAvgConfig":
        theta = const.theta_asymptotic(lambdas, SIGNED)
        sol = const.optimal_weights(theta)
        return cls(K=K, lambdas=theta.lambdas, weights=sol.weights, m=m,
                   weight_fn=weight_fn)

    @property
    def span_L(self) -> int:
        """Returns consumed by one block of m pre-averaged values: m(K-1)."""
        return self.m * (self.K - 1)


def _nu1(config: PreAvgConfig, scaling: ScalingTable | None) -> np.ndarray:
    keys = [MomentKey(m=config.m, lam=lam, variant=SIGNED) for lam in config.lambdas]
    return np.array([const.lookup(k, scaling).value for k in keys])


def _sorted_block_matrix(series: ReturnSeries, config: PreAvgConfig) -> np.ndarray:
    """All overlapping blocks of m pre-averaged returns at stride K-1,
    scaled by N^(1/4) and sorted within each row; shape (N-L+1, m)."""
    N = series.n
    L = config.span_L
    if N < L:
        raise DataError(f"need at least m(K-1)={L} returns, got {N}")
    yb = preaveraged_returns(series, config.K, config.weight_fn)
    idx = np.arange(N - L + 1)[:, None] + (config.K - 1) * np.arange(config.m)[None, :]
    x = N ** 0.25 * yb[idx]
    x.sort(axis=1)
    return x


def _quantile_columns(x: np.ndarray, m: int, lambdas) -> list[np.ndarray]:
    cols = []
    for lam in lambdas:
        k = const.lambda_index(m, lam)
        cols.append(x[:, k - 1] ** 2 + x[:, m - k] ** 2)
    return cols


def qrv_star(series: ReturnSeries, config: PreAvgConfig,
             scaling: ScalingTable | None = None,
             noise: NoiseEstimate | None = None) -> EstimateResult:
    """Bias-corrected quantile variance estimate from pre-averaged returns.

    Per-quantile component: sum_i q*_i / nu1 / (c psi2_n (N - m(K-1) + 1)),
    where q*_i comes from the sorted block starting at pre-averaged index i.
    The weighted combination then subtracts psi1_n * omega2 / (c^2 psi2_n),
    the exact finite-K mean contribution of i.i.d. noise. The corrected
    value can dip below zero on noise-dominated samples; that is required
    for the estimator to be unbiased around zero signal and is left as is.
    """
    if noise is None:
        noise = noise_variance(series)
    N = series.n
    psi = psi_constants(config.K, config.weight_fn, N)
    c = psi.c_empirical
    nu1 = _nu1(config, scaling)
    x = _sorted_block_matrix(series, config)
    nwin = x.shape[0]
    comps = np.array([col.sum() for col in
                      _quantile_columns(x, config.m, config.lambdas)])
    per_lambda = comps / nu1 / (c * psi.psi2_n * nwin)
    raw = float(np.asarray(config.weights) @ per_lambda)
    correction = psi.psi1_n * noise.omega2 / (c ** 2 * psi.psi2_n)
    return EstimateResult(
        value=raw - correction,
        diagnostics={
            "c_empirical": c,
            "windows_used": float(nwin),
            "bias_correction": correction,
            "omega2": noise.omega2,
            "omega2_clamped": float(noise.clamped),
        },
    )


def qrv_star_avar(series: ReturnSeries, config: PreAvgConfig,
                  scaling: ScalingTable | None = None,
                  diagnostics: dict | None = None) -> np.ndarray:
    """Feasible asymptotic covariance of the pre-averaged estimator.

    Entry (s, l) is a lag-window double sum over products of normalized
    block statistics q*_i(s) [q*_j(l) - q*_{j'}(l)] with j within m(K-1)-1
    of i and j' = i + m(K-1) (far enough to be independent, so subtracting
    it removes the squared mean). Output scales so that
    var(estimate) ~ w' A w / sqrt(N); stderr = sqrt(w'Aw) / N^(1/4).

    Finite-sample noise can push diagonal entries slightly negative; those
    floor at zero (count reported via the diagnostics dict if passed).
    """
    N = series.n
    L = config.span_L
    if N < 3 * L:
        raise DataError(f"need at least 3 m(K-1) = {3 * L} returns, got {N}")
    psi = psi_constants(config.K, config.weight_fn, N)
    c = psi.c_empirical
    nu1 = _nu1(config, scaling)
    x = _sorted_block_matrix(series, config)
    qn = [col / nu for col, nu
          in zip(_quantile_columns(x, config.m, config.lambdas), nu1)]

    k = len(qn)
    A = np.zeros((k, k))
    i0, i1 = L - 1, N - 2 * L
    cnt = i1 - i0 + 1
    i = np.arange(i0, i1 + 1)
    norm = c * psi.psi2_n ** 2 * (config.K - 1) * cnt
    for s in range(k):
        for l in range(k):
            ql = qn[l]
            cs = np.concatenate(([0.0], np.cumsum(ql)))
            # sum_{j=i-L+1}^{i+L-1} ql[j]  minus the detached reference block
            inner = cs[i + L] - cs[i - L + 1] - (2 * L - 1) * ql[i + L]
            A[s, l] = float(np.sum(qn[s][i] * inner)) / norm
    A = 0.5 * (A + A.T)

    floored = 0
    for d in range(k):
        if A[d, d] < 0.0:
            A[d, d] = 0.0
            floored += 1
    if diagnostics is not None:
        diagnostics["negative_diagonal_floored"] = float(floored)
        diagnostics["windows_used"] = float(cnt)
        diagnostics["c_empirical"] = c
    return A


@dataclass(frozen=True)
class OracleCovariance:
    """Monte Carlo covariance with its standard error (test oracle)."""

    value: float
    stderr: float
    diagnostics: dict = field(default_factory=dict)


def f_covariance_oracle(m: int, l: int, x: float, u: float,
                        lambda1: float, lambda2: float,
                        mc: MonteCarlo | None = None, *,
                        c: float, omega2: float,
                        weight_fn: PiecewiseLinearWeight = TRIANGULAR) -> OracleCovariance:
    """Covariance of symmetric squared-quantile statistics of two blocks.

    The blocks S and T are jointly Gaussian vectors of length m describing
    the limiting distribution of two pre-averaged blocks whose starts are
    offset by (l-1+u) windows: each entry has variance
    c psi2 x^2 + psi1 omega^2 / c, entry pairs (S_{i+l-1}, T_i) covary via
    the weight-overlap integrals at lag u and pairs (S_{i+l}, T_i) at lag
    1-u; everything else is independent. Exact-integral psi constants are
    used: this object is the K -> infinity limit the estimators converge
    to, which is what makes it a useful independent oracle.
    """
    if not isinstance(m, (int, np.integer)) or m < 2:
        raise ConfigError(f"m must be an integer >= 2, got {m!r}")
    if not isinstance(l, (int, np.integer)) or not 1 <= l <= m:
        raise ConfigError(f"offset l must be an integer in 1..{m}, got {l!r}")
    if not 0.0 <= u <= 1.0:
        raise ConfigError(f"u must be in [0, 1], got {u}")
    if c <= 0.0:
        raise ConfigError(f"c must be positive, got {c}")
    if omega2 < 0.0:
        raise ConfigError(f"omega2 must be nonnegative, got {omega2}")
    k1 = const._check_lambda(m, lambda1, SIGNED)
    k2 = const._check_lambda(m, lambda2, SIGNED)
    if mc is None:
        mc = MonteCarlo(replications=200_000, seed=0)

    psi1, psi2 = weight_fn.psi1, weight_fn.psi2
    var = c * psi2 * x * x + psi1 * omega2 / c
    cov_near = c * weight_fn.overlap(u) * x * x + weight_fn.derivative_overlap(u) * omega2 / c
    cov_far = (c * weight_fn.overlap(1.0 - u) * x * x
               + weight_fn.derivative_overlap(1.0 - u) * omega2 / c)

    C = np.eye(2 * m) * var
    for i in range(m):
        a = i + l - 1
        if a < m:
            C[a, m + i] = C[m + i, a] = cov_near
        a = i + l
        if a < m:
            C[a, m + i] = C[m + i, a] = cov_far
    evals, evecs = np.linalg.eigh(C)
    if evals.min() < -1e-10 * max(evals.max(), 1e-300):
        raise NumericalError(
            f"joint covariance not PSD (min eigenvalue {evals.min():.3e}) for "
            f"m={m}, l={l}, x={x}, u={u}, lambda1={lambda1}, lambda2={lambda2}, "
            f"c={c}, omega2={omega2}"
        )
    root = evecs * np.sqrt(np.clip(evals, 0.0, None))

    rng = substream(mc.seed, STREAM_ORACLE, m, l)
    z = rng.standard_normal((mc.replications, 2 * m)) @ root.T
    S = np.sort(z[:, :m], axis=1)
    T = np.sort(z[:, m:], axis=1)
    s_stat = S[:, k1 - 1] ** 2 + S[:, m - k1] ** 2
    t_stat = T[:, k2 - 1] ** 2 + T[:, m - k2] ** 2
    sc = s_stat - s_stat.mean()
    tc = t_stat - t_stat.mean()
    prod = sc * tc
    value = float(prod.mean())
    stderr = float(prod.std(ddof=1) / math.sqrt(mc.replications))
    return OracleCovariance(
        value=value, stderr=stderr,
        diagnostics={
            "block_variance": var,
            "cov_near": cov_near,
            "cov_far": cov_far,
            "diag_noise_term": psi1 * omega2 / c,
            "cross_noise_term_u": weight_fn.derivative_overlap(u) * omega2 / c,
            "cross_noise_term_1mu": weight_fn.derivative_overlap(1.0 - u) * omega2 / c,
        },
    )


# ---------------------------------------------------------------------------
# multi-scale RV benchmark

def _msrv_weights(q: int) -> np.ndarray:
    """a_j for j = 1..q; they satisfy sum a_j = 1 and sum a_j / j = 0."""
    j = np.arange(1, q + 1, dtype=float)
    hq = 12.0 * (j / q - 0.5)
    return (1.0 - 1.0 / q ** 2) ** -1 * ((j / q ** 2) * hq - (j / (2.0 * q ** 3)) * 12.0)


def msrv(series: ReturnSeries, q: int) -> float:
    """Multi-scale realized variance: a weighted sum of subsampled RVs.

    Scale j uses all lag-j squared price differences divided by j; the
    weights cancel the noise bias across scales. Operates on the price
    path implied by the returns (differences only, so the base level is
    irrelevant).
    """
    if not isinstance(q, (int, np.integer)) or q < 2:
        raise ConfigError(f"number of scales q must be an integer >= 2, got {q!r}")
    N = series.n
    if q > N:
        raise DataError(f"q={q} exceeds the number of returns {N}")
    Y = np.concatenate(([0.0], np.cumsum(series.returns)))
    a = _msrv_weights(q)
    out = 0.0
    for jj in range(1, q + 1):
        d = Y[jj:] - Y[:-jj]
        out += (a[jj - 1] / jj) * float(d @ d)
    return out


def msrv_optimal_q(iv_guess: float, iq_guess: float, omega2: float, N: int) -> int:
    """Number of scales minimizing the multi-scale RV asymptotic MSE.

    The MSE proxy in c = q / sqrt(N) is
    (104/35) c IQ + (48/5) c^-1 omega^2 (IV + omega^2/2) + 48 c^-3 omega^4;
    its stationarity condition is quadratic in c^-2, solved in closed form,
    then the two adjacent integers are compared through the objective.
    Zero noise pushes c to 0, clamped at the smallest admissible q = 2.
    """
    if iv_guess <= 0.0 or iq_guess <= 0.0:
        raise ConfigError("iv_guess and iq_guess must be positive")
    if omega2 < 0.0:
        raise ConfigError(f"omega2 must be nonnegative, got {omega2}")
    if not isinstance(N, (int, np.integer)) or N < 2:
        raise ConfigError(f"N must be an integer >= 2, got {N!r}")
    if omega2 == 0.0:
        if 2 > N:
            raise DataError(f"optimal q=2 exceeds the number of returns {N}")
        return 2

    A = (104.0 / 35.0) * iq_guess
    B = (48.0 / 5.0) * omega2 * (iv_guess + 0.5 * omega2)
    Cq = 48.0 * omega2 ** 2
    # dMSE/dc = A - B t - 3 C t^2 = 0 with t = c^-2
    t = (-B + math.sqrt(B * B + 12.0 * A * Cq)) / (6.0 * Cq)
    c_star = t ** -0.5

    def objective(q: int) -> float:
        c = q / math.sqrt(N)
        return A * c + B / c + Cq / c ** 3

    lo = max(2, math.floor(c_star * math.sqrt(N)))
    hi = max(2, math.ceil(c_star * math.sqrt(N)))
    best = min((lo, hi), key=objective)
    if best > N:
        raise DataError(f"optimal q={best} exceeds the number of returns {N}")
    return int(best)
