"""Ground-truth path simulation for the estimator experiments.

Five volatility models (constant, Heston with and without leverage, a
stochastic-elasticity/non-linear-drift model, and a two-factor model with
a spliced-exponential link), all driving dX = sigma dW on [0, span] and
Euler-discretized on a grid finer than the observation grid. Each path
carries its exact discretized IV and IQ, so estimator bias and efficiency
can be measured against the actual realized quantities rather than model
expectations.

Contamination is layered on afterwards: a fixed number of Gaussian jumps
rescaled to a target fraction of IV, a single price outlier, or i.i.d.
Gaussian observation noise. Each uses its own seed substream, so toggling
one contamination never perturbs the base path or the others.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np
from numba import njit

from ._rng import (
    STREAM_JUMPS,
    STREAM_NOISE,
    STREAM_OUTLIER,
    STREAM_PATH,
    check_seed,
    substream,
)
from .errors import ConfigError, DataError
from .estimators import ReturnSeries

BM = "BM"
SV = "SV"
SV_LEV = "SV-LEV"
SEV_ND = "SEV-ND"
SV2F_LEV = "SV2F-LEV"

MODEL_KINDS = (BM, SV, SV_LEV, SEV_ND, SV2F_LEV)

# long-run variance of the mean-reverting models; also the constant level
_SV_MEAN = 0.3141 / 8.0369

_DEFAULT_PARAMS: dict[str, dict[str, float]] = {
    BM: {"sigma2": 0.0391},
    SV: {
        "drift_const": 0.3141, "drift_slope": 8.0369,
        "vol_of_vol2": 0.1827, "rho": 0.0, "v0": _SV_MEAN,
    },
    SV_LEV: {
        "drift_const": 0.3141, "drift_slope": 8.0369,
        "vol_of_vol2": 0.1827, "rho": -0.75, "v0": _SV_MEAN,
    },
    SEV_ND: {
        "a0": -0.554, "a1": 21.32, "a2": -209.3, "a_inv": 0.005,
        "b0": 0.017, "b1": 53.97, "b_pow": 5.76, "v0": 0.0391,
    },
    SV2F_LEV: {
        "link_const": -1.2, "beta1": 0.04, "beta2": 1.5,
        "mr1": 0.000137, "mr2": 1.386, "f2_vol_slope": 0.25,
        "rho": -0.3, "f1_0": 0.0, "f2_0": 0.0,
    },
}


@dataclass(frozen=True)
class ModelSpec:
    """A volatility model plus parameter overrides.

    Unspecified parameters take the standard calibration (annual-horizon
    estimates run over the unit interval, i.e. a year's variation
    compressed into one day).
    """

    kind: str
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in MODEL_KINDS:
            raise ConfigError(f"unknown model kind {self.kind!r}; choose from {MODEL_KINDS}")
        defaults = _DEFAULT_PARAMS[self.kind]
        unknown = set(self.params) - set(defaults)
        if unknown:
            raise ConfigError(f"unknown parameters for {self.kind}: {sorted(unknown)}")
        merged = {**defaults, **{k: float(v) for k, v in self.params.items()}}
        for k, v in merged.items():
            if not math.isfinite(v):
                raise ConfigError(f"parameter {k} must be finite, got {v}")
        if self.kind == BM and merged["sigma2"] < 0.0:
            raise ConfigError(f"sigma2 must be nonnegative, got {merged['sigma2']}")
        if self.kind in (SV, SV_LEV):
            if merged["vol_of_vol2"] < 0.0:
                raise ConfigError("vol_of_vol2 must be nonnegative")
            if merged["v0"] < 0.0:
                raise ConfigError("initial variance v0 must be nonnegative")
            if not -1.0 <= merged["rho"] <= 1.0:
                raise ConfigError(f"leverage rho must be in [-1, 1], got {merged['rho']}")
        if self.kind == SEV_ND:
            if merged["b0"] < 0.0 or merged["b1"] < 0.0:
                raise ConfigError("diffusion coefficients b0, b1 must be nonnegative")
            if merged["v0"] <= 0.0:
                raise ConfigError("initial variance v0 must be positive")
        if self.kind == SV2F_LEV:
            # W loads rho on each factor shock, so 2 rho^2 <= 1 must hold
            if 2.0 * merged["rho"] ** 2 > 1.0:
                raise ConfigError(f"two-factor leverage rho={merged['rho']} needs 2*rho^2 <= 1")
            if merged["mr1"] < 0.0 or merged["mr2"] < 0.0:
                raise ConfigError("mean reversions mr1, mr2 must be nonnegative")
        object.__setattr__(self, "params", merged)


@dataclass(frozen=True)
class PathResult:
    """One simulated path with its ground truth.

    log_prices holds N+1 raw log-prices (price levels are exp of these; the
    name is the flag). true_iv and true_iq are the discretized integrals
    over the fine grid, so they are the exact targets for this path, not
    model expectations. jump_times index into the return series (jump at t
    shifts every log-price from t+1 on).
    """

    log_prices: np.ndarray
    true_iv: float
    true_iq: float
    span: float = 1.0
    jump_times: tuple[int, ...] = ()
    jump_sizes: tuple[float, ...] = ()
    outlier_index: int | None = None
    noise_omega2: float | None = None
    diagnostics: dict = field(default_factory=dict)

    def __post_init__(self):
        p = np.asarray(self.log_prices, dtype=float)
        if p.ndim != 1 or p.size < 2:
            raise DataError("a path needs at least 2 log-prices")
        if not np.all(np.isfinite(p)):
            raise DataError("log-prices contain non-finite values")
        p = p.copy()
        p.flags.writeable = False
        object.__setattr__(self, "log_prices", p)
        if self.true_iv < 0.0 or self.true_iq < 0.0:
            raise ConfigError("true_iv and true_iq must be nonnegative")
        if len(self.jump_times) != len(self.jump_sizes):
            raise ConfigError("jump_times and jump_sizes must align")

    @property
    def n(self) -> int:
        """Number of returns."""
        return self.log_prices.size - 1

    def returns(self) -> ReturnSeries:
        return ReturnSeries(np.diff(self.log_prices), span=self.span)

    def price_levels(self) -> np.ndarray:
        return np.exp(self.log_prices)


@njit(cache=True)
def _heston_steps(z, v0, drift_const, drift_slope, vol_of_vol, rho, dt, substeps, N):
    returns = np.zeros(N)
    v = v0
    iv = 0.0
    iq = 0.0
    trunc = 0
    sdt = math.sqrt(dt)
    rho_bar = math.sqrt(1.0 - rho * rho)
    for f in range(N * substeps):
        vp = v
        if vp < 0.0:
            vp = 0.0
            trunc += 1
        s = math.sqrt(vp)
        returns[f // substeps] += s * (rho * z[f, 0] + rho_bar * z[f, 1]) * sdt
        iv += vp * dt
        iq += vp * vp * dt
        v = v + (drift_const - drift_slope * vp) * dt + vol_of_vol * s * z[f, 0] * sdt
    return returns, iv, iq, trunc


@njit(cache=True)
def _sev_nd_steps(z, v0, a0, a1, a2, a_inv, b0, b1, b_pow, dt, substeps, N):
    returns = np.zeros(N)
    v = v0
    iv = 0.0
    iq = 0.0
    trunc = 0
    sdt = math.sqrt(dt)
    for f in range(N * substeps):
        vp = v
        if vp < 0.0:
            vp = 0.0
            trunc += 1
        s = math.sqrt(vp)
        returns[f // substeps] += s * z[f, 1] * sdt
        iv += vp * dt
        iq += vp * vp * dt
        # the reciprocal drift term repels the origin; floor it so a
        # truncated state cannot divide by zero
        vfl = vp if vp > 1e-6 else 1e-6
        drift = a0 + a1 * vp + a2 * vp * vp + a_inv / vfl
        diff2 = b0 * vp + b1 * vfl ** (0.5 * b_pow)
        v = v + drift * dt + math.sqrt(diff2) * z[f, 0] * sdt
    return returns, iv, iq, trunc


@njit(cache=True)
def _s_exp(u, u0):
    if u <= u0:
        return math.exp(u)
    return math.exp(u0) * math.sqrt(1.0 - u0 + u * u / u0)


@njit(cache=True)
def _sv2f_steps(z, f1_0, f2_0, link_const, beta1, beta2, mr1, mr2,
                f2_vol_slope, rho, dt, substeps, N):
    returns = np.zeros(N)
    f1 = f1_0
    f2 = f2_0
    iv = 0.0
    iq = 0.0
    u0 = math.log(1.5)
    sdt = math.sqrt(dt)
    w_resid = math.sqrt(1.0 - 2.0 * rho * rho)
    for f in range(N * substeps):
        v = _s_exp(link_const + beta1 * f1 + beta2 * f2, u0)
        s = math.sqrt(v)
        dw = rho * (z[f, 0] + z[f, 1]) + w_resid * z[f, 2]
        returns[f // substeps] += s * dw * sdt
        iv += v * dt
        iq += v * v * dt
        f1 = f1 - mr1 * f1 * dt + z[f, 0] * sdt
        f2 = f2 - mr2 * f2 * dt + (1.0 + f2_vol_slope * f2) * z[f, 1] * sdt
    return returns, iv, iq, 0


def simulate_path(model: ModelSpec, N: int, seed: int, substeps: int = 10,
                  span: float = 1.0) -> PathResult:
    """Euler-discretized log-price path with exact path-level IV and IQ.

    The variance process steps at N*substeps resolution; returns aggregate
    to the N observation intervals. IV and IQ accumulate on the fine grid.
    The constant-volatility model skips the fine grid entirely (its IV is
    sigma2*span regardless), so its output does not depend on substeps.
    """
    if not isinstance(N, (int, np.integer)) or N < 1:
        raise ConfigError(f"N must be a positive integer, got {N!r}")
    if not isinstance(substeps, (int, np.integer)) or substeps < 1:
        raise ConfigError(f"substeps must be a positive integer, got {substeps!r}")
    if not math.isfinite(span) or span <= 0.0:
        raise ConfigError(f"span must be positive and finite, got {span}")
    check_seed(seed)
    rng = substream(seed, STREAM_PATH)
    p = model.params

    if model.kind == BM:
        sigma2 = p["sigma2"]
        r = math.sqrt(sigma2 * span / N) * rng.standard_normal(N)
        iv = sigma2 * span
        iq = sigma2 * sigma2 * span
        trunc, fine = 0, N
    else:
        fine = N * int(substeps)
        dt = span / fine
        if model.kind in (SV, SV_LEV):
            z = rng.standard_normal((fine, 2))
            r, iv, iq, trunc = _heston_steps(
                z, p["v0"], p["drift_const"], p["drift_slope"],
                math.sqrt(p["vol_of_vol2"]), p["rho"], dt, int(substeps), int(N))
        elif model.kind == SEV_ND:
            z = rng.standard_normal((fine, 2))
            r, iv, iq, trunc = _sev_nd_steps(
                z, p["v0"], p["a0"], p["a1"], p["a2"], p["a_inv"],
                p["b0"], p["b1"], p["b_pow"], dt, int(substeps), int(N))
        else:
            z = rng.standard_normal((fine, 3))
            r, iv, iq, trunc = _sv2f_steps(
                z, p["f1_0"], p["f2_0"], p["link_const"], p["beta1"], p["beta2"],
                p["mr1"], p["mr2"], p["f2_vol_slope"], p["rho"],
                dt, int(substeps), int(N))

    log_prices = np.concatenate(([0.0], np.cumsum(r)))
    return PathResult(
        log_prices=log_prices,
        true_iv=float(iv),
        true_iq=float(iq),
        span=float(span),
        diagnostics={
            "truncated_steps": float(trunc),
            "fine_steps": float(fine),
            "substeps": float(substeps),
        },
    )


def add_jumps(path: PathResult, n_J: int, v_J: float, seed: int) -> PathResult:
    """Add n_J Gaussian jumps with total squared size v_J * true_iv.

    Jump sizes are i.i.d. standard normal draws rescaled as a group, placed
    at distinct uniform return indices; each jump permanently shifts the
    subsequent log-prices. true_iv is unchanged: jumps are not diffusive
    variation, which is exactly what jump-robust estimators exploit.
    """
    if not isinstance(n_J, (int, np.integer)) or n_J < 1:
        raise ConfigError(f"n_J must be a positive integer, got {n_J!r}")
    if not v_J > 0.0:
        raise ConfigError(f"v_J must be positive, got {v_J}")
    if n_J > path.n:
        raise DataError(f"cannot place {n_J} jumps on {path.n} returns")
    check_seed(seed)
    rng = substream(seed, STREAM_JUMPS)
    raw = rng.standard_normal(n_J)
    norm2 = float(raw @ raw)
    if norm2 == 0.0:
        raise DataError("degenerate jump draw (all zeros)")
    sizes = raw * math.sqrt(v_J * path.true_iv / norm2)
    idx = np.sort(rng.choice(path.n, size=n_J, replace=False))

    logp = path.log_prices.copy()
    for t, j in zip(idx, sizes):
        logp[t + 1:] += j
    return replace(
        path,
        log_prices=logp,
        jump_times=path.jump_times + tuple(int(t) for t in idx),
        jump_sizes=path.jump_sizes + tuple(float(j) for j in sizes),
    )


def add_outlier(path: PathResult, v_O: float, seed: int) -> PathResult:
    """Perturb one interior log-price by o with 2 o^2 = v_O * true_iv.

    A single misprinted price distorts the two adjacent returns by +o and
    -o, adding 2 o^2 of spurious squared variation; the random sign and
    interior position follow the same substream convention as the other
    contaminations.
    """
    if not v_O > 0.0:
        raise ConfigError(f"v_O must be positive, got {v_O}")
    if path.n < 3:
        raise DataError(f"outlier needs at least 3 returns, got {path.n}")
    check_seed(seed)
    rng = substream(seed, STREAM_OUTLIER)
    o = math.sqrt(0.5 * v_O * path.true_iv)
    sign = 1.0 if rng.random() < 0.5 else -1.0
    t = int(rng.integers(1, path.n))  # price index, never an endpoint

    logp = path.log_prices.copy()
    logp[t] += sign * o
    return replace(path, log_prices=logp, outlier_index=t)


def add_noise(path: PathResult, gamma2: float, seed: int) -> PathResult:
    """Add i.i.d. Gaussian observation noise, omega^2 = gamma2 * true_iv / N.

    gamma2 is the noise ratio: E(RV) on the contaminated path equals
    IV (1 + 2 gamma2). gamma2 = 0 returns the path unchanged (recorded).
    """
    if gamma2 < 0.0:
        raise ConfigError(f"gamma2 must be nonnegative, got {gamma2}")
    check_seed(seed)
    omega2 = gamma2 * path.true_iv / path.n
    if gamma2 == 0.0 or omega2 == 0.0:
        return replace(path, noise_omega2=float(omega2))
    rng = substream(seed, STREAM_NOISE)
    u = math.sqrt(omega2) * rng.standard_normal(path.n + 1)
    return replace(path, log_prices=path.log_prices + u, noise_omega2=float(omega2))
