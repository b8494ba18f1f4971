"""Replication studies: bias/efficiency tables, theta tables, MSE-vs-K curves.

Everything here is deterministic given the experiment config: replication
r of an experiment with base seed s simulates its path from seed s XOR r,
contamination draws come from per-purpose substreams of the same seed, and
metric reductions run in fixed order. Adding or removing estimators from a
config therefore never changes the simulated paths.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import constants as const
from ._rng import check_seed, replication_seed
from .constants import ABSOLUTE, SIGNED, MonteCarlo, ScalingTable, ThetaMatrix
from .errors import ConfigError, QRVError
from .estimators import (
    BLOCKED,
    DEFAULT_LAMBDAS,
    SUBSAMPLED,
    QuantileConfig,
    ReturnSeries,
    bpv,
    feasible_ci,
    medrv,
    minrv,
    qrq,
    qrv,
    rv,
    trv,
)
from .preavg import (
    AUTOCOVARIANCE,
    PreAvgConfig,
    msrv,
    msrv_optimal_q,
    noise_variance,
    qrv_star,
    qrv_star_avar,
)
from .simulate import ModelSpec, PathResult, add_jumps, add_noise, add_outlier, simulate_path

ESTIMATOR_NAMES = ("rv", "bpv", "trv", "medrv", "minrv", "qrv", "qrv_star", "msrv")
ASYMPTOTIC = "asymptotic"


@dataclass(frozen=True)
class EstimatorSpec:
    """An estimator by name plus whatever configuration it needs.

    options:
      qrv       m, lambdas, weights (omit for asymptotically optimal),
                mode (blocked | subsampled), variant
      qrv_star  K, m, lambdas, weights (omit as above), noise_method
      trv       omega_bar, c
      msrv      q
      rv, bpv, medrv, minrv take none.
    """

    name: str
    options: dict = field(default_factory=dict)
    label: str = ""

    def __post_init__(self):
        if self.name not in ESTIMATOR_NAMES:
            raise ConfigError(f"unknown estimator {self.name!r}; choose from {ESTIMATOR_NAMES}")
        if not self.label:
            object.__setattr__(self, "label", self._default_label())
        # fail fast on bad options: building the callable validates them
        self.build()

    def _default_label(self) -> str:
        o = self.options
        if self.name == "qrv":
            return f"qrv[{o.get('mode', BLOCKED)},m={o.get('m', 20)}]"
        if self.name == "qrv_star":
            return f"qrv_star[K={o.get('K', '?')},m={o.get('m', 40)}]"
        if self.name == "msrv":
            return f"msrv[q={o.get('q', '?')}]"
        return self.name

    def quantile_config(self) -> QuantileConfig:
        if self.name != "qrv":
            raise ConfigError(f"estimator {self.name!r} has no quantile configuration")
        o = self.options
        m = int(o.get("m", 20))
        lambdas = tuple(o.get("lambdas", DEFAULT_LAMBDAS))
        mode = o.get("mode", BLOCKED)
        variant = o.get("variant", SIGNED)
        if "weights" in o:
            return QuantileConfig(lambdas=lambdas, weights=tuple(o["weights"]),
                                  m=m, mode=mode, variant=variant)
        return QuantileConfig.asymptotic_optimal(lambdas=lambdas, m=m,
                                                 mode=mode, variant=variant)

    def preavg_config(self) -> PreAvgConfig:
        if self.name != "qrv_star":
            raise ConfigError(f"estimator {self.name!r} has no pre-averaging configuration")
        o = self.options
        if "K" not in o:
            raise ConfigError("qrv_star needs an explicit pre-averaging window K")
        K = int(o["K"])
        m = int(o.get("m", 40))
        lambdas = tuple(o.get("lambdas", DEFAULT_LAMBDAS))
        if "weights" in o:
            return PreAvgConfig(K=K, lambdas=lambdas, weights=tuple(o["weights"]), m=m)
        return PreAvgConfig.asymptotic_optimal(K=K, lambdas=lambdas, m=m)

    def build(self, scaling: ScalingTable | None = None):
        """A callable ReturnSeries -> float for this spec."""
        name, o = self.name, self.options
        if name == "rv":
            return rv
        if name == "bpv":
            return bpv
        if name == "medrv":
            return medrv
        if name == "minrv":
            return minrv
        if name == "trv":
            omega_bar = float(o.get("omega_bar", 0.47))
            c = o.get("c")
            return lambda s: trv(s, omega_bar=omega_bar, c=c)
        if name == "qrv":
            cfg = self.quantile_config()
            return lambda s: qrv(s, cfg, scaling).value
        if name == "qrv_star":
            cfg = self.preavg_config()
            method = o.get("noise_method", AUTOCOVARIANCE)
            return lambda s: qrv_star(s, cfg, scaling,
                                      noise_variance(s, method)).value
        if name == "msrv":
            if "q" not in o:
                raise ConfigError("msrv needs an explicit number of scales q")
            q = int(o["q"])
            if q < 2:
                raise ConfigError(f"number of scales q must be >= 2, got {q}")
            return lambda s: msrv(s, q)
        raise ConfigError(f"unknown estimator {name!r}")


@dataclass(frozen=True)
class Contamination:
    """Optional path contamination, applied jumps -> outlier -> noise.

    The order is fixed and documented; each step draws from its own
    substream of the replication seed, so the steps commute up to float
    rounding and toggling one never changes another's draws.
    """

    n_jumps: int = 0
    v_jumps: float = 0.0
    v_outlier: float = 0.0
    gamma2: float = 0.0

    def __post_init__(self):
        if (self.n_jumps > 0) != (self.v_jumps > 0.0):
            raise ConfigError("jumps need both n_jumps >= 1 and v_jumps > 0")
        if self.n_jumps < 0 or self.v_jumps < 0.0 or self.v_outlier < 0.0 or self.gamma2 < 0.0:
            raise ConfigError("contamination settings must be nonnegative")

    @property
    def any(self) -> bool:
        return self.n_jumps > 0 or self.v_outlier > 0.0 or self.gamma2 > 0.0

    def apply(self, path: PathResult, seed: int) -> PathResult:
        if self.n_jumps > 0:
            path = add_jumps(path, self.n_jumps, self.v_jumps, seed)
        if self.v_outlier > 0.0:
            path = add_outlier(path, self.v_outlier, seed)
        if self.gamma2 > 0.0:
            path = add_noise(path, self.gamma2, seed)
        return path


@dataclass(frozen=True)
class ExperimentConfig:
    model: ModelSpec
    N: int
    estimators: tuple[EstimatorSpec, ...]
    replications: int = 10_000
    base_seed: int = 0
    contamination: Contamination = field(default_factory=Contamination)
    substeps: int = 10

    def __post_init__(self):
        if not isinstance(self.N, (int, np.integer)) or self.N < 1:
            raise ConfigError(f"N must be a positive integer, got {self.N!r}")
        if not isinstance(self.replications, (int, np.integer)) or self.replications < 1:
            raise ConfigError(f"replications must be >= 1, got {self.replications!r}")
        check_seed(self.base_seed)
        object.__setattr__(self, "estimators", tuple(self.estimators))

    def path(self, rep: int) -> PathResult:
        seed = replication_seed(self.base_seed, rep)
        path = simulate_path(self.model, self.N, seed, substeps=self.substeps)
        return self.contamination.apply(path, seed)


@dataclass(frozen=True)
class BenchRow:
    """Bias and efficiency of one estimator across the replications.

    bias is E(estimate / true_iv); efficiency is the sample variance of
    sqrt(N) (estimate - true_iv) / sqrt(true_iq), both with Monte Carlo
    standard errors (the efficiency one via the fourth central moment).
    """

    label: str
    bias: float
    bias_stderr: float
    efficiency: float
    efficiency_stderr: float
    replications_used: int
    failures: int

    def to_record(self) -> dict:
        return {
            "label": self.label,
            "bias": self.bias,
            "bias_stderr": self.bias_stderr,
            "efficiency": self.efficiency,
            "efficiency_stderr": self.efficiency_stderr,
            "replications_used": self.replications_used,
            "failures": self.failures,
        }


def _variance_with_stderr(z: np.ndarray) -> tuple[float, float]:
    n = z.size
    v = float(np.var(z, ddof=1))
    m4 = float(np.mean((z - z.mean()) ** 4))
    se = math.sqrt(max(m4 - v * v, 0.0) / n)
    return v, se


def bias_efficiency_experiment(config: ExperimentConfig,
                               scaling: ScalingTable | None = None) -> list[BenchRow]:
    """One BenchRow per estimator over config.replications simulated paths.

    An estimator that raises on a replication is recorded in that row's
    failure count and excluded from its metrics; other estimators and
    replications are unaffected.
    """
    fns = [spec.build(scaling) for spec in config.estimators]
    ratios: list[list[float]] = [[] for _ in fns]
    zs: list[list[float]] = [[] for _ in fns]
    failures = [0] * len(fns)
    sqrt_n = math.sqrt(config.N)

    for rep in range(config.replications):
        path = config.path(rep)
        series = path.returns()
        iv, iq = path.true_iv, path.true_iq
        for i, fn in enumerate(fns):
            try:
                est = fn(series)
            except QRVError:
                failures[i] += 1
                continue
            ratios[i].append(est / iv)
            zs[i].append(sqrt_n * (est - iv) / math.sqrt(iq))

    rows = []
    for spec, ra, za, fail in zip(config.estimators, ratios, zs, failures):
        ra = np.asarray(ra)
        za = np.asarray(za)
        if ra.size < 2:
            rows.append(BenchRow(label=spec.label, bias=float("nan"),
                                 bias_stderr=float("nan"), efficiency=float("nan"),
                                 efficiency_stderr=float("nan"),
                                 replications_used=int(ra.size), failures=fail))
            continue
        eff, eff_se = _variance_with_stderr(za)
        rows.append(BenchRow(
            label=spec.label,
            bias=float(ra.mean()),
            bias_stderr=float(ra.std(ddof=1) / math.sqrt(ra.size)),
            efficiency=eff,
            efficiency_stderr=eff_se,
            replications_used=int(ra.size),
            failures=fail,
        ))
    return rows


@dataclass(frozen=True)
class ThetaCell:
    mode: str
    m: int | None
    lambdas: tuple[float, ...]
    theta: float
    stderr: float
    weights: tuple[float, ...]

    def to_record(self) -> dict:
        return {
            "mode": self.mode,
            "m": self.m,
            "lambdas": list(self.lambdas),
            "theta": self.theta,
            "stderr": self.stderr,
            "weights": list(self.weights),
        }


def _achieved_theta_stderr(theta: ThetaMatrix, weights: np.ndarray) -> float:
    # first-order: d theta* / d Theta_ij = w_i w_j; entries treated as
    # independent estimates (cross-entry correlation ignored)
    if theta.stderr is None:
        return 0.0
    se2 = 0.0
    k = len(weights)
    for i in range(k):
        for j in range(i, k):
            mult = 1.0 if i == j else 2.0
            se2 += (mult * weights[i] * weights[j] * theta.stderr[i, j]) ** 2
    return math.sqrt(se2)


def efficiency_table(ms, quantile_sets, modes=(BLOCKED, SUBSAMPLED, ASYMPTOTIC),
                     variant: str = SIGNED,
                     precision: MonteCarlo | None = None,
                     table: ScalingTable | None = None) -> list[ThetaCell]:
    """Scaled-error variance theta for every (mode, m, lambda-set) cell.

    Each cell reports the optimally weighted theta, i.e. the variance
    constant attained by the best linear combination of the requested
    quantiles; single-quantile cells just report the diagonal value. The
    asymptotic mode ignores m (closed form, zero stderr).
    """
    cells = []
    for mode in modes:
        for lambdas in quantile_sets:
            lambdas = tuple(lambdas)
            if mode == ASYMPTOTIC:
                theta = const.theta_asymptotic(lambdas, variant)
                sol = const.optimal_weights(theta)
                cells.append(ThetaCell(mode=mode, m=None, lambdas=lambdas,
                                       theta=sol.achieved_theta, stderr=0.0,
                                       weights=sol.weights))
                continue
            for m in ms:
                if mode == BLOCKED:
                    theta = const.theta_blocked(m, lambdas, precision=precision, table=table)
                elif mode == SUBSAMPLED:
                    theta = const.theta_subsampled(m, lambdas, precision=precision, table=table)
                else:
                    raise ConfigError(f"unknown mode {mode!r}")
                if len(lambdas) == 1:
                    w = np.array([1.0])
                    value = float(theta.values[0, 0])
                else:
                    sol = const.optimal_weights(theta)
                    w = np.asarray(sol.weights)
                    value = sol.achieved_theta
                cells.append(ThetaCell(mode=mode, m=m, lambdas=lambdas,
                                       theta=value,
                                       stderr=_achieved_theta_stderr(theta, w),
                                       weights=tuple(float(x) for x in w)))
    return cells


@dataclass(frozen=True)
class MseCurve:
    points: tuple[tuple[int, float], ...]   # (K, log MSE)
    argmin_K: int
    msrv_log_mse: float
    msrv_q: int
    skipped: tuple[tuple[int, str], ...]

    def to_records(self) -> list[dict]:
        return [{"K": k, "log_mse": v} for k, v in self.points]


def mse_curve_K(config: ExperimentConfig, K_values,
                scaling: ScalingTable | None = None) -> MseCurve:
    """Log MSE of the noise-corrected estimator as a function of K.

    The experiment's single qrv_star spec supplies m, quantiles, and
    weights; K is swept over K_values, evaluating every feasible K on the
    same simulated paths. The multi-scale RV reference line runs at its
    MSE-optimal scale count computed from the path ground truth (it is a
    benchmark, not a feasible competitor). Infeasible K values (window
    exceeding the data) are skipped with a reason.
    """
    star_specs = [s for s in config.estimators if s.name == "qrv_star"]
    if len(star_specs) != 1:
        raise ConfigError("mse_curve_K needs exactly one qrv_star estimator spec")
    base = star_specs[0]

    configs: dict[int, PreAvgConfig] = {}
    skipped = []
    for K in K_values:
        K = int(K)
        if K < 2:
            skipped.append((K, "K must be >= 2"))
            continue
        cfg = EstimatorSpec(name="qrv_star", options={**base.options, "K": K}).preavg_config()
        if config.N < cfg.span_L:
            skipped.append((K, f"needs m(K-1)={cfg.span_L} returns, N={config.N}"))
            continue
        configs[K] = cfg
    if not configs:
        raise ConfigError("no feasible K in K_values")

    method = base.options.get("noise_method", AUTOCOVARIANCE)
    sq_errors: dict[int, list[float]] = {K: [] for K in configs}
    msrv_sq: list[float] = []
    msrv_qs: list[int] = []
    for rep in range(config.replications):
        path = config.path(rep)
        series = path.returns()
        iv = path.true_iv
        noise = noise_variance(series, method)
        for K, cfg in configs.items():
            est = qrv_star(series, cfg, scaling, noise).value
            sq_errors[K].append((est - iv) ** 2)
        omega2_true = config.contamination.gamma2 * iv / config.N
        q = msrv_optimal_q(iv, path.true_iq, omega2_true, config.N)
        msrv_qs.append(q)
        msrv_sq.append((msrv(series, q) - iv) ** 2)

    points = tuple((K, math.log(float(np.mean(sq_errors[K])))) for K in configs)
    argmin_K = min(points, key=lambda kv: kv[1])[0]
    return MseCurve(
        points=points,
        argmin_K=argmin_K,
        msrv_log_mse=math.log(float(np.mean(msrv_sq))),
        msrv_q=int(round(float(np.median(msrv_qs)))),
        skipped=tuple(skipped),
    )


@dataclass(frozen=True)
class CoverageResult:
    coverage: float
    stderr: float
    hits: int
    replications_used: int
    failures: int
    level: float


def coverage_experiment(config: ExperimentConfig, level: float = 0.95,
                        scaling: ScalingTable | None = None) -> CoverageResult:
    """Fraction of replications whose feasible interval covers true_iv.

    The experiment's single estimator spec must produce an interval: a qrv
    spec pairs the estimate with its quarticity analogue and the matching
    theta (attained by the spec's weights), a qrv_star spec uses its
    feasible asymptotic covariance at the quarter rate.
    """
    if not 0.0 < level < 1.0:
        raise ConfigError(f"level must be in (0, 1), got {level}")
    if len(config.estimators) != 1:
        raise ConfigError("coverage_experiment needs exactly one estimator spec")
    spec = config.estimators[0]

    if spec.name == "qrv":
        cfg = spec.quantile_config()
        if cfg.mode == BLOCKED:
            theta_m = const.theta_blocked(cfg.m, cfg.lambdas.lambdas, table=scaling)
        else:
            theta_m = const.theta_subsampled(cfg.m, cfg.lambdas.lambdas, table=scaling)
        theta_val = theta_m.attained(np.asarray(cfg.weights))

        def interval(series: ReturnSeries):
            iv_est = qrv(series, cfg, scaling)
            iq_est = qrq(series, cfg, scaling)
            return feasible_ci(iv_est, iq_est, theta_val, series.n, level).ci
    elif spec.name == "qrv_star":
        cfg = spec.preavg_config()
        method = spec.options.get("noise_method", AUTOCOVARIANCE)
        from scipy.stats import norm as _norm
        z = float(_norm.ppf(0.5 * (1.0 + level)))
        w = np.asarray(cfg.weights)

        def interval(series: ReturnSeries):
            est = qrv_star(series, cfg, scaling, noise_variance(series, method)).value
            A = qrv_star_avar(series, cfg, scaling)
            se = math.sqrt(max(float(w @ A @ w), 0.0)) / series.n ** 0.25
            return est - z * se, est + z * se, level
    else:
        raise ConfigError(f"estimator {spec.name!r} does not produce a feasible interval")

    hits = 0
    used = 0
    failures = 0
    for rep in range(config.replications):
        path = config.path(rep)
        try:
            lo, hi, _ = interval(path.returns())
        except QRVError:
            failures += 1
            continue
        used += 1
        if lo <= path.true_iv <= hi:
            hits += 1
    coverage = hits / used if used else float("nan")
    stderr = math.sqrt(coverage * (1.0 - coverage) / used) if used else float("nan")
    return CoverageResult(coverage=coverage, stderr=stderr, hits=hits,
                          replications_used=used, failures=failures, level=level)


def plot_mse_curve(curve: MseCurve, out_path: str, title: str = "") -> None:
    """Write a simple SVG line chart of the K -> log MSE curve."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    ks = [k for k, _ in curve.points]
    ys = [v for _, v in curve.points]
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(ks, ys, marker="o", label="qrv_star")
    ax.axhline(curve.msrv_log_mse, linestyle="--", color="gray",
               label=f"msrv (q={curve.msrv_q})")
    ax.axvline(curve.argmin_K, linestyle=":", color="C1",
               label=f"argmin K={curve.argmin_K}")
    ax.set_xlabel("pre-averaging window K")
    ax.set_ylabel("log MSE")
    if title:
        ax.set_title(title)
    ax.legend()
    fig.tight_layout()
    fig.savefig(out_path, format="svg")
    plt.close(fig)
