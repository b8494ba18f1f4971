"""Scaling constants for quantile-based variance estimation.

Everything here concerns moments of order statistics of i.i.d. standard
normal blocks: the normalizers nu_r(m, lambda) that turn block quantiles
into variance estimates, their cross- and lagged moments, and the matrices
Theta whose quadratic forms give estimator efficiency and optimal quantile
weights.

The moments are expensive to simulate at production precision, so computed
values live in an append-only cache (ScalingTable). The package ships a
prebuilt cache covering every configuration exercised by the test suite and
the CLI defaults; anything missing is recomputed on demand from documented
RNG substreams, so a recomputed value is bit-identical to the shipped one.
"""

from __future__ import annotations

import json
import math
import os
import warnings
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
from scipy import integrate
from scipy.special import gammaln, xlogy
from scipy.stats import chi2, norm

from ._rng import STREAM_LAGGED, STREAM_NU, check_seed, substream
from .errors import CacheError, ConfigError, NegativeWeightWarning, NumericalError

SIGNED = "signed-symmetric"
ABSOLUTE = "absolute"

STAT_POWER = "power"      # E[(x_(hi)^2 + x_(lo)^2)^r], resp. E[|x|_(k)^(2r)]
STAT_QUARTIC = "quartic"  # E[x_(hi)^4 + x_(lo)^4] (signed only; absolute reduces to r=2)

CACHE_FORMAT = "qrv-scaling-table"
CACHE_VERSION = 1

DEFAULT_SEED = 0
DEFAULT_NU_REPLICATIONS = 10_000_000
DEFAULT_LAG_REPLICATIONS = 1_000_000
MIN_MC_REPLICATIONS = 100_000

# Batch layout of the Monte Carlo accumulators. These are part of the
# reproducibility contract: results are sums over fixed-size batches, each
# drawn from the substream (seed, stream, m[, lag], batch_index), so a value
# recomputed for a single key matches the bulk run that filled the cache.
_NU_BATCH_ELEMENTS = 16_000_000
_LAG_BATCH_ELEMENTS = 16_000_000

_INTEGRATION_TRUNCATION = 8.0  # standard-normal mass beyond +-8 is ~1e-15

_LAMBDA_TOL = 1e-9


def _nu_batch_rows(m: int) -> int:
    return max(1, min(1_000_000, _NU_BATCH_ELEMENTS // m))


def _lag_batch_rows(m: int) -> int:
    return max(1, min(250_000, _LAG_BATCH_ELEMENTS // (2 * m)))


def lambda_index(m: int, lam: float) -> int:
    """Return lambda*m as an exact integer rank, or raise ConfigError.

    The estimator is only defined when lambda*m is a natural number; silent
    rounding would change the estimator, so anything off by more than 1e-9
    is rejected.
    """
    k = lam * m
    rk = round(k)
    if abs(k - rk) > _LAMBDA_TOL:
        raise ConfigError(f"lambda*m must be an integer: lambda={lam}, m={m} gives {k}")
    return int(rk)


def _check_lambda(m: int, lam: float, variant: str) -> int:
    if variant == SIGNED:
        if not 0.5 < lam < 1.0:
            raise ConfigError(f"signed variant requires 1/2 < lambda < 1, got {lam}")
    elif variant == ABSOLUTE:
        if not 0.0 <= lam < 1.0:
            raise ConfigError(f"absolute variant requires 0 <= lambda < 1, got {lam}")
    else:
        raise ConfigError(f"unknown variant {variant!r}")
    k = lambda_index(m, lam)
    if k < 1:
        raise ConfigError(f"lambda*m must be >= 1, got lambda={lam}, m={m}")
    return k


@dataclass(frozen=True)
class QuantileVector:
    """Strictly increasing quantiles in (1/2, 1) for the signed-symmetric QRV."""

    lambdas: tuple[float, ...]

    def __post_init__(self):
        lams = tuple(float(x) for x in self.lambdas)
        object.__setattr__(self, "lambdas", lams)
        if not lams:
            raise ConfigError("empty quantile vector")
        for lam in lams:
            if not 0.5 < lam < 1.0:
                raise ConfigError(f"quantile {lam} outside (1/2, 1)")
        if any(b <= a for a, b in zip(lams, lams[1:])):
            raise ConfigError(f"quantiles must be strictly increasing, got {lams}")

    def __len__(self):
        return len(self.lambdas)

    def __iter__(self):
        return iter(self.lambdas)


@dataclass(frozen=True)
class AbsQuantileVector:
    """Strictly increasing quantiles in [0, 1) for the absolute-return QRV."""

    lambdas: tuple[float, ...]

    def __post_init__(self):
        lams = tuple(float(x) for x in self.lambdas)
        object.__setattr__(self, "lambdas", lams)
        if not lams:
            raise ConfigError("empty quantile vector")
        for lam in lams:
            if not 0.0 <= lam < 1.0:
                raise ConfigError(f"absolute quantile {lam} outside [0, 1)")
        if any(b <= a for a, b in zip(lams, lams[1:])):
            raise ConfigError(f"quantiles must be strictly increasing, got {lams}")

    def __len__(self):
        return len(self.lambdas)

    def __iter__(self):
        return iter(self.lambdas)


@dataclass(frozen=True)
class MomentKey:
    """Identifies one cached order-statistic moment.

    lam2 set means the same-block cross moment E[q(lam) * q(lam2)] (it
    canonicalizes to a plain power moment when lam2 == lam). lag = k >= 1
    means the overlapping-window moment E[q0(lam) * qk(lam2)], where the two
    blocks share m - k of their m standard normals; the value is symmetric
    in (lam, lam2), and keys store the sorted pair. stat="quartic" is the
    sum of fourth powers of the two signed order statistics, the quarticity
    normalizer.
    """

    m: int
    lam: float
    lam2: float | None = None
    r: float = 1.0
    variant: str = SIGNED
    lag: int | None = None
    stat: str = STAT_POWER

    def __post_init__(self):
        if not isinstance(self.m, (int, np.integer)) or self.m < 1:
            raise ConfigError(f"m must be a positive integer, got {self.m!r}")
        object.__setattr__(self, "m", int(self.m))
        object.__setattr__(self, "lam", float(self.lam))
        if self.lam2 is not None:
            object.__setattr__(self, "lam2", float(self.lam2))
        object.__setattr__(self, "r", float(self.r))
        if self.r <= 0:
            raise ConfigError(f"power r must be positive, got {self.r}")
        if self.stat not in (STAT_POWER, STAT_QUARTIC):
            raise ConfigError(f"unknown stat {self.stat!r}")
        if self.lag is not None:
            if not isinstance(self.lag, (int, np.integer)):
                raise ConfigError(f"lag must be an integer, got {self.lag!r}")
            if not 0 <= self.lag <= self.m:
                raise ConfigError(f"lag must satisfy 0 <= lag <= m, got {self.lag}")
            object.__setattr__(self, "lag", int(self.lag))

        _check_lambda(self.m, self.lam, self.variant)
        if self.lam2 is not None:
            _check_lambda(self.m, self.lam2, self.variant)

        # --- canonicalization ---
        # lag 0 means the two windows coincide: same-block cross moment.
        if self.lag == 0:
            object.__setattr__(self, "lag", None)
        # absolute "quartic" is just the r=2 power of the single statistic
        if self.variant == ABSOLUTE and self.stat == STAT_QUARTIC:
            object.__setattr__(self, "stat", STAT_POWER)
            object.__setattr__(self, "r", 2.0)
        if self.stat == STAT_QUARTIC:
            if self.lam2 is not None or self.lag is not None:
                raise ConfigError("quartic moments take a single lambda and no lag")
            object.__setattr__(self, "r", 2.0)
        if self.lam2 is not None:
            if self.r != 1.0 and abs(self.lam2 - self.lam) > _LAMBDA_TOL:
                raise ConfigError("cross moments are defined for r=1 only")
            if abs(self.lam2 - self.lam) <= _LAMBDA_TOL:
                # E[q(lam)^r * q(lam)^r] = E[q(lam)^(2r)]
                if self.lag is None:
                    object.__setattr__(self, "r", 2.0 * self.r)
                object.__setattr__(self, "lam2", None)
            elif self.lam2 < self.lam:
                lo, hi = self.lam2, self.lam
                object.__setattr__(self, "lam", lo)
                object.__setattr__(self, "lam2", hi)
        if self.lag is not None and self.r != 1.0:
            raise ConfigError("lagged moments are defined for r=1 only")
        if self.lag is not None and self.variant != SIGNED:
            raise ConfigError("lagged moments are implemented for the signed variant only")

    def canonical(self) -> str:
        parts = [
            f"m={self.m}",
            f"lam={self.lam!r}",
            f"lam2={'' if self.lam2 is None else repr(self.lam2)}",
            f"r={self.r!r}",
            f"variant={self.variant}",
            f"lag={'' if self.lag is None else self.lag}",
            f"stat={self.stat}",
        ]
        return ";".join(parts)

    def default_replications(self) -> int:
        return DEFAULT_LAG_REPLICATIONS if self.lag is not None else DEFAULT_NU_REPLICATIONS


# ---------------------------------------------------------------------------
# precision requests

@dataclass(frozen=True)
class MonteCarlo:
    """Simulate the moment with a fixed replication count and seed."""

    replications: int = DEFAULT_NU_REPLICATIONS
    seed: int = DEFAULT_SEED

    def __post_init__(self):
        check_seed(self.seed)
        if self.replications < MIN_MC_REPLICATIONS:
            raise ConfigError(
                f"Monte Carlo needs at least {MIN_MC_REPLICATIONS} replications, "
                f"got {self.replications}"
            )


@dataclass(frozen=True)
class Integration:
    """Adaptive quadrature against the joint order-statistic density.

    Only available for signed-variant, r=1, single-lambda moments: that is
    where the bivariate density applies directly.
    """

    truncation: float = _INTEGRATION_TRUNCATION


@dataclass(frozen=True)
class ClosedForm:
    """Exact registered value; errors if the key has no closed form."""


# ---------------------------------------------------------------------------
# cache

@dataclass(frozen=True)
class ScalingEntry:
    key: MomentKey
    value: float
    stderr: float
    method: str
    replications: int
    seed: int

    def __post_init__(self):
        if self.method not in ("monte-carlo", "integration", "closed-form"):
            raise ConfigError(f"unknown method {self.method!r}")
        if self.key.r >= 1.0 and not self.value > 0.0:
            raise CacheError(f"moment {self.key.canonical()} must be positive, got {self.value}")
        if self.stderr < 0.0:
            raise CacheError("negative standard error")
        if self.method == "closed-form" and self.stderr != 0.0:
            raise CacheError("closed-form entries must have standard error 0")

    def to_record(self) -> dict:
        k = self.key
        return {
            "m": k.m,
            "lam": k.lam,
            "lam2": k.lam2,
            "r": k.r,
            "variant": k.variant,
            "lag": k.lag,
            "stat": k.stat,
            "value": self.value,
            "stderr": self.stderr,
            "method": self.method,
            "replications": self.replications,
            "seed": self.seed,
        }

    @staticmethod
    def from_record(rec: dict) -> "ScalingEntry":
        key = MomentKey(
            m=rec["m"],
            lam=rec["lam"],
            lam2=rec.get("lam2"),
            r=rec.get("r", 1.0),
            variant=rec.get("variant", SIGNED),
            lag=rec.get("lag"),
            stat=rec.get("stat", STAT_POWER),
        )
        return ScalingEntry(
            key=key,
            value=rec["value"],
            stderr=rec["stderr"],
            method=rec["method"],
            replications=rec["replications"],
            seed=rec["seed"],
        )


class ScalingTable:
    """Append-only store of computed scaling constants.

    Backed by a JSONL file whose first line is a version header; every other
    line is one entry. Entries are immutable: re-adding an identical entry
    is a no-op, adding a different value under an existing key raises
    CacheError. Tables opened readonly (or created without a path) keep
    additions in memory only.
    """

    def __init__(self, path: str | os.PathLike | None = None, readonly: bool = False):
        self.path = os.fspath(path) if path is not None else None
        self.readonly = readonly
        self._entries: dict[str, ScalingEntry] = {}
        if self.path is not None and os.path.exists(self.path):
            self._load()
        elif self.path is not None and not readonly:
            self._write_header()

    def _load(self):
        with open(self.path, "r", encoding="utf-8") as fh:
            header_line = fh.readline()
            if not header_line.strip():
                raise CacheError(f"{self.path}: empty cache file")
            header = json.loads(header_line)
            if header.get("format") != CACHE_FORMAT or header.get("version") != CACHE_VERSION:
                raise CacheError(f"{self.path}: unsupported cache header {header}")
            for lineno, line in enumerate(fh, start=2):
                line = line.strip()
                if not line:
                    continue
                try:
                    entry = ScalingEntry.from_record(json.loads(line))
                except (json.JSONDecodeError, KeyError) as exc:
                    raise CacheError(f"{self.path}:{lineno}: bad cache record ({exc})") from exc
                self._entries[entry.key.canonical()] = entry

    def _write_header(self):
        with open(self.path, "w", encoding="utf-8") as fh:
            fh.write(json.dumps({"format": CACHE_FORMAT, "version": CACHE_VERSION}) + "\n")

    def __len__(self):
        return len(self._entries)

    def __contains__(self, key: MomentKey):
        return key.canonical() in self._entries

    def get(self, key: MomentKey) -> ScalingEntry | None:
        return self._entries.get(key.canonical())

    def add(self, entry: ScalingEntry) -> ScalingEntry:
        ck = entry.key.canonical()
        existing = self._entries.get(ck)
        if existing is not None:
            if existing == entry:
                return existing
            raise CacheError(
                f"cache is append-only: {ck} already stored with "
                f"value {existing.value} (attempted {entry.value})"
            )
        self._entries[ck] = entry
        if self.path is not None and not self.readonly:
            with open(self.path, "a", encoding="utf-8") as fh:
                fh.write(json.dumps(entry.to_record()) + "\n")
        return entry

    def entries(self) -> list[ScalingEntry]:
        return list(self._entries.values())


@lru_cache(maxsize=1)
def default_table() -> ScalingTable:
    """The cache shipped with the package (readonly)."""
    from importlib.resources import files

    path = files("qrv").joinpath("data/constants_cache.jsonl")
    return ScalingTable(str(path), readonly=True)


def _resolve_table(table: ScalingTable | None) -> ScalingTable:
    return default_table() if table is None else table


# ---------------------------------------------------------------------------
# closed forms

def _closed_forms() -> dict[str, float]:
    # absolute-variant block minima / medians have textbook moments
    return {
        MomentKey(m=2, lam=0.5, variant=ABSOLUTE).canonical(): (math.pi - 2.0) / math.pi,
        MomentKey(m=3, lam=2.0 / 3.0, variant=ABSOLUTE).canonical():
            (6.0 - 4.0 * math.sqrt(3.0) + math.pi) / math.pi,
    }


_CLOSED_FORMS = _closed_forms()


def nu_asymptotic(lam: float, variant: str = SIGNED) -> float:
    """Large-m limit of the first-moment normalizer.

    Signed variant: both order statistics converge to +-c_lam with
    c_lam the standard-normal lam-quantile, so nu_1 -> 2*c_lam^2. Absolute
    variant: the single statistic converges to the chi-square(1) quantile
    d_lam, and nu_1 -> d_lam.
    """
    if variant == SIGNED:
        if not 0.5 < lam < 1.0:
            raise ConfigError(f"signed variant requires 1/2 < lambda < 1, got {lam}")
        c = norm.ppf(lam)
        return 2.0 * c * c
    if variant == ABSOLUTE:
        if not 0.0 < lam < 1.0:
            raise ConfigError(f"absolute variant requires 0 < lambda < 1, got {lam}")
        return float(chi2.ppf(lam, df=1))
    raise ConfigError(f"unknown variant {variant!r}")


# ---------------------------------------------------------------------------
# Monte Carlo backends

def _signed_columns(m: int, lam: float) -> tuple[int, int]:
    # 0-based positions of the lambda*m-th and (m - lambda*m + 1)-th order stats
    k = lambda_index(m, lam)
    return k - 1, m - k


def _block_request_values(sorted_x: np.ndarray, sorted_abs: np.ndarray | None,
                          key: MomentKey) -> np.ndarray:
    """Per-draw statistic for one key, given the pre-sorted block sample."""
    m = key.m
    if key.variant == ABSOLUTE:
        k = lambda_index(m, key.lam)
        v = sorted_abs[:, k - 1] ** 2
        return v if key.r == 1.0 else v ** key.r
    ihi, ilo = _signed_columns(m, key.lam)
    hi = sorted_x[:, ihi]
    lo = sorted_x[:, ilo]
    if key.stat == STAT_QUARTIC:
        return hi ** 4 + lo ** 4
    q = hi * hi + lo * lo
    if key.lam2 is not None:
        jhi, jlo = _signed_columns(m, key.lam2)
        q2 = sorted_x[:, jhi] ** 2 + sorted_x[:, jlo] ** 2
        return q * q2
    if key.r == 1.0:
        return q
    if key.r == 2.0:
        return q * q
    return q ** key.r


def _mc_block_moments(m: int, keys: list[MomentKey], replications: int,
                      seed: int) -> list[tuple[float, float]]:
    """Monte Carlo means of same-block statistics, one shared sample pass.

    All keys ride on the same draws, so each key's result is bit-identical
    whether computed alone or alongside others.
    """
    rows = _nu_batch_rows(m)
    need_abs = any(k.variant == ABSOLUTE for k in keys)
    need_signed = any(k.variant == SIGNED for k in keys)
    sums = np.zeros(len(keys))
    sumsqs = np.zeros(len(keys))
    done = 0
    batch = 0
    while done < replications:
        n = min(rows, replications - done)
        x = substream(seed, STREAM_NU, m, batch).standard_normal((n, m))
        sorted_x = np.sort(x, axis=1) if need_signed else None
        sorted_abs = np.sort(np.abs(x), axis=1) if need_abs else None
        for i, key in enumerate(keys):
            v = _block_request_values(sorted_x, sorted_abs, key)
            sums[i] += float(np.sum(v))
            sumsqs[i] += float(np.sum(v * v))
        done += n
        batch += 1
    out = []
    for i in range(len(keys)):
        mean = sums[i] / replications
        var = max(sumsqs[i] / replications - mean * mean, 0.0)
        out.append((mean, math.sqrt(var / replications)))
    return out


def _mc_lag_moments(m: int, lag: int, pairs: list[tuple[float, float]], replications: int,
                    seed: int) -> list[tuple[float, float]]:
    """Monte Carlo means of E[q0(lam_i) * q_lag(lam_j)], symmetrized in (i, j).

    Each replication draws m + lag standard normals; window 0 is the first m
    of them and window `lag` the last m, sharing m - lag values. The
    exchangeability of the two windows makes the moment symmetric in
    (lam_i, lam_j), so the symmetrized product is averaged.
    """
    if not 1 <= lag <= m:
        raise ConfigError(f"lag must be in 1..m, got {lag}")
    rows = _lag_batch_rows(m)
    sums = np.zeros(len(pairs))
    sumsqs = np.zeros(len(pairs))
    done = 0
    batch = 0
    while done < replications:
        n = min(rows, replications - done)
        x = substream(seed, STREAM_LAGGED, m, lag, batch).standard_normal((n, m + lag))
        s0 = np.sort(x[:, :m], axis=1)
        sk = np.sort(x[:, lag:], axis=1)
        for i, (la, lb) in enumerate(pairs):
            ahi, alo = _signed_columns(m, la)
            bhi, blo = _signed_columns(m, lb)
            qa0 = s0[:, ahi] ** 2 + s0[:, alo] ** 2
            qbk = sk[:, bhi] ** 2 + sk[:, blo] ** 2
            if abs(la - lb) <= _LAMBDA_TOL:
                v = qa0 * qbk
            else:
                qb0 = s0[:, bhi] ** 2 + s0[:, blo] ** 2
                qak = sk[:, ahi] ** 2 + sk[:, alo] ** 2
                v = 0.5 * (qa0 * qbk + qb0 * qak)
            sums[i] += float(np.sum(v))
            sumsqs[i] += float(np.sum(v * v))
        done += n
        batch += 1
    out = []
    for i in range(len(pairs)):
        mean = sums[i] / replications
        var = max(sumsqs[i] / replications - mean * mean, 0.0)
        out.append((mean, math.sqrt(var / replications)))
    return out


# ---------------------------------------------------------------------------
# integration backend

def joint_order_stat_density(x: float, y: float, m: int, lam: float) -> float:
    """Joint density of the symmetric order-statistic pair.

    Evaluates the joint pdf of (U_(m-lam*m+1), U_(lam*m)) for a block of m
    i.i.d. standard normals at the point (x, y); x is the lower-ranked
    coordinate, so the density vanishes for x >= y.
    """
    k = _check_lambda(m, lam, SIGNED)
    a = m - k + 1  # lower rank
    b = k          # upper rank
    if b - a < 1:
        raise ConfigError(
            f"ranks coincide for lambda={lam}, m={m}; the joint density needs 2*lambda*m >= m+2"
        )
    if x >= y:
        return 0.0
    fx = norm.cdf(x)
    fy = norm.cdf(y)
    logc = (
        gammaln(m + 1)
        - gammaln(a)
        - gammaln(b - a)
        - gammaln(m - b + 1)
    )
    logpdf = (
        logc
        + xlogy(a - 1, fx)
        + norm.logpdf(x)
        + xlogy(b - a - 1, fy - fx)
        + norm.logpdf(y)
        + xlogy(m - b, 1.0 - fy)
    )
    return float(np.exp(logpdf))


def _integrate_nu(key: MomentKey, trunc: float) -> tuple[float, float]:
    if key.variant != SIGNED or key.r != 1.0 or key.lam2 is not None \
            or key.lag is not None or key.stat != STAT_POWER:
        raise ConfigError(
            "integration backend is available only for signed-variant, r=1, "
            "single-lambda moments"
        )
    m, lam = key.m, key.lam
    value, err = integrate.dblquad(
        lambda y, x: (x * x + y * y) * joint_order_stat_density(x, y, m, lam),
        -trunc, trunc,
        lambda x: x, lambda x: trunc,
    )
    return value, err


# ---------------------------------------------------------------------------
# public moment interface

Precision = MonteCarlo | Integration | ClosedForm | None


def nu_moment(key: MomentKey, precision: Precision = None,
              table: ScalingTable | None = None) -> ScalingEntry:
    """The scaling moment for `key`, as a cache entry (value + stderr).

    With precision=None the cheapest trustworthy source wins: a registered
    closed form, else whatever the table already holds, else Monte Carlo at
    the default replication count with seed 0. Passing an explicit
    MonteCarlo(replications, seed) reuses a cached entry only when its
    provenance matches exactly; otherwise the moment is recomputed (and
    appended to the table when that does not collide with an existing key).
    """
    table = _resolve_table(table)

    cf = _CLOSED_FORMS.get(key.canonical())
    if isinstance(precision, ClosedForm) or (precision is None and cf is not None):
        if cf is None:
            raise ConfigError(f"no closed form registered for {key.canonical()}")
        return ScalingEntry(key, cf, 0.0, "closed-form", 0, 0)

    cached = table.get(key)
    if precision is None:
        if cached is not None:
            return cached
        precision = MonteCarlo(key.default_replications(), DEFAULT_SEED)

    if isinstance(precision, Integration):
        if cached is not None and cached.method == "integration":
            return cached
        value, err = _integrate_nu(key, precision.truncation)
        entry = ScalingEntry(key, value, err, "integration", 0, 0)
    elif isinstance(precision, MonteCarlo):
        if (
            cached is not None
            and cached.method == "monte-carlo"
            and cached.replications == precision.replications
            and cached.seed == precision.seed
        ):
            return cached
        if key.lag is not None:
            [(value, se)] = _mc_lag_moments(
                key.m, key.lag, [(key.lam, key.lam if key.lam2 is None else key.lam2)],
                precision.replications, precision.seed,
            )
        else:
            [(value, se)] = _mc_block_moments(
                key.m, [key], precision.replications, precision.seed
            )
        entry = ScalingEntry(key, value, se, "monte-carlo",
                             precision.replications, precision.seed)
    else:
        raise ConfigError(f"unknown precision request {precision!r}")

    if cached is None:
        table.add(entry)
    return entry


def nu_iq(m: int, lam: float, precision: Precision = None,
          table: ScalingTable | None = None, variant: str = SIGNED) -> ScalingEntry:
    """Quarticity normalizer: E[x_(hi)^4 + x_(lo)^4] (signed), E[|x|_(k)^4] (absolute)."""
    key = MomentKey(m=m, lam=lam, variant=variant, stat=STAT_QUARTIC)
    return nu_moment(key, precision, table)


def lookup(key: MomentKey, table: ScalingTable | None = None) -> ScalingEntry:
    """Resolve a moment without computing: closed form, else cached entry.

    Estimators use this so a missing constant fails fast with the key to
    compute instead of silently burning minutes of Monte Carlo.
    """
    table = _resolve_table(table)
    cf = _CLOSED_FORMS.get(key.canonical())
    if cf is not None:
        return ScalingEntry(key, cf, 0.0, "closed-form", 0, 0)
    cached = table.get(key)
    if cached is None:
        raise ConfigError(
            f"missing scaling constant {key.canonical()}; "
            f"compute it with nu_moment(key) or ship it in the cache"
        )
    return cached


def ensure_entries(keys, precision: Precision = None,
                   table: ScalingTable | None = None,
                   lag_precision: MonteCarlo | None = None) -> list[ScalingEntry]:
    """Fetch or compute a batch of moments, sharing sample passes.

    Same-block keys with a common m ride on one set of draws; lagged keys
    are grouped per (m, lag). Values are bit-identical to one-at-a-time
    nu_moment calls; this just avoids redrawing the sample per key.
    """
    table = _resolve_table(table)
    block_keys = [k for k in keys if k.lag is None]
    lag_keys = [k for k in keys if k.lag is not None]
    out: dict[str, ScalingEntry] = {}
    if block_keys:
        for key, entry in zip(block_keys, _ensure_block_entries(block_keys, precision, table)):
            out[key.canonical()] = entry
    groups: dict[tuple[int, int], list[MomentKey]] = {}
    for key in lag_keys:
        groups.setdefault((key.m, key.lag), []).append(key)
    for (m, lag), group in sorted(groups.items()):
        for key, entry in zip(group, _ensure_lag_entries(m, lag, group, lag_precision, table)):
            out[key.canonical()] = entry
    return [out[k.canonical()] for k in keys]


# ---------------------------------------------------------------------------
# Theta matrices

@dataclass(frozen=True)
class ThetaMatrix:
    """Asymptotic-variance constants for a quantile vector.

    values[i, j] scales the covariance between the lambda_i and lambda_j
    component estimators; the quadratic form in the quantile weights gives
    the estimator's variance multiplier on IQ. m is None for the
    asymptotic (m -> infinity) matrix.
    """

    values: np.ndarray
    kind: str
    lambdas: tuple[float, ...]
    m: int | None = None
    stderr: np.ndarray | None = None

    def __post_init__(self):
        vals = np.array(self.values, dtype=float)
        object.__setattr__(self, "values", vals)
        if self.kind not in ("blocked", "subsampled", "asymptotic"):
            raise ConfigError(f"unknown Theta kind {self.kind!r}")
        k = len(self.lambdas)
        if vals.shape != (k, k):
            raise ConfigError(f"Theta shape {vals.shape} does not match {k} quantiles")
        if np.max(np.abs(vals - vals.T), initial=0.0) > 1e-12:
            raise NumericalError("Theta matrix is not symmetric within 1e-12")
        eigs = np.linalg.eigvalsh(vals)
        if eigs.min() < -1e-9:
            raise NumericalError(
                f"Theta matrix is not PSD: min eigenvalue {eigs.min():.3e}"
            )

    def attained(self, weights) -> float:
        """Variance constant beta' Theta beta for weights summing to 1."""
        w = np.asarray(weights, dtype=float)
        if w.shape != (len(self.lambdas),):
            raise ConfigError("weight length does not match quantile count")
        if abs(w.sum() - 1.0) > 1e-9:
            raise ConfigError(f"weights must sum to 1, got {w.sum()}")
        return float(w @ self.values @ w)


def _entry_values(m, lams, precision, table, variant=SIGNED):
    """nu_1 values and stderrs per lambda, batching any missing keys."""
    keys = [MomentKey(m=m, lam=la, variant=variant) for la in lams]
    return _ensure_block_entries(keys, precision, table)


def _ensure_block_entries(keys: list[MomentKey], precision, table) -> list[ScalingEntry]:
    """Fetch entries, computing all missing ones in one shared sample pass."""
    table = _resolve_table(table)
    if isinstance(precision, MonteCarlo):
        reps, seed = precision.replications, precision.seed
    else:
        reps, seed = None, DEFAULT_SEED

    entries: dict[str, ScalingEntry] = {}
    missing: list[MomentKey] = []
    for key in keys:
        ck = key.canonical()
        if ck in entries:
            continue
        cf = _CLOSED_FORMS.get(ck)
        cached = table.get(key)
        if cf is not None and cached is None:
            entries[ck] = ScalingEntry(key, cf, 0.0, "closed-form", 0, 0)
        elif cached is not None and (
            reps is None
            or (cached.method == "monte-carlo"
                and cached.replications == reps and cached.seed == seed)
        ):
            entries[ck] = cached
        else:
            missing.append(key)

    if missing:
        groups: dict[int, list[MomentKey]] = {}
        for key in missing:
            groups.setdefault(key.m, []).append(key)
        for m, group in groups.items():
            n = reps if reps is not None else max(k.default_replications() for k in group)
            stats = _mc_block_moments(m, group, n, seed)
            for key, (value, se) in zip(group, stats):
                entry = ScalingEntry(key, value, se, "monte-carlo", n, seed)
                if table.get(key) is None:
                    table.add(entry)
                entries[key.canonical()] = entry
    return [entries[k.canonical()] for k in keys]


def theta_blocked(m: int, lambdas, precision: Precision = None,
                  table: ScalingTable | None = None) -> ThetaMatrix:
    """Efficiency matrix of the blocked estimator at block length m.

    Entry (i, j) is m * (E[q_i q_j] - nu_i nu_j) / (nu_i nu_j) over one
    block of m standard normals.
    """
    lams = tuple(QuantileVector(tuple(lambdas)).lambdas)
    table = _resolve_table(table)
    nus = _entry_values(m, lams, precision, table)
    k = len(lams)
    cross_keys = [
        MomentKey(m=m, lam=lams[i], lam2=lams[j])
        for i in range(k) for j in range(i, k)
    ]
    cross = dict(zip(
        [(i, j) for i in range(k) for j in range(i, k)],
        _ensure_block_entries(cross_keys, precision, table),
    ))

    vals = np.zeros((k, k))
    errs = np.zeros((k, k))
    for i in range(k):
        for j in range(i, k):
            a, b = nus[i], nus[j]
            x = cross[(i, j)]
            vals[i, j] = vals[j, i] = m * (x.value / (a.value * b.value) - 1.0)
            dx = m / (a.value * b.value) * x.stderr
            if i == j:
                dn = 2.0 * m * x.value / (a.value ** 3) * a.stderr
                var = dx * dx + dn * dn
            else:
                da = m * x.value / (a.value ** 2 * b.value) * a.stderr
                db = m * x.value / (a.value * b.value ** 2) * b.stderr
                var = dx * dx + da * da + db * db
            errs[i, j] = errs[j, i] = math.sqrt(var)
    return ThetaMatrix(vals, "blocked", lams, m=m, stderr=errs)


def theta_subsampled(m: int, lambdas, precision: Precision = None,
                     table: ScalingTable | None = None,
                     lag_precision: MonteCarlo | None = None) -> ThetaMatrix:
    """Efficiency matrix of the overlapping-window (subsampled) estimator.

    Entry (i, j) is Theta_blocked[i, j] / m plus twice the normalized sum of
    covariances between window 0 and window k statistics over k = 1..m. The
    k = m term is skipped: disjoint windows are independent, so its
    covariance is exactly zero.

    precision governs the same-block moments (shared with theta_blocked);
    lag_precision the per-lag cross moments, which live on their own
    replication scale (default 10^6 per lag vs 10^7 per block moment).
    """
    lams = tuple(QuantileVector(tuple(lambdas)).lambdas)
    table = _resolve_table(table)
    blocked = theta_blocked(m, lams, precision, table)
    nus = _entry_values(m, lams, precision, table)

    k = len(lams)
    pairs = [(i, j) for i in range(k) for j in range(i, k)]
    cov_sum = np.zeros((k, k))
    cov_var = np.zeros((k, k))
    for lag in range(1, m):
        keys = [MomentKey(m=m, lam=lams[i], lam2=lams[j], lag=lag) for i, j in pairs]
        entries = _ensure_lag_entries(m, lag, keys, lag_precision, table)
        for (i, j), entry in zip(pairs, entries):
            cov_sum[i, j] += entry.value - nus[i].value * nus[j].value
            cov_var[i, j] += entry.stderr ** 2

    vals = np.zeros((k, k))
    errs = np.zeros((k, k))
    for i, j in pairs:
        denom = nus[i].value * nus[j].value
        vals[i, j] = vals[j, i] = blocked.values[i, j] / m + 2.0 * cov_sum[i, j] / denom
        dlag = 2.0 / denom * math.sqrt(cov_var[i, j])
        if i == j:
            dn = 4.0 * abs(cov_sum[i, j]) / (nus[i].value ** 3) * nus[i].stderr
        else:
            dn = math.hypot(
                2.0 * abs(cov_sum[i, j]) / (nus[i].value ** 2 * nus[j].value) * nus[i].stderr,
                2.0 * abs(cov_sum[i, j]) / (nus[i].value * nus[j].value ** 2) * nus[j].stderr,
            )
        errs[i, j] = errs[j, i] = math.sqrt(
            (blocked.stderr[i, j] / m) ** 2 + dlag * dlag + dn * dn
        )
    return ThetaMatrix(vals, "subsampled", lams, m=m, stderr=errs)


def _ensure_lag_entries(m, lag, keys, lag_precision: MonteCarlo | None, table):
    if lag_precision is None:
        reps, seed, match_any = DEFAULT_LAG_REPLICATIONS, DEFAULT_SEED, True
    else:
        reps, seed, match_any = lag_precision.replications, lag_precision.seed, False
    entries = {}
    missing = []
    for key in keys:
        cached = table.get(key)
        if cached is not None and (
            match_any
            or (cached.method == "monte-carlo"
                and cached.replications == reps and cached.seed == seed)
        ):
            entries[key.canonical()] = cached
        else:
            missing.append(key)
    if missing:
        pairs = [(key.lam, key.lam if key.lam2 is None else key.lam2) for key in missing]
        stats = _mc_lag_moments(m, lag, pairs, reps, seed)
        for key, (value, se) in zip(missing, stats):
            entry = ScalingEntry(key, value, se, "monte-carlo", reps, seed)
            if table.get(key) is None:
                table.add(entry)
            entries[key.canonical()] = entry
    return [entries[k.canonical()] for k in keys]


def theta_asymptotic(lambdas, variant: str = SIGNED) -> ThetaMatrix:
    """Closed-form large-m limit of both the blocked and subsampled matrices."""
    if variant == SIGNED:
        lams = tuple(QuantileVector(tuple(lambdas)).lambdas)
        c = norm.ppf(np.array(lams))
        phi = norm.pdf(c)
        k = len(lams)
        vals = np.zeros((k, k))
        for i in range(k):
            for j in range(k):
                lo, hi = min(lams[i], lams[j]), max(lams[i], lams[j])
                il, ih = (i, j) if lams[i] <= lams[j] else (j, i)
                vals[i, j] = (
                    2.0 * (1.0 - hi) * (2.0 * lo - 1.0)
                    / (phi[il] * phi[ih] * c[il] * c[ih])
                )
    elif variant == ABSOLUTE:
        lams = tuple(AbsQuantileVector(tuple(lambdas)).lambdas)
        if any(la <= 0.0 for la in lams):
            raise ConfigError("asymptotic absolute matrix requires lambda > 0")
        d = chi2.ppf(np.array(lams), df=1)
        p = chi2.pdf(d, df=1)
        k = len(lams)
        vals = np.zeros((k, k))
        for i in range(k):
            for j in range(k):
                lo, hi = min(lams[i], lams[j]), max(lams[i], lams[j])
                il, ih = (i, j) if lams[i] <= lams[j] else (j, i)
                vals[i, j] = lo * (1.0 - hi) / (p[il] * p[ih] * d[il] * d[ih])
    else:
        raise ConfigError(f"unknown variant {variant!r}")
    return ThetaMatrix(vals, "asymptotic", lams, m=None,
                       stderr=np.zeros_like(vals))


# ---------------------------------------------------------------------------
# optimal weights

_CONDITION_CAP = 1e10


@dataclass(frozen=True)
class WeightSolution:
    weights: tuple[float, ...]
    achieved_theta: float
    any_negative: bool


def optimal_weights(theta: ThetaMatrix) -> WeightSolution:
    """Variance-minimizing quantile weights: Theta^-1 1 / (1' Theta^-1 1).

    The solve is unconstrained; a negative component triggers
    NegativeWeightWarning rather than projection, since the minimizing
    formula itself does not enforce nonnegativity.
    """
    a = theta.values
    cond = np.linalg.cond(a)
    if not np.isfinite(cond) or cond > _CONDITION_CAP:
        raise NumericalError(
            f"Theta matrix too ill-conditioned for weight solve (cond={cond:.3e})"
        )
    ones = np.ones(len(theta.lambdas))
    s = np.linalg.solve(a, ones)
    denom = float(s.sum())
    if denom <= 0.0:
        raise NumericalError(f"degenerate weight solve: 1'Theta^-1 1 = {denom}")
    w = s / denom
    if np.any(w < 0.0):
        warnings.warn(
            f"optimal weights contain negative entries: {np.round(w, 6).tolist()}",
            NegativeWeightWarning,
            stacklevel=2,
        )
    return WeightSolution(tuple(float(x) for x in w), 1.0 / denom, bool(np.any(w < 0.0)))
