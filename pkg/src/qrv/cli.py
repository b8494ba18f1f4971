"""Command-line front end and the data layer behind it.

Ingestion: tick CSVs with integer timestamps, same-timestamp aggregation
by volume-weighted average price, event-time log-returns (optionally
resampled to a fixed calendar grid by last-tick interpolation).

Reports: JSON or CSV, carrying per-estimator values, optional feasible
intervals, diagnostics, and a sha256 hash of the resolved run
configuration. Reports contain no wall-clock data: the same config and
seed always produce byte-identical output.
"""

from __future__ import annotations

import csv
import functools
import hashlib
import io
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import click
import numpy as np
from scipy.stats import norm

from . import constants as const
from .bench import (
    Contamination,
    EstimatorSpec,
    ExperimentConfig,
    bias_efficiency_experiment,
    mse_curve_K,
    plot_mse_curve,
)
from .constants import (
    ABSOLUTE,
    SIGNED,
    STAT_POWER,
    STAT_QUARTIC,
    MomentKey,
    MonteCarlo,
    ScalingTable,
    default_table,
)
from .errors import ConfigError, DataError, QRVError
from .estimators import BLOCKED, ReturnSeries, feasible_ci, qrq, qrv
from .preavg import AUTOCOVARIANCE, noise_variance, qrv_star, qrv_star_avar
from .simulate import ModelSpec, PathResult, add_jumps, add_noise, add_outlier, simulate_path

_TIMESTAMP_NAMES = ("timestamp", "index", "time")
_PRICE_NAMES = ("price", "p")
_VOLUME_NAMES = ("volume", "vol", "size")


@dataclass(frozen=True)
class TickRecord:
    """One trade: integer timestamp (unit declared by the caller), price,
    optional volume."""

    timestamp: int
    price: float
    volume: float | None = None

    def __post_init__(self):
        if self.price <= 0.0 or not math.isfinite(self.price):
            raise DataError(f"price must be positive and finite, got {self.price}")
        if self.volume is not None and (self.volume < 0.0 or not math.isfinite(self.volume)):
            raise DataError(f"volume must be nonnegative, got {self.volume}")


def _find_column(header: list[str], declared: str | None, candidates, what: str,
                 required: bool = True) -> int | None:
    lower = [h.strip().lower() for h in header]
    if declared is not None:
        if declared.lower() in lower:
            return lower.index(declared.lower())
        raise ConfigError(f"declared {what} column {declared!r} not in header {header}")
    for name in candidates:
        if name in lower:
            return lower.index(name)
    if required:
        raise ConfigError(f"no {what} column among {candidates} in header {header}")
    return None


def read_ticks(path: str, timestamp_column: str | None = None,
               price_column: str | None = None,
               volume_column: str | None = None,
               delimiter: str = ",") -> list[TickRecord]:
    """Parse a tick CSV into records; malformed rows fail with their line number."""
    with open(path, newline="") as f:
        reader = csv.reader(f, delimiter=delimiter)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{path}: empty file") from None
        t_ix = _find_column(header, timestamp_column, _TIMESTAMP_NAMES, "timestamp")
        p_ix = _find_column(header, price_column, _PRICE_NAMES, "price")
        v_ix = _find_column(header, volume_column, _VOLUME_NAMES, "volume",
                            required=volume_column is not None)

        ticks = []
        for lineno, row in enumerate(reader, start=2):
            if not row or (len(row) == 1 and not row[0].strip()):
                continue
            try:
                ts = int(row[t_ix])
                price = float(row[p_ix])
                vol = None
                if v_ix is not None and row[v_ix].strip() != "":
                    vol = float(row[v_ix])
            except (ValueError, IndexError) as exc:
                raise DataError(f"{path}:{lineno}: malformed row {row!r} ({exc})") from None
            try:
                ticks.append(TickRecord(timestamp=ts, price=price, volume=vol))
            except DataError as exc:
                raise DataError(f"{path}:{lineno}: {exc}") from None
    return ticks


def aggregate_ticks(ticks: list[TickRecord]) -> tuple[np.ndarray, np.ndarray]:
    """Stable-sort by timestamp and collapse equal timestamps to one price.

    Aggregation is the volume-weighted average; groups without volume data
    (or with zero total volume) fall back to the simple mean. Returns
    (timestamps, prices), timestamps strictly increasing.
    """
    if not ticks:
        raise DataError("no ticks to aggregate")
    order = sorted(range(len(ticks)), key=lambda i: ticks[i].timestamp)
    times, prices = [], []
    i = 0
    while i < len(order):
        j = i
        ts = ticks[order[i]].timestamp
        while j < len(order) and ticks[order[j]].timestamp == ts:
            j += 1
        group = [ticks[order[g]] for g in range(i, j)]
        wsum = sum(t.volume for t in group if t.volume is not None)
        if wsum and all(t.volume is not None for t in group):
            price = sum(t.price * t.volume for t in group) / wsum
        else:
            price = sum(t.price for t in group) / len(group)
        times.append(ts)
        prices.append(price)
        i = j
    return np.asarray(times, dtype=np.int64), np.asarray(prices, dtype=float)


def calendar_resample(times: np.ndarray, prices: np.ndarray, points: int) -> np.ndarray:
    """Last-tick interpolation onto a fixed grid of `points`+1 nodes."""
    if points < 1:
        raise ConfigError(f"calendar grid needs at least 1 interval, got {points}")
    grid = np.linspace(times[0], times[-1], points + 1)
    idx = np.searchsorted(times, grid, side="right") - 1
    return prices[np.clip(idx, 0, len(prices) - 1)]


def ingest_csv(path: str, timestamp_column: str | None = None,
               price_column: str | None = None,
               volume_column: str | None = None,
               delimiter: str = ",",
               calendar_points: int | None = None) -> ReturnSeries:
    """Tick CSV to event-time log-returns (or calendar-grid returns)."""
    ticks = read_ticks(path, timestamp_column, price_column, volume_column, delimiter)
    times, prices = aggregate_ticks(ticks)
    if prices.size < 2:
        raise DataError(f"{path}: need at least 2 distinct-timestamp prices, got {prices.size}")
    if calendar_points is not None:
        prices = calendar_resample(times, prices, calendar_points)
    return ReturnSeries(np.diff(np.log(prices)))


def export_path_csv(path_result: PathResult, csv_path: str, sidecar: dict | None = None) -> str:
    """Write a simulated path as (index, price) CSV plus a JSON sidecar.

    Prices are exponentiated log-prices printed with full round-trip
    precision; the sidecar holds the ground truth and any extra metadata.
    Returns the sidecar path.
    """
    levels = path_result.price_levels()
    with open(csv_path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["index", "price"])
        for i, p in enumerate(levels):
            writer.writerow([i, repr(float(p))])
    meta = {
        "true_iv": path_result.true_iv,
        "true_iq": path_result.true_iq,
        "span": path_result.span,
        "n_returns": path_result.n,
        "jump_times": list(path_result.jump_times),
        "jump_sizes": list(path_result.jump_sizes),
        "outlier_index": path_result.outlier_index,
        "noise_omega2": path_result.noise_omega2,
        "diagnostics": path_result.diagnostics,
    }
    if sidecar:
        meta.update(sidecar)
    sidecar_path = csv_path + ".json"
    with open(sidecar_path, "w") as f:
        json.dump(meta, f, indent=2, sort_keys=True)
        f.write("\n")
    return sidecar_path


# ---------------------------------------------------------------------------
# run configuration and reports

@dataclass(frozen=True)
class RunConfig:
    """Everything one `estimate` run needs, resolvable from a JSON file.

    input: {"csv": path, optional schema keys} or {"simulate": {...}}.
    estimators: list of {"name": ..., "label": ..., "options": {...},
    "ci": level} entries; "ci" asks for a feasible interval where the
    estimator supports one. annualize adds a display-only column
    sqrt(value * periods_per_year) without touching stored values.
    """

    input: dict
    estimators: tuple = ()
    seed: int = 0
    cache: str | None = None
    annualize: bool = False
    periods_per_year: int = 252
    output_format: str = "json"

    def __post_init__(self):
        if not isinstance(self.input, dict) or not ({"csv", "simulate"} & set(self.input)):
            raise ConfigError('input must contain "csv" or "simulate"')
        if self.output_format not in ("json", "csv"):
            raise ConfigError(f"output format must be json or csv, got {self.output_format!r}")
        if self.periods_per_year < 1:
            raise ConfigError("periods_per_year must be positive")
        specs = []
        for e in self.estimators:
            e = dict(e)
            name = e.pop("name", None)
            if name is None:
                raise ConfigError(f"estimator entry missing name: {e}")
            label = e.pop("label", "")
            ci = e.pop("ci", None)
            options = e.pop("options", {})
            if e:
                raise ConfigError(f"unknown estimator entry keys {sorted(e)}")
            if ci is not None and not 0.0 < ci < 1.0:
                raise ConfigError(f"ci level must be in (0, 1), got {ci}")
            specs.append((EstimatorSpec(name=name, options=options, label=label), ci))
        object.__setattr__(self, "estimators", tuple(specs))

    @classmethod
    def from_dict(cls, raw: dict) -> "RunConfig":
        known = {"input", "estimators", "seed", "cache", "annualize",
                 "periods_per_year", "output_format"}
        unknown = set(raw) - known
        if unknown:
            raise ConfigError(f"unknown run config keys {sorted(unknown)}")
        return cls(**raw)

    def canonical(self) -> dict:
        return {
            "input": self.input,
            "estimators": [
                {"name": s.name, "label": s.label, "options": s.options, "ci": ci}
                for s, ci in self.estimators
            ],
            "seed": self.seed,
            "cache": self.cache,
            "annualize": self.annualize,
            "periods_per_year": self.periods_per_year,
            "output_format": self.output_format,
        }

    def sha256(self) -> str:
        blob = json.dumps(self.canonical(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()


def _load_series(config: RunConfig) -> tuple[ReturnSeries, dict]:
    inp = config.input
    if "csv" in inp:
        known = {"csv", "timestamp_column", "price_column", "volume_column",
                 "delimiter", "calendar_points"}
        unknown = set(inp) - known
        if unknown:
            raise ConfigError(f"unknown csv input keys {sorted(unknown)}")
        series = ingest_csv(
            inp["csv"],
            timestamp_column=inp.get("timestamp_column"),
            price_column=inp.get("price_column"),
            volume_column=inp.get("volume_column"),
            delimiter=inp.get("delimiter", ","),
            calendar_points=inp.get("calendar_points"),
        )
        return series, {"kind": "csv", "path": inp["csv"], "n_returns": series.n}

    sim = dict(inp["simulate"])
    model = ModelSpec(sim.pop("model", "BM"), sim.pop("params", {}))
    N = int(sim.pop("N"))
    seed = int(sim.pop("seed", config.seed))
    substeps = int(sim.pop("substeps", 10))
    span = float(sim.pop("span", 1.0))
    contamination = sim.pop("contamination", {})
    if sim:
        raise ConfigError(f"unknown simulate keys {sorted(sim)}")
    path = simulate_path(model, N, seed, substeps=substeps, span=span)
    cont = Contamination(**contamination) if contamination else Contamination()
    path = cont.apply(path, seed)
    series = path.returns()
    return series, {
        "kind": "simulate",
        "model": model.kind,
        "N": N,
        "seed": seed,
        "true_iv": path.true_iv,
        "true_iq": path.true_iq,
        "noise_omega2": path.noise_omega2,
        "n_returns": series.n,
    }


def _estimate_entry(spec: EstimatorSpec, ci_level: float | None,
                    series: ReturnSeries, scaling: ScalingTable,
                    config: RunConfig) -> dict:
    entry: dict = {"estimator": spec.label,
                   "params": {"name": spec.name, **spec.options}}
    result_value = None
    stderr = None
    ci = None
    diagnostics: dict = {}

    if spec.name == "qrv":
        cfg = spec.quantile_config()
        res = qrv(series, cfg, scaling)
        result_value, diagnostics = res.value, res.diagnostics
        if ci_level is not None:
            theta_m = (const.theta_blocked if cfg.mode == BLOCKED
                       else const.theta_subsampled)(cfg.m, cfg.lambdas.lambdas, table=scaling)
            theta_val = theta_m.attained(np.asarray(cfg.weights))
            iq_est = qrq(series, cfg, scaling)
            res = feasible_ci(res, iq_est, theta_val, series.n, ci_level)
            stderr, ci = res.stderr, res.ci
            diagnostics = {**diagnostics, **res.diagnostics}
    elif spec.name == "qrv_star":
        cfg = spec.preavg_config()
        method = spec.options.get("noise_method", AUTOCOVARIANCE)
        res = qrv_star(series, cfg, scaling, noise_variance(series, method))
        result_value, diagnostics = res.value, res.diagnostics
        if ci_level is not None:
            w = np.asarray(cfg.weights)
            A = qrv_star_avar(series, cfg, scaling, diagnostics)
            stderr = math.sqrt(max(float(w @ A @ w), 0.0)) / series.n ** 0.25
            z = float(norm.ppf(0.5 * (1.0 + ci_level)))
            ci = (result_value - z * stderr, result_value + z * stderr, ci_level)
    else:
        if ci_level is not None:
            raise ConfigError(f"estimator {spec.name!r} does not produce a feasible interval")
        fn = spec.build(scaling)
        out = fn(series)
        if isinstance(out, (int, float, np.floating)):
            result_value = float(out)
        else:
            result_value, diagnostics = out.value, out.diagnostics

    entry["value"] = result_value
    entry["stderr"] = stderr
    entry["ci"] = list(ci) if ci is not None else None
    entry["diagnostics"] = diagnostics
    if config.annualize and result_value is not None and result_value >= 0.0:
        entry["annualized_sd"] = math.sqrt(result_value * config.periods_per_year)
    return entry


def run(config: RunConfig) -> dict:
    """Execute a run config: load or simulate data, apply every estimator.

    Estimators share the read-only return series and run on a thread pool
    (report order stays the config order). Per-estimator failures become
    error entries; the run itself succeeds as long as the input loads.
    Zero estimators produce an empty report.
    """
    scaling = ScalingTable(config.cache, readonly=True) if config.cache else default_table()
    series, source = _load_series(config)

    def one(item):
        spec, ci_level = item
        try:
            return _estimate_entry(spec, ci_level, series, scaling, config)
        except QRVError as exc:
            return {"estimator": spec.label,
                    "params": {"name": spec.name, **spec.options},
                    "error": str(exc)}

    if len(config.estimators) > 1:
        with ThreadPoolExecutor(max_workers=min(8, len(config.estimators))) as pool:
            estimates = list(pool.map(one, config.estimators))
    else:
        estimates = [one(item) for item in config.estimators]
    return {
        "config_sha256": config.sha256(),
        "seed": config.seed,
        "source": source,
        "estimates": estimates,
    }


# ---------------------------------------------------------------------------
# serialization

def report_to_csv(report: dict) -> str:
    """Flatten an estimate report: one row per estimator, diagnostics as a
    packed key=value field (documented lossy view; JSON is authoritative)."""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["estimator", "value", "stderr", "ci_low", "ci_high",
                     "ci_level", "annualized_sd", "error", "diagnostics"])
    for e in report.get("estimates", []):
        ci = e.get("ci") or (None, None, None)
        diag = ";".join(f"{k}={v}" for k, v in sorted((e.get("diagnostics") or {}).items()))
        writer.writerow([
            e.get("estimator"),
            _csv_float(e.get("value")),
            _csv_float(e.get("stderr")),
            _csv_float(ci[0]), _csv_float(ci[1]), _csv_float(ci[2]),
            _csv_float(e.get("annualized_sd")),
            e.get("error", ""),
            diag,
        ])
    return buf.getvalue()


def _csv_float(x) -> str:
    return "" if x is None else repr(float(x))


def rows_to_csv(records: list[dict]) -> str:
    if not records:
        return ""
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=list(records[0].keys()), lineterminator="\n")
    writer.writeheader()
    writer.writerows(records)
    return buf.getvalue()


def _emit(payload: str, out: str | None) -> None:
    if out:
        with open(out, "w") as f:
            f.write(payload)
    else:
        click.echo(payload, nl=not payload.endswith("\n"))


def _load_json(path: str) -> dict:
    try:
        with open(path) as f:
            return json.load(f)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None


def _json_dumps(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


# ---------------------------------------------------------------------------
# click commands

def _wrap_errors(fn):
    """Config and data problems exit with a message, not a traceback."""
    @functools.wraps(fn)
    def inner(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except QRVError as exc:
            raise click.ClickException(str(exc)) from None
    return inner


@click.group()
def main():
    """Quantile-based realized variance toolkit."""


@main.command()
@click.option("--config", "config_path", required=True, type=click.Path(exists=True),
              help="Run config JSON (input + estimators).")
@click.option("--seed", type=int, default=None, help="Override the config seed.")
@click.option("--out", type=click.Path(), default=None, help="Write the report here.")
@click.option("--format", "fmt", type=click.Choice(["json", "csv"]), default=None)
@click.option("--cache", type=click.Path(exists=True), default=None,
              help="Scaling-constant cache (JSONL).")
@_wrap_errors
def estimate(config_path, seed, out, fmt, cache):
    """Estimate integrated variance from a CSV or a simulated path."""
    raw = _load_json(config_path)
    if seed is not None:
        raw["seed"] = seed
    if cache is not None:
        raw["cache"] = cache
    if fmt is not None:
        raw["output_format"] = fmt
    config = RunConfig.from_dict(raw)
    report = run(config)
    if config.output_format == "csv":
        _emit(report_to_csv(report), out)
    else:
        _emit(_json_dumps(report), out)


@main.command()
@click.option("--config", "config_path", required=True, type=click.Path(exists=True),
              help="Simulation spec JSON.")
@click.option("--seed", type=int, default=None, help="Override the config seed.")
@click.option("--out", type=click.Path(), required=True, help="CSV output path.")
@_wrap_errors
def simulate(config_path, seed, out):
    """Simulate a path, write (index, price) CSV plus a ground-truth sidecar."""
    raw = _load_json(config_path)
    model = ModelSpec(raw.get("model", "BM"), raw.get("params", {}))
    N = int(raw["N"])
    use_seed = seed if seed is not None else int(raw.get("seed", 0))
    substeps = int(raw.get("substeps", 10))
    span = float(raw.get("span", 1.0))
    path = simulate_path(model, N, use_seed, substeps=substeps, span=span)
    cont = raw.get("contamination", {})
    if cont:
        path = Contamination(**cont).apply(path, use_seed)
    sidecar = export_path_csv(path, out, sidecar={
        "model": model.kind, "params": model.params, "N": N,
        "seed": use_seed, "substeps": substeps,
    })
    click.echo(f"wrote {out} and {sidecar}")


def _experiment_from_dict(raw: dict) -> ExperimentConfig:
    known = {"model", "params", "N", "replications", "base_seed", "substeps",
             "contamination", "estimators"}
    unknown = set(raw) - known
    if unknown:
        raise ConfigError(f"unknown experiment keys {sorted(unknown)}")
    cont = raw.get("contamination", {})
    return ExperimentConfig(
        model=ModelSpec(raw.get("model", "BM"), raw.get("params", {})),
        N=int(raw["N"]),
        estimators=tuple(
            EstimatorSpec(name=e["name"], options=e.get("options", {}),
                          label=e.get("label", ""))
            for e in raw.get("estimators", [])
        ),
        replications=int(raw.get("replications", 10_000)),
        base_seed=int(raw.get("base_seed", 0)),
        contamination=Contamination(**cont) if cont else Contamination(),
        substeps=int(raw.get("substeps", 10)),
    )


@main.command()
@click.option("--config", "config_path", required=True, type=click.Path(exists=True),
              help="Experiment config JSON.")
@click.option("--seed", type=int, default=None, help="Override base_seed.")
@click.option("--out", type=click.Path(), default=None)
@click.option("--format", "fmt", type=click.Choice(["json", "csv"]), default="json")
@click.option("--cache", type=click.Path(exists=True), default=None)
@_wrap_errors
def bench(config_path, seed, out, fmt, cache):
    """Bias/efficiency replication study over simulated paths."""
    raw = _load_json(config_path)
    if seed is not None:
        raw["base_seed"] = seed
    config = _experiment_from_dict(raw)
    scaling = ScalingTable(cache, readonly=True) if cache else None
    rows = bias_efficiency_experiment(config, scaling)
    records = [r.to_record() for r in rows]
    if fmt == "csv":
        _emit(rows_to_csv(records), out)
    else:
        _emit(_json_dumps({"rows": records}), out)


@main.command()
@click.option("--config", "config_path", required=True, type=click.Path(exists=True),
              help="JSON with a list of moment keys to query (optionally compute).")
@click.option("--out", type=click.Path(), default=None)
@click.option("--cache", type=click.Path(exists=True), default=None)
@_wrap_errors
def constants(config_path, out, cache):
    """Query (or compute) order-statistic scaling constants as JSON."""
    raw = _load_json(config_path)
    table = ScalingTable(cache, readonly=False) if cache else default_table()
    compute = bool(raw.get("compute", False))
    results = []
    for requested in raw.get("keys", []):
        entry = dict(requested)
        try:
            key = MomentKey(
                m=int(entry.pop("m")),
                lam=float(entry.pop("lam")),
                lam2=entry.pop("lam2", None),
                r=float(entry.pop("r", 1.0)),
                variant=entry.pop("variant", SIGNED),
                lag=entry.pop("lag", None),
                stat=entry.pop("stat", STAT_POWER),
            )
            if entry:
                raise ConfigError(f"unknown key fields {sorted(entry)}")
            if compute:
                precision = None
                if "replications" in raw:
                    precision = MonteCarlo(replications=int(raw["replications"]),
                                           seed=int(raw.get("mc_seed", 0)))
                found = const.nu_moment(key, precision=precision, table=table)
            else:
                found = const.lookup(key, table)
            results.append(found.to_record())
        except QRVError as exc:
            results.append({"key": requested, "error": str(exc)})
    _emit(_json_dumps({"constants": results}), out)


@main.command(name="mse-curve")
@click.option("--config", "config_path", required=True, type=click.Path(exists=True),
              help="Experiment config JSON plus a K_values list.")
@click.option("--seed", type=int, default=None, help="Override base_seed.")
@click.option("--out", type=click.Path(), default=None)
@click.option("--format", "fmt", type=click.Choice(["json", "csv"]), default="csv")
@click.option("--cache", type=click.Path(exists=True), default=None)
@click.option("--plot", "plot_path", type=click.Path(), default=None,
              help="Also write an SVG chart here.")
@_wrap_errors
def mse_curve(config_path, seed, out, fmt, cache, plot_path):
    """Sweep the pre-averaging window K and report log MSE per K."""
    raw = _load_json(config_path)
    if seed is not None:
        raw["base_seed"] = seed
    K_values = raw.pop("K_values", None)
    if not K_values:
        raise ConfigError("mse-curve config needs a nonempty K_values list")
    # the sweep overrides K per point; specs without one get a placeholder
    for e in raw.get("estimators", []):
        if e.get("name") == "qrv_star":
            e.setdefault("options", {}).setdefault("K", max(int(k) for k in K_values))
    config = _experiment_from_dict(raw)
    scaling = ScalingTable(cache, readonly=True) if cache else None
    curve = mse_curve_K(config, K_values, scaling)
    if plot_path:
        plot_mse_curve(curve, plot_path)
    if fmt == "csv":
        _emit(rows_to_csv(curve.to_records()), out)
    else:
        _emit(_json_dumps({
            "points": curve.to_records(),
            "argmin_K": curve.argmin_K,
            "msrv_log_mse": curve.msrv_log_mse,
            "msrv_q": curve.msrv_q,
            "skipped": [{"K": k, "reason": r} for k, r in curve.skipped],
        }), out)


if __name__ == "__main__":
    main()
