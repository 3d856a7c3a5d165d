"""Command-line front end: fit, predict, and simulate with stable CSV output.

All tabular artifacts use fixed column order and 6-significant-digit
formatting so reruns with an identical seed, config, and data are
byte-identical.  Exit codes: 0 success, 2 config error, 3 data error,
4 numerical failure.
"""
from __future__ import annotations

import functools
import json
import logging
import os
import sys

import click
import numpy as np
import pandas as pd

from .data import Dataset
from .errors import ConfigError, DataError, TiltcrmError
from .functionals import (baseline_density, conditional_density, exceedance,
                          quantile_curve)
from .mcmc import Kernel, McmcConfig, PosteriorDraws, Prior, run_chain
from .measures import DiscreteMeasure
from .simulate import Scenario, run_study
from .splines import SplineBasis, spline_design

log = logging.getLogger("tiltcrm")

FLOAT_FORMAT = "%.6g"
DEFAULT_Y_POINTS = 101
DEFAULT_X_POINTS = 25
DEFAULT_QUANTILES = (0.05, 0.1, 0.25, 0.5, 0.75, 0.9, 0.95)


# ---------------------------------------------------------------------------
# plumbing


def _setup_logging():
    level = os.environ.get("TILTCRM_LOG", "error").lower()
    levels = {"error": logging.ERROR, "info": logging.INFO,
              "debug": logging.DEBUG}
    if level not in levels:
        raise ConfigError(
            f"TILTCRM_LOG must be one of {sorted(levels)}, got {level!r}")
    logging.basicConfig(level=levels[level],
                        format="%(levelname)s %(name)s: %(message)s")


def _exit_codes(fn):
    """Map domain errors to the documented process exit codes."""

    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except ConfigError as exc:
            click.echo(f"config error: {exc}", err=True)
            sys.exit(2)
        except DataError as exc:
            click.echo(f"data error: {exc}", err=True)
            sys.exit(3)
        except TiltcrmError as exc:
            click.echo(f"numerical failure: {exc}", err=True)
            sys.exit(4)

    return wrapper


def _write_csv(df, path):
    df.to_csv(path, index=False, float_format=FLOAT_FORMAT,
              lineterminator="\n")


def _load_json(path, what):
    try:
        with open(path) as fh:
            return json.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"{what} file not found: {path}")
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{what} is not valid JSON ({path}): {exc}")


def _get(cfg, key, expected, default=None, where="config"):
    """Typed lookup with an explicit error location."""
    val = cfg.get(key, default)
    if val is None:
        return default
    if expected is float and isinstance(val, int):
        val = float(val)
    if not isinstance(val, expected):
        name = getattr(expected, "__name__", str(expected))
        raise ConfigError(f"{where}.{key}: expected {name}, "
                          f"got {type(val).__name__}")
    return val


def _mcmc_config(cfg, seed_override=None):
    m = _get(cfg, "mcmc", dict, {}, "config")
    known = {"n_iter", "burn_in", "thin", "H", "delta", "adapt_delta",
             "kernel_halfwidth_factor", "m0_policy", "seed"}
    unknown = set(m) - known
    if unknown:
        raise ConfigError(f"config.mcmc: unknown keys {sorted(unknown)}")
    kwargs = {}
    for key, typ in (("n_iter", int), ("burn_in", int), ("thin", int),
                     ("H", int), ("delta", float), ("adapt_delta", bool),
                     ("kernel_halfwidth_factor", float), ("seed", int)):
        if key in m:
            kwargs[key] = _get(m, key, typ, where="config.mcmc")
    if "m0_policy" in m:
        pol = m["m0_policy"]
        kwargs["m0_policy"] = tuple(pol) if isinstance(pol, list) else pol
    if seed_override is not None:
        kwargs["seed"] = int(seed_override)
    config = McmcConfig(**kwargs)
    config.validate()
    return config


def _prior_from_config(cfg, p, support):
    pr = _get(cfg, "prior", dict, {}, "config")
    alpha = _get(pr, "alpha", float, 1.0, "config.prior")
    beta_scale = _get(pr, "beta_scale", float, 10.0, "config.prior")
    if alpha <= 0 or beta_scale <= 0:
        raise ConfigError("config.prior: alpha and beta_scale must be > 0")
    return Prior.default(p, alpha=alpha, support=support,
                         beta_scale=beta_scale)


def _support_from_config(cfg):
    sup = _get(cfg, "support", list, [0.0, 1.0], "config")
    if len(sup) != 2 or not all(isinstance(v, (int, float)) for v in sup) \
            or not sup[0] < sup[1]:
        raise ConfigError("config.support: expected [lo, hi] with lo < hi")
    return float(sup[0]), float(sup[1])


# ---------------------------------------------------------------------------
# data ingestion


def ingest_csv(path, response, covariates, support=(0.0, 1.0)):
    """Read a headed CSV into a Dataset with row-level diagnostics."""
    try:
        frame = pd.read_csv(path)
    except FileNotFoundError:
        raise DataError(f"data file not found: {path}")
    except pd.errors.EmptyDataError:
        raise DataError(f"data file is empty: {path}")
    if frame.shape[0] == 0:
        raise DataError(f"data file has a header but no rows: {path}")
    needed = [response] + list(covariates)
    missing = [c for c in needed if c not in frame.columns]
    if missing:
        raise DataError(f"missing columns {missing}; file has "
                        f"{list(frame.columns)}")
    sub = frame[needed]
    numeric = sub.apply(pd.to_numeric, errors="coerce")
    bad_cells = numeric.isna() & ~sub.isna()
    if bad_cells.any().any():
        rows = sorted(set(bad_cells.index[bad_cells.any(axis=1)] + 1))
        raise DataError(f"non-numeric cells in rows {rows} "
                        "(1-based, excluding header)")
    missing_rows = numeric.isna().any(axis=1)
    if missing_rows.any():
        rows = sorted(numeric.index[missing_rows] + 1)
        raise DataError(f"missing values in rows {rows} "
                        "(1-based, excluding header)")
    y = numeric[response].to_numpy(dtype=float)
    lo, hi = support
    bad = np.flatnonzero((y <= lo) | (y >= hi))
    if bad.size:
        raise DataError(
            f"response {response!r} outside the open support ({lo}, {hi}) "
            f"in rows {(bad + 1).tolist()} (1-based, excluding header)")
    X = numeric[list(covariates)].to_numpy(dtype=float)
    return Dataset(np.column_stack([np.ones(len(y)), X]), y,
                   support=support, response_name=response,
                   covariate_names=["intercept"] + list(covariates))


# ---------------------------------------------------------------------------
# design construction (shared by fit and predict)


def build_design(raw_x, covariates, spline_df):
    """Intercept plus either raw covariates or a natural-spline expansion.

    The spline expansion applies to a single covariate; its fitted basis is
    returned for out-of-sample evaluation.
    """
    n = raw_x.shape[0]
    if spline_df is None:
        return np.column_stack([np.ones(n), raw_x]), None
    if raw_x.shape[1] != 1:
        raise ConfigError("spline_df requires exactly one covariate")
    design, basis = spline_design(raw_x[:, 0], df=spline_df)
    return np.column_stack([np.ones(n), design]), basis


def _basis_to_json(basis):
    if basis is None:
        return None
    return {"boundary": list(basis.boundary),
            "interior": basis.interior.tolist(),
            "col_means": basis.col_means.tolist()}


def _basis_from_json(obj):
    if obj is None:
        return None
    return SplineBasis(boundary=tuple(obj["boundary"]),
                       interior=np.asarray(obj["interior"], dtype=float),
                       col_means=np.asarray(obj["col_means"], dtype=float))


# ---------------------------------------------------------------------------
# fit artifacts


def _save_draws_dir(out, draws, meta):
    """Persist posterior draws so `predict` can reload them."""
    rows = []
    for r, m in enumerate(draws.measures):
        for loc, w in zip(m.locations, m.weights):
            rows.append((r, loc, w))
    atoms = pd.DataFrame(rows, columns=["draw", "location", "weight"])
    atoms.to_csv(os.path.join(out, "measures.csv"), index=False,
                 float_format="%.17g", lineterminator="\n")
    beta = pd.DataFrame(draws.beta,
                        columns=[f"beta_{j}"
                                 for j in range(draws.beta.shape[1])])
    beta.insert(0, "draw", np.arange(len(beta)))
    beta.to_csv(os.path.join(out, "beta_draws.csv"), index=False,
                float_format="%.17g", lineterminator="\n")
    with open(os.path.join(out, "meta.json"), "w") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_draws_dir(path):
    """Reload a fitted draws directory written by `fit`."""
    meta_path = os.path.join(path, "meta.json")
    if not os.path.exists(meta_path):
        raise ConfigError(f"not a draws directory (no meta.json): {path}")
    with open(meta_path) as fh:
        meta = json.load(fh)
    atoms = pd.read_csv(os.path.join(path, "measures.csv"))
    beta = pd.read_csv(os.path.join(path, "beta_draws.csv"))
    support = tuple(meta["support"])
    measures = []
    for r, grp in atoms.groupby("draw", sort=True):
        measures.append(DiscreteMeasure(grp["location"].to_numpy(),
                                        grp["weight"].to_numpy(), support))
    draws = PosteriorDraws(
        beta=beta[[c for c in beta.columns if c != "draw"]].to_numpy(),
        measures=measures,
        kernel=Kernel(meta["kernel_halfwidth"]),
        accept_rates=meta.get("accept_rates", {}),
        m0=meta.get("m0"))
    return draws, meta


def _grid_frames(draws, data, cfg, support):
    """Long-format functional grids: density surface, quantiles, exceedance."""
    grids = _get(cfg, "grids", dict, {}, "config")
    ny = _get(grids, "y_points", int, DEFAULT_Y_POINTS, "config.grids")
    nx = _get(grids, "x_points", int, DEFAULT_X_POINTS, "config.grids")
    lo, hi = support
    pad = 1e-9 * (hi - lo)
    y_grid = np.linspace(lo + pad, hi - pad, ny)
    raw = data["raw_x"]
    basis = data["basis"]
    x_vals = np.linspace(raw[:, 0].min(), raw[:, 0].max(), nx)
    other_means = raw[:, 1:].mean(axis=0) if raw.shape[1] > 1 else np.empty(0)

    def design_rows(vals):
        block = np.column_stack(
            [vals] + [np.full(vals.size, m) for m in other_means])
        if basis is None:
            return np.column_stack([np.ones(vals.size), block])
        return np.column_stack([np.ones(vals.size),
                                basis.design(block[:, 0])])

    X_rows = design_rows(x_vals)
    dens_rows, skip_total = [], 0
    for xv, xr in zip(x_vals, X_rows):
        g = conditional_density(draws, xr, y_grid)
        skip_total += g.n_skipped
        s = g.summary()
        for j in range(ny):
            dens_rows.append((xv, y_grid[j], s["mean"][j], s["lower"][j],
                              s["upper"][j]))
    density = pd.DataFrame(dens_rows,
                           columns=["x", "y", "mean", "lower", "upper"])

    alphas = _get(cfg, "quantile_alphas", list, list(DEFAULT_QUANTILES),
                  "config")
    q_rows = []
    for a in alphas:
        out = quantile_curve(draws, float(a), X_rows)
        for k, xv in enumerate(x_vals):
            q_rows.append((float(a), xv, out["mean"][k], out["lower"][k],
                           out["upper"][k]))
    quantiles = pd.DataFrame(q_rows,
                             columns=["alpha", "x", "mean", "lower",
                                      "upper"])

    y0s = _get(cfg, "exceedance_y0", list, None, "config")
    if y0s is None:
        y0s = np.linspace(lo + 0.1 * (hi - lo), hi - 0.1 * (hi - lo),
                          9).tolist()
    e_rows = []
    for xv, xr in zip(x_vals, X_rows):
        for y0 in y0s:
            point, ci, _ = exceedance(draws, xr, float(y0))
            e_rows.append((xv, float(y0), point, ci[0], ci[1]))
    exceed = pd.DataFrame(e_rows,
                          columns=["x", "y0", "mean", "lower", "upper"])
    n_total = len(draws.measures) * len(x_vals)
    if skip_total > 0.10 * max(n_total, 1):
        raise TiltcrmError(
            f"{skip_total} of {n_total} (draw, x) evaluations had "
            "unattainable means; the fit does not support these covariates")
    return density, quantiles, exceed


@click.group()
@_exit_codes
def main():
    """Semiparametric density regression with a tilted CRM baseline."""
    _setup_logging()


@main.command("fit")
@click.option("--data", "data_path", required=True, type=str)
@click.option("--config", "config_path", required=True, type=str)
@click.option("--out", "out_dir", required=True, type=str)
@click.option("--seed", type=int, default=None)
@click.option("--threads", type=int, default=None)
@_exit_codes
def cmd_fit(data_path, config_path, out_dir, seed, threads):
    """Fit the model to a CSV dataset and write all artifacts."""
    cfg = _load_json(config_path, "config")
    response = _get(cfg, "response", str, "y")
    covariates = _get(cfg, "covariates", list, ["x"])
    support = _support_from_config(cfg)
    spline_df = _get(cfg, "spline_df", int, None)
    dataset = ingest_csv(data_path, response, covariates, support)
    raw_x = dataset.X[:, 1:]
    X, basis = build_design(raw_x, covariates, spline_df)
    data = Dataset(X, dataset.y, support=support,
                   response_name=response,
                   covariate_names=["intercept"]
                   + [f"b{j}" for j in range(1, X.shape[1])])
    config = _mcmc_config(cfg, seed)
    config = _with_prior(config, _prior_from_config(cfg, X.shape[1], support))
    draws = run_chain(data, config)
    if draws.n_draws == 0:
        raise TiltcrmError("no usable posterior draws were retained")
    os.makedirs(out_dir, exist_ok=True)

    q = np.quantile(draws.beta, [0.025, 0.975], axis=0)
    summary = pd.DataFrame({
        "coefficient": data.covariate_names,
        "mean": draws.beta.mean(axis=0),
        "sd": draws.beta.std(axis=0, ddof=1),
        "lower": q[0],
        "upper": q[1],
    })
    _write_csv(summary, os.path.join(out_dir, "summary.csv"))

    diag = pd.DataFrame(
        sorted(draws.accept_rates.items()), columns=["quantity", "value"])
    diag = pd.concat([diag, pd.DataFrame(
        [("n_draws", float(draws.n_draws)),
         ("n_skipped_retilt", float(draws.n_skipped_retilt)),
         ("kernel_halfwidth", draws.kernel.halfwidth)],
        columns=["quantity", "value"])], ignore_index=True)
    _write_csv(diag, os.path.join(out_dir, "diagnostics.csv"))

    lo, hi = support
    pad = 1e-9 * (hi - lo)
    grids = _get(cfg, "grids", dict, {}, "config")
    ny = _get(grids, "y_points", int, DEFAULT_Y_POINTS, "config.grids")
    y_grid = np.linspace(lo + pad, hi - pad, ny)
    base = baseline_density(draws, y_grid)
    rows = []
    for r in range(base.n_draws):
        for j in range(ny):
            rows.append((r, y_grid[j], base.values[r, j]))
    dd = pd.DataFrame(rows, columns=["draw", "y", "density"])
    bd = pd.DataFrame(draws.beta,
                      columns=[f"beta_{j}"
                               for j in range(draws.beta.shape[1])])
    bd.insert(0, "draw", np.arange(len(bd)))
    _write_csv(bd.merge(dd, on="draw"), os.path.join(out_dir, "draws.csv"))

    density, quantiles, exceed = _grid_frames(
        draws, {"raw_x": raw_x, "basis": basis}, cfg, support)
    _write_csv(density, os.path.join(out_dir, "density_grid.csv"))
    _write_csv(quantiles, os.path.join(out_dir, "quantile_curves.csv"))
    _write_csv(exceed, os.path.join(out_dir, "exceedance_grid.csv"))

    meta = {
        "support": list(support),
        "kernel_halfwidth": draws.kernel.halfwidth,
        "m0": draws.m0,
        "accept_rates": draws.accept_rates,
        "covariates": list(covariates),
        "spline_basis": _basis_to_json(basis),
        "seed": config.seed,
    }
    _save_draws_dir(out_dir, draws, meta)
    click.echo(f"fit complete: {draws.n_draws} draws -> {out_dir}")


def _with_prior(config, prior):
    from dataclasses import replace
    return replace(config, prior=prior)


def _parse_float_list(text, what):
    try:
        vals = [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise ConfigError(f"--{what}: expected comma-separated numbers, "
                          f"got {text!r}")
    if not vals:
        raise ConfigError(f"--{what}: empty list")
    return vals


@main.command("predict")
@click.option("--draws", "draws_dir", required=True, type=str)
@click.option("--x", "x_path", required=True, type=str)
@click.option("--quantiles", "quantiles_text", default="0.05,0.5,0.95")
@click.option("--exceed", "exceed_text", default="")
@click.option("--out", "out_dir", default=None, type=str)
@_exit_codes
def cmd_predict(draws_dir, x_path, quantiles_text, exceed_text, out_dir):
    """Evaluate quantiles and exceedances at new covariate rows."""
    draws, meta = load_draws_dir(draws_dir)
    covariates = meta["covariates"]
    basis = _basis_from_json(meta.get("spline_basis"))
    try:
        frame = pd.read_csv(x_path)
    except FileNotFoundError:
        raise DataError(f"covariate file not found: {x_path}")
    except pd.errors.EmptyDataError:
        raise DataError(f"covariate file is empty: {x_path}")
    missing = [c for c in covariates if c not in frame.columns]
    if missing:
        raise DataError(f"covariate file lacks columns {missing}")
    raw = frame[covariates].to_numpy(dtype=float)
    if np.isnan(raw).any():
        rows = sorted(set(np.flatnonzero(np.isnan(raw).any(axis=1)) + 1))
        raise DataError(f"missing covariate values in rows {rows}")
    if basis is None:
        X_rows = np.column_stack([np.ones(raw.shape[0]), raw])
    else:
        X_rows = np.column_stack([np.ones(raw.shape[0]),
                                  basis.design(raw[:, 0])])
    out_dir = out_dir or draws_dir
    os.makedirs(out_dir, exist_ok=True)

    alphas = _parse_float_list(quantiles_text, "quantiles")
    rows = []
    for a in alphas:
        if not 0.0 < a < 1.0:
            raise ConfigError(f"--quantiles: {a} outside (0, 1)")
        out = quantile_curve(draws, a, X_rows)
        for k in range(X_rows.shape[0]):
            rows.append((k, a, out["mean"][k], out["lower"][k],
                         out["upper"][k]))
    _write_csv(pd.DataFrame(rows, columns=["row", "alpha", "mean", "lower",
                                           "upper"]),
               os.path.join(out_dir, "quantiles.csv"))

    if exceed_text.strip():
        y0s = _parse_float_list(exceed_text, "exceed")
        rows = []
        for k in range(X_rows.shape[0]):
            for y0 in y0s:
                point, ci, _ = exceedance(draws, X_rows[k], y0)
                rows.append((k, y0, point, ci[0], ci[1]))
        _write_csv(pd.DataFrame(rows, columns=["row", "y0", "mean", "lower",
                                               "upper"]),
                   os.path.join(out_dir, "exceedance.csv"))
    click.echo(f"predictions written to {out_dir}")


@main.command("simulate")
@click.option("--config", "config_path", required=True, type=str)
@click.option("--out", "out_dir", required=True, type=str)
@click.option("--seed", type=int, default=None)
@click.option("--threads", type=int, default=None)
@_exit_codes
def cmd_simulate(config_path, out_dir, seed, threads):
    """Run the operating-characteristics study and write metric tables."""
    cfg = _load_json(config_path, "config")
    studies = _get(cfg, "studies", list, None)
    if not studies:
        raise ConfigError("config.studies: expected a non-empty list")
    master_seed = seed if seed is not None else _get(cfg, "seed", int, 0)
    n_jobs = threads if threads is not None else \
        _get(cfg, "threads", int, os.cpu_count() or 1)
    config = _mcmc_config(cfg)
    os.makedirs(out_dir, exist_ok=True)
    for i, st in enumerate(studies):
        where = f"config.studies[{i}]"
        kind = _get(st, "kind", str, None, where)
        n = _get(st, "n", int, None, where)
        reps = _get(st, "replicates", int, None, where)
        if kind is None or n is None or reps is None:
            raise ConfigError(f"{where}: needs kind, n, replicates")
        scenario = Scenario(kind, n=n, replicate_count=reps)
        report = run_study(scenario, config, seed=master_seed + i,
                           n_jobs=n_jobs)
        tag = f"{kind}_n{n}"
        table1 = pd.DataFrame([{
            "Bias": report.weighted["bias"],
            "RMSE": report.weighted["rmse"],
            "Coverage": report.weighted["coverage"],
            "CI Length": report.weighted["ci_length"],
        }])
        _write_csv(table1, os.path.join(out_dir, f"table1_{tag}.csv"))
        _write_csv(pd.DataFrame(report.per_replicate),
                   os.path.join(out_dir, f"replicates_{tag}.csv"))
        exceed = pd.DataFrame(report.exceedance)[
            ["x1", "level", "y0", "p_true", "bias", "rmse", "coverage",
             "ci_length"]]
        _write_csv(exceed, os.path.join(out_dir, f"exceedance_{tag}.csv"))
        beta = pd.DataFrame({
            "coefficient": [f"beta_{j}"
                            for j in range(len(report.beta_summary["bias"]))],
            "bias": report.beta_summary["bias"],
            "rmse": report.beta_summary["rmse"],
            "coverage": report.beta_summary["coverage"],
            "ci_length": report.beta_summary["ci_length"],
        })
        _write_csv(beta, os.path.join(out_dir, f"beta_{tag}.csv"))
        extra = pd.DataFrame([
            ("coverage_se", report.weighted["coverage_se"]),
            ("n_failed", float(report.n_failed)),
            ("n_replicates", float(report.n_replicates)),
        ], columns=["quantity", "value"])
        _write_csv(extra, os.path.join(out_dir, f"study_info_{tag}.csv"))
        click.echo(f"study {tag}: coverage "
                   f"{report.weighted['coverage']:.1f}% -> {out_dir}")


if __name__ == "__main__":
    main()
