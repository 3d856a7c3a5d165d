"""Posterior functional extraction from fitted draws.

Every functional is a plain transformation of the kept posterior draws:
each draw is a normalized discrete measure (common mean after retilting)
convolved with the fit's uniform kernel, optionally re-tilted to the mean
implied by a covariate row.  Summaries are pointwise posterior means with
symmetric quantile bands.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, MeanOutOfRange
from .tilting import LogitLink, solve_theta, tilted_weights

log = logging.getLogger("tiltcrm")

GRID_POINTS = 512
SKIP_WARN_FRACTION = 0.10


@dataclass
class DensityGrid:
    """Per-draw functional values on a shared grid with pointwise summaries."""

    y_grid: np.ndarray
    values: np.ndarray          # (R, G)
    n_skipped: int = 0
    skip_warning: bool = field(default=False)

    def __post_init__(self):
        self.y_grid = np.asarray(self.y_grid, dtype=float)
        self.values = np.asarray(self.values, dtype=float)
        if self.values.ndim != 2 or self.values.shape[1] != self.y_grid.size:
            raise ValueError("values must be (n_draws, grid size)")

    @property
    def n_draws(self):
        return self.values.shape[0]

    @property
    def mean(self):
        return self.values.mean(axis=0)

    def band(self, level=0.95):
        tail = 0.5 * (1.0 - level)
        lo = np.quantile(self.values, tail, axis=0)
        hi = np.quantile(self.values, 1.0 - tail, axis=0)
        return lo, hi

    def summary(self, level=0.95):
        lo, hi = self.band(level)
        return {"y": self.y_grid, "mean": self.mean, "lower": lo, "upper": hi}


def default_grid(support, n=GRID_POINTS):
    """Cell-midpoint grid over the open support."""
    lo, hi = support
    edges = np.linspace(lo, hi, n + 1)
    return 0.5 * (edges[:-1] + edges[1:])


def _require_kernel(draws):
    if draws.kernel is None:
        raise ConfigError("draws carry no smoothing kernel; refit with n >= 2")
    return draws.kernel


def _clipped_grid(y_grid, support):
    y_grid = np.asarray(y_grid, dtype=float)
    lo, hi = support
    if np.any(y_grid < lo) or np.any(y_grid > hi):
        log.warning("grid points outside the support were clipped to [%g, %g]",
                    lo, hi)
        y_grid = np.clip(y_grid, lo, hi)
    return y_grid


# ---------------------------------------------------------------------------
# baseline functionals


def baseline_density(draws, y_grid):
    """Per-draw convolved baseline density f(y) = sum_l K(y|z_l) w_l."""
    kernel = _require_kernel(draws)
    support = draws.measures[0].support
    y_grid = _clipped_grid(y_grid, support)
    values = np.empty((len(draws.measures), y_grid.size))
    for r, m in enumerate(draws.measures):
        w = m.weights / m.total_mass
        values[r] = kernel.density(y_grid[:, None], m.locations[None, :]) @ w
    return DensityGrid(y_grid, values)


def baseline_cdf(draws, y_grid):
    """Per-draw convolved baseline CDF; each atom contributes an exact ramp."""
    kernel = _require_kernel(draws)
    support = draws.measures[0].support
    y_grid = _clipped_grid(y_grid, support)
    values = np.empty((len(draws.measures), y_grid.size))
    for r, m in enumerate(draws.measures):
        w = m.weights / m.total_mass
        values[r] = kernel.cdf(y_grid[:, None], m.locations[None, :]) @ w
    return DensityGrid(y_grid, values)


# ---------------------------------------------------------------------------
# conditional functionals


def _conditional_tilts(draws, x, link=None):
    """Tilt each kept draw to the mean implied by covariate row x.

    Yields (draw index, measure, tilted normalized weights); draws whose
    implied mean is unattainable are skipped and counted.
    """
    x = np.asarray(x, dtype=float)
    support = draws.measures[0].support
    if link is None:
        link = LogitLink(*support)
    lo, hi = support
    kept, skipped = [], 0
    for r, (beta, m) in enumerate(zip(draws.beta, draws.measures)):
        lam = link.inverse(float(x @ beta))
        if not lo < lam < hi:
            skipped += 1
            continue
        try:
            theta = solve_theta(m, lam)
        except MeanOutOfRange:
            skipped += 1
            continue
        kept.append((r, m, tilted_weights(m, theta)))
    return kept, skipped


def _skip_flag(n_skipped, n_total):
    frac = n_skipped / max(n_total, 1)
    if frac > SKIP_WARN_FRACTION:
        log.warning("%.0f%% of posterior draws skipped (unattainable mean)",
                    100 * frac)
        return True
    return False


def conditional_density(draws, x, y_grid):
    """Per-draw conditional density p(y | x) on the grid."""
    kernel = _require_kernel(draws)
    support = draws.measures[0].support
    y_grid = _clipped_grid(y_grid, support)
    kept, skipped = _conditional_tilts(draws, x)
    values = np.empty((len(kept), y_grid.size))
    for i, (_, m, w) in enumerate(kept):
        values[i] = kernel.density(y_grid[:, None], m.locations[None, :]) @ w
    return DensityGrid(y_grid, values, n_skipped=skipped,
                       skip_warning=_skip_flag(skipped, len(draws.measures)))


def conditional_cdf(draws, x, y_grid):
    """Per-draw conditional CDF P(Y <= y | x) on the grid."""
    kernel = _require_kernel(draws)
    support = draws.measures[0].support
    y_grid = _clipped_grid(y_grid, support)
    kept, skipped = _conditional_tilts(draws, x)
    values = np.empty((len(kept), y_grid.size))
    for i, (_, m, w) in enumerate(kept):
        values[i] = kernel.cdf(y_grid[:, None], m.locations[None, :]) @ w
    return DensityGrid(y_grid, values, n_skipped=skipped,
                       skip_warning=_skip_flag(skipped, len(draws.measures)))


def exceedance(draws, x, y0, level=0.95):
    """Posterior P(Y > y0 | x): (point estimate, credible interval, meta)."""
    kernel = _require_kernel(draws)
    kept, skipped = _conditional_tilts(draws, x)
    probs = np.array([w @ kernel.survival(y0, m.locations)
                      for _, m, w in kept])
    tail = 0.5 * (1.0 - level)
    point = float(probs.mean())
    ci = (float(np.quantile(probs, tail)), float(np.quantile(probs, 1 - tail)))
    return point, ci, {"n_skipped": skipped,
                       "skip_warning": _skip_flag(skipped, len(draws.measures)),
                       "draws": probs}


# ---------------------------------------------------------------------------
# exact piecewise-linear quantiles


def mixture_quantile(locations, weights, kernel, alphas):
    """Exact quantile of sum_l w_l * Uniform(z_l - c, z_l + c).

    The CDF is piecewise linear with breakpoints at every z_l +- c, so
    linear interpolation between breakpoint CDF values inverts it exactly.
    """
    c = kernel.halfwidth
    bp = np.unique(np.concatenate([locations - c, locations + c]))
    F = kernel.cdf(bp[:, None], locations[None, :]) @ weights
    alphas = np.asarray(alphas, dtype=float)
    # flat stretches of F (zero-density gaps) make the inverse set-valued;
    # take the midpoint of the gap so symmetric laws get symmetric
    # quantiles.  Plateaus are detected with a tolerance because breakpoint
    # CDF values at the same level can differ by rounding.
    tol = 1e-12
    keep = np.concatenate([[True], np.diff(F) > tol])
    idx = np.flatnonzero(keep)
    Fu = F[idx]                              # one level per plateau, rising
    bp_left = bp[idx]
    bp_right = bp[np.append(idx[1:] - 1, F.size - 1)]
    j = np.searchsorted(Fu, alphas - tol, side="left")
    j = np.clip(j, 0, Fu.size - 1)
    on_plateau = np.abs(Fu[j] - alphas) <= tol
    out = np.empty(alphas.shape)
    out[on_plateau] = 0.5 * (bp_left[j[on_plateau]]
                             + bp_right[j[on_plateau]])
    rise = ~on_plateau
    jr = np.clip(j[rise], 1, Fu.size - 1)
    f0, f1 = Fu[jr - 1], Fu[jr]
    t = np.clip((alphas[rise] - f0) / (f1 - f0), 0.0, 1.0)
    out[rise] = bp_right[jr - 1] + t * (bp_left[jr] - bp_right[jr - 1])
    return out


def quantile_curve(draws, alpha, x_grid, level=0.95):
    """Posterior conditional alpha-quantile across covariate rows.

    Returns a dict with the x grid, pointwise posterior mean, symmetric
    band, per-(draw, x) values, and the skip count.
    """
    if not 0.0 < alpha < 1.0:
        raise ConfigError("alpha must lie strictly inside (0, 1)")
    kernel = _require_kernel(draws)
    x_grid = np.atleast_2d(np.asarray(x_grid, dtype=float))
    R = len(draws.measures)
    full = np.full((R, x_grid.shape[0]), np.nan)
    for k, x in enumerate(x_grid):
        kept, _ = _conditional_tilts(draws, x)
        for r, m, w in kept:
            full[r, k] = float(mixture_quantile(m.locations, w, kernel, alpha))
    # a draw enters the summary only if it is valid at every x, so the
    # pointwise band always averages over the same posterior sample
    complete = ~np.isnan(full).any(axis=1)
    values = full[complete]
    n_kept = values.shape[0]
    tail = 0.5 * (1.0 - level)
    return {
        "x": x_grid,
        "alpha": alpha,
        "mean": values.mean(axis=0) if n_kept else np.full(x_grid.shape[0],
                                                           np.nan),
        "lower": np.quantile(values, tail, axis=0) if n_kept else None,
        "upper": np.quantile(values, 1 - tail, axis=0) if n_kept else None,
        "values": values,
        "n_skipped": R - n_kept,
    }
