"""Gamma and posterior-tilted completely random measures.

Realizes (truncated) CRMs as finite atomic measures via the Ferguson-Klass
algorithm: atom weights are found by inverting the Levy-intensity tail mass
at the epochs of a unit-rate Poisson process, so weights come out in
decreasing order.  Two intensities are supported: the homogeneous gamma
intensity e^{-s}/s ds * alpha G0(dz), and the inhomogeneous posterior form
e^{-s(1+psi(z))}/s ds * alpha G0(dz) with psi(z) = sum_i u_i exp(theta_i z).
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import special

from .errors import NumericalError, TruncationUnderflow

# Shared numerical knobs.  The quadrature grid is reused for the z-integral
# in the tilted tail mass and for grid inverse-CDF location sampling.
GRID_NODES = 256
TOL_REL = 1e-9
MAX_ITER = 200
WEIGHT_FLOOR_REL = 1e-12

# Tail-inversion lookup table (log-spaced in s).
_TABLE_LO = 1e-300
_TABLE_HI = 1e3
_TABLE_SIZE = 800


@dataclass(frozen=True)
class BaseMeasure:
    """Uniform base distribution G0 on [lo, hi]."""

    lo: float = 0.0
    hi: float = 1.0

    def __post_init__(self):
        if not self.hi > self.lo:
            raise ValueError("base measure requires hi > lo")

    @property
    def width(self):
        return self.hi - self.lo

    def density(self, z):
        z = np.asarray(z, dtype=float)
        inside = (z >= self.lo) & (z <= self.hi)
        return np.where(inside, 1.0 / self.width, 0.0)

    def cdf(self, z):
        z = np.asarray(z, dtype=float)
        return np.clip((z - self.lo) / self.width, 0.0, 1.0)

    def quantile(self, q):
        q = np.asarray(q, dtype=float)
        return self.lo + q * self.width

    def grid(self, n=GRID_NODES):
        """Midpoint nodes and their G0 masses (sum to 1 for uniform G0)."""
        edges = np.linspace(self.lo, self.hi, n + 1)
        nodes = 0.5 * (edges[:-1] + edges[1:])
        masses = np.full(n, 1.0 / n)
        return nodes, masses


@dataclass
class DiscreteMeasure:
    """Finite atomic measure: locations with strictly positive weights."""

    locations: np.ndarray
    weights: np.ndarray
    support: tuple[float, float] = (0.0, 1.0)
    truncated: bool = False

    def __post_init__(self):
        self.locations = np.asarray(self.locations, dtype=float)
        self.weights = np.asarray(self.weights, dtype=float)
        if self.locations.shape != self.weights.shape or self.locations.ndim != 1:
            raise ValueError("locations and weights must be matching 1-d arrays")
        if self.locations.size == 0:
            raise ValueError("measure must have at least one atom")
        if not np.all(self.weights > 0):
            raise ValueError("all weights must be strictly positive")
        lo, hi = self.support
        if np.any(self.locations < lo) or np.any(self.locations > hi):
            raise ValueError("atom locations outside the support bounds")
        if not np.isfinite(self.weights.sum()):
            raise ValueError("total mass must be finite")

    @property
    def n_atoms(self):
        return self.locations.size

    @property
    def total_mass(self):
        return float(self.weights.sum())

    def normalized(self):
        return DiscreteMeasure(
            self.locations, self.weights / self.total_mass,
            support=self.support, truncated=self.truncated)

    def mean(self):
        """Mean of the normalized measure."""
        return float(self.locations @ self.weights) / self.total_mass

    def cdf(self, y):
        """CDF of the normalized atomic measure at y (right-continuous)."""
        y = np.asarray(y, dtype=float)
        order = np.argsort(self.locations)
        locs = self.locations[order]
        cum = np.cumsum(self.weights[order]) / self.total_mass
        idx = np.searchsorted(locs, y, side="right")
        out = np.where(idx > 0, cum[np.minimum(idx, locs.size) - 1], 0.0)
        return np.where(idx == 0, 0.0, out)


class LevyIntensity:
    """Levy intensity nu(ds, dz) of the gamma or posterior-tilted CRM.

    The s-density is e^{-s}/s (homogeneous) or e^{-s(1+psi(z))}/s with
    psi(z) >= 0 (posterior form); the z-marginal is alpha * G0.
    """

    HOMOGENEOUS_GAMMA = "homogeneous_gamma"
    POSTERIOR_TILTED = "posterior_tilted"

    def __init__(self, kind, alpha, base, psi=None):
        if alpha <= 0:
            raise ValueError("alpha must be positive")
        if kind == self.POSTERIOR_TILTED and psi is None:
            raise ValueError("posterior intensity requires psi")
        if kind == self.HOMOGENEOUS_GAMMA and psi is not None:
            raise ValueError("homogeneous intensity takes no psi")
        self.kind = kind
        self.alpha = float(alpha)
        self.base = base
        self.psi = psi
        self._nodes, self._masses = base.grid()
        if psi is not None:
            psi_vals = np.asarray(psi(self._nodes), dtype=float)
            if np.any(psi_vals < -1e-12):
                raise ValueError("psi must be nonnegative on the support")
            self._rates = 1.0 + np.maximum(psi_vals, 0.0)
        else:
            self._rates = None
        self._table = None

    @classmethod
    def gamma_process(cls, alpha, base):
        return cls(cls.HOMOGENEOUS_GAMMA, alpha, base)

    @classmethod
    def posterior(cls, alpha, base, u, theta):
        """Posterior intensity with psi(z) = sum_i u_i exp(theta_i z)."""
        u = np.asarray(u, dtype=float)
        theta = np.asarray(theta, dtype=float)

        def psi(z):
            z = np.asarray(z, dtype=float)
            return np.exp(np.multiply.outer(z, theta)) @ u

        return cls(cls.POSTERIOR_TILTED, alpha, base, psi=psi)

    # -- tail mass -------------------------------------------------------

    def tail_mass_vec(self, v):
        """N(v) = nu([v, inf) x Y) for an array of positive jump sizes v."""
        v = np.asarray(v, dtype=float)
        if self.kind == self.HOMOGENEOUS_GAMMA:
            out = self.alpha * special.exp1(v)
        else:
            # fixed-node quadrature over z: N(v) = alpha * E[E1(v (1+psi(Z)))]
            args = np.multiply.outer(v, self._rates)
            out = self.alpha * (special.exp1(args) @ self._masses)
        return out

    def _tail_slope_log(self, v):
        """d/dt N(e^t) at t = log v; equals -alpha * E[exp(-v(1+psi))]."""
        v = np.asarray(v, dtype=float)
        if self.kind == self.HOMOGENEOUS_GAMMA:
            return -self.alpha * np.exp(-v)
        args = np.multiply.outer(v, self._rates)
        return -self.alpha * (np.exp(-args) @ self._masses)

    def _tail_table(self):
        if self._table is None:
            # the tilted table is rebuilt per proposal, so keep it coarse;
            # it only seeds the Newton polish in the inversion
            size = _TABLE_SIZE if self.kind == self.HOMOGENEOUS_GAMMA else 160
            t = np.linspace(np.log(_TABLE_LO), np.log(_TABLE_HI), size)
            n = self.tail_mass_vec(np.exp(t))
            self._table = (t, n)
        return self._table

    # -- location sampling ----------------------------------------------

    def sample_locations(self, sizes, rng):
        """Draw atom locations given their jump sizes.

        For the homogeneous intensity the conditional law is exactly G0.
        For the posterior form it is proportional to exp(-s(1+psi(z))) g0(z),
        sampled by inverse CDF on the fixed evaluation grid (piecewise
        constant over the grid cells).
        """
        sizes = np.asarray(sizes, dtype=float)
        if self.kind == self.HOMOGENEOUS_GAMMA:
            return self.base.quantile(rng.random(sizes.size))
        logw = -np.multiply.outer(sizes, self._rates) + np.log(self._masses)
        logw -= logw.max(axis=1, keepdims=True)
        w = np.exp(logw)
        cum = np.cumsum(w, axis=1)
        u = rng.random(sizes.size) * cum[:, -1]
        cells = np.minimum(
            (cum < u[:, None]).sum(axis=1), self._nodes.size - 1)
        half = 0.5 * (self._nodes[1] - self._nodes[0])
        jitter = (rng.random(sizes.size) * 2.0 - 1.0) * half
        return self._nodes[cells] + jitter


def tail_mass(v, intensity):
    """Tail mass N(v) of the Levy intensity; monotone non-increasing in v."""
    if v <= 0:
        raise ValueError("v must be positive")
    out = float(intensity.tail_mass_vec(np.asarray([v]))[0])
    if not np.isfinite(out):
        raise NumericalError(f"tail mass not finite at v={v!r}")
    return out


def _invert_tail_many(xi, intensity, tol_rel=TOL_REL, max_iter=MAX_ITER):
    """Solve N(s) = xi for each entry of xi (safeguarded Newton in log s).

    Raises TruncationUnderflow when some xi exceeds N at the representable
    floor, meaning the corresponding jump size underflows.
    """
    xi = np.asarray(xi, dtype=float)
    if np.any(xi <= 0):
        raise ValueError("xi must be positive")
    t_grid, n_grid = intensity._tail_table()
    if np.any(xi > n_grid[0]):
        raise TruncationUnderflow(
            "requested tail level exceeds the representable jump floor")
    # initial guess by interpolating the monotone table (N decreasing in t)
    t = np.interp(xi, n_grid[::-1], t_grid[::-1])
    lo = np.full_like(t, t_grid[0])
    hi = np.full_like(t, t_grid[-1] + 50.0)
    active = np.ones(t.shape, dtype=bool)
    for _ in range(max_iter):
        idx = np.flatnonzero(active)
        v = np.exp(t[idx])
        f = intensity.tail_mass_vec(v) - xi[idx]
        done = np.abs(f) <= tol_rel * xi[idx]
        # tighten brackets (N decreasing in s: f > 0 means s too small)
        low_side = f > 0
        lo[idx[low_side]] = np.maximum(lo[idx[low_side]], t[idx[low_side]])
        hi[idx[~low_side]] = np.minimum(hi[idx[~low_side]], t[idx[~low_side]])
        active[idx[done]] = False
        rem = idx[~done]
        if rem.size == 0:
            break
        slope = intensity._tail_slope_log(np.exp(t[rem]))
        with np.errstate(divide="ignore", invalid="ignore"):
            t_new = t[rem] - f[~done] / slope
        bad = (~np.isfinite(t_new)) | (t_new <= lo[rem]) | (t_new >= hi[rem])
        t_new[bad] = 0.5 * (lo[rem][bad] + hi[rem][bad])
        t[rem] = t_new
    if active.any():
        raise NumericalError("tail inversion failed to converge")
    return np.exp(t)


def invert_tail(xi, intensity, tol_rel=TOL_REL):
    """Inverse of tail_mass: the jump size s with N(s) = xi (relative tol)."""
    if xi <= 0:
        raise ValueError("xi must be positive")
    return float(_invert_tail_many(np.asarray([xi]), intensity, tol_rel)[0])


def sample_crm(intensity, H, rng, weight_floor_rel=WEIGHT_FLOOR_REL):
    """Ferguson-Klass draw of a truncated CRM with at most H atoms.

    Poisson epochs xi_1 < xi_2 < ... (unit rate) are mapped to jump sizes
    s_h = N^{-1}(xi_h), giving strictly decreasing weights.  Atoms whose
    weight falls below weight_floor_rel times the accumulated mass are
    dropped and the draw is flagged truncated (as it is when the inversion
    underflows before H atoms are produced).
    """
    if H < 1:
        raise ValueError("H must be >= 1")
    sizes = []
    xi_last = 0.0
    total = 0.0
    truncated = False
    block = 64
    while len(sizes) < H and not truncated:
        m = min(block, H - len(sizes))
        xi = xi_last + np.cumsum(rng.standard_exponential(m))
        xi_last = xi[-1]
        try:
            s = _invert_tail_many(xi, intensity)
        except TruncationUnderflow:
            truncated = True
            # salvage the leading epochs that still invert
            t_grid, n_grid = intensity._tail_table()
            ok = int(np.sum(xi <= n_grid[0]))
            s = _invert_tail_many(xi[:ok], intensity) if ok else np.empty(0)
        # drop the tail once a weight falls below the relative floor
        running = total + np.cumsum(s) - s
        below = (running > 0) & (s < weight_floor_rel * running)
        if below.any():
            s = s[: int(np.argmax(below))]
            truncated = True
        total += s.sum()
        sizes.extend(s.tolist())
    sizes = np.asarray(sizes, dtype=float)
    if sizes.size == 0:
        raise TruncationUnderflow("no representable atoms")
    locs = intensity.sample_locations(sizes, rng)
    return DiscreteMeasure(locs, sizes,
                           support=(intensity.base.lo, intensity.base.hi),
                           truncated=truncated)


def sample_posterior_crm(u, theta, z_star, n_star, alpha, base, H, rng):
    """Draw from the posterior CRM decomposition.

    Union of (i) a truncated draw from the inhomogeneous intensity with
    psi(z) = sum_i u_i exp(theta_i z), and (ii) fixed atoms at z_star with
    independent Gamma(n_star_l, psi(z_star_l) + 1) weights.
    """
    u = np.asarray(u, dtype=float)
    theta = np.asarray(theta, dtype=float)
    z_star = np.asarray(z_star, dtype=float)
    n_star = np.asarray(n_star)
    if z_star.size != n_star.size:
        raise ValueError("z_star and n_star must have equal length")
    if np.any(u <= 0):
        raise ValueError("all auxiliary variables must be positive")
    if u.size:
        intensity = LevyIntensity.posterior(alpha, base, u, theta)
    else:
        intensity = LevyIntensity.gamma_process(alpha, base)
    measure = sample_crm(intensity, H, rng)
    if z_star.size:
        if u.size:
            psi_star = np.exp(np.multiply.outer(z_star, theta)) @ u
        else:
            psi_star = np.zeros(z_star.size)
        j = rng.gamma(shape=np.asarray(n_star, dtype=float),
                      scale=1.0 / (psi_star + 1.0))
        j = np.maximum(j, np.finfo(float).tiny)
        measure = DiscreteMeasure(
            np.concatenate([measure.locations, z_star]),
            np.concatenate([measure.weights, j]),
            support=measure.support, truncated=measure.truncated)
    return measure
