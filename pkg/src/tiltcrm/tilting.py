"""Exponential-tilting machinery for the semiparametric GLM.

Everything revolves around the log-normalizer of a tilted atomic measure,

    b(theta; mu) = log sum_l w_l exp(theta z_l),

whose first two derivatives are the tilted mean and variance.  Strict
monotonicity of the mean in theta makes b' invertible, which is what links
the linear predictor to the tilting parameter.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import special

from .errors import MeanOutOfRange

THETA_CAP = 500.0
MAX_NEWTON = 100


def _tol_mean(mu):
    lo, hi = mu.support
    return 1e-10 * (hi - lo)


def log_norm_const(mu, theta):
    """b(theta; mu) by log-sum-exp; finite for finite theta on compact support."""
    a = theta * mu.locations + np.log(mu.weights)
    m = a.max()
    return float(m + np.log(np.exp(a - m).sum()))


def tilted_weights(mu, theta):
    """Normalized tilted weights w_l exp(theta z_l) / sum."""
    a = theta * mu.locations + np.log(mu.weights)
    a -= a.max()
    w = np.exp(a)
    return w / w.sum()


def tilted_mean(mu, theta):
    return float(tilted_weights(mu, theta) @ mu.locations)


def tilted_var(mu, theta):
    w = tilted_weights(mu, theta)
    m = w @ mu.locations
    return float(w @ (mu.locations - m) ** 2)


@dataclass
class TiltedView:
    """A discrete measure seen through an exponential tilt by theta."""

    base: object  # DiscreteMeasure
    theta: float

    @property
    def weights(self):
        return tilted_weights(self.base, self.theta)

    @property
    def total_mass(self):
        """T = exp(b(theta)), the tilted un-normalized total mass."""
        return float(np.exp(log_norm_const(self.base, self.theta)))

    def mean(self):
        return tilted_mean(self.base, self.theta)


def _batch_moments(thetas, z, logw):
    a = np.multiply.outer(thetas, z) + logw
    a -= a.max(axis=1, keepdims=True)
    w = np.exp(a)
    tot = w.sum(axis=1)
    mean = (w @ z) / tot
    var = (w @ z**2) / tot - mean**2
    return mean, var


def solve_theta_many(mu, lams, theta0=None, tol=None, max_iter=MAX_NEWTON):
    """Vectorized inverse of the tilted mean: theta with b'(theta) = lam.

    Safeguarded Newton with bracket expansion; the mean is strictly
    increasing in theta, so bisection on the maintained bracket is always a
    valid fallback.  Raises MeanOutOfRange if any lam is outside the open
    convex hull of the atom locations or needs |theta| beyond the cap.
    """
    z = mu.locations
    logw = np.log(mu.weights)
    lams = np.asarray(lams, dtype=float)
    if np.any(lams <= z.min()) or np.any(lams >= z.max()):
        raise MeanOutOfRange("target mean outside the open hull of atoms")
    tol = _tol_mean(mu) if tol is None else tol
    t = (np.zeros_like(lams) if theta0 is None
         else np.clip(np.asarray(theta0, dtype=float).copy(), -THETA_CAP, THETA_CAP))
    # bracket expansion: double a window around the start until it brackets
    lo = t - 1.0
    hi = t + 1.0
    width = 1.0
    while width <= 2 * THETA_CAP:
        lo = np.maximum(lo, -THETA_CAP)
        hi = np.minimum(hi, THETA_CAP)
        m_lo, _ = _batch_moments(lo, z, logw)
        m_hi, _ = _batch_moments(hi, z, logw)
        need_lo = (m_lo >= lams) & (lo > -THETA_CAP)
        need_hi = (m_hi <= lams) & (hi < THETA_CAP)
        if not (need_lo.any() or need_hi.any()):
            break
        lo[need_lo] -= width
        hi[need_hi] += width
        width *= 2.0
    m_lo, _ = _batch_moments(lo, z, logw)
    m_hi, _ = _batch_moments(hi, z, logw)
    if np.any(m_lo > lams) or np.any(m_hi < lams):
        raise MeanOutOfRange("tilting beyond the cap cannot reach the target mean")
    t = np.clip(t, lo, hi)
    active = np.ones(lams.shape, dtype=bool)
    for _ in range(max_iter):
        idx = np.flatnonzero(active)
        mean, var = _batch_moments(t[idx], z, logw)
        f = mean - lams[idx]
        done = np.abs(f) <= tol
        lo[idx[f < 0]] = np.maximum(lo[idx[f < 0]], t[idx[f < 0]])
        hi[idx[f >= 0]] = np.minimum(hi[idx[f >= 0]], t[idx[f >= 0]])
        active[idx[done]] = False
        rem = idx[~done]
        if rem.size == 0:
            break
        with np.errstate(divide="ignore", invalid="ignore"):
            t_new = t[rem] - f[~done] / var[~done]
        bad = (~np.isfinite(t_new)) | (t_new <= lo[rem]) | (t_new >= hi[rem])
        t_new[bad] = 0.5 * (lo[rem][bad] + hi[rem][bad])
        t[rem] = t_new
    if active.any():
        # brackets have collapsed to machine precision; accept the midpoint
        idx = np.flatnonzero(active)
        if np.any(hi[idx] - lo[idx] > 1e-12 * (1 + np.abs(t[idx]))):
            raise MeanOutOfRange("mean inversion failed to converge")
    return t


def solve_theta(mu, lam, theta0=None, tol=None):
    """theta = b'^{-1}(lam; mu), requiring min z < lam < max z strictly."""
    t0 = None if theta0 is None else np.asarray([theta0], dtype=float)
    return float(solve_theta_many(mu, np.asarray([lam]), theta0=t0, tol=tol)[0])


def retilt_to_mean(mu, m0):
    """Tilt mu by e^{cz} so the normalized mean becomes m0."""
    from .measures import DiscreteMeasure

    c = solve_theta(mu, m0)
    return DiscreteMeasure(mu.locations, mu.weights * np.exp(c * mu.locations),
                           support=mu.support, truncated=mu.truncated)


@dataclass(frozen=True)
class LogitLink:
    """Logit link mapping means in (lo, hi) to the real line."""

    lo: float = 0.0
    hi: float = 1.0

    name = "logit"

    def forward(self, mean):
        mean = np.asarray(mean, dtype=float)
        return np.log(mean - self.lo) - np.log(self.hi - mean)

    def inverse(self, eta):
        eta = np.asarray(eta, dtype=float)
        return self.lo + (self.hi - self.lo) * special.expit(eta)

    def deriv(self, mean):
        """g'(mean) = d eta / d mean."""
        mean = np.asarray(mean, dtype=float)
        return (self.hi - self.lo) / ((mean - self.lo) * (self.hi - mean))
