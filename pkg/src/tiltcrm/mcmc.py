"""Posterior simulation for the tilted-CRM semiparametric GLM.

One sweep cycles four transition kernels, in this order:

  1. auxiliary variables u  -- componentwise gamma random-walk MH against
     the conditional left after marginalizing out the total-mass
     normalization,
  2. the measure mu         -- an independence-style MH whose proposal is
     the posterior CRM decomposition at the current tilts, accepted with
     the four-normalizer product ratio,
  3. latents z              -- exact discrete complete conditional (Gibbs),
  4. coefficients beta      -- MH with a normal proposal centered at the
     conditional posterior mode, covariance the inverse Fisher information.

The update order is chosen so the mu proposal sees fresh auxiliaries and
the beta step sees the fresh measure.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np

from .data import Dataset
from .errors import ConfigError, MeanOutOfRange, NumericalError
from .measures import (BaseMeasure, DiscreteMeasure, LevyIntensity,
                       sample_crm, sample_posterior_crm)
from .tilting import LogitLink, retilt_to_mean, solve_theta_many

log = logging.getLogger("tiltcrm")

NEWTON_MAX_ITER = 100
PROPOSAL_MAX_TRIES = 100
DELTA_TARGET_ACCEPT = 0.30
DELTA_ADAPT_BATCH = 50


@dataclass(frozen=True)
class Kernel:
    """Uniform convolution kernel of halfwidth c: K(y|z) = 1/(2c) on |y-z|<=c."""

    halfwidth: float

    def __post_init__(self):
        if self.halfwidth <= 0:
            raise ValueError("kernel halfwidth must be positive")

    def density(self, y, z):
        y = np.asarray(y, dtype=float)
        inside = np.abs(y - z) <= self.halfwidth
        return np.where(inside, 0.5 / self.halfwidth, 0.0)

    def cdf(self, y, z):
        """P(Y <= y | z): a ramp over [z-c, z+c]."""
        y = np.asarray(y, dtype=float)
        return np.clip((y - z + self.halfwidth) / (2 * self.halfwidth), 0.0, 1.0)

    def survival(self, y0, z):
        return 1.0 - self.cdf(y0, z)


def silverman_halfwidth(y, factor=1.0):
    """c = factor * 1.06 * sd(y) * n^{-1/5}."""
    y = np.asarray(y, dtype=float)
    if y.size < 2:
        raise ValueError("need at least two observations for the bandwidth")
    return factor * 1.06 * y.std(ddof=1) * y.size ** (-0.2)


@dataclass
class Prior:
    beta_mean: np.ndarray
    beta_cov: np.ndarray
    alpha: float = 1.0
    support: tuple[float, float] = (0.0, 1.0)

    @classmethod
    def default(cls, p, alpha=1.0, support=(0.0, 1.0), beta_scale=10.0):
        return cls(np.zeros(p), beta_scale**2 * np.eye(p), alpha, support)


@dataclass
class McmcConfig:
    n_iter: int = 2000
    burn_in: int = 1000
    thin: int = 4
    H: int = 200
    delta: float = 2.0
    adapt_delta: bool = True
    kernel_halfwidth_factor: float = 1.0
    m0_policy: object = "sample_mean"  # or "sample_median", "none", ("fixed", v)
    seed: int = 0
    prior: Prior | None = None

    def validate(self):
        if self.burn_in >= self.n_iter:
            raise ConfigError("burn_in must be smaller than n_iter")
        if self.thin < 1:
            raise ConfigError("thin must be >= 1")
        if self.H < 1:
            raise ConfigError("H must be >= 1")
        if self.delta < 1.0:
            raise ConfigError("delta must be >= 1")
        ok = self.m0_policy in ("sample_mean", "sample_median", "none") or (
            isinstance(self.m0_policy, (tuple, list))
            and len(self.m0_policy) == 2 and self.m0_policy[0] == "fixed")
        if not ok:
            raise ConfigError(f"unknown m0 policy: {self.m0_policy!r}")


@dataclass
class ModelState:
    beta: np.ndarray
    mu: DiscreteMeasure
    z_idx: np.ndarray       # index of each latent into mu's atom list
    u: np.ndarray
    theta: np.ndarray
    lam: np.ndarray         # g^{-1}(x_i' beta), cached
    log_norm: np.ndarray    # b(theta_i; mu), cached

    @property
    def z(self):
        return self.mu.locations[self.z_idx]

    def z_log_weight(self):
        return np.log(self.mu.weights[self.z_idx])


@dataclass
class PosteriorDraws:
    beta: np.ndarray                  # (R, p)
    measures: list                    # retilted normalized DiscreteMeasure
    kernel: Kernel | None
    accept_rates: dict
    m0: float | None
    n_skipped_retilt: int = 0
    config: McmcConfig | None = None

    @property
    def n_draws(self):
        return self.beta.shape[0]


# ---------------------------------------------------------------------------
# shared numerics


def log_norm_many(mu, thetas):
    """b(theta_i; mu) for a vector of tilts (row-wise log-sum-exp)."""
    thetas = np.asarray(thetas, dtype=float)
    a = np.multiply.outer(thetas, mu.locations) + np.log(mu.weights)
    if a.size == 0:
        return np.zeros(thetas.shape)
    m = a.max(axis=1)
    return m + np.log(np.exp(a - m[:, None]).sum(axis=1))


def _mvn_logpdf(x, mean, cov_inv, logdet):
    d = x - mean
    return -0.5 * (d @ cov_inv @ d + logdet + d.size * np.log(2 * np.pi))


# ---------------------------------------------------------------------------
# beta step


def log_post_beta(beta, state, data, prior, link, theta0=None):
    """Log complete conditional of beta (up to a constant).

    Returns -inf when any implied mean leaves the open support or the
    atom hull, which the MH step treats as a rejection region.
    """
    lo, hi = prior.support
    eta = data.X @ beta
    lam = link.inverse(eta)
    if np.any(lam <= lo) or np.any(lam >= hi):
        return -np.inf, None, None, None
    try:
        theta = solve_theta_many(state.mu, lam,
                                 theta0=theta0 if theta0 is not None else state.theta)
    except MeanOutOfRange:
        return -np.inf, None, None, None
    b = log_norm_many(state.mu, theta)
    cov_inv = np.linalg.inv(prior.beta_cov)
    sign, logdet = np.linalg.slogdet(prior.beta_cov)
    lp = float(theta @ state.z - b.sum() + state.z_log_weight().sum()
               + _mvn_logpdf(beta, prior.beta_mean, cov_inv, logdet))
    return lp, theta, lam, b


class _BetaUpdater:
    """Newton mode finder plus MH step; precomputes prior factors."""

    def __init__(self, data, prior, link):
        self.data = data
        self.prior = prior
        self.link = link
        self.cov_inv = np.linalg.inv(prior.beta_cov)
        _, self.logdet = np.linalg.slogdet(prior.beta_cov)
        self._last_mode = None  # warm start for the Newton search

    def _eval(self, beta, state, theta0):
        lo, hi = self.prior.support
        lam = self.link.inverse(self.data.X @ beta)
        if np.any(lam <= lo) or np.any(lam >= hi):
            return None
        try:
            theta = solve_theta_many(state.mu, lam, theta0=theta0)
        except MeanOutOfRange:
            return None
        b = log_norm_many(state.mu, theta)
        lp = float(theta @ state.z - b.sum()
                   + _mvn_logpdf(beta, self.prior.beta_mean, self.cov_inv,
                                 self.logdet))
        return lp, theta, lam, b

    def find_mode(self, state):
        """Newton ascent toward the conditional mode; returns None on failure.

        Starts from the previous sweep's mode when available (the mode
        drifts slowly), falling back to the current beta.
        """
        res = None
        if self._last_mode is not None:
            beta = self._last_mode
            res = self._eval(beta, state, state.theta)
        if res is None:
            beta = state.beta.copy()
            res = self._eval(beta, state, state.theta)
        if res is None:
            return None
        lp, theta, lam, _ = res
        from .tilting import _batch_moments
        for _ in range(NEWTON_MAX_ITER):
            _, var = _batch_moments(theta, state.mu.locations,
                                    np.log(state.mu.weights))
            gp = self.link.deriv(lam)
            grad = self.data.X.T @ ((state.z - lam) / (gp * var)) \
                - self.cov_inv @ (beta - self.prior.beta_mean)
            fisher_lik = (self.data.X / (gp**2 * var)[:, None]).T @ self.data.X
            hess = fisher_lik + self.cov_inv
            try:
                step = np.linalg.solve(hess, grad)
            except np.linalg.LinAlgError:
                return None
            if not np.all(np.isfinite(step)):
                return None
            # backtracking line search on the log posterior
            scale = 1.0
            improved = None
            for _ in range(30):
                cand = beta + scale * step
                res = self._eval(cand, state, theta)
                if res is not None and res[0] >= lp - 1e-12:
                    improved = (cand, res)
                    break
                scale *= 0.5
            if improved is None:
                return None
            beta, (lp, theta, lam, _) = improved
            # the mode only centers a proposal, so a loose tolerance suffices
            if np.abs(scale * step).max() < 1e-6 or np.abs(grad).max() < 1e-5:
                fisher_lik = (self.data.X / (gp**2 * var)[:, None]).T @ self.data.X
                self._last_mode = beta.copy()
                return beta, theta, lam, fisher_lik
        return None

    def update(self, state, rng):
        """One MH step; returns (state, accepted, forced_reject)."""
        if self.data.n == 0:
            # no data: complete conditional is the prior itself
            beta = rng.multivariate_normal(self.prior.beta_mean,
                                           self.prior.beta_cov)
            return replace(state, beta=beta), True, False
        mode = self.find_mode(state)
        if mode is None:
            log.debug("beta mode search failed; forced rejection")
            return state, False, True
        beta_star, theta_star, lam_star, fisher = mode
        try:
            cov = np.linalg.inv(fisher)
            chol = np.linalg.cholesky(0.5 * (cov + cov.T))
        except np.linalg.LinAlgError:
            return state, False, True
        lo, hi = self.prior.support
        cand = None
        for _ in range(PROPOSAL_MAX_TRIES):
            trial = beta_star + chol @ rng.standard_normal(beta_star.size)
            lam = self.link.inverse(self.data.X @ trial)
            if np.all(lam > lo) and np.all(lam < hi):
                cand = trial
                break
        if cand is None:
            log.debug("beta proposal never landed in A; forced rejection")
            return state, False, True
        res_new = self._eval(cand, state, theta_star)
        if res_new is None:
            return state, False, False
        lp_new, theta_new, lam_new, b_new = res_new
        # current-state log posterior from the cached tilts and normalizers
        lp_old = float(state.theta @ state.z - state.log_norm.sum()
                       + _mvn_logpdf(state.beta, self.prior.beta_mean,
                                     self.cov_inv, self.logdet))
        # independence proposal centered at the mode: the A-truncation
        # constant is shared by both directions and cancels
        fisher_inv_quad = np.linalg.inv(cov)
        q_new = -0.5 * (cand - beta_star) @ fisher_inv_quad @ (cand - beta_star)
        q_old = -0.5 * (state.beta - beta_star) @ fisher_inv_quad @ (state.beta - beta_star)
        log_r = (lp_new - lp_old) + (q_old - q_new)
        if np.log(rng.random()) < log_r:
            return replace(state, beta=cand, theta=theta_new, lam=lam_new,
                           log_norm=b_new), True, False
        return state, False, False


# ---------------------------------------------------------------------------
# u step


def log_post_u(u, theta, z, alpha, base, grid_nodes=None, grid_masses=None):
    """Log conditional of the auxiliaries given tilts and latents.

    -integral over log(1 + sum_i u_i e^{theta_i v}) against
    alpha*G0 + sum_j delta_{z_j}, the G0 part by the shared fixed grid.
    """
    u = np.asarray(u, dtype=float)
    theta = np.asarray(theta, dtype=float)
    z = np.asarray(z, dtype=float)
    if grid_nodes is None:
        grid_nodes, grid_masses = base.grid()
    s_grid = np.exp(np.multiply.outer(theta, grid_nodes)).T @ u
    s_z = np.exp(np.multiply.outer(theta, z)).T @ u
    return float(-alpha * grid_masses @ np.log1p(s_grid)
                 - np.log1p(s_z).sum())


def _gamma_logpdf(x, shape, rate):
    from scipy.special import gammaln
    return (shape * np.log(rate) - gammaln(shape)
            + (shape - 1) * np.log(x) - rate * x)


def update_u(state, alpha, base, delta, rng, grid_nodes, grid_masses):
    """Componentwise gamma random-walk MH on the auxiliaries."""
    n = state.u.size
    if n == 0:
        return state, 0.0
    theta = state.theta
    z = state.z
    e_grid = np.exp(np.multiply.outer(theta, grid_nodes))   # (n, G)
    e_z = np.exp(np.multiply.outer(theta, z))               # (n, n)
    u = state.u.copy()
    s_grid = u @ e_grid
    s_z = u @ e_z
    props = rng.gamma(shape=delta, scale=u / delta)
    unif = rng.random(n)
    accepted = 0
    for j in range(n):
        prop = props[j]
        if not prop > 0:
            continue
        d_grid = (prop - u[j]) * e_grid[j]
        d_z = (prop - u[j]) * e_z[j]
        dlp = (-alpha * grid_masses @ (np.log1p(s_grid + d_grid)
                                       - np.log1p(s_grid))
               - (np.log1p(s_z + d_z) - np.log1p(s_z)).sum())
        # gamma proposal correction in closed scalar form (the gammaln
        # and delta*log(delta) terms cancel between the two directions)
        lu, lp_ = np.log(u[j]), np.log(prop)
        dq = (2.0 * delta - 1.0) * (lu - lp_) - delta * (u[j] / prop - prop / u[j])
        if np.log(unif[j]) < dlp + dq:
            u[j] = prop
            s_grid += d_grid
            s_z += d_z
            accepted += 1
    return replace(state, u=u), accepted / n


# ---------------------------------------------------------------------------
# mu step


def _star_decomposition(z):
    z_star, inverse, n_star = np.unique(z, return_inverse=True,
                                        return_counts=True)
    return z_star, inverse, n_star


def log_accept_mu_product(z, theta, theta_star, mu, mu_star):
    """Product-form log acceptance ratio (four log-normalizers)."""
    b_new_new = log_norm_many(mu_star, theta_star)
    b_old_old = log_norm_many(mu, theta)
    b_new_old = log_norm_many(mu, theta_star)
    b_old_new = log_norm_many(mu_star, theta)
    return float((2.0 * (theta_star - theta) @ z)
                 - b_new_new.sum() + b_old_old.sum()
                 - b_new_old.sum() + b_old_new.sum())


def _atom_log_weight(mu, values):
    lookup = {loc: w for loc, w in zip(mu.locations, mu.weights)}
    return np.log(np.asarray([lookup[v] for v in values]))


def log_accept_mu_direct(z, theta, theta_star, mu, mu_star):
    """Direct target-times-proposal computation of the same log ratio.

    Evaluates log pi and log q on both measures, including the atom-weight
    factors that cancel analytically; serves as an independent oracle for
    the product form.
    """
    def loglik(thetas, measure):
        b = log_norm_many(measure, thetas)
        return (thetas @ z - b.sum()
                + _atom_log_weight(measure, z).sum())

    log_pi_new = loglik(theta_star, mu_star)
    log_pi_old = loglik(theta, mu)
    log_q_old_given_new = loglik(theta_star, mu)      # tilts fixed at theta*
    log_q_new_given_old = loglik(theta, mu_star)      # tilts fixed at theta
    return float(log_pi_new - log_pi_old
                 + log_q_old_given_new - log_q_new_given_old)


def update_mu(state, data, prior, link, H, rng):
    """Proposal from the posterior CRM decomposition plus MH correction."""
    base = BaseMeasure(*prior.support)
    z = state.z
    z_star, inverse, n_star = _star_decomposition(z)
    mu_star = sample_posterior_crm(state.u, state.theta, z_star, n_star,
                                   prior.alpha, base, H, rng)
    if data.n:
        try:
            theta_star = solve_theta_many(mu_star, state.lam,
                                          theta0=state.theta)
        except MeanOutOfRange:
            log.debug("mu proposal makes a mean unattainable; rejected")
            return state, False
        log_r = log_accept_mu_product(z, state.theta, theta_star, state.mu,
                                      mu_star)
    else:
        theta_star = state.theta
        log_r = 0.0
    if np.log(rng.random()) < log_r:
        n_free = mu_star.n_atoms - z_star.size
        new_idx = n_free + inverse if z.size else state.z_idx
        return replace(state, mu=mu_star, theta=theta_star,
                       z_idx=new_idx,
                       log_norm=log_norm_many(mu_star, theta_star)), True
    return state, False


# ---------------------------------------------------------------------------
# z step


def update_z(state, data, kernel, rng):
    """Exact discrete complete conditional for every latent (Gibbs)."""
    if data.n == 0:
        return state, 0
    locs = state.mu.locations
    logj = np.log(state.mu.weights)
    logm = np.multiply.outer(state.theta, locs) + logj          # (n, L)
    inside = np.abs(data.y[:, None] - locs[None, :]) <= kernel.halfwidth
    logm = np.where(inside, logm, -np.inf)
    empty = ~inside.any(axis=1)
    n_fallback = int(empty.sum())
    if n_fallback:
        log.debug("%d latent(s) had no atom within the kernel window; "
                  "falling back to the nearest atom", n_fallback)
    rowmax = logm.max(axis=1)
    safe = np.where(np.isfinite(rowmax), rowmax, 0.0)
    w = np.exp(logm - safe[:, None])
    w[empty] = 0.0
    cum = np.cumsum(w, axis=1)
    draws = rng.random(data.n) * cum[:, -1]
    idx = np.minimum((cum < draws[:, None]).sum(axis=1), locs.size - 1)
    if n_fallback:
        nearest = np.abs(data.y[empty, None] - locs[None, :]).argmin(axis=1)
        idx[empty] = nearest
    return replace(state, z_idx=idx), n_fallback


# ---------------------------------------------------------------------------
# chain driver


def _resolve_m0(policy, y):
    if policy == "none":
        return None
    if policy == "sample_mean":
        return float(np.mean(y)) if y.size else None
    if policy == "sample_median":
        return float(np.median(y)) if y.size else None
    return float(policy[1])


def initialize_state(data, config, rng):
    prior = config.prior
    base = BaseMeasure(*prior.support)
    link = LogitLink(*prior.support)
    intensity = LevyIntensity.gamma_process(prior.alpha, base)
    beta = prior.beta_mean.astype(float).copy()
    lam = link.inverse(data.X @ beta) if data.n else np.empty(0)
    for _ in range(50):
        mu = sample_crm(intensity, config.H, rng)
        if data.n == 0:
            theta = np.empty(0)
            break
        try:
            theta = solve_theta_many(mu, lam)
            break
        except MeanOutOfRange:
            continue
    else:
        raise NumericalError(
            "could not initialize: prior-mean fits outside every drawn hull")
    if data.n:
        z_idx = np.abs(data.y[:, None] - mu.locations[None, :]).argmin(axis=1)
    else:
        z_idx = np.empty(0, dtype=int)
    b = log_norm_many(mu, theta)
    u = np.exp(-b) if data.n else np.empty(0)
    return ModelState(beta=beta, mu=mu, z_idx=z_idx, u=u, theta=theta,
                      lam=lam, log_norm=b)


def run_chain(data, config, rng=None):
    """Run the full four-kernel chain and return thinned posterior draws."""
    config.validate()
    if config.prior is None:
        config = replace(config, prior=Prior.default(data.p))
    prior = config.prior
    if data.n and np.linalg.matrix_rank(data.X) < data.p:
        raise ConfigError("design matrix is rank deficient")
    rng = np.random.default_rng(config.seed) if rng is None else rng
    base = BaseMeasure(*prior.support)
    link = LogitLink(*prior.support)
    grid_nodes, grid_masses = base.grid()
    kernel = (Kernel(silverman_halfwidth(data.y, config.kernel_halfwidth_factor))
              if data.n >= 2 else None)
    m0 = _resolve_m0(config.m0_policy, data.y)
    beta_updater = _BetaUpdater(data, prior, link)
    state = initialize_state(data, config, rng)
    if data.n:
        # Start beta at its conditional mode.  The independence proposal has
        # Gaussian tails while the conditional's are near-linear, so a chain
        # started deep in the tail would reject every beta move.
        mode = beta_updater.find_mode(state)
        if mode is not None:
            beta0, theta0, lam0, _ = mode
            b0 = log_norm_many(state.mu, theta0)
            state = replace(state, beta=beta0, theta=theta0, lam=lam0,
                            log_norm=b0, u=np.exp(-b0))

    delta = config.delta
    acc = {"u": 0.0, "mu": 0, "z": 0, "beta": 0, "beta_forced": 0}
    n_kept = {"u": 0, "mu": 0, "beta": 0}
    delta_batch = []
    kept_beta = []
    kept_measures = []
    n_skipped = 0
    for it in range(config.n_iter):
        state, u_rate = update_u(state, prior.alpha, base, delta, rng,
                                 grid_nodes, grid_masses)
        acc["u"] += u_rate
        n_kept["u"] += 1
        state, mu_acc = update_mu(state, data, prior, link, config.H, rng)
        acc["mu"] += mu_acc
        n_kept["mu"] += 1
        state, _ = update_z(state, data, kernel, rng) if data.n else (state, 0)
        state, b_acc, b_forced = beta_updater.update(state, rng)
        acc["beta"] += b_acc
        acc["beta_forced"] += b_forced
        n_kept["beta"] += 1
        if config.adapt_delta and it < config.burn_in and data.n:
            delta_batch.append(u_rate)
            if len(delta_batch) == DELTA_ADAPT_BATCH:
                rate = float(np.mean(delta_batch))
                delta = float(np.clip(
                    delta * np.exp(2.0 * (DELTA_TARGET_ACCEPT - rate)),
                    1.0, 1e4))
                delta_batch = []
        if it >= config.burn_in and (it - config.burn_in) % config.thin == 0:
            measure = state.mu.normalized()
            if m0 is not None:
                try:
                    measure = retilt_to_mean(measure, m0).normalized()
                except MeanOutOfRange:
                    n_skipped += 1
                    measure = None
            if measure is not None:
                kept_beta.append(state.beta.copy())
                kept_measures.append(measure)
    rates = {
        "u": acc["u"] / max(n_kept["u"], 1),
        "mu": acc["mu"] / max(n_kept["mu"], 1),
        "beta": acc["beta"] / max(n_kept["beta"], 1),
        "beta_forced": acc["beta_forced"] / max(n_kept["beta"], 1),
        "z": 1.0,
        "delta_final": delta,
    }
    return PosteriorDraws(beta=np.asarray(kept_beta), measures=kept_measures,
                          kernel=kernel, accept_rates=rates, m0=m0,
                          n_skipped_retilt=n_skipped, config=config)
