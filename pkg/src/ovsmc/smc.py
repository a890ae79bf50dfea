"""Particle filter, resampling, and likelihood / ELBO estimators.

All weight arithmetic is done in log-space. Only the current particle positions
are stored; ancestral paths are never kept.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

from .models import ModelParams, StateSpaceModel, initial_law
from .proposals import ProposalParams, propose


class ParticleCollapse(RuntimeError):
    """All particle weights are zero (or not finite)."""

    def __init__(self, message, t=None):
        super().__init__(message if t is None else f"{message} at t={t}")
        self.t = t


@dataclass(frozen=True)
class ParticleCloud:
    positions: np.ndarray  # (N, d_x)
    log_weights: np.ndarray  # (N,)
    log_sum_w: float
    t: int

    @classmethod
    def from_log_weights(cls, positions, log_weights, t):
        return cls(positions, log_weights, float(logsumexp(log_weights)), t)

    @property
    def n(self) -> int:
        return self.log_weights.size

    def normalized_weights(self) -> np.ndarray:
        return normalize(self.log_weights, t=self.t)[0]


@dataclass(frozen=True)
class FilterResult:
    loglik_estimate: float
    ess_trace: np.ndarray
    log_mean_w: np.ndarray


def rng_streams(seed) -> tuple[np.random.Generator, np.random.Generator]:
    """Independent generators for the particle cloud and for auxiliary draws."""
    a, b = np.random.SeedSequence(seed).spawn(2)
    return np.random.default_rng(a), np.random.default_rng(b)


def normalize(log_weights, t=None):
    """Self-normalised weights and ``log((1/N) sum w)``."""
    lw = np.asarray(log_weights, dtype=float)
    m = np.max(lw)
    if not np.isfinite(m) or np.any(np.isnan(lw)):
        raise ParticleCollapse("particle collapse: no finite positive weight", t)
    w = np.exp(lw - m)
    total = w.sum()
    return w / total, float(m + np.log(total) - np.log(lw.size))


def ess(weights) -> float:
    """Normalised effective sample size ``1 / (N sum w_i^2)`` of simplex weights."""
    w = np.asarray(weights, dtype=float)
    return float(1.0 / (w.size * np.dot(w, w)))


def _inverse_cdf(weights, u):
    cdf = np.cumsum(weights)
    idx = np.searchsorted(cdf, u * cdf[-1], side="right")
    return np.minimum(idx, weights.size - 1)


def resample_multinomial(weights, count, rng) -> np.ndarray:
    return _inverse_cdf(np.asarray(weights, float), rng.random(count))


def resample_systematic(weights, count, rng) -> np.ndarray:
    u = rng.random()
    return _inverse_cdf(np.asarray(weights, float), (u + np.arange(count)) / count)


RESAMPLERS = {"multinomial": resample_multinomial, "systematic": resample_systematic}


def get_resampler(name):
    try:
        return RESAMPLERS[name]
    except KeyError:
        raise ValueError(f"unknown resampler {name!r}; choose from {sorted(RESAMPLERS)}") from None


def sample_initial(model, theta, n, rng):
    """Draw ``n`` particles from the initial law."""
    mean, cov = initial_law(model, theta)
    eps = rng.standard_normal((n, model.d_x))
    return mean + eps @ np.linalg.cholesky(cov).T


def initial_log_weights(model, theta, x0, y0):
    # q_0 is the initial law itself, so m_0 / q_0 cancels
    return model.emission(theta, x0, y0, want_params=False).value


def mutate(model: StateSpaceModel, theta: ModelParams, lam: ProposalParams, ancestors, y, eps):
    """Propagate ancestors through the proposal and compute the log-weights.

    Returns ``(proposed, transition_eval, emission_eval, log_w)``; density
    evaluations carry state gradients but no parameter gradients.
    """
    prop = propose(lam, model, theta, ancestors, y, eps)
    lm = model.transition(theta, ancestors, prop.x_new, want_params=False)
    lg = model.emission(theta, prop.x_new, y, want_params=False)
    return prop, lm, lg, lm.value + lg.value - prop.logq


def pf_init(model, theta, lam, y0, n, rng) -> ParticleCloud:
    x0 = sample_initial(model, theta, n, rng)
    return ParticleCloud.from_log_weights(x0, initial_log_weights(model, theta, x0, y0), 0)


def pf_step(cloud: ParticleCloud, model, theta, lam, y_next, rng, resampler="multinomial") -> ParticleCloud:
    """One selection + mutation step with unconditional resampling."""
    weights = cloud.normalized_weights()
    n = cloud.n
    idx = get_resampler(resampler)(weights, n, rng)
    eps = rng.standard_normal((n, model.d_x))
    prop, _, _, log_w = mutate(model, theta, lam, cloud.positions[idx], y_next, eps)
    return ParticleCloud.from_log_weights(prop.x_new, log_w, cloud.t + 1)


def run_filter(model, theta, lam, y, n, rng, resampler="multinomial") -> FilterResult:
    """Particle filter over ``y[0..T]``; ``loglik_estimate`` is ``log Z_hat``."""
    y = _obs_matrix(model, y)
    cloud = pf_init(model, theta, lam, y[0], n, rng)
    log_mean_w = np.empty(y.shape[0])
    ess_trace = np.empty(y.shape[0])
    for t in range(y.shape[0]):
        if t > 0:
            cloud = pf_step(cloud, model, theta, lam, y[t], rng, resampler)
        w, log_mean_w[t] = normalize(cloud.log_weights, t)
        ess_trace[t] = ess(w)
    return FilterResult(float(log_mean_w.sum()), ess_trace, log_mean_w)


def elbo_iwae(model, theta, lam, y, n, rng) -> float:
    """Sequential importance sampling estimate (no resampling) of ``log Z``."""
    y = _obs_matrix(model, y)
    x = sample_initial(model, theta, n, rng)
    log_w = initial_log_weights(model, theta, x, y[0])
    for t in range(1, y.shape[0]):
        eps = rng.standard_normal((n, model.d_x))
        prop, _, _, inc = mutate(model, theta, lam, x, y[t], eps)
        x = prop.x_new
        log_w = log_w + inc
    return normalize(log_w)[1]


def _obs_matrix(model, y):
    y = np.asarray(y, dtype=float)
    if y.ndim == 1:
        y = y.reshape(-1, model.d_y)
    if y.ndim != 2 or y.shape[1] != model.d_y:
        raise ValueError(f"observations have shape {y.shape}, expected (T+1, {model.d_y})")
    return y
