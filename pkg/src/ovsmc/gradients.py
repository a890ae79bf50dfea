"""Reparameterised importance-weight gradients.

For a particle ``x' = r_lambda(x~, y, eps)`` the log-weight is

    log w = log m_theta(x' | x~) + log g_theta(y | x') - log q_lambda(x' | x~, y)

Gradients w.r.t. ``theta`` hold ``x'`` fixed (the proposal is a function of
``lambda`` only). Resampling indices and inherited positions are constants,
so the gradient of ``log sum_i w_i`` only involves the current increment.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .models import ModelParams, StateSpaceModel
from .proposals import ProposalKind, ProposalParams, neural_lambda_vjp, propose, reparam_eval
from .smc import (
    get_resampler,
    initial_log_weights,
    normalize,
    sample_initial,
    _obs_matrix,
    ess,
)


@dataclass(frozen=True)
class WeightGrad:
    log_w: float
    grad_theta: np.ndarray
    grad_lambda: np.ndarray


@dataclass(frozen=True)
class Increment:
    """One weighting step: particles, weights and gradients of ``log sum w``."""

    x_new: np.ndarray
    log_w: np.ndarray
    weights: np.ndarray
    log_sum: float
    log_mean_w: float
    grad_theta: np.ndarray | None
    grad_lambda: np.ndarray | None


def log_weight_grads(model: StateSpaceModel, theta: ModelParams, lam: ProposalParams, x_anc, y, eps) -> WeightGrad:
    """Log-weight of a single particle and its exact gradients."""
    pe = reparam_eval(lam, model, theta, x_anc, y, eps)
    lm = model.transition(theta, x_anc, pe.x_new)
    lg = model.emission(theta, pe.x_new, y)
    log_w = float(lm.value[0] + lg.value[0] - pe.logq)
    grad_theta = lm.grad_params[0] + lg.grad_params[0]
    cot = lm.grad_state[0] + lg.grad_state[0] - pe.grad_x_new_logq
    grad_lambda = pe.lambda_pullback(cot) - pe.grad_lambda_logq
    return WeightGrad(log_w, grad_theta, grad_lambda)


def grad_log_sum(weight_grads: Sequence[WeightGrad]):
    """``log sum_i w_i`` and its gradient ``sum_i softmax_i grad log w_i``."""
    if len(weight_grads) == 0:
        raise ValueError("need at least one weight")
    lw = np.array([g.log_w for g in weight_grads])
    sm, log_mean = normalize(lw)
    log_sum = log_mean + np.log(lw.size)
    gt = sm @ np.array([g.grad_theta for g in weight_grads])
    gl = sm @ np.array([g.grad_lambda for g in weight_grads]).reshape(lw.size, -1)
    return float(log_sum), gt, gl


def increment(
    model: StateSpaceModel,
    theta: ModelParams,
    lam: ProposalParams,
    ancestors,
    y,
    eps,
    want_theta: bool = True,
    want_lambda: bool = True,
    t=None,
) -> Increment:
    """Vectorised weighting step with gradients of ``log sum_i w_i``."""
    prop = propose(lam, model, theta, ancestors, y, eps)
    lm = model.transition(theta, ancestors, prop.x_new, want_params=want_theta)
    lg = model.emission(theta, prop.x_new, y, want_params=want_theta)
    log_w = lm.value + lg.value - prop.logq
    weights, log_mean_w = normalize(log_w, t)
    grad_theta = grad_lambda = None
    if want_theta:
        grad_theta = weights @ (lm.grad_params + lg.grad_params)
    if want_lambda:
        if lam.kind is ProposalKind.NEURAL_GAUSSIAN:
            # log q(r(eps)) = -sum log sigma + const, so the proposal terms
            # reduce to +1/sigma on the std output and cancel on the mean output
            g = (lm.grad_state + lg.grad_state) * weights[:, None]
            grad_lambda = neural_lambda_vjp(lam, prop, g, g * prop.eps + weights[:, None] / prop.sigma)
        else:
            grad_lambda = np.zeros(0)
    return Increment(
        prop.x_new,
        log_w,
        weights,
        log_mean_w + float(np.log(log_w.size)),
        log_mean_w,
        grad_theta,
        grad_lambda,
    )


def initial_increment(model, theta, x0, y0, want_theta=True) -> Increment:
    """Initial weights ``g(y0 | x0)``; the initial law contributes no gradient."""
    log_w = initial_log_weights(model, theta, x0, y0)
    weights, log_mean_w = normalize(log_w, 0)
    grad_theta = model.emission(theta, x0, y0, weights=weights).grad_params if want_theta else None
    return Increment(x0, log_w, weights, log_mean_w + float(np.log(log_w.size)), log_mean_w, grad_theta, None)


def surrogate_sweep(
    model,
    theta,
    lam,
    y,
    n,
    rng,
    resampler="multinomial",
    want_theta=True,
    want_lambda=True,
):
    """One sweep returning ``(log Z_hat, mean ESS, grad_theta, grad_lambda)``."""
    y = _obs_matrix(model, y)
    resample = get_resampler(resampler)
    x0 = sample_initial(model, theta, n, rng)
    inc = initial_increment(model, theta, x0, y[0], want_theta)
    elbo, ess_sum = inc.log_mean_w, ess(inc.weights)
    g_theta = inc.grad_theta.copy() if want_theta else np.zeros(model.n_params)
    g_lambda = np.zeros(lam.n_params)
    for t in range(1, y.shape[0]):
        idx = resample(inc.weights, n, rng)
        eps = rng.standard_normal((n, model.d_x))
        inc = increment(model, theta, lam, inc.x_new[idx], y[t], eps, want_theta, want_lambda, t)
        elbo += inc.log_mean_w
        ess_sum += ess(inc.weights)
        if want_theta:
            g_theta += inc.grad_theta
        if want_lambda:
            g_lambda += inc.grad_lambda
    return float(elbo), ess_sum / y.shape[0], g_theta, g_lambda


def vsmc_surrogate_grad(model, theta, lam, y, n, rng, resampler="multinomial"):
    """One particle-filter sweep returning ``(log Z_hat, grad_theta, grad_lambda)``.

    The gradient is the sum over time of the per-increment gradients of
    ``log Omega_t``; the score term of the resampling law is not estimated.
    """
    elbo, _, g_theta, g_lambda = surrogate_sweep(model, theta, lam, y, n, rng, resampler)
    return elbo, g_theta, g_lambda


def finite_diff(f: Callable[[np.ndarray], float], point, h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of a scalar function."""
    if h <= 0:
        raise ValueError("step must be positive")
    x = np.array(point, dtype=float)
    grad = np.empty(x.size)
    for i in range(x.size):
        xp, xm = x.copy(), x.copy()
        xp.flat[i] += h
        xm.flat[i] -= h
        grad[i] = (f(xp) - f(xm)) / (2.0 * h)
    return grad
