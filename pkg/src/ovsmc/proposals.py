"""Proposal kernels with reparameterised sampling.

Three kinds are supported:

``Bootstrap``
    the model transition itself; no learnable parameters.
``LocallyOptimalLG``
    the exact ``m(x'|x) g(y|x')``-proportional kernel of a linear Gaussian
    model; no learnable parameters.
``NeuralGaussian``
    ``N(mu(x, y), diag(sigma(x, y)^2))`` with two MLPs taking the
    concatenation ``(x, y)``; ``sigma`` is a softplus output plus
    :data:`STD_FLOOR`.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy import linalg

from .models import LOG_2PI, LinearGaussian, ModelError, ModelParams, StateSpaceModel
from .nn import MlpParams, MlpSpec, mlp_forward, mlp_init, mlp_vjp

STD_FLOOR = 1e-3


class ProposalKind(str, enum.Enum):
    BOOTSTRAP = "Bootstrap"
    LOCALLY_OPTIMAL_LG = "LocallyOptimalLG"
    NEURAL_GAUSSIAN = "NeuralGaussian"


@dataclass(frozen=True)
class ProposalParams:
    kind: ProposalKind
    mean_net: MlpParams | None = None
    std_net: MlpParams | None = None

    def __post_init__(self):
        if self.kind is ProposalKind.NEURAL_GAUSSIAN:
            if self.mean_net is None or self.std_net is None:
                raise ValueError("NeuralGaussian proposal needs both networks")
            ms, ss = self.mean_net.spec, self.std_net.spec
            if ms.n_in != ss.n_in or ms.n_out != ss.n_out:
                raise ValueError("mean and std networks disagree on input/output sizes")
            if ss.output_activation != "softplus":
                raise ValueError("std network must have a softplus output")

    @property
    def n_params(self) -> int:
        if self.kind is not ProposalKind.NEURAL_GAUSSIAN:
            return 0
        return self.mean_net.spec.n_params + self.std_net.spec.n_params

    @property
    def flat(self) -> np.ndarray:
        if self.kind is not ProposalKind.NEURAL_GAUSSIAN:
            return np.zeros(0)
        return np.concatenate([self.mean_net.flat, self.std_net.flat])

    def with_flat(self, flat) -> "ProposalParams":
        flat = np.asarray(flat, float)
        if flat.size != self.n_params:
            raise ValueError(f"expected {self.n_params} proposal parameters, got {flat.size}")
        if self.kind is not ProposalKind.NEURAL_GAUSSIAN:
            return self
        k = self.mean_net.spec.n_params
        return ProposalParams(self.kind, self.mean_net.with_flat(flat[:k]), self.std_net.with_flat(flat[k:]))


def bootstrap() -> ProposalParams:
    return ProposalParams(ProposalKind.BOOTSTRAP)


def locally_optimal() -> ProposalParams:
    return ProposalParams(ProposalKind.LOCALLY_OPTIMAL_LG)


def neural_gaussian(d_x: int, d_y: int, mean_hidden=(3,), std_hidden=(2,), seed=0) -> ProposalParams:
    """Neural Gaussian proposal with freshly initialised networks."""
    seeds = np.random.SeedSequence(seed).spawn(2)
    mean_spec = MlpSpec((d_x + d_y, *mean_hidden, d_x), "relu", "linear")
    std_spec = MlpSpec((d_x + d_y, *std_hidden, d_x), "relu", "softplus")
    return ProposalParams(
        ProposalKind.NEURAL_GAUSSIAN, mlp_init(mean_spec, seeds[0]), mlp_init(std_spec, seeds[1])
    )


@dataclass(frozen=True)
class Proposed:
    """Batched proposal draw. ``mu``/``sigma``/``inputs`` are set for neural kernels."""

    x_new: np.ndarray
    logq: np.ndarray
    grad_x_new_logq: np.ndarray
    eps: np.ndarray
    mu: np.ndarray | None = None
    sigma: np.ndarray | None = None
    inputs: np.ndarray | None = None


@dataclass(frozen=True)
class ProposalEval:
    x_new: np.ndarray
    logq: float
    grad_lambda_logq: np.ndarray
    grad_x_new_logq: np.ndarray
    lambda_pullback: Callable[[np.ndarray], np.ndarray]


def locally_optimal_params(model: LinearGaussian, theta: ModelParams, x, y):
    """Mean(s) and covariance of ``q*(x' | x, y) ∝ m(x'|x) g(y|x')``."""
    if not isinstance(model, LinearGaussian):
        raise ModelError("the locally optimal proposal is only available for linear Gaussian models")
    p = model.unpack(theta)
    x = np.asarray(x, float)
    single = x.ndim == 1
    X = model._states(x)
    y = model._obs(y)
    try:
        q_chol = linalg.cho_factor(p.Q, lower=True)
        r_chol = linalg.cho_factor(p.R, lower=True)
    except linalg.LinAlgError as exc:
        raise ModelError("locally optimal proposal needs nonsingular noise covariances") from exc
    Qinv = linalg.cho_solve(q_chol, np.eye(model.d_x))
    RinvB = linalg.cho_solve(r_chol, p.B)
    prec = Qinv + p.B.T @ RinvB
    prec_chol = linalg.cho_factor(prec, lower=True)
    Sigma = linalg.cho_solve(prec_chol, np.eye(model.d_x))
    Sigma = 0.5 * (Sigma + Sigma.T)
    rhs = X @ p.A.T @ Qinv + (y @ RinvB)[None, :]
    mu = linalg.cho_solve(prec_chol, rhs.T).T
    return (mu[0] if single else mu), Sigma


def _neural_moments(lam: ProposalParams, X, y):
    inputs = np.concatenate([X, np.broadcast_to(y, (X.shape[0], y.size))], axis=1)
    mu = mlp_forward(lam.mean_net, inputs)
    sigma = mlp_forward(lam.std_net, inputs) + STD_FLOOR
    return inputs, mu, sigma


def propose(lam: ProposalParams, model: StateSpaceModel, theta: ModelParams, x, y, eps) -> Proposed:
    """Map ancestors ``x`` (N, d_x) and noise ``eps`` (N, d_x) to new particles."""
    X = model._states(x)
    y = model._obs(y)
    eps = np.asarray(eps, float).reshape(X.shape[0], model.d_x)
    if lam.kind is ProposalKind.BOOTSTRAP:
        x_new = model.sample_transition(theta, X, eps)
        ev = model.transition(theta, X, x_new, want_params=False)
        return Proposed(x_new, ev.value, ev.grad_state, eps)
    if lam.kind is ProposalKind.LOCALLY_OPTIMAL_LG:
        mu, Sigma = locally_optimal_params(model, theta, X, y)
        L = np.linalg.cholesky(Sigma)
        x_new = mu + eps @ L.T
        whitened = eps
        logdet = 2.0 * np.sum(np.log(np.diag(L)))
        logq = -0.5 * (model.d_x * LOG_2PI + logdet + np.sum(whitened * whitened, axis=1))
        grad_x = -linalg.solve_triangular(L, whitened.T, lower=True, trans="T").T
        return Proposed(x_new, logq, grad_x, eps)
    inputs, mu, sigma = _neural_moments(lam, X, y)
    assert np.all(sigma >= STD_FLOOR), "proposal std fell below its floor"
    x_new = mu + sigma * eps
    logq = -0.5 * model.d_x * LOG_2PI - np.sum(np.log(sigma) + 0.5 * eps * eps, axis=1)
    return Proposed(x_new, logq, -eps / sigma, eps, mu, sigma, inputs)


def neural_lambda_vjp(lam: ProposalParams, prop: Proposed, cot_mean, cot_std) -> np.ndarray:
    """Sum over particles of cotangents pulled back through ``mu`` and ``sigma``."""
    g_mean, _ = mlp_vjp(lam.mean_net, prop.inputs, cot_mean)
    g_std, _ = mlp_vjp(lam.std_net, prop.inputs, cot_std)
    return np.concatenate([g_mean, g_std])


def reparam_eval(lam: ProposalParams, model: StateSpaceModel, theta: ModelParams, x, y, eps) -> ProposalEval:
    """Single-particle draw ``x' = r(x, y, eps)`` with log-density and gradients.

    ``grad_lambda_logq`` differentiates ``log q(x' | x, y)`` at fixed ``x'``;
    ``lambda_pullback(c)`` returns ``(d r / d lambda)^T c``.
    """
    prop = propose(lam, model, theta, np.asarray(x, float).reshape(1, -1), y, np.asarray(eps, float).reshape(1, -1))
    if lam.kind is ProposalKind.NEURAL_GAUSSIAN:
        e, s = prop.eps, prop.sigma
        grad_lambda = neural_lambda_vjp(lam, prop, e / s, (e * e - 1.0) / s)

        def pullback(c):
            c = np.asarray(c, float).reshape(1, -1)
            return neural_lambda_vjp(lam, prop, c, c * e)

    else:
        grad_lambda = np.zeros(0)

        def pullback(c):
            return np.zeros(0)

    return ProposalEval(prop.x_new[0], float(prop.logq[0]), grad_lambda, prop.grad_x_new_logq[0], pullback)
