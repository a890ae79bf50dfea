"""Exact filtering for linear Gaussian models."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import linalg

from .models import LOG_2PI, LinearGaussian, ModelError, ModelParams, initial_law


@dataclass(frozen=True)
class KalmanResult:
    filter_means: np.ndarray  # (T+1, d_x)
    filter_covs: np.ndarray  # (T+1, d_x, d_x)
    step_loglik: np.ndarray  # (T+1,) log p(y_t | y_{0:t-1})
    total_loglik: float


def _gaussian_logpdf(resid, cov):
    try:
        chol = linalg.cho_factor(cov, lower=True, check_finite=False)
    except linalg.LinAlgError as exc:
        raise ModelError("innovation covariance is singular or indefinite") from exc
    logdet = 2.0 * np.sum(np.log(np.diag(chol[0])))
    maha = resid @ linalg.cho_solve(chol, resid, check_finite=False)
    return -0.5 * (resid.size * LOG_2PI + logdet + maha), chol


def predictive_loglik(model: LinearGaussian, theta: ModelParams, prior_mean, prior_cov, y) -> float:
    """log N(y; B m, B P B^T + S_v^T S_v) for a prior N(m, P) on the current state."""
    p = model.unpack(theta)
    y = np.asarray(y, float).ravel()
    S = p.B @ np.asarray(prior_cov, float) @ p.B.T + p.R
    value, _ = _gaussian_logpdf(y - p.B @ np.asarray(prior_mean, float), S)
    return float(value)


def kalman_filter(model: LinearGaussian, theta: ModelParams, y, init_mean=None, init_cov=None) -> KalmanResult:
    """Predict/update recursion with a Joseph-form covariance update.

    The prior for ``x_0`` defaults to the model's initial law.
    """
    p = model.unpack(theta)
    y = np.asarray(y, float)
    if y.ndim == 1:
        y = y[:, None]
    if y.shape[1] != model.d_y:
        raise ModelError(f"observations have {y.shape[1]} columns, model expects {model.d_y}")
    if init_mean is None:
        init_mean, init_cov = initial_law(model, theta)
    n = y.shape[0]
    means = np.empty((n, model.d_x))
    covs = np.empty((n, model.d_x, model.d_x))
    step = np.empty(n)
    I = np.eye(model.d_x)
    m, P = np.asarray(init_mean, float), np.asarray(init_cov, float)
    for t in range(n):
        if t > 0:
            m = p.A @ m
            P = p.A @ P @ p.A.T + p.Q
        S = p.B @ P @ p.B.T + p.R
        resid = y[t] - p.B @ m
        step[t], chol = _gaussian_logpdf(resid, S)
        K = linalg.cho_solve(chol, p.B @ P, check_finite=False).T
        m = m + K @ resid
        IKB = I - K @ p.B
        P = IKB @ P @ IKB.T + K @ p.R @ K.T
        P = 0.5 * (P + P.T)
        means[t], covs[t] = m, P
    return KalmanResult(means, covs, step, float(step.sum()))
