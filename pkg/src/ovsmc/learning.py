"""Online and batch variational SMC learning loops.

Both optimisers use the ascent convention: ``params + step``.
"""

from __future__ import annotations

import enum
import logging
import math
import warnings
from dataclasses import dataclass, field
from typing import Callable, NamedTuple, Sequence

import numpy as np

from .gradients import increment, initial_increment, surrogate_sweep
from .models import ModelParams, StateSpaceModel, initial_law, simulate
from .proposals import ProposalParams
from .smc import (
    ParticleCloud,
    _obs_matrix,
    ess,
    get_resampler,
    pf_init,
    resample_multinomial,
    sample_initial,
)

log = logging.getLogger(__name__)


# step sizes ---------------------------------------------------------------


class ScheduleKind(str, enum.Enum):
    CONSTANT = "constant"
    INVERSE_SQRT = "inverse_sqrt"


@dataclass(frozen=True)
class StepSchedule:
    kind: ScheduleKind
    c: float

    def __post_init__(self):
        object.__setattr__(self, "kind", ScheduleKind(self.kind))
        if not self.c > 0:
            raise ValueError(f"schedule constant must be positive, got {self.c}")

    def __call__(self, t):
        t = np.asarray(t, dtype=float)
        if self.kind is ScheduleKind.CONSTANT:
            return np.full_like(t, self.c)
        return self.c / np.sqrt(t)


def schedule_validate(schedule: Callable, a: float, a_prime: float, c: float, horizon: int) -> bool:
    """Check the step-size conditions for ``t = 1..horizon``.

    ``gamma_{t+1} <= gamma_t``, ``gamma_t <= a gamma_{t+1}``,
    ``gamma_t - gamma_{t+1} <= a' gamma_{t+1}^2`` and ``gamma_1 <= c``.
    """
    if horizon < 1:
        raise ValueError("horizon must be at least 1")
    t = np.arange(1, horizon + 2, dtype=float)
    g = np.asarray(schedule(t), dtype=float)
    now, nxt = g[:-1], g[1:]
    return bool(
        np.all(nxt <= now)
        and np.all(now <= a * nxt)
        and np.all(now - nxt <= a_prime * nxt * nxt)
        and g[0] <= c
    )


# optimisers ---------------------------------------------------------------


def sgd_step(params, grad, gamma):
    return np.asarray(params, float) + gamma * np.asarray(grad, float)


@dataclass(frozen=True)
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros(cls, size, **hyper):
        return cls(np.zeros(size), np.zeros(size), 0, **hyper)


def adam_step(state: AdamState, params, grad):
    """Bias-corrected Adam ascent step; returns ``(new_state, new_params)``."""
    g = np.asarray(grad, float)
    t = state.t + 1
    m = state.beta1 * state.m + (1.0 - state.beta1) * g
    v = state.beta2 * state.v + (1.0 - state.beta2) * g * g
    m_hat = m / (1.0 - state.beta1**t)
    v_hat = v / (1.0 - state.beta2**t)
    new = np.asarray(params, float) + state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return AdamState(m, v, t, state.lr, state.beta1, state.beta2, state.eps), new


@dataclass(frozen=True)
class OptimizerSpec:
    kind: str = "adam"
    lr: float = 1e-2
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    schedule: str = "constant"

    def __post_init__(self):
        if self.kind not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer {self.kind!r}")
        if self.lr < 0:
            raise ValueError("learning rate must be nonnegative")
        if self.kind == "sgd":
            ScheduleKind(self.schedule)

    def build(self, size: int) -> "Optimizer":
        return Optimizer(self, size)


class Optimizer:
    """Stateful wrapper around :func:`adam_step` / :func:`sgd_step`."""

    def __init__(self, spec: OptimizerSpec, size: int):
        self.spec = spec
        self.size = size
        self.skipped = 0
        self.t = 0
        if spec.kind == "adam":
            self.state = AdamState.zeros(size, lr=spec.lr, beta1=spec.beta1, beta2=spec.beta2, eps=spec.eps)
        elif spec.lr > 0:
            self.schedule = StepSchedule(spec.schedule, spec.lr)

    def step(self, params, grad):
        if self.size == 0:
            return params
        if not np.all(np.isfinite(grad)):
            self.skipped += 1
            log.warning("non-finite gradient, step skipped (%d so far)", self.skipped)
            return params
        self.t += 1
        if self.spec.kind == "adam":
            self.state, params = adam_step(self.state, params, grad)
            return params
        if self.spec.lr == 0:
            return np.asarray(params, float)
        return sgd_step(params, grad, float(self.schedule(self.t)))


# traces -------------------------------------------------------------------


class TraceRecord(NamedTuple):
    t: int
    theta: np.ndarray
    incremental_elbo: float
    ess: float
    lambda_norm: float


@dataclass
class LearningTrace:
    param_names: list[str]
    records: list[TraceRecord] = field(default_factory=list)
    theta: ModelParams | None = None
    lam: ProposalParams | None = None

    def append(self, rec: TraceRecord):
        if self.records and rec.t <= self.records[-1].t:
            raise ValueError("trace times must increase")
        self.records.append(rec)

    def __len__(self):
        return len(self.records)

    @property
    def t(self):
        return np.array([r.t for r in self.records], dtype=int)

    @property
    def thetas(self):
        return np.array([r.theta for r in self.records]).reshape(len(self.records), -1)

    @property
    def incremental_elbo(self):
        return np.array([r.incremental_elbo for r in self.records])

    @property
    def ess(self):
        return np.array([r.ess for r in self.records])

    @property
    def lambda_norm(self):
        return np.array([r.lambda_norm for r in self.records])


def free_mask(model: StateSpaceModel, free: Sequence[str] | None) -> np.ndarray:
    names = model.param_names()
    if free is None:
        return np.ones(len(names), dtype=bool)
    unknown = set(free) - set(names)
    if unknown:
        raise ValueError(f"unknown parameter names {sorted(unknown)}; model has {names}")
    return np.array([n in free for n in names])


def _update_theta(model, theta, grad, opt, mask):
    values = theta.values.copy()
    values[mask] = opt.step(values[mask], grad[mask])
    return model.project(theta.replace_values(values))


def freeze_initial_law(model, theta):
    """Copy of ``model`` whose initial law is fixed at its value under ``theta``."""
    return model.with_fixed_init(*initial_law(model, theta))


# online VSMC --------------------------------------------------------------


@dataclass(frozen=True)
class OVSMCConfig:
    L: int = 5
    N: int = 1000
    theta_opt: OptimizerSpec | None = None
    lambda_opt: OptimizerSpec | None = None
    free: tuple[str, ...] | None = None
    resampler: str = "multinomial"

    def __post_init__(self):
        if self.L < 1 or self.N < 1:
            raise ValueError("L and N must be positive")
        get_resampler(self.resampler)


def ovsmc_step(
    model,
    cloud: ParticleCloud,
    y_next,
    theta: ModelParams,
    lam: ProposalParams,
    opt_theta: Optimizer | None,
    opt_lambda: Optimizer | None,
    L: int,
    N: int,
    rng: np.random.Generator,
    lambda_rng: np.random.Generator,
    mask=None,
    resampler="multinomial",
):
    """One step of online VSMC.

    Proposal parameters are updated first from ``L`` throw-away particles
    (drawn from ``lambda_rng``); the particle cloud is then propagated with the
    new proposal and the model parameters are updated from its ``N`` weights.
    Returns ``(cloud, theta, lam, record)``.
    """
    resample = get_resampler(resampler)
    weights = cloud.normalized_weights()
    t = cloud.t + 1
    if opt_lambda is not None and lam.n_params:
        idx = resample(weights, L, lambda_rng)
        eps = lambda_rng.standard_normal((L, model.d_x))
        inc = increment(model, theta, lam, cloud.positions[idx], y_next, eps, False, True, t)
        lam = lam.with_flat(opt_lambda.step(lam.flat, inc.grad_lambda))
    idx = resample(weights, N, rng)
    eps = rng.standard_normal((N, model.d_x))
    inc = increment(model, theta, lam, cloud.positions[idx], y_next, eps, opt_theta is not None, False, t)
    if opt_theta is not None:
        mask = np.ones(model.n_params, bool) if mask is None else mask
        theta = _update_theta(model, theta, inc.grad_theta, opt_theta, mask)
    new_cloud = ParticleCloud(inc.x_new, inc.log_w, inc.log_sum, t)
    rec = TraceRecord(t, theta.values, inc.log_mean_w, ess(inc.weights), float(np.linalg.norm(lam.flat)))
    return new_cloud, theta, lam, rec


def ovsmc_run(
    model: StateSpaceModel,
    theta0: ModelParams,
    lam0: ProposalParams,
    y,
    config: OVSMCConfig,
    seed,
    on_record: Callable[[TraceRecord], None] | None = None,
) -> LearningTrace:
    """Run online VSMC over the stream ``y[0..T]`` (``T`` learning steps).

    The initial law is frozen at ``theta0``. ``seed`` feeds :func:`rng_streams`;
    the cloud stream is consumed exactly as by :func:`run_filter`.
    """
    from .smc import rng_streams

    y = _obs_matrix(model, y)
    model = freeze_initial_law(model, theta0)
    rng, lambda_rng = rng_streams(seed)
    mask = free_mask(model, config.free)
    opt_theta = config.theta_opt.build(int(mask.sum())) if config.theta_opt else None
    opt_lambda = config.lambda_opt.build(lam0.n_params) if config.lambda_opt else None
    theta, lam = theta0, lam0
    trace = LearningTrace(model.param_names())
    cloud = pf_init(model, theta, lam, y[0], config.N, rng)
    for t in range(1, y.shape[0]):
        cloud, theta, lam, rec = ovsmc_step(
            model, cloud, y[t], theta, lam, opt_theta, opt_lambda, config.L, config.N, rng, lambda_rng, mask, config.resampler
        )
        trace.append(rec)
        if on_record is not None:
            on_record(rec)
    trace.theta, trace.lam = theta, lam
    return trace


# modified OVSMC (single merged parameter, doubled noise) -------------------


class ModifiedStep(NamedTuple):
    resampled: np.ndarray
    theta: ModelParams
    lam: ProposalParams
    grad: np.ndarray
    log_mean_w: float
    ess: float
    eps_propagate: np.ndarray
    eps_gradient: np.ndarray


def merged_grad(inc, mask):
    return np.concatenate([inc.grad_theta[mask], inc.grad_lambda])


def modified_init(model, theta, y0, n, rng) -> np.ndarray:
    """Resampled initial cloud for the modified recursion."""
    x0 = sample_initial(model, theta, n, rng)
    inc = initial_increment(model, theta, x0, y0, want_theta=False)
    return x0[resample_multinomial(inc.weights, n, rng)]


def ovsmc_step_modified(
    model,
    resampled,
    y_t,
    y_next,
    theta: ModelParams,
    lam: ProposalParams,
    opt: Optimizer | None,
    n: int,
    rng,
    mask=None,
) -> ModifiedStep:
    """Propagate/weight/resample at ``y_t``, then update the merged parameter.

    The gradient uses fresh noise applied to the resampled particles at
    ``y_next``; that noise is not used for propagation.
    """
    mask = np.ones(model.n_params, bool) if mask is None else mask
    resampled = np.asarray(resampled, float).reshape(n, model.d_x)
    eps_prop = rng.standard_normal((n, model.d_x))
    inc = increment(model, theta, lam, resampled, y_t, eps_prop, False, False)
    new_resampled = inc.x_new[resample_multinomial(inc.weights, n, rng)]
    eps_grad = rng.standard_normal((n, model.d_x))
    g_inc = increment(model, theta, lam, new_resampled, y_next, eps_grad, True, True)
    grad = merged_grad(g_inc, mask)
    if opt is not None:
        k = int(mask.sum())
        stepped = opt.step(np.concatenate([theta.values[mask], lam.flat]), grad)
        values = theta.values.copy()
        values[mask] = stepped[:k]
        theta = model.project(theta.replace_values(values))
        lam = lam.with_flat(stepped[k:])
    return ModifiedStep(new_resampled, theta, lam, grad, inc.log_mean_w, ess(inc.weights), eps_prop, eps_grad)


class MeanFieldEstimate(NamedTuple):
    mean: np.ndarray
    se: np.ndarray


def batch_means_se(samples: np.ndarray) -> np.ndarray:
    """Per-coordinate standard error from ``floor(sqrt(n))`` batch means."""
    samples = np.asarray(samples, float).reshape(len(samples), -1)
    n = samples.shape[0]
    n_batches = int(math.isqrt(n))
    if n_batches < 2:
        return np.full(samples.shape[1], np.nan)
    size = n // n_batches
    means = samples[: n_batches * size].reshape(n_batches, size, -1).mean(axis=1)
    return means.std(axis=0, ddof=1) / np.sqrt(n_batches)


def estimate_mean_field(
    model: StateSpaceModel,
    theta_data: ModelParams,
    theta: ModelParams,
    lam: ProposalParams,
    n: int,
    burn_in: int,
    samples: int,
    rng: np.random.Generator,
    free: Sequence[str] | None = None,
) -> MeanFieldEstimate:
    """Time-averaged noisy gradient of the fixed-parameter modified chain.

    Data are simulated on the fly from ``model`` at ``theta_data``. The
    returned vector stacks the free model coordinates and the proposal
    parameters.
    """
    if burn_in < 0 or samples < 1:
        raise ValueError("need burn_in >= 0 and samples >= 1")
    mask = free_mask(model, free)
    data = simulate(model, theta_data, burn_in + samples + 1, int(rng.integers(2**63))).observations
    work = freeze_initial_law(model, theta)
    x = modified_init(work, theta, data[0], n, rng)
    H = []
    for t in range(1, burn_in + samples + 1):
        step = ovsmc_step_modified(work, x, data[t], data[t + 1], theta, lam, None, n, rng, mask)
        x = step.resampled
        if t > burn_in:
            H.append(step.grad)
    H = np.array(H).reshape(samples, -1)
    se = batch_means_se(H)
    if np.any(np.isnan(se)):
        warnings.warn("too few samples for a standard error; SE is undefined", RuntimeWarning, stacklevel=2)
    return MeanFieldEstimate(H.mean(axis=0), se)


# batch VSMC ---------------------------------------------------------------


def vsmc_fit(
    model: StateSpaceModel,
    y,
    theta0: ModelParams,
    lam0: ProposalParams,
    sweeps: int,
    n: int,
    seed,
    theta_opt: OptimizerSpec | None = None,
    lambda_opt: OptimizerSpec | None = None,
    free: Sequence[str] | None = None,
    resampler: str = "multinomial",
    on_record: Callable[[TraceRecord], None] | None = None,
) -> LearningTrace:
    """Alternate full particle-filter sweeps and optimiser steps.

    Each trace record holds the sweep's ELBO estimate ``log Z_hat`` and the
    mean normalised ESS over the sweep, evaluated *before* the update.
    """
    from .smc import rng_streams

    if sweeps < 1:
        raise ValueError("need at least one sweep")
    y = _obs_matrix(model, y)
    model = freeze_initial_law(model, theta0)
    rng, _ = rng_streams(seed)
    mask = free_mask(model, free)
    opt_theta = theta_opt.build(int(mask.sum())) if theta_opt else None
    opt_lambda = lambda_opt.build(lam0.n_params) if lambda_opt else None
    theta, lam = theta0, lam0
    trace = LearningTrace(model.param_names())
    for m in range(1, sweeps + 1):
        elbo, mean_ess, g_theta, g_lambda = surrogate_sweep(
            model, theta, lam, y, n, rng, resampler, opt_theta is not None, opt_lambda is not None
        )
        if opt_theta is not None:
            theta = _update_theta(model, theta, g_theta, opt_theta, mask)
        if opt_lambda is not None:
            lam = lam.with_flat(opt_lambda.step(lam.flat, g_lambda))
        rec = TraceRecord(m, theta.values, elbo, mean_ess, float(np.linalg.norm(lam.flat)))
        trace.append(rec)
        if on_record is not None:
            on_record(rec)
    trace.theta, trace.lam = theta, lam
    return trace


def repeated_stream(y, M: int) -> np.ndarray:
    """The record ``y[0..T]`` repeated ``M`` times back to back."""
    if M < 1:
        raise ValueError("M must be at least 1")
    y = np.asarray(y, float)
    return np.tile(y, (M,) + (1,) * (y.ndim - 1))
