"""State-space models with analytic log-density gradients.

Two concrete models are provided:

* :class:`LinearGaussian` -- ``X' ~ N(A x, S_u^T S_u)``, ``Y ~ N(B x, S_v^T S_v)``
* :class:`StochasticVolatility` -- ``X' ~ N(alpha x, sigma^2)``,
  ``Y ~ N(0, beta^2 exp(x))``

A model object carries the *structure* (dimensions, initial law, layout of the
parameter vector); the parameter values live in a :class:`ModelParams`. All
density methods are vectorised over a leading particle axis.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field, replace

import numpy as np
from scipy import linalg

LOG_2PI = float(np.log(2.0 * np.pi))

#: Lower bound used when projecting constrained parameters.
PROJECTION_DELTA = 1e-4


class ModelError(ValueError):
    """Raised for invalid model parameters or mismatched dimensions."""


class ModelKind(str, enum.Enum):
    LINEAR_GAUSSIAN = "LinearGaussian"
    STOCHASTIC_VOLATILITY = "StochasticVolatility"


@dataclass(frozen=True)
class ModelParams:
    """Flat parameter vector together with the model family it belongs to."""

    values: np.ndarray
    model_kind: ModelKind

    def __post_init__(self):
        values = np.array(self.values, dtype=float).ravel()
        values.setflags(write=False)
        object.__setattr__(self, "values", values)
        if not np.all(np.isfinite(values)):
            raise ModelError(f"non-finite parameter values: {values}")

    def __len__(self):
        return self.values.size

    def replace_values(self, values) -> "ModelParams":
        return ModelParams(values, self.model_kind)


@dataclass(frozen=True)
class LinearGaussianModel:
    """Unpacked linear Gaussian parameters. Noise terms are scale factors."""

    A: np.ndarray
    B: np.ndarray
    S_u: np.ndarray
    S_v: np.ndarray

    @property
    def d_x(self) -> int:
        return self.A.shape[0]

    @property
    def d_y(self) -> int:
        return self.B.shape[0]

    @property
    def Q(self) -> np.ndarray:
        return self.S_u.T @ self.S_u

    @property
    def R(self) -> np.ndarray:
        return self.S_v.T @ self.S_v


@dataclass(frozen=True)
class StochVolModel:
    alpha: float
    sigma: float
    beta: float


@dataclass(frozen=True)
class Trajectory:
    states: np.ndarray
    observations: np.ndarray
    seed: int

    def __post_init__(self):
        if self.states.shape[0] != self.observations.shape[0]:
            raise ModelError("states and observations differ in length")

    @property
    def T(self) -> int:
        return self.states.shape[0] - 1


@dataclass(frozen=True)
class LogDensityEval:
    """Log-density value and its gradients.

    For batched calls ``value`` has shape ``(N,)``, ``grad_state`` ``(N, d_x)``
    and ``grad_params`` either ``(N, P)`` or, when particle weights were
    supplied, the weighted sum ``(P,)``.
    """

    value: np.ndarray
    grad_params: np.ndarray
    grad_state: np.ndarray


def _gauss_factor_logpdf(r, S, want_factor_grad):
    """log N(r; 0, S^T S) for rows of ``r``.

    Returns ``(value, Qinv_r, grad_S_rows)`` where ``grad_S_rows`` holds the
    per-row gradient w.r.t. the factor ``S`` (or ``None``).
    """
    d = S.shape[0]
    if d == 1:
        s = float(S[0, 0])
        if s == 0.0:
            raise ModelError("noise covariance is singular")
        s2 = s * s
        r1 = r[:, 0]
        value = -0.5 * (LOG_2PI + np.log(s2) + r1 * r1 / s2)
        qinv_r = r / s2
        grad_S = None
        if want_factor_grad:
            grad_S = (r1 * r1 / (s2 * s) - 1.0 / s).reshape(-1, 1, 1)
        return value, qinv_r, grad_S
    Q = S.T @ S
    try:
        chol = linalg.cho_factor(Q, lower=True, check_finite=False)
    except linalg.LinAlgError as exc:
        raise ModelError("noise covariance is not positive definite") from exc
    L = chol[0]
    logdet = 2.0 * np.sum(np.log(np.abs(np.diag(L))))
    if not np.isfinite(logdet):
        raise ModelError("noise covariance is singular")
    # half-whitened residual via one triangular solve
    half = linalg.solve_triangular(L, r.T, lower=True, check_finite=False)
    maha = np.sum(half * half, axis=0)
    value = -0.5 * (d * LOG_2PI + logdet + maha)
    qinv_r = linalg.solve_triangular(L, half, lower=True, trans="T", check_finite=False).T
    grad_S = None
    if want_factor_grad:
        # d/dS [-log|det S| - r^T Q^-1 r / 2] = S^-T (r r^T Q^-1 - I) with
        # S^-T = S Q^-1; per row: z w^T - S^-T, z = S Q^-1 r, w = Q^-1 r
        S_inv_T = S @ linalg.cho_solve(chol, np.eye(d), check_finite=False)
        z = qinv_r @ S.T
        grad_S = z[:, :, None] * qinv_r[:, None, :] - S_inv_T[None]
    return value, qinv_r, grad_S


class StateSpaceModel:
    """Common interface of the concrete models."""

    kind: ModelKind
    d_x: int
    d_y: int

    # subclasses implement
    def param_names(self) -> list[str]:
        raise NotImplementedError

    def check_params(self, theta: ModelParams) -> None:
        if theta.model_kind is not self.kind:
            raise ModelError(f"expected {self.kind.value} parameters, got {theta.model_kind.value}")
        if len(theta) != len(self.param_names()):
            raise ModelError(
                f"parameter vector has length {len(theta)}, layout needs {len(self.param_names())}"
            )

    @property
    def n_params(self) -> int:
        return len(self.param_names())

    def _states(self, x, name="state"):
        x = np.asarray(x, dtype=float)
        if x.ndim == 1:
            x = x[None, :] if x.size == self.d_x else x[:, None]
        if x.ndim != 2 or x.shape[1] != self.d_x:
            raise ModelError(f"{name} has shape {np.shape(x)}, expected (..., {self.d_x})")
        return x

    def _obs(self, y):
        y = np.asarray(y, dtype=float).ravel()
        if y.size != self.d_y:
            raise ModelError(f"observation has length {y.size}, expected {self.d_y}")
        return y


@dataclass(frozen=True, eq=False)
class LinearGaussian(StateSpaceModel):
    """Linear Gaussian SSM of dimensions ``d_x``, ``d_y``.

    Parameter layout: ``A`` (row-major), ``B``, ``S_u``, ``S_v``. If
    ``init_mean``/``init_cov`` are omitted the initial law is the stationary
    distribution at the parameter value used in each call.
    """

    d_x: int
    d_y: int
    init_mean: np.ndarray | None = None
    init_cov: np.ndarray | None = None
    kind: ModelKind = field(default=ModelKind.LINEAR_GAUSSIAN, init=False)

    def __post_init__(self):
        if self.d_x < 1 or self.d_y < 1:
            raise ModelError("dimensions must be positive")
        if (self.init_mean is None) != (self.init_cov is None):
            raise ModelError("init_mean and init_cov must be given together")
        if self.init_mean is not None:
            object.__setattr__(self, "init_mean", np.asarray(self.init_mean, float).reshape(self.d_x))
            object.__setattr__(
                self, "init_cov", np.asarray(self.init_cov, float).reshape(self.d_x, self.d_x)
            )

    def param_names(self) -> list[str]:
        names = []
        for sym, (r, c) in (
            ("A", (self.d_x, self.d_x)),
            ("B", (self.d_y, self.d_x)),
            ("S_u", (self.d_x, self.d_x)),
            ("S_v", (self.d_y, self.d_y)),
        ):
            if r * c == 1:
                names.append(sym)
            else:
                names.extend(f"{sym}[{i},{j}]" for i in range(r) for j in range(c))
        return names

    def _slices(self):
        dx, dy = self.d_x, self.d_y
        sizes = [dx * dx, dy * dx, dx * dx, dy * dy]
        ends = np.cumsum(sizes)
        return [slice(e - s, e) for s, e in zip(sizes, ends)]

    def pack(self, A, B, S_u, S_v) -> ModelParams:
        parts = [
            np.asarray(A, float).reshape(self.d_x, self.d_x),
            np.asarray(B, float).reshape(self.d_y, self.d_x),
            np.asarray(S_u, float).reshape(self.d_x, self.d_x),
            np.asarray(S_v, float).reshape(self.d_y, self.d_y),
        ]
        return ModelParams(np.concatenate([p.ravel() for p in parts]), self.kind)

    def unpack(self, theta: ModelParams) -> LinearGaussianModel:
        self.check_params(theta)
        v = theta.values
        sa, sb, su, sv = self._slices()
        return LinearGaussianModel(
            A=v[sa].reshape(self.d_x, self.d_x),
            B=v[sb].reshape(self.d_y, self.d_x),
            S_u=v[su].reshape(self.d_x, self.d_x),
            S_v=v[sv].reshape(self.d_y, self.d_y),
        )

    def with_fixed_init(self, mean, cov) -> "LinearGaussian":
        return replace(self, init_mean=mean, init_cov=cov)

    # densities ---------------------------------------------------------
    def transition(self, theta, x, xp, weights=None, want_params=True) -> LogDensityEval:
        p = self.unpack(theta)
        x, xp = self._states(x), self._states(xp, "next state")
        if x.shape[0] != xp.shape[0] and x.shape[0] != 1:
            raise ModelError("state batches differ in size")
        r = xp - x @ p.A.T
        value, qinv_r, grad_S = _gauss_factor_logpdf(r, p.S_u, want_params)
        grad_state = -qinv_r
        grad_params = None
        if want_params:
            n = r.shape[0]
            xb = np.broadcast_to(x, r.shape)
            gA = qinv_r[:, :, None] * xb[:, None, :]
            sa, sb, su, sv = self._slices()
            if weights is None:
                grad_params = np.zeros((n, self.n_params))
                grad_params[:, sa] = gA.reshape(n, -1)
                grad_params[:, su] = grad_S.reshape(n, -1)
            else:
                w = np.asarray(weights, float)
                grad_params = np.zeros(self.n_params)
                grad_params[sa] = np.tensordot(w, gA, axes=1).ravel()
                grad_params[su] = np.tensordot(w, grad_S, axes=1).ravel()
        return LogDensityEval(value, grad_params, grad_state)

    def emission(self, theta, xp, y, weights=None, want_params=True) -> LogDensityEval:
        p = self.unpack(theta)
        xp, y = self._states(xp), self._obs(y)
        r = y[None, :] - xp @ p.B.T
        value, qinv_r, grad_S = _gauss_factor_logpdf(r, p.S_v, want_params)
        grad_state = qinv_r @ p.B
        grad_params = None
        if want_params:
            n = r.shape[0]
            gB = qinv_r[:, :, None] * xp[:, None, :]
            sa, sb, su, sv = self._slices()
            if weights is None:
                grad_params = np.zeros((n, self.n_params))
                grad_params[:, sb] = gB.reshape(n, -1)
                grad_params[:, sv] = grad_S.reshape(n, -1)
            else:
                w = np.asarray(weights, float)
                grad_params = np.zeros(self.n_params)
                grad_params[sb] = np.tensordot(w, gB, axes=1).ravel()
                grad_params[sv] = np.tensordot(w, grad_S, axes=1).ravel()
        return LogDensityEval(value, grad_params, grad_state)

    def sample_transition(self, theta, x, eps) -> np.ndarray:
        """Reparameterised draw ``A x + S_u^T eps``."""
        p = self.unpack(theta)
        return self._states(x) @ p.A.T + np.atleast_2d(eps) @ p.S_u

    def sample_emission(self, theta, xp, eps) -> np.ndarray:
        p = self.unpack(theta)
        return self._states(xp) @ p.B.T + np.atleast_2d(eps) @ p.S_v

    def stationary_init(self, theta) -> tuple[np.ndarray, np.ndarray]:
        p = self.unpack(theta)
        radius = np.max(np.abs(np.linalg.eigvals(p.A)))
        if radius >= 1.0:
            raise ModelError(
                f"stationary initialisation needs spectral radius of A < 1, got {radius:.6g}"
            )
        cov = linalg.solve_discrete_lyapunov(p.A, p.Q)
        return np.zeros(self.d_x), 0.5 * (cov + cov.T)

    def project(self, theta: ModelParams) -> ModelParams:
        self.check_params(theta)
        return theta


@dataclass(frozen=True, eq=False)
class StochasticVolatility(StateSpaceModel):
    """Univariate stochastic volatility model, parameters ``(alpha, sigma, beta)``."""

    init_mean: np.ndarray | None = None
    init_cov: np.ndarray | None = None
    d_x: int = field(default=1, init=False)
    d_y: int = field(default=1, init=False)
    kind: ModelKind = field(default=ModelKind.STOCHASTIC_VOLATILITY, init=False)

    def __post_init__(self):
        if (self.init_mean is None) != (self.init_cov is None):
            raise ModelError("init_mean and init_cov must be given together")
        if self.init_mean is not None:
            object.__setattr__(self, "init_mean", np.asarray(self.init_mean, float).reshape(1))
            object.__setattr__(self, "init_cov", np.asarray(self.init_cov, float).reshape(1, 1))

    def param_names(self) -> list[str]:
        return ["alpha", "sigma", "beta"]

    def pack(self, alpha, sigma, beta) -> ModelParams:
        return ModelParams([alpha, sigma, beta], self.kind)

    def unpack(self, theta: ModelParams) -> StochVolModel:
        self.check_params(theta)
        a, s, b = theta.values
        return StochVolModel(float(a), float(s), float(b))

    def with_fixed_init(self, mean, cov) -> "StochasticVolatility":
        return replace(self, init_mean=mean, init_cov=cov)

    def transition(self, theta, x, xp, weights=None, want_params=True) -> LogDensityEval:
        p = self.unpack(theta)
        if p.sigma <= 0:
            raise ModelError(f"sigma must be positive, got {p.sigma}")
        x, xp = self._states(x)[:, 0], self._states(xp, "next state")[:, 0]
        r = xp - p.alpha * x
        s2 = p.sigma * p.sigma
        value = -0.5 * LOG_2PI - np.log(p.sigma) - 0.5 * r * r / s2
        grad_state = (-r / s2)[:, None]
        grad_params = None
        if want_params:
            g = np.zeros((r.size, 3))
            g[:, 0] = r * x / s2
            g[:, 1] = -1.0 / p.sigma + r * r / (s2 * p.sigma)
            grad_params = g if weights is None else np.asarray(weights, float) @ g
        return LogDensityEval(value, grad_params, grad_state)

    def emission(self, theta, xp, y, weights=None, want_params=True) -> LogDensityEval:
        p = self.unpack(theta)
        if p.beta <= 0:
            raise ModelError(f"beta must be positive, got {p.beta}")
        xp, y = self._states(xp)[:, 0], self._obs(y)[0]
        b2 = p.beta * p.beta
        scaled = y * y * np.exp(-xp) / b2
        value = -0.5 * LOG_2PI - np.log(p.beta) - 0.5 * xp - 0.5 * scaled
        grad_state = (-0.5 + 0.5 * scaled)[:, None]
        grad_params = None
        if want_params:
            g = np.zeros((xp.size, 3))
            g[:, 2] = -1.0 / p.beta + scaled / p.beta
            grad_params = g if weights is None else np.asarray(weights, float) @ g
        return LogDensityEval(value, grad_params, grad_state)

    def sample_transition(self, theta, x, eps) -> np.ndarray:
        p = self.unpack(theta)
        return p.alpha * self._states(x) + p.sigma * np.atleast_2d(eps).reshape(-1, 1)

    def sample_emission(self, theta, xp, eps) -> np.ndarray:
        p = self.unpack(theta)
        return p.beta * np.exp(0.5 * self._states(xp)) * np.atleast_2d(eps).reshape(-1, 1)

    def stationary_init(self, theta) -> tuple[np.ndarray, np.ndarray]:
        p = self.unpack(theta)
        if not abs(p.alpha) < 1.0:
            raise ModelError(f"stationary initialisation needs |alpha| < 1, got {p.alpha}")
        return np.zeros(1), np.array([[p.sigma**2 / (1.0 - p.alpha**2)]])

    def project(self, theta: ModelParams) -> ModelParams:
        self.check_params(theta)
        d = PROJECTION_DELTA
        a, s, b = theta.values
        return theta.replace_values([min(max(a, d), 1.0 - d), max(s, d), max(b, d)])


# module-level operations ------------------------------------------------


def initial_law(model: StateSpaceModel, theta: ModelParams) -> tuple[np.ndarray, np.ndarray]:
    """Mean and covariance of the initial state distribution."""
    if model.init_mean is not None:
        return model.init_mean, model.init_cov
    return model.stationary_init(theta)


def stationary_init(model: StateSpaceModel, theta: ModelParams):
    return model.stationary_init(theta)


def log_transition(model, theta, x, xp) -> LogDensityEval:
    return model.transition(theta, x, xp)


def log_emission(model, theta, xp, y) -> LogDensityEval:
    return model.emission(theta, xp, y)


def log_initial(model, theta, x0) -> LogDensityEval:
    """log m0(x0). The initial law is treated as parameter-free."""
    mean, cov = initial_law(model, theta)
    x0 = model._states(x0)
    S = np.linalg.cholesky(cov).T
    value, qinv_r, _ = _gauss_factor_logpdf(x0 - mean, S, False)
    return LogDensityEval(value, np.zeros((x0.shape[0], model.n_params)), -qinv_r)


def project_params(model, theta) -> ModelParams:
    return model.project(theta)


def simulate(model: StateSpaceModel, theta: ModelParams, T: int, seed: int) -> Trajectory:
    """Draw ``X_0 ~ m0`` then ``T`` transitions, with an observation at every time."""
    if T < 1:
        raise ModelError(f"T must be a positive integer, got {T}")
    model.check_params(theta)
    rng = np.random.default_rng(seed)
    mean, cov = initial_law(model, theta)
    states = np.empty((T + 1, model.d_x))
    obs = np.empty((T + 1, model.d_y))
    states[0] = mean + np.linalg.cholesky(cov) @ rng.standard_normal(model.d_x)
    for t in range(1, T + 1):
        states[t] = model.sample_transition(theta, states[t - 1], rng.standard_normal(model.d_x))[0]
    obs[:] = model.sample_emission(theta, states, rng.standard_normal((T + 1, model.d_y)))
    return Trajectory(states, obs, seed)
