"""Built-in numerical checks shared by the CLI and the test-suite."""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from .gradients import finite_diff, increment
from .kalman import kalman_filter, predictive_loglik
from .learning import StepSchedule, schedule_validate
from .models import LinearGaussian, StochasticVolatility, simulate
from .proposals import bootstrap, locally_optimal, neural_gaussian
from .smc import elbo_iwae, ess, normalize, run_filter


@dataclass
class CheckResult:
    name: str
    passed: bool
    measured: float
    tolerance: float
    details: dict = field(default_factory=dict)

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"[{status}] {self.name}: measured={self.measured:.6g} tolerance={self.tolerance:.6g}"

    def to_dict(self):
        return asdict(self)


def reference_lg1d(S_v=0.2):
    """The 1-D linear Gaussian benchmark (A=0.8, B=1, S_u=0.5)."""
    model = LinearGaussian(1, 1)
    return model, model.pack(0.8, 1.0, 0.5, S_v)


def relative_error(a, b) -> float:
    a, b = np.ravel(a), np.ravel(b)
    denom = max(np.linalg.norm(b), np.linalg.norm(a), 1e-12)
    return float(np.linalg.norm(a - b) / denom)


def _relu_margin(lam, inputs):
    """Smallest |pre-activation| over all hidden relu units."""
    margin = np.inf
    for net in (lam.mean_net, lam.std_net):
        h = inputs
        layers = list(net.layers())
        for W, b in layers[:-1]:
            z = h @ W + b
            margin = min(margin, float(np.min(np.abs(z))))
            h = np.maximum(z, 0.0)
    return margin


def _random_point(kind, rng, n_particles):
    if kind == "lg":
        d = int(rng.integers(1, 3))
        model = LinearGaussian(d, d)
        A = rng.uniform(-0.6, 0.6, (d, d)) / d
        B = np.eye(d) + 0.3 * rng.standard_normal((d, d))
        S_u = np.diag(rng.uniform(0.3, 1.2, d)) + 0.1 * np.triu(rng.standard_normal((d, d)), 1)
        S_v = np.diag(rng.uniform(0.3, 1.0, d)) + 0.1 * np.triu(rng.standard_normal((d, d)), 1)
        theta = model.pack(A, B, S_u, S_v)
    else:
        model = StochasticVolatility()
        theta = model.pack(rng.uniform(0.3, 0.95), rng.uniform(0.2, 1.0), rng.uniform(0.4, 1.5))
    lam = neural_gaussian(model.d_x, model.d_y, seed=int(rng.integers(2**32)))
    lam = lam.with_flat(lam.flat + 0.2 * rng.standard_normal(lam.n_params))
    anc = rng.standard_normal((n_particles, model.d_x))
    y = rng.standard_normal(model.d_y)
    eps = rng.standard_normal((n_particles, model.d_x))
    return model, theta, lam, anc, y, eps


def gradcheck(points=10, seed=0, n_particles=5, h=1e-5, tolerance=1e-4, models=("lg", "sv")) -> CheckResult:
    """Analytic vs central-difference gradients of ``log sum_i w_i``.

    Ancestors and noise are frozen (common random numbers). Points whose relu
    pre-activations come within 1e-3 of a kink are redrawn.
    """
    rng = np.random.default_rng(seed)
    errors = {}
    for kind in models:
        worst = 0.0
        done = 0
        while done < points:
            model, theta, lam, anc, y, eps = _random_point(kind, rng, n_particles)
            inputs = np.concatenate([anc, np.broadcast_to(y, (n_particles, model.d_y))], axis=1)
            if _relu_margin(lam, inputs) < 1e-3:
                continue
            inc = increment(model, theta, lam, anc, y, eps)

            def f_lam(v):
                return increment(model, theta, lam.with_flat(v), anc, y, eps, False, False).log_sum

            def f_theta(v):
                return increment(model, theta.replace_values(v), lam, anc, y, eps, False, False).log_sum

            worst = max(
                worst,
                relative_error(inc.grad_lambda, finite_diff(f_lam, lam.flat, h)),
                relative_error(inc.grad_theta, finite_diff(f_theta, theta.values, h)),
            )
            done += 1
        errors[kind] = worst
    measured = max(errors.values())
    return CheckResult("gradient correctness", measured <= tolerance, measured, tolerance, {"max_rel_error": errors, "points": points})


def replicate_loglik(model, theta, y, N, replicates, seed, threads=1) -> np.ndarray:
    """``log Z_hat`` from independent bootstrap filters, one seed per replicate."""
    seqs = np.random.SeedSequence(seed).spawn(replicates)
    lam = bootstrap()

    def one(ss):
        return run_filter(model, theta, lam, y, N, np.random.default_rng(ss)).loglik_estimate

    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            return np.array(list(pool.map(one, seqs)))
    return np.array([one(s) for s in seqs])


def unbiasedness_suite(model, theta, T=20, N=64, replicates=2000, seed=0, threads=1, n_se=4.0):
    """Unbiasedness of ``Z_hat`` and the Jensen gap of ``log Z_hat`` from one set of replicates.

    The record ``y[0..T]`` is simulated with ``seed``; the Kalman filter gives
    the exact likelihood.
    """
    y = simulate(model, theta, T, seed).observations
    exact = kalman_filter(model, theta, y).total_loglik
    logz = replicate_loglik(model, theta, y, N, replicates, seed, threads)
    ratio = np.exp(logz - exact)
    se = ratio.std(ddof=1) / np.sqrt(replicates)
    bias = ratio.mean() - 1.0
    se_log = logz.std(ddof=1) / np.sqrt(replicates)
    gap_se = (exact - logz.mean()) / se_log
    details = {
        "kalman_loglik": exact,
        "mean_relative_bias": float(bias),
        "se_relative_bias": float(se),
        "mean_loglik": float(logz.mean()),
        "se_loglik": float(se_log),
        "replicates": replicates,
        "T": T,
        "N": N,
    }
    return [
        CheckResult("likelihood unbiasedness (|bias|/SE)", bool(abs(bias) <= n_se * se), float(abs(bias) / se), n_se, details),
        CheckResult("ELBO below log-likelihood (gap/SE)", bool(gap_se > 3.0), float(gap_se), 3.0, details),
    ]


def iwae_monotone(T=20, sizes=(1, 4, 16), replicates=1000, seed=0, n_se=2.0) -> CheckResult:
    """Sequential importance sampling bounds are nondecreasing in N."""
    model, theta = reference_lg1d()
    y = simulate(model, theta, T, seed).observations
    exact = kalman_filter(model, theta, y).total_loglik
    means, ses = [], []
    for k, n in enumerate(sizes):
        rng = np.random.default_rng([seed, k])
        vals = np.array([elbo_iwae(model, theta, bootstrap(), y, n, rng) for _ in range(replicates)])
        means.append(vals.mean())
        ses.append(vals.std(ddof=1) / np.sqrt(replicates))
    worst = min(
        (means[i + 1] - means[i]) / np.hypot(ses[i], ses[i + 1]) for i in range(len(sizes) - 1)
    )
    below = all(m <= exact + 3 * s for m, s in zip(means, ses))
    details = {"sizes": list(sizes), "means": means, "ses": ses, "kalman_loglik": exact}
    return CheckResult("IWAE bound monotone in N (min step/SE)", bool(worst >= -n_se and below), float(worst), -n_se, details)


def locally_optimal_identity(trials=20, seed=0, tolerance=1e-10) -> CheckResult:
    """With the locally optimal proposal the weight equals the predictive density."""
    model, theta = reference_lg1d()
    p = model.unpack(theta)
    rng = np.random.default_rng(seed)
    worst_spread = worst_value = 0.0
    prop = locally_optimal()
    for _ in range(trials):
        x_anc = rng.standard_normal()
        y = rng.standard_normal(1)
        eps = rng.standard_normal((64, 1))
        inc = increment(model, theta, prop, np.full((64, 1), x_anc), y, eps, False, False)
        target = predictive_loglik(model, theta, p.A @ [x_anc], p.Q, y)
        worst_spread = max(worst_spread, float(np.ptp(inc.log_w)))
        worst_value = max(worst_value, float(np.max(np.abs(inc.log_w - target))))
    at_zero = increment(model, theta, prop, np.zeros((4, 1)), np.zeros(1), rng.standard_normal((4, 1)), False, False)
    measured = max(worst_spread, worst_value)
    details = {"spread": worst_spread, "value_error": worst_value, "log_w_at_zero": float(at_zero.log_w[0])}
    return CheckResult("locally optimal weight identity", measured < tolerance, measured, tolerance, details)


def kalman_consistency(seed=0, tolerance=1e-12) -> CheckResult:
    """Kalman step log-likelihoods equal the predictive log-density."""
    model, theta = reference_lg1d()
    p = model.unpack(theta)
    y = simulate(model, theta, 10, seed).observations
    res = kalman_filter(model, theta, y)
    m0, P0 = model.stationary_init(theta)
    worst = abs(predictive_loglik(model, theta, m0, P0, y[0]) - res.step_loglik[0])
    for t in range(1, len(y)):
        m = p.A @ res.filter_means[t - 1]
        P = p.A @ res.filter_covs[t - 1] @ p.A.T + p.Q
        worst = max(worst, abs(predictive_loglik(model, theta, m, P, y[t]) - res.step_loglik[t]))
    return CheckResult("Kalman vs predictive log-likelihood", worst <= tolerance, float(worst), tolerance)


def weights_sanity(seed=0) -> CheckResult:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for n in (1, 2, 10, 1000):
        lw = 5.0 * rng.standard_normal(n)
        w, _ = normalize(lw)
        e = ess(w)
        worst = max(worst, abs(w.sum() - 1.0))
        if not (1.0 / n - 1e-12 <= e <= 1.0 + 1e-12):
            worst = np.inf
    return CheckResult("normalised weights and ESS range", worst <= 1e-12, float(worst), 1e-12)


def step_schedule(horizon=10**6) -> CheckResult:
    ok = schedule_validate(StepSchedule("inverse_sqrt", 0.5), a=2.0, a_prime=2.0, c=0.5, horizon=horizon)
    return CheckResult("inverse-sqrt schedule conditions", ok, float(ok), 1.0, {"horizon": horizon})


def determinism(seed=0) -> CheckResult:
    model, theta = reference_lg1d()
    y = simulate(model, theta, 30, seed).observations
    lam = neural_gaussian(1, 1, seed=seed)
    a = run_filter(model, theta, lam, y, 50, np.random.default_rng(seed))
    b = run_filter(model, theta, lam, y, 50, np.random.default_rng(seed))
    same = a.loglik_estimate == b.loglik_estimate and np.array_equal(a.ess_trace, b.ess_trace)
    return CheckResult("bit-reproducible filter", bool(same), float(same), 1.0)


def run_all(seed=0, threads=1) -> list[CheckResult]:
    return [
        weights_sanity(seed),
        kalman_consistency(seed),
        locally_optimal_identity(seed=seed),
        gradcheck(seed=seed),
        *unbiasedness_suite(*reference_lg1d(), seed=seed, threads=threads),
        iwae_monotone(seed=seed),
        step_schedule(),
        determinism(seed),
    ]
