"""Online and batch variational sequential Monte Carlo for state-space models.

The package provides linear Gaussian and stochastic volatility models, an
exact Kalman filter, reparameterised particle proposals backed by a small
numpy MLP, particle filters with likelihood and ELBO estimators, exact
importance-weight gradients, and learning loops (online VSMC, its modified
single-parameter variant, and batch VSMC).
"""

from .gradients import finite_diff, grad_log_sum, increment, log_weight_grads, vsmc_surrogate_grad
from .kalman import KalmanResult, kalman_filter, predictive_loglik
from .learning import (
    AdamState,
    LearningTrace,
    OptimizerSpec,
    OVSMCConfig,
    StepSchedule,
    adam_step,
    estimate_mean_field,
    ovsmc_run,
    ovsmc_step,
    ovsmc_step_modified,
    repeated_stream,
    schedule_validate,
    sgd_step,
    vsmc_fit,
)
from .models import (
    LinearGaussian,
    ModelError,
    ModelParams,
    StochasticVolatility,
    Trajectory,
    log_emission,
    log_initial,
    log_transition,
    project_params,
    simulate,
    stationary_init,
)
from .proposals import ProposalKind, ProposalParams, bootstrap, locally_optimal, neural_gaussian, propose
from .smc import (
    FilterResult,
    ParticleCloud,
    ParticleCollapse,
    elbo_iwae,
    ess,
    normalize,
    pf_init,
    pf_step,
    resample_multinomial,
    resample_systematic,
    run_filter,
)

__version__ = "0.1.0"
