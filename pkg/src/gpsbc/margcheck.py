"""Detecting when Type-II point estimates of hyperparameters mislead.

The procedure: fit hyperparameters by maximum marginal likelihood on the
real data, treat the fitted model as the generating prior, and rerun the
rank-statistic calibration with one twist: every trial refits the
hyperparameters on its own simulated data, starting from a fresh draw of
the hyperparameter prior, and forms the posterior under the refitted
values.  With plenty of data the refits land back near the generating
values and ranks stay uniform; with scarce data the refitted posteriors
are overconfident, rank mass piles into the extreme bins (the valley
shape), and the verdict recommends marginalising over hyperparameters
instead of plugging in the point estimate.

Hyperparameter vectors are handled on the log scale throughout, ordered
(log signal_variance, log lengthscale_1 .. log lengthscale_d,
log noise_variance) to match the marginal-likelihood gradient.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace

import numpy as np

from . import streams
from .diagnostics import DiagnosticsConfig, UniformityReport, build_reports, valley_threshold_null_quantile
from .engine import (
    FAILURE_BUDGET,
    NUMERICAL_FAILURES,
    RankTally,
    SbcConfig,
    SbcRunError,
    posterior_correlation,
    rank_against_posterior,
)
from .kernels import InputPoints, SquaredExponential
from .models import (
    Exact,
    GaussianLikelihood,
    GpModel,
    exact_posterior,
    log_marginal_likelihood,
    sample_prior_joint,
    simulate_observations,
)

# Armijo line-search constants (fixed, not configuration).
_CONTRACTION = 0.5
_SLOPE = 1e-4
_MIN_STEP = 1e-14
_STEP_GROWTH = 2.0
# First proposal of each line search never moves any log-hyperparameter by
# more than this; broad-prior starts otherwise open with huge gradients and
# burn the whole backtracking budget rejecting absurd jumps.
_MAX_FIRST_MOVE = 2.0

# Shape the stock valley threshold was calibrated on: 1000 trials pooled
# over 4 single-output test points, 101 bins.
DEFAULT_VALLEY_THRESHOLD = 1.2
_CALIBRATED_SHAPE = (4000, 101)
_THRESHOLD_REPS = 2000


class FitFailed(Exception):
    """Every optimizer start had a non-finite objective."""


@dataclass(frozen=True)
class HyperPrior:
    """Independent log-normal prior over the positive hyperparameters.

    (mu, sigma) live on the log scale, one entry per hyperparameter in the
    (signal_variance, lengthscales..., noise_variance) order.  sigma = 0
    collapses a coordinate to a point mass, which is what the reduction to
    the plain calibration run uses.
    """

    mu: tuple
    sigma: tuple

    def __post_init__(self):
        mu = tuple(float(v) for v in self.mu)
        sigma = tuple(float(v) for v in self.sigma)
        if len(mu) < 3:
            raise ValueError(
                f"need at least 3 hyperparameters (signal, lengthscale, noise), got {len(mu)}"
            )
        if len(mu) != len(sigma):
            raise ValueError(f"mu and sigma lengths differ: {len(mu)} vs {len(sigma)}")
        if not all(math.isfinite(v) for v in mu):
            raise ValueError("mu entries must be finite")
        if not all(math.isfinite(v) and v >= 0 for v in sigma):
            raise ValueError("sigma entries must be finite and >= 0")
        object.__setattr__(self, "mu", mu)
        object.__setattr__(self, "sigma", sigma)

    @property
    def k(self) -> int:
        return len(self.mu)

    def sample_log(self, rng: np.random.Generator) -> np.ndarray:
        """One log-scale draw; exactly mu where sigma is zero."""
        return np.array(self.mu) + np.array(self.sigma) * rng.standard_normal(self.k)


def sample_hyper_prior(prior: HyperPrior, rng: np.random.Generator) -> np.ndarray:
    """One natural-scale draw from the prior; entries strictly positive."""
    return np.exp(prior.sample_log(rng))


@dataclass(frozen=True)
class OptimizerConfig:
    """Gradient-ascent settings for the marginal-likelihood fit.

    `restarts` applies to full fits (the prologue); `trial_restarts`
    applies to the per-trial refit, whose default of 1 keeps the refit a
    single run from the sampled initialization.  max_iters = 0 freezes the
    optimizer at its initialization, used by the reduction identity.
    """

    max_iters: int = 500
    grad_tol: float = 1e-6
    restarts: int = 5
    trial_restarts: int = 1
    initial_step: float = 1.0

    def __post_init__(self):
        if self.max_iters < 0:
            raise ValueError(f"max_iters must be >= 0, got {self.max_iters}")
        if not self.grad_tol > 0:
            raise ValueError(f"grad_tol must be positive, got {self.grad_tol}")
        if self.restarts < 1:
            raise ValueError(f"restarts must be >= 1, got {self.restarts}")
        if self.trial_restarts < 1:
            raise ValueError(f"trial_restarts must be >= 1, got {self.trial_restarts}")
        if not self.initial_step > 0:
            raise ValueError(f"initial_step must be positive, got {self.initial_step}")


@dataclass(frozen=True)
class Type2FitResult:
    theta_hat: np.ndarray          # log scale
    final_lml: float
    converged: bool
    iterations: int
    restarts_used: int

    def __post_init__(self):
        th = np.array(self.theta_hat, dtype=np.float64)
        th.flags.writeable = False
        object.__setattr__(self, "theta_hat", th)


def build_se_model(theta_log: np.ndarray, input_dim: int, inference=None, fault=None) -> GpModel:
    """Single-output squared-exponential model from a log-scale vector."""
    theta_log = np.asarray(theta_log, dtype=np.float64)
    if theta_log.shape != (input_dim + 2,):
        raise ValueError(
            f"expected {input_dim + 2} hyperparameters for input dimension {input_dim}, "
            f"got shape {theta_log.shape}"
        )
    kernel = SquaredExponential(
        signal_variance=float(np.exp(theta_log[0])),
        lengthscales=tuple(float(v) for v in np.exp(theta_log[1:-1])),
    )
    likelihood = GaussianLikelihood((float(np.exp(theta_log[-1])),))
    return GpModel(kernel, likelihood, inference or Exact(), fault)


def _lml_objective(x: InputPoints, y: np.ndarray):
    d = x.d

    def objective(theta_log: np.ndarray, with_grad: bool):
        model = build_se_model(theta_log, d)
        try:
            return log_marginal_likelihood(model, x, y, with_grad=with_grad)
        except NUMERICAL_FAILURES:
            return -math.inf, None

    return objective


def _ascend(theta0: np.ndarray, objective, cfg: OptimizerConfig):
    """Armijo-backtracked gradient ascent from one initialization.

    Returns (theta, value, grad_max, iterations) or None when the
    objective is non-finite at the initialization.  The line-search step
    is warm-started at double the previously accepted step, so steps grow
    while progress is easy and shrink only as far as each iteration needs.
    """
    theta = np.array(theta0, dtype=np.float64)
    value, grad = objective(theta, True)
    if not math.isfinite(value):
        return None
    step = cfg.initial_step
    iterations = 0
    while iterations < cfg.max_iters and float(np.max(np.abs(grad))) >= cfg.grad_tol:
        slope = float(grad @ grad)
        grad_inf = float(np.max(np.abs(grad)))
        trial = min(step, _MAX_FIRST_MOVE / grad_inf)
        accepted = False
        while trial >= _MIN_STEP:
            candidate = theta + trial * grad
            cand_value, _ = objective(candidate, False)
            if math.isfinite(cand_value) and cand_value >= value + _SLOPE * trial * slope:
                accepted = True
                break
            trial *= _CONTRACTION
        if not accepted:
            break
        theta = candidate
        value, grad = objective(theta, True)
        step = trial * _STEP_GROWTH
        iterations += 1
    return theta, value, float(np.max(np.abs(grad))), iterations


def fit_type2(model_template: GpModel, x: InputPoints, y: np.ndarray, init_theta: np.ndarray,
              optimizer_cfg: OptimizerConfig, hyper_prior: HyperPrior | None = None,
              rng: np.random.Generator | None = None) -> Type2FitResult:
    """Maximize the log marginal likelihood over log-hyperparameters.

    Start 0 is `init_theta`; when optimizer_cfg.restarts > 1 the remaining
    starts are drawn from `hyper_prior` (which then must be given along
    with an rng).  The best final value wins.  Raises FitFailed when every
    start has a non-finite objective at its initialization.
    """
    if not isinstance(model_template.inference, Exact):
        raise ValueError("hyperparameter fitting requires exact inference")
    init_theta = np.asarray(init_theta, dtype=np.float64)
    starts = [init_theta]
    if optimizer_cfg.restarts > 1:
        if hyper_prior is None or rng is None:
            raise ValueError("restarts > 1 needs a hyper_prior and rng to draw extra starts")
        starts += [hyper_prior.sample_log(rng) for _ in range(optimizer_cfg.restarts - 1)]

    objective = _lml_objective(x, y)
    best = None
    attempted = 0
    for theta0 in starts:
        outcome = _ascend(theta0, objective, optimizer_cfg)
        if outcome is None:
            continue
        attempted += 1
        if best is None or outcome[1] > best[1]:
            best = outcome
    if best is None:
        raise FitFailed(f"all {len(starts)} starts had a non-finite objective")
    theta, value, grad_max, iterations = best
    return Type2FitResult(
        theta_hat=theta,
        final_lml=value,
        converged=grad_max < optimizer_cfg.grad_tol,
        iterations=iterations,
        restarts_used=attempted,
    )


@dataclass(frozen=True)
class MargCheckReport:
    """Outcome of the hyperparameter-adequacy check.

    verdict: "marginalisation_needed" when pooled uniformity fails with a
    valley shape above the threshold; "type2_adequate" when it passes;
    "inconclusive" otherwise (including non-valley failures, which signal
    a problem the valley criterion cannot attribute to hyperparameters).
    """

    verdict: str
    tally: RankTally
    uniformity: UniformityReport
    per_output: tuple
    per_slice: tuple
    per_trial_theta: np.ndarray    # (N, k) log scale; NaN rows for failed trials
    theta_hat0: np.ndarray
    prologue: Type2FitResult
    valley_threshold: float

    def __post_init__(self):
        th = np.array(self.per_trial_theta, dtype=np.float64)
        th.flags.writeable = False
        object.__setattr__(self, "per_trial_theta", th)
        t0 = np.array(self.theta_hat0, dtype=np.float64)
        t0.flags.writeable = False
        object.__setattr__(self, "theta_hat0", t0)


def _marg_verdict(pooled: UniformityReport, threshold: float) -> str:
    if pooled.verdict == "fail" and pooled.valley_score > threshold:
        return "marginalisation_needed"
    if pooled.verdict == "pass":
        return "type2_adequate"
    return "inconclusive"


def resolve_valley_threshold(total_pooled: int, n_ranks: int, n_bins: int,
                             base_seed: int, override: float | None = None) -> float:
    """Stock threshold at the calibrated shape, a null quantile elsewhere.

    The stock value was chosen so a uniform histogram of the calibrated
    shape exceeds it less than 5% of the time; any other shape gets its
    own 95% null quantile from a fresh simulation, seeded independently of
    the trial streams.
    """
    if override is not None:
        if not override > 0:
            raise ValueError(f"valley threshold must be positive, got {override}")
        return float(override)
    if (total_pooled, n_bins) == _CALIBRATED_SHAPE:
        return DEFAULT_VALLEY_THRESHOLD
    rng = streams.aux_stream(base_seed, streams.AUX_THRESHOLD)
    return valley_threshold_null_quantile(total_pooled, n_ranks, n_bins, _THRESHOLD_REPS, rng)


def run_marg_check(x: InputPoints, y_real: np.ndarray, hyper_prior: HyperPrior,
                   sbc_cfg: SbcConfig, optimizer_cfg: OptimizerConfig,
                   diag_cfg: DiagnosticsConfig | None = None,
                   valley_threshold: float | None = None,
                   threads: int = 1) -> MargCheckReport:
    """Fit, simulate, refit per trial, and judge hyperparameter adequacy.

    Steps: (1) multi-start fit on the real data gives the generating
    values; (2) each trial simulates from the generating model, draws a
    fresh prior initialization, refits single-start on the simulated data,
    and ranks the held-out function values under the refitted posterior;
    (3) pooled uniformity plus the valley score yield the verdict.

    x must match sbc_cfg.x: the procedure trains, simulates, and refits on
    one design.  Per-trial fit failures follow the engine's skip policy.
    """
    if diag_cfg is None:
        diag_cfg = DiagnosticsConfig()
    if threads < 1:
        raise ValueError(f"threads must be >= 1, got {threads}")
    y_real = np.asarray(y_real, dtype=np.float64)
    if y_real.size == 0:
        raise ValueError("y_real is empty; the prologue fit needs data")
    if not np.array_equal(x.values, sbc_cfg.x.values):
        raise ValueError("x and sbc_cfg.x differ; the check uses a single training design")
    if hyper_prior.k != x.d + 2:
        raise ValueError(
            f"prior has {hyper_prior.k} hyperparameters but input dimension {x.d} needs {x.d + 2}"
        )

    template = build_se_model(np.array(hyper_prior.mu), x.d)
    prologue_rng = streams.aux_stream(sbc_cfg.base_seed, streams.AUX_PROLOGUE_FIT)
    prologue = fit_type2(
        template, x, y_real, np.array(hyper_prior.mu), optimizer_cfg,
        hyper_prior=hyper_prior, rng=prologue_rng,
    )
    theta0 = prologue.theta_hat
    gen_model = build_se_model(theta0, x.d)

    trial_cfg = replace(optimizer_cfg, restarts=optimizer_cfg.trial_restarts)
    m, p = sbc_cfg.xstar.n, gen_model.p
    k = hyper_prior.k

    def one(index: int):
        sim_rng = streams.trial_stream(sbc_cfg.base_seed, index, streams.ROLE_SIMULATION)
        hyper_rng = streams.trial_stream(sbc_cfg.base_seed, index, streams.ROLE_HYPER)
        post_rng = streams.trial_stream(sbc_cfg.base_seed, index, streams.ROLE_POSTERIOR)
        try:
            f, f_star = sample_prior_joint(gen_model, x, sbc_cfg.xstar, sim_rng)
            y_sim = simulate_observations(f, gen_model.likelihood, sim_rng)
            theta_init = hyper_prior.sample_log(hyper_rng)
            fit = fit_type2(
                template, x, y_sim, theta_init, trial_cfg,
                hyper_prior=hyper_prior, rng=hyper_rng,
            )
            trial_model = build_se_model(fit.theta_hat, x.d)
            post = exact_posterior(trial_model, x, y_sim, sbc_cfg.xstar)
            ranks = rank_against_posterior(f_star, post, sbc_cfg.n_posterior, post_rng)
            return index, ranks, fit.theta_hat
        except (FitFailed, *NUMERICAL_FAILURES):
            return index, None, None

    if threads == 1:
        results = map(one, range(sbc_cfg.n_trials))
    else:
        pool = ThreadPoolExecutor(max_workers=threads)
        results = pool.map(one, range(sbc_cfg.n_trials))

    counts = np.zeros((m, p, sbc_cfg.n_posterior + 1), dtype=np.int64)
    theta_trace = np.full((sbc_cfg.n_trials, k), np.nan)
    failed = []
    jj, ii = np.meshgrid(np.arange(m), np.arange(p), indexing="ij")
    for index, ranks, theta in results:
        if ranks is None:
            failed.append(index)
            continue
        np.add.at(counts, (jj, ii, ranks), 1)
        theta_trace[index] = theta
    if threads > 1:
        pool.shutdown()

    if len(failed) > FAILURE_BUDGET * sbc_cfg.n_trials:
        raise SbcRunError(sorted(failed))
    tally = RankTally(
        counts=counts,
        n_completed=sbc_cfg.n_trials - len(failed),
        failed_indices=tuple(sorted(failed)),
    )

    # The generating model's posterior correlation stands in for the
    # trial-varying truth; refits hover around theta0, and the pooled null
    # needs the cross-point correlation far more than its fine detail.
    correlation = posterior_correlation(gen_model, sbc_cfg)
    diag_rng = streams.aux_stream(sbc_cfg.base_seed, streams.AUX_DIAGNOSTICS)
    reports = build_reports(tally, diag_cfg, diag_rng, correlation=correlation)
    pooled = reports["pooled"]

    threshold = resolve_valley_threshold(
        int(tally.counts.sum()), sbc_cfg.n_posterior + 1,
        diag_cfg.bins_for(sbc_cfg.n_posterior + 1), sbc_cfg.base_seed,
        override=valley_threshold,
    )
    return MargCheckReport(
        verdict=_marg_verdict(pooled, threshold),
        tally=tally,
        uniformity=pooled,
        per_output=tuple(reports["per_output"]),
        per_slice=tuple(tuple(row) for row in reports["per_slice"]),
        per_trial_theta=theta_trace,
        theta_hat0=theta0,
        prologue=prologue,
        valley_threshold=threshold,
    )
