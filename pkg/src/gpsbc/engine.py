"""Rank-statistic engine: trials, tallies, pooling.

One trial draws a single prior function jointly at the training and test
locations, simulates observations, runs the model's inference code, and
ranks each held-out prior value within the L posterior samples at the same
coordinate.  Ranks of a correctly implemented posterior are uniform on
{0..L}; histograms of the ranks over many trials expose miscalibration.

Trials are embarrassingly parallel and schedule-independent: every trial
consumes only its own random substreams (see :mod:`gpsbc.streams`), so an
8-way thread pool produces bit-identical tallies to a serial loop.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import streams
from .kernels import InputPoints
from .linalg import NotPositiveDefinite, SingularTriangular
from .models import (
    Exact,
    GpModel,
    Sparse,
    exact_posterior,
    sample_posterior,
    sample_prior_joint,
    simulate_observations,
    sparse_posterior,
)

# Failures that count as a numerically failed trial (recorded and skipped);
# anything else is a bug and propagates.
NUMERICAL_FAILURES = (NotPositiveDefinite, SingularTriangular, np.linalg.LinAlgError, FloatingPointError)

FAILURE_BUDGET = 0.01  # abort when more than 1% of trials fail


class SbcRunError(Exception):
    """Too many trials failed numerically."""

    def __init__(self, failed_indices):
        self.failed_indices = tuple(int(i) for i in failed_indices)
        shown = ", ".join(str(i) for i in self.failed_indices[:20])
        more = "" if len(self.failed_indices) <= 20 else f", ... ({len(self.failed_indices)} total)"
        super().__init__(
            f"more than {FAILURE_BUDGET:.0%} of trials failed numerically; "
            f"failing trial indices: {shown}{more}"
        )


@dataclass(frozen=True)
class SbcConfig:
    """Trial plan: where to train, where to rank, how many trials and samples."""

    x: InputPoints
    xstar: InputPoints
    n_trials: int = 1000
    n_posterior: int = 100
    base_seed: int = 0

    def __post_init__(self):
        if self.n_trials < 1:
            raise ValueError(f"n_trials must be >= 1, got {self.n_trials}")
        if self.n_posterior < 1:
            raise ValueError(f"n_posterior must be >= 1, got {self.n_posterior}")
        if self.xstar.n < 1:
            raise ValueError("need at least one test point to rank")
        if self.x.d != self.xstar.d:
            raise ValueError(f"x and xstar disagree on dimension: {self.x.d} vs {self.xstar.d}")
        if not 0 <= int(self.base_seed) < 2**64:
            raise ValueError(f"base_seed must be an unsigned 64-bit integer, got {self.base_seed}")


@dataclass(frozen=True)
class RankTally:
    """Histogram of ranks per (test point, output): counts[j, i, r].

    Every (j, i) slice sums to ``n_completed``.  Failed trial indices are
    carried so downstream verdicts can demote themselves to inconclusive.
    """

    counts: np.ndarray
    n_completed: int
    failed_indices: tuple = ()

    def __post_init__(self):
        c = np.array(self.counts, dtype=np.int64)
        if c.ndim != 3:
            raise ValueError(f"counts must be (m, p, L+1), got shape {c.shape}")
        c.flags.writeable = False
        object.__setattr__(self, "counts", c)
        object.__setattr__(self, "failed_indices", tuple(int(i) for i in self.failed_indices))

    @property
    def m(self) -> int:
        return self.counts.shape[0]

    @property
    def p(self) -> int:
        return self.counts.shape[1]

    @property
    def n_bins(self) -> int:
        return self.counts.shape[2]


def compute_rank(prior_value: float, posterior_values: np.ndarray, rng: np.random.Generator) -> int:
    """Rank of the prior value among posterior samples, ties broken uniformly.

    rank = #{samples < prior_value} + U with U uniform on {0..t} and t the
    number of exact ties.  No random draw is consumed when there are no
    ties, so continuous pipelines stay on a lean stream.
    """
    pv = np.asarray(posterior_values, dtype=np.float64)
    below = int(np.count_nonzero(pv < prior_value))
    ties = int(np.count_nonzero(pv == prior_value))
    if ties:
        below += int(rng.integers(0, ties + 1))
    return below


def _posterior_for(model: GpModel, x: InputPoints, y: np.ndarray, xstar: InputPoints):
    if isinstance(model.inference, Sparse):
        return sparse_posterior(model, x, y, xstar)
    return exact_posterior(model, x, y, xstar)


def run_trial(model: GpModel, config: SbcConfig, trial_index: int) -> np.ndarray:
    """Execute one calibration trial; returns the (m, p) rank matrix."""
    sim_rng = streams.trial_stream(config.base_seed, trial_index, streams.ROLE_SIMULATION)
    post_rng = streams.trial_stream(config.base_seed, trial_index, streams.ROLE_POSTERIOR)
    f, f_star = sample_prior_joint(model, config.x, config.xstar, sim_rng)
    y = simulate_observations(f, model.likelihood, sim_rng)
    post = _posterior_for(model, config.x, y, config.xstar)
    return rank_against_posterior(f_star, post, config.n_posterior, post_rng)


def rank_against_posterior(f_star: np.ndarray, post, n_posterior: int, post_rng: np.random.Generator) -> np.ndarray:
    """Draw L posterior samples and rank each held-out prior value.

    Shared by the plain engine and the marginalisation check so both
    consume the posterior stream identically (samples first, then any
    tie-break draws in output-major slice order).
    """
    m, p = f_star.shape
    draws = sample_posterior(post, n_posterior, post_rng)      # (L, m*p)
    prior_flat = f_star.T.reshape(-1)                          # output-major
    below = np.count_nonzero(draws < prior_flat[None, :], axis=0)
    ties = np.count_nonzero(draws == prior_flat[None, :], axis=0)
    ranks_flat = below.astype(np.int64)
    for idx in np.nonzero(ties)[0]:
        ranks_flat[idx] += int(post_rng.integers(0, ties[idx] + 1))
    return ranks_flat.reshape(p, m).T


def run_sbc(model: GpModel, config: SbcConfig, threads: int = 1) -> RankTally:
    """Run the full trial plan and tally ranks.

    Trials that fail numerically are recorded and skipped (never retried);
    if more than 1% fail the run aborts with the failing indices.
    """
    if threads < 1:
        raise ValueError(f"threads must be >= 1, got {threads}")
    m, p = config.xstar.n, model.p
    counts = np.zeros((m, p, config.n_posterior + 1), dtype=np.int64)
    failed = []

    def one(index: int):
        try:
            return index, run_trial(model, config, index)
        except NUMERICAL_FAILURES:
            return index, None

    if threads == 1:
        results = map(one, range(config.n_trials))
    else:
        pool = ThreadPoolExecutor(max_workers=threads)
        results = pool.map(one, range(config.n_trials))

    jj, ii = np.meshgrid(np.arange(m), np.arange(p), indexing="ij")
    for index, ranks in results:
        if ranks is None:
            failed.append(index)
            continue
        np.add.at(counts, (jj, ii, ranks), 1)
    if threads > 1:
        pool.shutdown()

    if len(failed) > FAILURE_BUDGET * config.n_trials:
        raise SbcRunError(sorted(failed))
    return RankTally(
        counts=counts,
        n_completed=config.n_trials - len(failed),
        failed_indices=tuple(sorted(failed)),
    )


def pool_tally(tally: RankTally, mode: str) -> np.ndarray:
    """Aggregate the tally: 'per_output' -> (p, L+1); 'single' -> (L+1,)."""
    if mode == "per_output":
        return tally.counts.sum(axis=0)
    if mode == "single":
        return tally.counts.sum(axis=(0, 1))
    raise ValueError(f"pooling mode must be 'per_output' or 'single', got {mode!r}")


def posterior_correlation(model: GpModel, config: SbcConfig) -> np.ndarray:
    """Within-trial correlation of the (m*p) rank coordinates under the model.

    The Gaussian posterior covariance at the test points does not depend on
    the observed data, so the correlation the pooled Monte Carlo null needs
    is computable up front from a posterior at y = 0.  Faults that act on
    the covariance flow through, matching what the pipeline under test
    actually samples from.
    """
    y0 = np.zeros((config.x.n, model.p))
    post = _posterior_for(model, config.x, y0, config.xstar)
    cov = post.cov.values
    scale = np.sqrt(np.clip(np.diag(cov), 1e-300, None))
    corr = cov / np.outer(scale, scale)
    corr = np.clip(0.5 * (corr + corr.T), -1.0, 1.0)
    np.fill_diagonal(corr, 1.0)
    return corr
