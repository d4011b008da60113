"""Uniformity diagnostics for rank tallies.

The analytic chi-square p-value is authoritative only per slice: a single
(test point, output) histogram really is a plain multinomial over ranks.
Pooled histograms are not (within one trial the rank coordinates share a
prior function draw and are strongly correlated), so pooled verdicts rest
on a Monte Carlo calibrated p-value that simulates the null tally
distribution and ranks the observed statistic within it.

Shape descriptors (ECDF envelope, valley score) say *how* a histogram
deviates; the valley score separates the U shape of an overconfident
posterior from the central dome of a conservative one.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

# --- regularized incomplete gamma, hand-rolled -------------------------------
#
# Q(a, x) = Gamma(a, x) / Gamma(a).  For chi-square survival values the
# argument ranges are tame (a = dof/2 up to a few hundred, x >= 0) and the
# classic series / continued-fraction pair converges quickly.  Target
# absolute error 1e-10.

_GAMMA_TOL = 1e-14
_GAMMA_MAX_ITER = 10_000


def regularized_gamma_q(a: float, x: float) -> float:
    """Upper regularized incomplete gamma Q(a, x), a > 0, x >= 0."""
    if a <= 0:
        raise ValueError(f"shape parameter must be positive, got {a}")
    if x < 0:
        raise ValueError(f"argument must be nonnegative, got {x}")
    if x == 0.0:
        return 1.0
    if x < a + 1.0:
        return 1.0 - _gamma_p_series(a, x)
    return _gamma_q_contfrac(a, x)


def _log_prefactor(a: float, x: float) -> float:
    # log(x^a e^-x / Gamma(a))
    return a * math.log(x) - x - math.lgamma(a)


def _gamma_p_series(a: float, x: float) -> float:
    """P(a, x) by the ascending series, stable for x < a + 1."""
    term = 1.0 / a
    total = term
    denom = a
    for _ in range(_GAMMA_MAX_ITER):
        denom += 1.0
        term *= x / denom
        total += term
        if abs(term) < abs(total) * _GAMMA_TOL:
            break
    else:
        raise RuntimeError(f"gamma series failed to converge for a={a}, x={x}")
    return total * math.exp(_log_prefactor(a, x))


def _gamma_q_contfrac(a: float, x: float) -> float:
    """Q(a, x) by the Lentz continued fraction, for x >= a + 1."""
    tiny = 1e-300
    b = x + 1.0 - a
    c = 1.0 / tiny
    d = 1.0 / (b if b != 0.0 else tiny)
    h = d
    for i in range(1, _GAMMA_MAX_ITER + 1):
        an = -i * (i - a)
        b += 2.0
        d = an * d + b
        if abs(d) < tiny:
            d = tiny
        c = b + an / c
        if abs(c) < tiny:
            c = tiny
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < _GAMMA_TOL:
            break
    else:
        raise RuntimeError(f"gamma continued fraction failed to converge for a={a}, x={x}")
    return math.exp(_log_prefactor(a, x)) * h


def chi2_sf(stat: float, dof: int) -> float:
    """Chi-square survival function P(X >= stat) via Q(dof/2, stat/2)."""
    if dof < 1:
        raise ValueError(f"degrees of freedom must be >= 1, got {dof}")
    if stat < 0:
        return 1.0
    return regularized_gamma_q(dof / 2.0, stat / 2.0)


# --- statistics on a single histogram ----------------------------------------


def rebin(counts: np.ndarray, n_bins: int) -> np.ndarray:
    """Collapse rank histograms on the trailing axis into n_bins bins.

    Rank r lands in bin floor(r * n_bins / n_ranks); bin sizes differ by at
    most one and the total count is conserved.  Requires 2 <= n_bins <=
    n_ranks.
    """
    counts = np.asarray(counts)
    n_ranks = counts.shape[-1]
    if n_bins < 2:
        raise ValueError(f"n_bins must be >= 2, got {n_bins}")
    if n_bins > n_ranks:
        raise ValueError(f"n_bins must be <= {n_ranks}, got {n_bins}")
    dest = (np.arange(n_ranks) * n_bins) // n_ranks
    out = np.zeros(counts.shape[:-1] + (n_bins,), dtype=counts.dtype)
    np.add.at(out, (..., dest), counts)
    return out


def chi_square_uniformity(counts: np.ndarray) -> tuple:
    """Pearson chi-square of a 1-d histogram against the uniform multinomial.

    Returns (statistic, dof, p_value).  The p-value is trustworthy only
    when the contributing trials are independent per count; pooled rank
    histograms need the Monte Carlo calibration instead.
    """
    counts = np.asarray(counts, dtype=np.float64)
    if counts.ndim != 1:
        raise ValueError(f"expected a 1-d histogram, got shape {counts.shape}")
    n_bins = counts.shape[0]
    if n_bins < 2:
        raise ValueError(f"need at least 2 bins, got {n_bins}")
    total = counts.sum()
    if total <= 0:
        raise ValueError("empty histogram")
    expected = total / n_bins
    stat = float(np.sum((counts - expected) ** 2) / expected)
    dof = n_bins - 1
    return stat, dof, chi2_sf(stat, dof)


def valley_score(counts: np.ndarray) -> float:
    """Mean outer-decile bin height over mean central-quintile bin height.

    The outer band takes floor(0.10 B) bins from each end; the central band
    takes floor(0.20 B) bins around the middle, widened by one bin when the
    leftover is odd so the band stays mirror symmetric.  Uniform counts
    score exactly 1; well above 1 means rank mass piles at the extremes
    (posterior too narrow); well below 1 means a central dome (too wide).
    Returns +inf when the central band is empty, which callers must treat
    as a degenerate histogram rather than evidence.
    """
    counts = np.asarray(counts, dtype=np.float64)
    if counts.ndim != 1:
        raise ValueError(f"expected a 1-d histogram, got shape {counts.shape}")
    if counts.sum() < 1:
        raise ValueError("empty histogram")
    n_bins = counts.shape[0]
    outer = n_bins // 10
    central = n_bins // 5
    if outer < 1 or central < 1:
        raise ValueError(f"histogram too coarse for a valley score: {n_bins} bins")
    if (n_bins - central) % 2 == 1:
        central += 1
    lo = (n_bins - central) // 2
    outer_mean = (counts[:outer].sum() + counts[-outer:].sum()) / (2 * outer)
    central_mean = counts[lo : lo + central].mean()
    if central_mean == 0.0:
        return math.inf
    return float(outer_mean / central_mean)


def ecdf_max_deviation(counts: np.ndarray) -> float:
    """Max |ECDF - uniform CDF| over rank-bin right edges."""
    counts = np.asarray(counts, dtype=np.float64)
    total = counts.sum()
    if total <= 0:
        raise ValueError("empty histogram")
    n_bins = counts.shape[0]
    ecdf = np.cumsum(counts) / total
    grid = np.arange(1, n_bins + 1) / n_bins
    return float(np.max(np.abs(ecdf - grid)))


def chi_square_stat_fn(n_bins: int):
    """Statistic for the MC calibration: chi-square after rebinning."""

    def stat(counts: np.ndarray) -> float:
        return chi_square_uniformity(rebin(counts, n_bins))[0]

    return stat


# --- Monte Carlo null machinery ----------------------------------------------


def _null_multinomial(total: int, n_ranks: int, reps: int, rng: np.random.Generator) -> np.ndarray:
    """(reps, n_ranks) tallies of `total` iid uniform ranks each.

    Sums of independent uniform multinomials are again multinomial, so one
    draw per rep covers any pooling level of the iid null.
    """
    probs = np.full(n_ranks, 1.0 / n_ranks)
    return rng.multinomial(total, probs, size=reps)


def _null_correlated(n_trials: int, n_ranks: int, reps: int, correlation: np.ndarray,
                     rng: np.random.Generator) -> np.ndarray:
    """(reps, n_slices, n_ranks) null tallies for correlated rank coordinates.

    Under a correct posterior, coordinate k's rank compares one scalar draw
    delta_k against L independent posterior draws, all sharing the same
    cross-coordinate correlation C.  Ranks are invariant to per-coordinate
    location and scale, so simulating delta, e_1..e_L ~ N(0, C) and ranking
    reproduces the joint null tally distribution exactly.
    """
    corr = np.asarray(correlation, dtype=np.float64)
    if corr.ndim != 2 or corr.shape[0] != corr.shape[1]:
        raise ValueError(f"correlation must be square, got shape {corr.shape}")
    n_slices = corr.shape[0]
    n_post = n_ranks - 1
    factor = None
    for jitter in (0.0, 1e-12, 1e-10, 1e-8):
        try:
            factor = np.linalg.cholesky(corr + jitter * np.eye(n_slices))
            break
        except np.linalg.LinAlgError:
            continue
    if factor is None:
        raise np.linalg.LinAlgError("correlation matrix is not positive definite")

    out = np.zeros((reps, n_slices, n_ranks), dtype=np.int64)
    cols = np.arange(n_slices)
    chunk = max(1, 4_000_000 // ((n_post + 1) * n_slices))
    for rep in range(reps):
        done = 0
        while done < n_trials:
            step = min(chunk, n_trials - done)
            z = rng.standard_normal((step, n_post + 1, n_slices))
            w = z @ factor.T
            delta = w[:, 0, :]
            ranks = np.count_nonzero(w[:, 1:, :] < delta[:, None, :], axis=1)
            np.add.at(out[rep], (np.broadcast_to(cols, ranks.shape), ranks), 1)
            done += step
    return out


def mc_calibrated_pvalue(tally, pooling: str, stat_fn, mc_reps: int,
                         rng: np.random.Generator, correlation=None,
                         null_stats=None) -> tuple:
    """Monte Carlo calibrated p-value(s) for a rank tally.

    `tally` is a RankTally or an (m, p, n_ranks) count array; `stat_fn`
    maps a pooled 1-d histogram to a scalar statistic.  Pooling modes:

    - "single":      one statistic on the fully pooled histogram;
    - "per_output":  one per output, pooled over test points;
    - "per_slice":   one per (test point, output), unpooled.

    Null tallies mirror the pooling: iid uniform ranks per slice by
    default, or ("single" and "per_output" only) jointly Gaussian rank
    coordinates with the given correlation matrix (full, respectively the
    output's diagonal block), which is the exact null when trials share a
    prior draw across slices.  Per-slice nulls are always iid: a single
    coordinate's marginal rank is uniform regardless of correlation.

    p = (1 + #{null >= observed}) / (n_null + 1), elementwise over the
    pooling units; a precomputed `null_stats` array (the third element of
    a previous return) bypasses simulation, letting many tallies of the
    same shape share one null sample; mc_reps is then ignored.

    Verdict-grade calls should use mc_reps >= 999 (the report pipeline
    does); smaller values are for exploratory work only.

    Returns (p_value_mc, observed_stat, null_stats) with p and stat
    scalars for "single", shape (p,) for "per_output", (m, p) for
    "per_slice"; null_stats is (n_null,) or (n_null, p).
    """
    counts = np.asarray(getattr(tally, "counts", tally))
    if counts.ndim != 3:
        raise ValueError(f"expected (m, p, n_ranks) counts, got shape {counts.shape}")
    m, p, n_ranks = counts.shape
    totals = counts.sum(axis=2)
    if np.any(totals != totals.flat[0]):
        raise ValueError("slices disagree on trial count; tally is malformed")
    n_trials = int(totals.flat[0])

    if pooling == "single":
        observed = float(stat_fn(counts.sum(axis=(0, 1))))
        if null_stats is None:
            if correlation is None:
                sims = _null_multinomial(n_trials * m * p, n_ranks, mc_reps, rng)
                null_stats = np.array([stat_fn(t) for t in sims])
            else:
                corr = _check_correlation(correlation, m * p)
                sims = _null_correlated(n_trials, n_ranks, mc_reps, corr, rng)
                null_stats = np.array([stat_fn(t.sum(axis=0)) for t in sims])
        else:
            null_stats = np.asarray(null_stats, dtype=np.float64)
        p_mc = _mc_rank(null_stats, observed)
        return p_mc, observed, null_stats

    if pooling == "per_output":
        observed = np.array([stat_fn(counts[:, i, :].sum(axis=0)) for i in range(p)])
        if null_stats is None:
            if correlation is None:
                sims = _null_multinomial(n_trials * m, n_ranks, mc_reps, rng)
                shared = np.array([stat_fn(t) for t in sims])
                null_stats = np.tile(shared[:, None], (1, p))
            else:
                corr = _check_correlation(correlation, m * p)
                cols = []
                for i in range(p):
                    block = corr[i * m : (i + 1) * m, i * m : (i + 1) * m]
                    sims = _null_correlated(n_trials, n_ranks, mc_reps, block, rng)
                    cols.append([stat_fn(t.sum(axis=0)) for t in sims])
                null_stats = np.array(cols).T
        else:
            null_stats = np.asarray(null_stats, dtype=np.float64)
            if null_stats.ndim == 1:
                null_stats = np.tile(null_stats[:, None], (1, p))
        p_mc = np.array([_mc_rank(null_stats[:, i], observed[i]) for i in range(p)])
        return p_mc, observed, null_stats

    if pooling == "per_slice":
        observed = np.array([[stat_fn(counts[j, i, :]) for i in range(p)] for j in range(m)])
        if null_stats is None:
            sims = _null_multinomial(n_trials, n_ranks, mc_reps, rng)
            null_stats = np.array([stat_fn(t) for t in sims])
        else:
            null_stats = np.asarray(null_stats, dtype=np.float64)
        p_mc = np.array([[_mc_rank(null_stats, observed[j, i]) for i in range(p)] for j in range(m)])
        return p_mc, observed, null_stats

    raise ValueError(f"pooling must be 'single', 'per_output' or 'per_slice', got {pooling!r}")


def _mc_rank(null_stats: np.ndarray, observed: float) -> float:
    return float((1.0 + np.count_nonzero(null_stats >= observed)) / (null_stats.size + 1.0))


def _check_correlation(correlation, expected: int) -> np.ndarray:
    corr = np.asarray(correlation, dtype=np.float64)
    if corr.ndim != 2 or corr.shape[0] != corr.shape[1]:
        raise ValueError(f"correlation must be square, got shape {corr.shape}")
    if corr.shape[0] != expected:
        raise ValueError(
            f"correlation is {corr.shape[0]}x{corr.shape[0]} but the tally has {expected} slices "
            "(output-major order expected)"
        )
    return corr


def _ecdf_band(counts: np.ndarray, alpha: float, mc_reps: int,
               rng: np.random.Generator) -> tuple:
    """(violations, halfwidth) for the simultaneous ECDF envelope."""
    counts = np.asarray(counts, dtype=np.float64)
    total = int(counts.sum())
    if total <= 0:
        raise ValueError("empty histogram")
    if not 0 < alpha < 0.5:
        raise ValueError(f"alpha must be in (0, 0.5), got {alpha}")
    n_ranks = counts.shape[0]
    half = _ecdf_band_halfwidth(total, n_ranks, alpha, mc_reps, rng)
    ecdf = np.cumsum(counts) / total
    grid = np.arange(1, n_ranks + 1) / n_ranks
    violations = int(np.count_nonzero(np.abs(ecdf - grid) > half))
    return violations, half


def _ecdf_band_halfwidth(total: int, n_ranks: int, alpha: float, mc_reps: int,
                         rng: np.random.Generator) -> float:
    nulls = _null_multinomial(total, n_ranks, mc_reps, rng)
    cdfs = np.cumsum(nulls, axis=1) / total
    grid = np.arange(1, n_ranks + 1) / n_ranks
    devs = np.max(np.abs(cdfs - grid), axis=1)
    return float(np.quantile(devs, 1.0 - alpha))


def ecdf_band_check(counts: np.ndarray, alpha: float, mc_reps: int,
                    rng: np.random.Generator) -> int:
    """Count the rank positions where the ECDF leaves a simultaneous band.

    The envelope half-width is the (1 - alpha) quantile of the max ECDF
    deviation over mc_reps iid-uniform null histograms with the same total
    count.  Zero violations is consistent with uniformity at level alpha.
    """
    violations, _ = _ecdf_band(counts, alpha, mc_reps, rng)
    return violations


# --- report assembly ----------------------------------------------------------


@dataclass(frozen=True)
class DiagnosticsConfig:
    alpha: float = 0.01
    n_bins: int | None = None          # None: min(n_ranks, 101)
    mc_reps: int = 1999
    band_alpha: float = 0.05
    band_reps: int = 999

    def __post_init__(self):
        if not 0 < self.alpha < 1:
            raise ValueError(f"alpha must be in (0, 1), got {self.alpha}")
        if self.n_bins is not None and self.n_bins < 2:
            raise ValueError(f"bins must be >= 2, got {self.n_bins}")
        if self.mc_reps < 999:
            raise ValueError(f"mc_reps must be >= 999 for verdict-grade calibration, got {self.mc_reps}")
        if not 0 < self.band_alpha < 0.5:
            raise ValueError(f"band_alpha must be in (0, 0.5), got {self.band_alpha}")
        if self.band_reps < 99:
            raise ValueError(f"band_reps must be >= 99, got {self.band_reps}")

    def bins_for(self, n_ranks: int) -> int:
        return self.n_bins if self.n_bins is not None else min(n_ranks, 101)


@dataclass(frozen=True)
class UniformityReport:
    """Verdict and evidence for one (possibly pooled) rank histogram.

    `p_value` is the analytic chi-square tail, authoritative only for
    unpooled slices; `p_value_mc` drives the verdict everywhere.  A report
    is demoted to inconclusive (never promoted to pass) when trials were
    dropped or the histogram is too degenerate for a valley score.
    """

    verdict: str                       # "pass" | "fail" | "inconclusive"
    chi2_stat: float
    dof: int
    p_value: float
    p_value_mc: float
    band_violations: int
    valley_score: float
    band_halfwidth: float
    n_bins: int
    total_count: int
    n_failed_trials: int = 0
    label: str = "pooled"


def _verdict(p_mc: float, alpha: float, valley: float, n_failed: int) -> str:
    if p_mc < alpha:
        return "fail"
    if math.isinf(valley) or n_failed > 0:
        return "inconclusive"
    return "pass"


def _report_for_histogram(pooled: np.ndarray, p_mc: float, stat: float,
                          config: DiagnosticsConfig, n_bins: int,
                          band_halfwidth: float, n_failed: int, label: str) -> UniformityReport:
    binned = rebin(pooled, n_bins)
    _, dof, p_asym = chi_square_uniformity(binned)
    valley = valley_score(binned)
    total = int(pooled.sum())
    ecdf = np.cumsum(pooled) / total
    grid = np.arange(1, pooled.shape[0] + 1) / pooled.shape[0]
    violations = int(np.count_nonzero(np.abs(ecdf - grid) > band_halfwidth))
    return UniformityReport(
        verdict=_verdict(p_mc, config.alpha, valley, n_failed),
        chi2_stat=stat,
        dof=dof,
        p_value=p_asym,
        p_value_mc=p_mc,
        band_violations=violations,
        valley_score=valley,
        band_halfwidth=band_halfwidth,
        n_bins=n_bins,
        total_count=total,
        n_failed_trials=n_failed,
        label=label,
    )


def build_reports(tally, config: DiagnosticsConfig, rng: np.random.Generator,
                  correlation=None, pooled_null_stats=None) -> dict:
    """Full diagnostic suite for a RankTally.

    Returns {"pooled": report, "per_output": [...], "per_slice": [[...]]}
    with per_slice indexed [test_point][output].  The pooled and
    per-output calibrations use the correlated null when a correlation
    matrix is supplied (output-major coordinate order, matching the
    flattened posterior layout); per-slice calibrations always use the
    exact iid null.  `pooled_null_stats` (from a previous call or from
    mc_calibrated_pvalue) lets runs of identical shape share the pooled
    null sample.
    """
    counts = np.asarray(getattr(tally, "counts", tally))
    m, p, n_ranks = counts.shape
    n_failed = len(getattr(tally, "failed_indices", ()))
    n_trials = int(counts[0, 0].sum())
    n_bins = config.bins_for(n_ranks)
    stat_fn = chi_square_stat_fn(n_bins)

    p_pool, stat_pool, pooled_nulls = mc_calibrated_pvalue(
        counts, "single", stat_fn, config.mc_reps, rng,
        correlation=correlation, null_stats=pooled_null_stats,
    )
    if p == 1:
        # the single output's pooled histogram is the pooled histogram
        p_out = np.array([p_pool])
        stat_out = np.array([stat_pool])
    else:
        p_out, stat_out, _ = mc_calibrated_pvalue(
            counts, "per_output", stat_fn, config.mc_reps, rng, correlation=correlation,
        )
    p_slice, stat_slice, _ = mc_calibrated_pvalue(
        counts, "per_slice", stat_fn, config.mc_reps, rng,
    )

    half_pool = _ecdf_band_halfwidth(n_trials * m * p, n_ranks, config.band_alpha,
                                     config.band_reps, rng)
    half_out = half_pool if p == 1 else _ecdf_band_halfwidth(
        n_trials * m, n_ranks, config.band_alpha, config.band_reps, rng)
    half_slice = half_out if m == 1 else _ecdf_band_halfwidth(
        n_trials, n_ranks, config.band_alpha, config.band_reps, rng)

    pooled_report = _report_for_histogram(
        counts.sum(axis=(0, 1)), p_pool, stat_pool, config, n_bins, half_pool,
        n_failed, "pooled",
    )
    per_output = [
        _report_for_histogram(
            counts[:, i, :].sum(axis=0), float(p_out[i]), float(stat_out[i]),
            config, n_bins, half_out, n_failed, f"output_{i}",
        )
        for i in range(p)
    ]
    per_slice = [
        [
            _report_for_histogram(
                counts[j, i, :], float(p_slice[j, i]), float(stat_slice[j, i]),
                config, n_bins, half_slice, n_failed, f"point_{j}_output_{i}",
            )
            for i in range(p)
        ]
        for j in range(m)
    ]
    return {
        "pooled": pooled_report,
        "per_output": per_output,
        "per_slice": per_slice,
        "pooled_null_stats": pooled_nulls,
    }


def valley_threshold_null_quantile(total: int, n_ranks: int, n_bins: int,
                                   reps: int, rng: np.random.Generator,
                                   quantile: float = 0.95) -> float:
    """Null quantile of the valley score for a given pooled-histogram shape.

    Used to recalibrate the overconfidence threshold when the histogram
    geometry differs from the default (4000 pooled counts, 101 bins) the
    stock threshold was tuned on.
    """
    nulls = _null_multinomial(total, n_ranks, reps, rng)
    scores = np.array([valley_score(rebin(t, n_bins)) for t in nulls])
    return float(np.quantile(scores, quantile))
