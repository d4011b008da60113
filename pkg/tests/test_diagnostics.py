import math

import numpy as np
import pytest
import scipy.special
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from gpsbc.diagnostics import (
    DiagnosticsConfig,
    build_reports,
    chi2_sf,
    chi_square_stat_fn,
    chi_square_uniformity,
    ecdf_band_check,
    ecdf_max_deviation,
    mc_calibrated_pvalue,
    rebin,
    regularized_gamma_q,
    valley_score,
    valley_threshold_null_quantile,
)
from gpsbc.engine import RankTally, SbcConfig, posterior_correlation, run_sbc
from gpsbc.kernels import InputPoints, SquaredExponential
from gpsbc.models import GaussianLikelihood, GpModel, ScaledPosteriorVariance


# ----------------------------------------------------------- incomplete gamma

def test_gamma_q_against_scipy():
    """The hand-rolled Q(a, x) must track scipy's gammaincc to 1e-10."""
    for a in (0.5, 1.0, 1.5, 2.5, 5.0, 10.0, 50.0, 150.0):
        for x in (0.0, 1e-6, 0.1, 0.5, 1.0, 2.0, 5.0, 20.0, 100.0, 400.0):
            mine = regularized_gamma_q(a, x)
            ref = scipy.special.gammaincc(a, x)
            assert abs(mine - ref) < 1e-10, (a, x, mine, ref)


def test_gamma_q_boundaries():
    assert regularized_gamma_q(3.0, 0.0) == 1.0
    assert regularized_gamma_q(1.0, 700.0) < 1e-300
    # Q(1, x) = exp(-x) exactly
    assert regularized_gamma_q(1.0, 2.0) == pytest.approx(math.exp(-2.0), rel=1e-13)
    with pytest.raises(ValueError):
        regularized_gamma_q(0.0, 1.0)
    with pytest.raises(ValueError):
        regularized_gamma_q(1.0, -0.5)


@settings(deadline=None, max_examples=100)
@given(
    st.floats(min_value=0.25, max_value=200.0),
    st.floats(min_value=0.0, max_value=500.0),
)
def test_gamma_q_matches_scipy_everywhere(a, x):
    assert regularized_gamma_q(a, x) == pytest.approx(
        scipy.special.gammaincc(a, x), abs=1e-10
    )


def test_chi2_sf_frozen_values():
    # classic table entry: chi2 with 2 dof at 4.605 leaves 10% in the tail
    assert chi2_sf(4.605, 2) == pytest.approx(0.10000850966145569, abs=1e-14)
    assert chi2_sf(2.0, 3) == pytest.approx(0.5724067044708797, abs=1e-14)
    assert chi2_sf(0.0, 5) == 1.0
    assert chi2_sf(-1.0, 5) == 1.0
    with pytest.raises(ValueError):
        chi2_sf(1.0, 0)


# ------------------------------------------------------------------- rebin

def test_rebin_101_to_20():
    counts = np.ones(101, dtype=np.int64)
    binned = rebin(counts, 20)
    assert binned.shape == (20,)
    assert binned.sum() == 101
    assert set(binned.tolist()) == {5, 6}  # bin sizes differ by at most one


def test_rebin_identity_and_edges():
    counts = np.arange(7)
    np.testing.assert_array_equal(rebin(counts, 7), counts)
    with pytest.raises(ValueError):
        rebin(counts, 1)
    with pytest.raises(ValueError):
        rebin(counts, 8)


def test_rebin_trailing_axis():
    counts = np.arange(2 * 3 * 10).reshape(2, 3, 10)
    binned = rebin(counts, 5)
    assert binned.shape == (2, 3, 5)
    np.testing.assert_array_equal(binned.sum(axis=-1), counts.sum(axis=-1))


@settings(deadline=None, max_examples=60)
@given(
    arrays(np.int64, st.integers(min_value=2, max_value=60),
           elements=st.integers(min_value=0, max_value=1000)),
    st.data(),
)
def test_rebin_conserves_counts(counts, data):
    n_bins = data.draw(st.integers(min_value=2, max_value=counts.shape[0]))
    binned = rebin(counts, n_bins)
    assert binned.sum() == counts.sum()
    assert binned.shape == (n_bins,)
    assert np.all(binned >= 0)


# -------------------------------------------------------------------- chi^2

def test_chi_square_uniformity_frozen():
    stat, dof, p = chi_square_uniformity(np.array([30, 20, 25, 25]))
    assert stat == pytest.approx(2.0, abs=1e-14)
    assert dof == 3
    assert p == pytest.approx(0.5724067044708797, abs=1e-13)


def test_chi_square_uniformity_exact_uniform_is_zero():
    stat, dof, p = chi_square_uniformity(np.full(10, 50))
    assert stat == 0.0 and dof == 9 and p == 1.0


def test_chi_square_all_mass_one_bin():
    # all T counts in one of B bins: stat = T (B - 1)
    counts = np.zeros(5, dtype=int)
    counts[2] = 40
    stat, _, _ = chi_square_uniformity(counts)
    assert stat == pytest.approx(40 * 4, abs=1e-12)


def test_chi_square_validation():
    with pytest.raises(ValueError):
        chi_square_uniformity(np.zeros(4))
    with pytest.raises(ValueError):
        chi_square_uniformity(np.array([5]))
    with pytest.raises(ValueError):
        chi_square_uniformity(np.ones((2, 2)))


def test_chi_square_stat_fn_composes():
    counts = np.arange(101)
    fn = chi_square_stat_fn(20)
    assert fn(counts) == chi_square_uniformity(rebin(counts, 20))[0]


# ------------------------------------------------------------------- valley

def test_valley_score_parabola_frozen():
    """Quadratic histogram over 101 bins, checked by explicit band sums:
    outer mean 2078.5, central mean 770/21."""
    counts = (np.arange(101) - 50) ** 2
    expected = 2078.5 / (770.0 / 21.0)
    assert valley_score(counts) == pytest.approx(expected, rel=1e-15)
    assert valley_score(counts) == pytest.approx(56.68636363636364, rel=1e-15)


def test_valley_score_uniform_is_one():
    assert valley_score(np.full(101, 7)) == 1.0
    assert valley_score(np.full(20, 3)) == 1.0


def test_valley_score_reversal_invariant():
    rng = np.random.default_rng(0)
    counts = rng.integers(0, 50, size=101)
    counts[counts.shape[0] // 2] += 1  # keep the central band nonzero
    assert valley_score(counts) == valley_score(counts[::-1])


def test_valley_score_direction():
    base = np.full(50, 10)
    u_shape = base.copy()
    u_shape[:5] += 90
    u_shape[-5:] += 90
    dome = base.copy()
    dome[20:30] += 90
    assert valley_score(u_shape) > 1.5
    assert valley_score(dome) < 0.8


def test_valley_score_empty_central_band_is_inf():
    counts = np.zeros(101, dtype=int)
    counts[0] = 5
    counts[100] = 5
    assert math.isinf(valley_score(counts))


def test_valley_score_validation():
    with pytest.raises(ValueError):
        valley_score(np.zeros(101))
    with pytest.raises(ValueError):
        valley_score(np.ones(4))  # too coarse: no outer decile bin


# ---------------------------------------------------------------------- ECDF

def test_ecdf_max_deviation_frozen():
    assert ecdf_max_deviation(np.array([0, 10])) == pytest.approx(0.5)
    assert ecdf_max_deviation(np.array([5, 5])) == pytest.approx(0.0)
    with pytest.raises(ValueError):
        ecdf_max_deviation(np.zeros(3))


def test_ecdf_band_uniform_data_passes():
    rng = np.random.default_rng(1)
    counts = rng.multinomial(5000, np.full(21, 1 / 21))
    violations = ecdf_band_check(counts, 0.05, 999, np.random.default_rng(2))
    assert violations == 0


def test_ecdf_band_flags_gross_nonuniformity():
    counts = np.zeros(21, dtype=int)
    counts[0] = 5000
    violations = ecdf_band_check(counts, 0.05, 999, np.random.default_rng(2))
    assert violations >= 20


def test_ecdf_band_deterministic_given_stream():
    counts = np.random.default_rng(3).multinomial(800, np.full(11, 1 / 11))
    a = ecdf_band_check(counts, 0.05, 500, np.random.default_rng(7))
    b = ecdf_band_check(counts, 0.05, 500, np.random.default_rng(7))
    assert a == b


# ------------------------------------------------------------- MC calibration

def small_tally(counts):
    counts = np.asarray(counts, dtype=np.int64)
    return RankTally(counts=counts, n_completed=int(counts[0, 0].sum()))


def test_mc_pvalue_add_one_rank_formula():
    # all mass in one rank: no null with 999 reps can match, so p = 1/1000
    counts = np.zeros((1, 1, 21), dtype=np.int64)
    counts[0, 0, 0] = 500
    p, observed, nulls = mc_calibrated_pvalue(
        small_tally(counts), "single", chi_square_stat_fn(21), 999,
        np.random.default_rng(0),
    )
    assert p == pytest.approx(1.0 / 1000.0)
    assert observed == pytest.approx(500 * 20, rel=1e-12)
    assert nulls.shape == (999,)


def test_mc_pvalue_uniform_tally_not_extreme():
    rng = np.random.default_rng(5)
    counts = rng.multinomial(2000, np.full(21, 1 / 21)).reshape(1, 1, 21)
    p, _, _ = mc_calibrated_pvalue(
        small_tally(counts), "single", chi_square_stat_fn(21), 999,
        np.random.default_rng(1),
    )
    assert p > 0.01


def test_mc_pvalues_uniform_under_iid_null():
    """Calibration self-test: under the iid null the MC p-value itself is
    (discretely) uniform.  200 null tallies against one shared null sample;
    the p-value ECDF must stay within KS distance 0.12 of uniform."""
    stat_fn = chi_square_stat_fn(21)
    sim_rng = np.random.default_rng(10)
    shared = None
    pvals = []
    for _ in range(200):
        counts = sim_rng.multinomial(400, np.full(21, 1 / 21)).reshape(1, 1, 21)
        p, _, shared = mc_calibrated_pvalue(
            small_tally(counts), "single", stat_fn, 999,
            np.random.default_rng(11), null_stats=shared,
        )
        pvals.append(p)
    pvals = np.sort(pvals)
    grid = np.arange(1, 201) / 200
    ks = np.max(np.abs(pvals - grid))
    assert ks < 0.12, ks


def test_mc_pvalue_null_stats_reuse_is_exact():
    counts = np.random.default_rng(2).multinomial(300, np.full(11, 1 / 11)).reshape(1, 1, 11)
    tally = small_tally(counts)
    stat_fn = chi_square_stat_fn(11)
    p1, s1, nulls = mc_calibrated_pvalue(tally, "single", stat_fn, 999, np.random.default_rng(3))
    p2, s2, _ = mc_calibrated_pvalue(
        tally, "single", stat_fn, 999, np.random.default_rng(99), null_stats=nulls,
    )
    assert p1 == p2 and s1 == s2


def test_mc_pvalue_per_output_shapes():
    rng = np.random.default_rng(4)
    counts = rng.multinomial(200, np.full(11, 1 / 11), size=(3, 2))
    p, observed, nulls = mc_calibrated_pvalue(
        small_tally(counts), "per_output", chi_square_stat_fn(11), 999,
        np.random.default_rng(5),
    )
    assert p.shape == (2,) and observed.shape == (2,)
    assert nulls.shape == (999, 2)
    # iid null is shared across outputs (sum of multinomials is multinomial)
    np.testing.assert_array_equal(nulls[:, 0], nulls[:, 1])


def test_mc_pvalue_per_slice_shapes():
    rng = np.random.default_rng(6)
    counts = rng.multinomial(150, np.full(11, 1 / 11), size=(3, 2))
    p, observed, nulls = mc_calibrated_pvalue(
        small_tally(counts), "per_slice", chi_square_stat_fn(11), 999,
        np.random.default_rng(7),
    )
    assert p.shape == (3, 2) and observed.shape == (3, 2)
    assert nulls.shape == (999,)
    assert np.all(p > 1 / 1000) and np.all(p <= 1.0)


def test_mc_pvalue_validates():
    counts = np.ones((2, 1, 5), dtype=np.int64)
    with pytest.raises(ValueError):
        mc_calibrated_pvalue(
            counts, "pooled", chi_square_stat_fn(5), 999, np.random.default_rng(0)
        )
    lopsided = counts.copy()
    lopsided[0, 0, 0] = 7  # slices disagree on total
    with pytest.raises(ValueError):
        mc_calibrated_pvalue(
            lopsided, "single", chi_square_stat_fn(5), 999, np.random.default_rng(0)
        )
    with pytest.raises(ValueError):
        mc_calibrated_pvalue(
            counts, "single", chi_square_stat_fn(5), 999, np.random.default_rng(0),
            correlation=np.eye(3),  # wrong size: tally has 2 slices
        )


def test_correlated_null_calibrates_pooled_pvalue():
    """A correct model pooled over correlated test points must NOT be
    rejected once the null carries the posterior correlation; the iid null
    would reject it almost surely."""
    model = GpModel(
        kernel=SquaredExponential(1.0, (0.5,)),
        likelihood=GaussianLikelihood((0.1,)),
    )
    config = SbcConfig(
        x=InputPoints(np.linspace(0, 1, 8)[:, None]),
        xstar=InputPoints(np.linspace(0.0625, 0.9375, 4)[:, None]),
        n_trials=500,
        n_posterior=19,
        base_seed=77,
    )
    tally = run_sbc(model, config)
    corr = posterior_correlation(model, config)
    stat_fn = chi_square_stat_fn(20)
    p_corr, _, _ = mc_calibrated_pvalue(
        tally, "single", stat_fn, 999, np.random.default_rng(8), correlation=corr,
    )
    p_iid, _, _ = mc_calibrated_pvalue(
        tally, "single", stat_fn, 999, np.random.default_rng(8),
    )
    assert p_corr > 0.01
    assert p_iid < p_corr  # ignoring correlation overstates the evidence


# ------------------------------------------------------------------- reports

def uniform_tally(m=2, p=1, n_ranks=21, total=400, seed=0, failed=()):
    rng = np.random.default_rng(seed)
    counts = rng.multinomial(total, np.full(n_ranks, 1 / n_ranks), size=(m, p))
    return RankTally(counts=counts, n_completed=total, failed_indices=failed)


def test_build_reports_structure_and_pass():
    config = DiagnosticsConfig(mc_reps=999, band_reps=199)
    reports = build_reports(uniform_tally(), config, np.random.default_rng(1))
    pooled = reports["pooled"]
    assert pooled.verdict == "pass"
    assert pooled.label == "pooled"
    assert pooled.n_bins == 21
    assert pooled.total_count == 800
    assert len(reports["per_output"]) == 1
    assert reports["per_output"][0].label == "output_0"
    assert len(reports["per_slice"]) == 2 and len(reports["per_slice"][0]) == 1
    assert reports["per_slice"][1][0].label == "point_1_output_0"
    assert reports["pooled_null_stats"].shape == (999,)


def test_build_reports_fail_verdict():
    counts = np.zeros((1, 1, 21), dtype=np.int64)
    counts[0, 0, 0] = 300
    counts[0, 0, 20] = 300
    tally = RankTally(counts=counts, n_completed=600)
    config = DiagnosticsConfig(mc_reps=999, band_reps=199)
    reports = build_reports(tally, config, np.random.default_rng(2))
    assert reports["pooled"].verdict == "fail"
    assert reports["pooled"].p_value_mc < 0.01
    assert reports["pooled"].valley_score > 1.0


def test_failed_trials_demote_pass_to_inconclusive():
    config = DiagnosticsConfig(mc_reps=999, band_reps=199)
    clean = build_reports(uniform_tally(), config, np.random.default_rng(3))
    assert clean["pooled"].verdict == "pass"
    flaky = build_reports(uniform_tally(failed=(4, 9)), config, np.random.default_rng(3))
    assert flaky["pooled"].verdict == "inconclusive"
    assert flaky["pooled"].n_failed_trials == 2


def test_failed_trials_do_not_mask_failure():
    counts = np.zeros((1, 1, 21), dtype=np.int64)
    counts[0, 0, 0] = 600
    tally = RankTally(counts=counts, n_completed=600, failed_indices=(1,))
    config = DiagnosticsConfig(mc_reps=999, band_reps=199)
    reports = build_reports(tally, config, np.random.default_rng(4))
    assert reports["pooled"].verdict == "fail"


def test_degenerate_histogram_is_inconclusive():
    # a single completed trial cannot look non-uniform (every null tally is
    # a lone count too), but its valley score is infinite: inconclusive.
    counts = np.zeros((1, 1, 21), dtype=np.int64)
    counts[0, 0, 0] = 1
    tally = RankTally(counts=counts, n_completed=1)
    config = DiagnosticsConfig(mc_reps=999, band_reps=199)
    reports = build_reports(tally, config, np.random.default_rng(5))
    assert math.isinf(reports["pooled"].valley_score)
    assert reports["pooled"].verdict == "inconclusive"


def test_build_reports_deterministic_given_stream():
    config = DiagnosticsConfig(mc_reps=999, band_reps=199)
    a = build_reports(uniform_tally(), config, np.random.default_rng(6))
    b = build_reports(uniform_tally(), config, np.random.default_rng(6))
    assert a["pooled"] == b["pooled"]
    assert a["per_slice"][0][0] == b["per_slice"][0][0]


def test_build_reports_shares_pooled_null():
    config = DiagnosticsConfig(mc_reps=999, band_reps=199)
    first = build_reports(uniform_tally(seed=1), config, np.random.default_rng(7))
    second = build_reports(
        uniform_tally(seed=2), config, np.random.default_rng(8),
        pooled_null_stats=first["pooled_null_stats"],
    )
    np.testing.assert_array_equal(
        second["pooled_null_stats"], first["pooled_null_stats"]
    )


def test_diagnostics_config_validation():
    with pytest.raises(ValueError):
        DiagnosticsConfig(alpha=0.0)
    with pytest.raises(ValueError):
        DiagnosticsConfig(n_bins=1)
    with pytest.raises(ValueError):
        DiagnosticsConfig(mc_reps=500)  # below verdict-grade floor
    with pytest.raises(ValueError):
        DiagnosticsConfig(band_reps=50)
    cfg = DiagnosticsConfig()
    assert cfg.bins_for(101) == 101
    assert cfg.bins_for(500) == 101
    assert cfg.bins_for(21) == 21
    assert DiagnosticsConfig(n_bins=20).bins_for(101) == 20


# ---------------------------------------------------------- valley threshold

def test_valley_threshold_null_quantile():
    rng = np.random.default_rng(9)
    q95 = valley_threshold_null_quantile(4000, 101, 101, 400, rng)
    assert 1.0 < q95 < 2.0
    again = valley_threshold_null_quantile(4000, 101, 101, 400, np.random.default_rng(9))
    assert q95 == again
    q99 = valley_threshold_null_quantile(
        4000, 101, 101, 400, np.random.default_rng(9), quantile=0.99
    )
    assert q99 >= q95
