"""Acceptance gate: one test per shipping criterion, one printed line each.

Each test prints "criterion k (<name>): PASS|FAIL <detail>" through the
capture bypass so the line is visible in any pytest run, then asserts.
Thresholds and replication counts are stated inline; randomized checks use
fixed seeds so the gate is deterministic.
"""

import json
import math
import os
import time
from dataclasses import replace

import numpy as np
import pytest

from gpsbc.cli import main
from gpsbc.config import parse_config
from gpsbc.diagnostics import (
    DiagnosticsConfig,
    build_reports,
    chi_square_stat_fn,
    mc_calibrated_pvalue,
    valley_score,
)
from gpsbc.engine import SbcConfig, posterior_correlation, run_sbc
from gpsbc.kernels import (
    InputPoints,
    LinearCoregionalization,
    SquaredExponential,
    eval_kernel,
)
from gpsbc.margcheck import (
    HyperPrior,
    OptimizerConfig,
    build_se_model,
    run_marg_check,
)
from gpsbc.models import (
    Exact,
    GaussianLikelihood,
    GpModel,
    Sparse,
    exact_posterior,
    log_marginal_likelihood,
    sample_prior_joint,
    simulate_observations,
    sparse_posterior,
)
from gpsbc.streams import AUX_DIAGNOSTICS, aux_stream


def _line(capsys, num: int, name: str, ok: bool, detail: str):
    with capsys.disabled():
        print(f"criterion {num} ({name}): {'PASS' if ok else 'FAIL'} [{detail}]")


def _random_kernel(rng, multi_output: bool):
    d = int(rng.integers(1, 3))
    if multi_output:
        q = int(rng.integers(1, 3))
        latents = tuple(
            SquaredExponential(
                float(rng.uniform(0.3, 3.0)),
                tuple(rng.uniform(0.2, 1.5, size=d)),
            )
            for _ in range(q)
        )
        p = int(rng.integers(2, 4))
        while True:
            w = rng.standard_normal((p, q))
            if np.all(np.any(w != 0.0, axis=1)):
                return LinearCoregionalization(latents, w), d, p
    kernel = SquaredExponential(
        float(rng.uniform(0.3, 3.0)), tuple(rng.uniform(0.2, 1.5, size=d))
    )
    return kernel, d, 1


def _random_instance(rng, multi_output: bool):
    kernel, d, p = _random_kernel(rng, multi_output)
    n = int(rng.integers(1, 6))
    m = int(rng.integers(1, 6))
    x = InputPoints(rng.uniform(0.0, 2.0, size=(n, d)))
    xstar = InputPoints(rng.uniform(0.0, 2.0, size=(m, d)))
    noise = tuple(rng.uniform(0.05, 0.5, size=p))
    y = rng.standard_normal((n, p))
    return kernel, x, xstar, noise, y


def _conditioning_oracle(kernel, x, xstar, noise, y):
    """Predictive moments by plain joint-Gaussian conditioning (np.linalg)."""
    n = x.n
    kxx = eval_kernel(kernel, x, x) + np.diag(np.repeat(noise, n))
    kxs = eval_kernel(kernel, x, xstar)
    kss = eval_kernel(kernel, xstar, xstar)
    yflat = np.asarray(y).T.reshape(-1)
    solve = np.linalg.solve(kxx, np.column_stack([yflat, kxs]))
    mean = kxs.T @ solve[:, 0]
    cov = kss - kxs.T @ solve[:, 1:]
    return mean, cov


def test_criterion_1_exact_posterior_oracle(capsys):
    rng = np.random.default_rng(20260819)
    start = time.perf_counter()
    worst = 0.0
    for i in range(200):
        kernel, x, xstar, noise, y = _random_instance(rng, multi_output=i % 3 == 0)
        model = GpModel(kernel, GaussianLikelihood(noise), Exact(), None)
        post = exact_posterior(model, x, y, xstar)
        mean, cov = _conditioning_oracle(kernel, x, xstar, noise, y)
        worst = max(worst, float(np.max(np.abs(post.mean - mean))),
                    float(np.max(np.abs(post.cov.values - cov))))
    elapsed = time.perf_counter() - start
    ok = worst < 1e-8 and elapsed < 10.0
    _line(capsys, 1, "exact posterior vs conditioning oracle", ok,
          f"200 instances, max abs err {worst:.2e}, {elapsed:.1f} s")
    assert ok


def test_criterion_2_sparse_collapse(capsys):
    rng = np.random.default_rng(20260820)
    start = time.perf_counter()
    worst = 0.0
    for i in range(50):
        kernel, x, xstar, noise, y = _random_instance(rng, multi_output=i % 3 == 0)
        exact = GpModel(kernel, GaussianLikelihood(noise), Exact(), None)
        sparse = GpModel(kernel, GaussianLikelihood(noise), Sparse(x), None)
        pe = exact_posterior(exact, x, y, xstar)
        ps = sparse_posterior(sparse, x, y, xstar)
        worst = max(worst, float(np.max(np.abs(ps.mean - pe.mean))),
                    float(np.max(np.abs(ps.cov.values - pe.cov.values))))
    elapsed = time.perf_counter() - start
    ok = worst < 1e-6 and elapsed < 10.0
    _line(capsys, 2, "sparse collapse at Z=X", ok,
          f"50 instances, max abs err {worst:.2e}, {elapsed:.1f} s")
    assert ok


def test_criterion_3_gradient_check(capsys):
    rng = np.random.default_rng(20260821)
    start = time.perf_counter()
    worst = 0.0
    h = 1e-6
    for _ in range(50):
        d = int(rng.integers(1, 3))
        n = int(rng.integers(2, 7))
        theta = rng.uniform(-1.5, 0.5, size=d + 2)
        x = InputPoints(rng.uniform(0.0, 2.0, size=(n, d)))
        y = rng.standard_normal(n)
        _, grad = log_marginal_likelihood(build_se_model(theta, d), x, y)
        for j in range(d + 2):
            bump = np.zeros(d + 2)
            bump[j] = h
            hi, _ = log_marginal_likelihood(
                build_se_model(theta + bump, d), x, y, with_grad=False)
            lo, _ = log_marginal_likelihood(
                build_se_model(theta - bump, d), x, y, with_grad=False)
            fd = (hi - lo) / (2 * h)
            rel = abs(grad[j] - fd) / max(abs(grad[j]), abs(fd), 1e-6)
            worst = max(worst, rel)
    elapsed = time.perf_counter() - start
    ok = worst < 1e-4 and elapsed < 10.0
    _line(capsys, 3, "marginal likelihood gradient vs finite differences", ok,
          f"50 instances, max rel err {worst:.2e}, {elapsed:.1f} s")
    assert ok


def test_criterion_4_null_calibration_at_reference_settings(capsys):
    cfg = parse_config("{}")  # N=1000, L=100, n=8, m=4, p=1, alpha=0.01
    start = time.perf_counter()
    corr = posterior_correlation(cfg.model, cfg.sbc)
    stat_fn = chi_square_stat_fn(cfg.diagnostics.bins_for(101))
    first = run_sbc(cfg.model, cfg.sbc)
    _, _, null = mc_calibrated_pvalue(first, "single", stat_fn,
                                      cfg.diagnostics.mc_reps,
                                      aux_stream(0, AUX_DIAGNOSTICS),
                                      correlation=corr)
    passes = 0
    for seed in range(100):
        tally = first if seed == 0 else run_sbc(
            cfg.model, replace(cfg.sbc, base_seed=seed))
        reports = build_reports(tally, cfg.diagnostics,
                                aux_stream(seed, AUX_DIAGNOSTICS),
                                correlation=corr, pooled_null_stats=null)
        passes += reports["pooled"].verdict == "pass"
    elapsed = time.perf_counter() - start
    ok = passes >= 95
    _line(capsys, 4, "null calibration, N=1000 L=100", ok,
          f"{passes}/100 seeds pass at alpha 0.01, {elapsed / 60:.1f} min")
    assert ok


def _contrast_configs():
    train = list(np.linspace(0.0, 1.0, 24))
    test = [0.0625 + 0.125 * k for k in range(4)]
    doc = {
        "model": {
            "kernel": {
                "type": "linear_coregionalization",
                "latent_kernels": [
                    {"type": "squared_exponential", "lengthscales": [0.5]},
                    {"type": "squared_exponential", "lengthscales": [0.25]},
                ],
                "mixing": [[1.0, 0.0], [0.0, 1.0]],
            },
            "inference": {"type": "sparse",
                          "inducing": list(np.linspace(0.0, 1.0, 12))},
        },
        "sbc": {"N": 250, "L": 20, "X": train, "Xstar": test},
    }
    clean = parse_config(json.dumps(doc))
    doc["model"]["fault"] = {"type": "scaled_posterior_variance",
                             "factor": 0.25}
    faulted = parse_config(json.dumps(doc))
    return clean, faulted


def test_criterion_5_fault_detection_contrast(capsys):
    clean, faulted = _contrast_configs()
    start = time.perf_counter()
    corr = posterior_correlation(clean.model, clean.sbc)
    stat_fn = chi_square_stat_fn(21)
    _, _, null = mc_calibrated_pvalue(
        run_sbc(clean.model, clean.sbc), "single", stat_fn, 1999,
        aux_stream(0, AUX_DIAGNOSTICS), correlation=corr)
    hits = 0
    for seed in range(100):
        sbc = replace(clean.sbc, base_seed=seed)
        bad = run_sbc(faulted.model, sbc)
        p_bad, _, _ = mc_calibrated_pvalue(bad, "single", stat_fn, 0,
                                           aux_stream(seed, AUX_DIAGNOSTICS),
                                           null_stats=null)
        good = run_sbc(clean.model, sbc)
        p_good, _, _ = mc_calibrated_pvalue(good, "single", stat_fn, 0,
                                            aux_stream(seed, AUX_DIAGNOSTICS),
                                            null_stats=null)
        pooled = good.counts.sum(axis=(0, 1))
        clean_passes = (p_good >= 0.01 and not good.failed_indices
                        and math.isfinite(valley_score(pooled)))
        hits += (p_bad < 1e-3) and clean_passes
    elapsed = time.perf_counter() - start
    ok = hits >= 95
    _line(capsys, 5, "fault detection contrast, 2-output sparse", ok,
          f"{hits}/100 seeds show fail-vs-pass contrast, {elapsed / 60:.1f} min")
    assert ok


def test_criterion_6_valley_direction(capsys):
    start = time.perf_counter()
    rates = {}
    for factor, predicate in ((0.25, lambda v: v > 1.2),
                              (4.0, lambda v: v < 0.8)):
        cfg = parse_config(json.dumps({
            "model": {"fault": {"type": "scaled_posterior_variance",
                                "factor": factor}},
            "sbc": {"N": 250, "L": 20},
        }))
        hits = 0
        for seed in range(100):
            tally = run_sbc(cfg.model, replace(cfg.sbc, base_seed=seed))
            hits += predicate(valley_score(tally.counts.sum(axis=(0, 1))))
        rates[factor] = hits
    elapsed = time.perf_counter() - start
    ok = rates[0.25] >= 90 and rates[4.0] >= 90
    _line(capsys, 6, "valley direction under variance faults", ok,
          f"factor 0.25: {rates[0.25]}/100 above 1.2; "
          f"factor 4.0: {rates[4.0]}/100 below 0.8; {elapsed:.0f} s")
    assert ok


MARG_PRIOR_MU = tuple(np.log([1.0, 0.5, 0.1]))
MARG_TEST_POINTS = InputPoints(np.array([[0.0625 + 0.125 * k] for k in range(4)]))


def _marg_scenario(n: int, n_trials: int, n_posterior: int,
                   optimizer: OptimizerConfig, seed: int):
    """One seeded replication: fresh dataset from the reference model,
    then the adequacy check on it."""
    x = InputPoints(np.linspace(0.0, 1.0, n)[:, None])
    gen = build_se_model(np.array(MARG_PRIOR_MU), 1)
    data_rng = np.random.default_rng(seed + 1_000_000)
    f, _ = sample_prior_joint(gen, x, InputPoints.empty(1), data_rng)
    y = simulate_observations(f, gen.likelihood, data_rng)[:, 0]
    sbc = SbcConfig(x=x, xstar=MARG_TEST_POINTS, n_trials=n_trials,
                    n_posterior=n_posterior, base_seed=seed)
    prior = HyperPrior(mu=MARG_PRIOR_MU, sigma=(1.0, 1.0, 1.0))
    return run_marg_check(x, y, prior, sbc, optimizer)


def test_criterion_7_marginalisation_check(capsys):
    start = time.perf_counter()
    small_opt = OptimizerConfig(max_iters=60, grad_tol=1e-4, restarts=5)
    big_opt = OptimizerConfig(max_iters=40, grad_tol=3e-5, restarts=3)
    needed = sum(
        _marg_scenario(3, 120, 50, small_opt, seed).verdict
        == "marginalisation_needed"
        for seed in range(100)
    )
    adequate = sum(
        _marg_scenario(200, 40, 50, big_opt, seed).verdict == "type2_adequate"
        for seed in range(100)
    )
    elapsed = time.perf_counter() - start
    ok = needed >= 80 and adequate >= 80
    _line(capsys, 7, "marginalisation adequacy scenarios", ok,
          f"n=3: {needed}/100 flagged; n=200: {adequate}/100 adequate; "
          f"{elapsed / 60:.1f} min")
    assert ok


THREADED_DOCS = {
    "sbc": {"sbc": {"N": 150, "L": 15, "base_seed": 7},
            "diagnostics": {"mc_reps": 999}},
    "demo-bug": {
        "model": {"fault": {"type": "scaled_posterior_variance",
                            "factor": 0.25}},
        "sbc": {"N": 200, "L": 15, "base_seed": 11},
        "diagnostics": {"mc_reps": 999},
    },
    "marg-check": {
        "data": {"x": [k / 7 for k in range(8)],
                 "y": [-0.24, 0.38, 0.9, 0.56, -0.09, -0.94, -0.95, -0.24]},
        "sbc": {"N": 40, "L": 20, "base_seed": 3},
        "optimizer": {"max_iters": 40, "grad_tol": 0.001, "restarts": 2},
        "diagnostics": {"mc_reps": 999},
    },
}


def test_criterion_8_thread_count_determinism(capsys, tmp_path):
    start = time.perf_counter()
    mismatches = []
    for command, doc in THREADED_DOCS.items():
        cfg_path = tmp_path / f"{command}.json"
        cfg_path.write_text(json.dumps(doc))
        outs = {}
        for threads in (1, 8):
            out = tmp_path / f"{command}-t{threads}"
            main([command, "--config", str(cfg_path), "--out", str(out),
                  "--threads", str(threads)])
            outs[threads] = out
        names = sorted(
            name for name in os.listdir(outs[1])
            if name.endswith(".svg") or name in ("tally.csv", "tally_fixed.csv")
        )
        for name in names:
            one = (outs[1] / name).read_bytes()
            eight = (outs[8] / name).read_bytes()
            if one != eight:
                mismatches.append(f"{command}/{name}")
    elapsed = time.perf_counter() - start
    ok = not mismatches
    _line(capsys, 8, "byte-identical artifacts across threads 1 and 8", ok,
          f"3 commands compared, mismatches: {mismatches or 'none'}, "
          f"{elapsed:.0f} s")
    assert ok


def test_criterion_9_reduction_identity(capsys):
    start = time.perf_counter()
    theta0 = np.log([1.2, 0.4, 0.08])
    x = InputPoints(np.linspace(0.0, 2.0, 8)[:, None])
    gen = build_se_model(theta0, 1)
    data_rng = np.random.default_rng(5)
    f, _ = sample_prior_joint(gen, x, InputPoints.empty(1), data_rng)
    y = simulate_observations(f, gen.likelihood, data_rng)[:, 0]
    sbc = SbcConfig(x=x, xstar=InputPoints(np.array([[0.5], [1.5]])),
                    n_trials=50, n_posterior=15, base_seed=424242)
    report = run_marg_check(
        x, y, HyperPrior(mu=tuple(theta0), sigma=(0.0, 0.0, 0.0)), sbc,
        OptimizerConfig(max_iters=0, restarts=1))
    direct = run_sbc(build_se_model(theta0, 1), sbc)
    same = (np.array_equal(report.tally.counts, direct.counts)
            and report.tally.failed_indices == direct.failed_indices
            and report.tally.n_completed == direct.n_completed)
    elapsed = time.perf_counter() - start
    _line(capsys, 9, "point-mass reduction reproduces plain tallies", same,
          f"50 trials, bitwise {'equal' if same else 'UNEQUAL'}, "
          f"{elapsed:.1f} s")
    assert same
