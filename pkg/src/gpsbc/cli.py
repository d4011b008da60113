"""Command-line driver: gp-sbc sbc | demo-bug | marg-check.

Every command reads one JSON config, writes its artifacts into --out, and
exits 0/2/3 for a pass / fail / inconclusive verdict or 1 when it could
not produce a verdict at all (bad config, unwritable output, aborted run).
That protocol makes the tool usable as a CI gate: wire the exit code to
the build and a miscalibrated model implementation fails the pipeline.
"""

from __future__ import annotations

import argparse
import os
import sys
from dataclasses import replace

import numpy as np

from . import __version__
from .config import ConfigError, ExperimentConfig, config_to_jsonable, parse_config
from .diagnostics import build_reports
from .engine import SbcRunError, pool_tally, posterior_correlation, run_sbc
from .kernels import LinearCoregionalization, SquaredExponential
from .linalg import NotPositiveDefinite
from .margcheck import FitFailed, run_marg_check
from .models import Exact, TransposedMixingMatrix, strip_fault
from .outputs import (
    MANIFEST_JSON,
    REPORT_JSON,
    TALLY_CSV,
    THETA_TRACE_CSV,
    atomic_write_text,
    marg_report_payload,
    tally_csv_text,
    theta_trace_csv_text,
    uniformity_payload,
    utc_now,
    write_json,
    write_manifest,
)
from .render import render_histogram, render_side_by_side
from .streams import AUX_DIAGNOSTICS, aux_stream

THREADS_ENV = "GP_SBC_THREADS"

_VERDICT_EXIT = {"pass": 0, "fail": 2, "inconclusive": 3}
_MARG_EXIT = {"type2_adequate": 0, "marginalisation_needed": 2, "inconclusive": 3}

OPERATIONAL_ERRORS = (ConfigError, SbcRunError, FitFailed, NotPositiveDefinite, OSError)


def _subtitle(tally, pooled_report) -> str:
    m, p, _ = tally.counts.shape
    return (
        f"{tally.n_completed} trials x {m} test points x {p} outputs; "
        f"p_mc={pooled_report.p_value_mc:.4g}, verdict: {pooled_report.verdict}"
    )


def cmd_sbc(cfg: ExperimentConfig, out_dir: str, threads: int) -> int:
    started = utc_now()
    tally = run_sbc(cfg.model, cfg.sbc, threads=threads)
    correlation = posterior_correlation(cfg.model, cfg.sbc)
    rng = aux_stream(cfg.sbc.base_seed, AUX_DIAGNOSTICS)
    reports = build_reports(tally, cfg.diagnostics, rng, correlation=correlation)

    files = [TALLY_CSV, REPORT_JSON, "histogram.svg"]
    atomic_write_text(os.path.join(out_dir, TALLY_CSV), tally_csv_text(tally))
    write_json(os.path.join(out_dir, REPORT_JSON), uniformity_payload(reports, tally))
    pooled_counts = pool_tally(tally, "single")
    atomic_write_text(
        os.path.join(out_dir, "histogram.svg"),
        render_histogram(
            pooled_counts,
            {"title": "pooled rank histogram", "subtitle": _subtitle(tally, reports["pooled"])},
        ),
    )
    if tally.p > 1:
        per_output_counts = pool_tally(tally, "per_output")
        for i in range(tally.p):
            name = f"histogram_output_{i}.svg"
            files.append(name)
            atomic_write_text(
                os.path.join(out_dir, name),
                render_histogram(
                    per_output_counts[i],
                    {
                        "title": f"rank histogram, output {i}",
                        "subtitle": _subtitle(tally, reports["per_output"][i]),
                    },
                ),
            )
    write_manifest(out_dir, config_to_jsonable(cfg), cfg.sbc.base_seed, __version__,
                   files, started)
    return _VERDICT_EXIT[reports["pooled"].verdict]


def cmd_demo_bug(cfg: ExperimentConfig, out_dir: str, threads: int) -> int:
    started = utc_now()
    fault = cfg.model.fault
    if fault is None:
        raise ConfigError(
            "model.fault: arms indistinguishable; the demo contrasts a faulted run "
            "against a fixed one, so a fault is required"
        )
    if isinstance(fault, TransposedMixingMatrix):
        kernel = cfg.model.kernel
        if isinstance(kernel, LinearCoregionalization) and np.array_equal(
            kernel.mixing, kernel.mixing.T
        ):
            raise ConfigError(
                "model.fault: fault is a no-op for symmetric W; transposing the mixing "
                "matrix changes nothing, so the arms cannot differ"
            )

    faulted_model = cfg.model
    fixed_model = strip_fault(cfg.model)

    faulted_tally = run_sbc(faulted_model, cfg.sbc, threads=threads)
    fixed_tally = run_sbc(fixed_model, cfg.sbc, threads=threads)
    rng = aux_stream(cfg.sbc.base_seed, AUX_DIAGNOSTICS)
    faulted_reports = build_reports(
        faulted_tally, cfg.diagnostics, rng,
        correlation=posterior_correlation(faulted_model, cfg.sbc),
    )
    fixed_reports = build_reports(
        fixed_tally, cfg.diagnostics, rng,
        correlation=posterior_correlation(fixed_model, cfg.sbc),
    )

    demonstrated = (
        faulted_reports["pooled"].verdict == "fail"
        and fixed_reports["pooled"].verdict == "pass"
    )
    payload = {
        "contrast_demonstrated": demonstrated,
        "faulted": uniformity_payload(faulted_reports, faulted_tally),
        "fixed": uniformity_payload(fixed_reports, fixed_tally),
    }
    atomic_write_text(os.path.join(out_dir, TALLY_CSV), tally_csv_text(faulted_tally))
    atomic_write_text(os.path.join(out_dir, "tally_fixed.csv"), tally_csv_text(fixed_tally))
    write_json(os.path.join(out_dir, REPORT_JSON), payload)
    atomic_write_text(
        os.path.join(out_dir, "histogram.svg"),
        render_side_by_side(
            pool_tally(faulted_tally, "single"),
            pool_tally(fixed_tally, "single"),
            {"title": "before fix (fault active)",
             "subtitle": _subtitle(faulted_tally, faulted_reports["pooled"])},
            {"title": "after fix",
             "subtitle": _subtitle(fixed_tally, fixed_reports["pooled"])},
        ),
    )
    write_manifest(out_dir, config_to_jsonable(cfg), cfg.sbc.base_seed, __version__,
                   [TALLY_CSV, "tally_fixed.csv", REPORT_JSON, "histogram.svg"], started)
    return 0 if demonstrated else 2


def cmd_marg_check(cfg: ExperimentConfig, out_dir: str, threads: int) -> int:
    started = utc_now()
    if cfg.data is None:
        raise ConfigError(
            "data: is required for marg-check (inline 'x'/'y' arrays or a 'csv' path)"
        )
    if not isinstance(cfg.model.kernel, SquaredExponential):
        raise ConfigError("model.kernel: marg-check fits single-output squared-exponential models")
    if not isinstance(cfg.model.inference, Exact):
        raise ConfigError("model.inference: marg-check requires exact inference")
    if cfg.model.fault is not None:
        raise ConfigError("model.fault: marg-check does not take faults; remove it")
    data_x, y_real = cfg.data
    if data_x.d != cfg.sbc.x.d:
        raise ConfigError(
            f"data.x: dimension {data_x.d} does not match the kernel/test design dimension {cfg.sbc.x.d}"
        )
    # The training design for the whole procedure is the data's; sbc.X only
    # drives the plain calibration commands.
    sbc_cfg = replace(cfg.sbc, x=data_x)

    report = run_marg_check(
        data_x, y_real, cfg.hyper_prior, sbc_cfg, cfg.optimizer,
        diag_cfg=cfg.diagnostics, valley_threshold=cfg.valley_threshold, threads=threads,
    )

    atomic_write_text(os.path.join(out_dir, TALLY_CSV), tally_csv_text(report.tally))
    atomic_write_text(
        os.path.join(out_dir, THETA_TRACE_CSV),
        theta_trace_csv_text(report.per_trial_theta, data_x.d),
    )
    write_json(os.path.join(out_dir, REPORT_JSON), marg_report_payload(report))
    atomic_write_text(
        os.path.join(out_dir, "histogram.svg"),
        render_histogram(
            pool_tally(report.tally, "single"),
            {
                "title": "rank histogram under per-trial refits",
                "subtitle": (
                    f"{report.tally.n_completed} trials; valley={report.uniformity.valley_score:.3g} "
                    f"(threshold {report.valley_threshold:.3g}); verdict: {report.verdict}"
                ),
            },
        ),
    )
    write_manifest(out_dir, config_to_jsonable(cfg), sbc_cfg.base_seed, __version__,
                   [TALLY_CSV, THETA_TRACE_CSV, REPORT_JSON, "histogram.svg"], started)
    return _MARG_EXIT[report.verdict]


_COMMANDS = {"sbc": cmd_sbc, "demo-bug": cmd_demo_bug, "marg-check": cmd_marg_check}


def _resolve_threads(arg_value: int | None) -> int:
    if arg_value is not None:
        value = arg_value
    else:
        env = os.environ.get(THREADS_ENV)
        if env is None:
            return 1
        try:
            value = int(env)
        except ValueError:
            raise ConfigError(f"{THREADS_ENV}: must be an integer, got {env!r}") from None
    if value < 1:
        raise ConfigError(f"threads: must be >= 1, got {value}")
    return value


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="gp-sbc",
        description="Validate GP model implementations by rank-statistic calibration.",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_text in (
        ("sbc", "run the calibration trials and test rank uniformity"),
        ("demo-bug", "contrast a faulted run against the fixed model"),
        ("marg-check", "test whether point-estimated hyperparameters are adequate"),
    ):
        cmd = sub.add_parser(name, help=help_text)
        cmd.add_argument("--config", required=True, help="path to the JSON config")
        cmd.add_argument("--out", required=True, help="output directory for artifacts")
        cmd.add_argument("--seed", type=int, default=None,
                         help="override sbc.base_seed (unsigned 64-bit)")
        cmd.add_argument("--threads", type=int, default=None,
                         help=f"worker threads (default: ${THREADS_ENV} or 1)")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        threads = _resolve_threads(args.threads)
        try:
            with open(args.config, encoding="utf-8") as handle:
                text = handle.read()
        except OSError as exc:
            raise ConfigError(f"config: cannot read {args.config!r}: {exc}") from exc
        cfg = parse_config(text)
        if args.seed is not None:
            if not 0 <= args.seed < 2**64:
                raise ConfigError(f"--seed must be an unsigned 64-bit integer, got {args.seed}")
            cfg = replace(cfg, sbc=replace(cfg.sbc, base_seed=args.seed))
        os.makedirs(args.out, exist_ok=True)
        return _COMMANDS[args.command](cfg, args.out, threads)
    except OPERATIONAL_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
