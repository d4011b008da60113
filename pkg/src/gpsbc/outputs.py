"""Run artifacts: CSV tallies, JSON reports, the manifest.

Every file is written atomically (temp file in the target directory, then
rename) and, except for the manifest, is a pure function of (config, seed,
tool version) so reruns are byte-identical.  The manifest goes last and
records checksums of everything else, plus wall-clock timestamps; it is the
one deliberately non-reproducible artifact.
"""

from __future__ import annotations

import hashlib
import json
import math
import os
import tempfile
from datetime import datetime, timezone

import numpy as np

from .diagnostics import UniformityReport
from .engine import RankTally
from .margcheck import MargCheckReport, Type2FitResult

TALLY_CSV = "tally.csv"
REPORT_JSON = "report.json"
THETA_TRACE_CSV = "theta_trace.csv"
MANIFEST_JSON = "manifest.json"


def atomic_write_text(path: str, text: str):
    """Write UTF-8 text with LF endings via temp-file-then-rename."""
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp_", suffix="~")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="\n") as handle:
            handle.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def tally_csv_text(tally: RankTally) -> str:
    """CSV of the full tally: test_point_index,output_index,rank,count.

    Every (point, output, rank) cell appears, zeros included, so the row
    count is m*p*(L+1) plus the header.
    """
    lines = ["test_point_index,output_index,rank,count"]
    counts = tally.counts
    m, p, n_ranks = counts.shape
    for j in range(m):
        for i in range(p):
            for r in range(n_ranks):
                lines.append(f"{j},{i},{r},{counts[j, i, r]}")
    return "\n".join(lines) + "\n"


def theta_trace_csv_text(theta: np.ndarray, input_dim: int) -> str:
    """CSV of per-trial fitted log-hyperparameters; failed trials are nan."""
    theta = np.asarray(theta, dtype=np.float64)
    if theta.ndim != 2 or theta.shape[1] != input_dim + 2:
        raise ValueError(
            f"expected (N, {input_dim + 2}) theta matrix for input dimension {input_dim}, "
            f"got shape {theta.shape}"
        )
    header = ["trial_index", "log_signal_variance"]
    header += [f"log_lengthscale_{j + 1}" for j in range(input_dim)]
    header += ["log_noise_variance"]
    lines = [",".join(header)]
    for index, row in enumerate(theta):
        lines.append(",".join([str(index)] + [_float_field(v) for v in row]))
    return "\n".join(lines) + "\n"


def _float_field(v: float) -> str:
    if math.isnan(v):
        return "nan"
    return repr(float(v))


def jsonable(value):
    """Recursively convert report values to JSON-safe plain data.

    Non-finite floats become the strings "inf"/"-inf"/"nan" (strict JSON
    has no spelling for them); numpy scalars and arrays become Python
    numbers and lists.
    """
    if isinstance(value, dict):
        return {str(k): jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [jsonable(v) for v in value]
    if isinstance(value, np.ndarray):
        return [jsonable(v) for v in value.tolist()]
    if isinstance(value, (np.integer,)):
        return int(value)
    if isinstance(value, (np.floating, float)):
        v = float(value)
        if math.isnan(v):
            return "nan"
        if math.isinf(v):
            return "inf" if v > 0 else "-inf"
        return v
    return value


def report_to_jsonable(report: UniformityReport) -> dict:
    return jsonable(
        {
            "label": report.label,
            "verdict": report.verdict,
            "chi2_stat": report.chi2_stat,
            "dof": report.dof,
            "p_value": report.p_value,
            "p_value_mc": report.p_value_mc,
            "band_violations": report.band_violations,
            "band_halfwidth": report.band_halfwidth,
            "valley_score": report.valley_score,
            "n_bins": report.n_bins,
            "total_count": report.total_count,
            "n_failed_trials": report.n_failed_trials,
        }
    )


def uniformity_payload(reports: dict, tally: RankTally) -> dict:
    """report.json payload shared by the calibration commands."""
    return {
        "verdict": reports["pooled"].verdict,
        "n_trials_completed": tally.n_completed,
        "failed_trial_indices": list(tally.failed_indices),
        "pooled": report_to_jsonable(reports["pooled"]),
        "per_output": [report_to_jsonable(r) for r in reports["per_output"]],
        "per_slice": [
            [report_to_jsonable(r) for r in row] for row in reports["per_slice"]
        ],
        "thresholds_note": (
            "verdicts use the Monte Carlo calibrated p-value at the configured alpha; "
            "all thresholds are tool calibrations, not quantities from any reference"
        ),
    }


def fit_to_jsonable(fit: Type2FitResult) -> dict:
    return jsonable(
        {
            "theta_hat_log": fit.theta_hat,
            "final_lml": fit.final_lml,
            "converged": fit.converged,
            "iterations": fit.iterations,
            "restarts_used": fit.restarts_used,
        }
    )


def marg_report_payload(report: MargCheckReport) -> dict:
    payload = uniformity_payload(
        {
            "pooled": report.uniformity,
            "per_output": list(report.per_output),
            "per_slice": [list(row) for row in report.per_slice],
        },
        report.tally,
    )
    payload["verdict"] = report.verdict
    payload["uniformity_verdict"] = report.uniformity.verdict
    payload["valley_threshold"] = jsonable(report.valley_threshold)
    payload["theta_hat0_log"] = jsonable(report.theta_hat0)
    payload["prologue_fit"] = fit_to_jsonable(report.prologue)
    return payload


def write_json(path: str, payload: dict):
    text = json.dumps(jsonable(payload), indent=2, sort_keys=True, allow_nan=False) + "\n"
    atomic_write_text(path, text)


def sha256_of(path: str) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as handle:
        for chunk in iter(lambda: handle.read(65536), b""):
            digest.update(chunk)
    return digest.hexdigest()


def write_manifest(out_dir: str, config_echo: dict, base_seed: int, tool_version: str,
                   file_names: list, started_utc: str):
    """Checksum manifest, written after every other artifact."""
    files = {}
    for name in sorted(file_names):
        path = os.path.join(out_dir, name)
        files[name] = {"sha256": sha256_of(path), "bytes": os.path.getsize(path)}
    payload = {
        "tool_version": tool_version,
        "base_seed": base_seed,
        "config": config_echo,
        "started_utc": started_utc,
        "written_utc": datetime.now(timezone.utc).isoformat(timespec="seconds"),
        "files": files,
    }
    write_json(os.path.join(out_dir, MANIFEST_JSON), payload)


def utc_now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")
