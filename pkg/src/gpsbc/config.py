"""Experiment configuration: JSON in, validated objects out.

The config document is a JSON object with optional sections; an empty
object is a complete, runnable experiment (single-output squared
exponential, eight training points on [0, 1], four interleaved test
points, 1000 trials of 100 posterior samples).  Unknown keys anywhere are
rejected by name so typos cannot silently fall back to defaults.

Errors carry the offending key's path (e.g. "sbc.L") and the violated
constraint; JSON syntax errors carry line and column.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass

import numpy as np

from .diagnostics import DiagnosticsConfig
from .engine import SbcConfig
from .kernels import (
    InputPoints,
    KernelSpec,
    LinearCoregionalization,
    SquaredExponential,
    SumKernel,
    input_dim,
    output_dim,
)
from .margcheck import HyperPrior, OptimizerConfig
from .models import (
    Exact,
    FaultSpec,
    GaussianLikelihood,
    GpModel,
    NoNoiseInPredictiveVariance,
    ScaledPosteriorVariance,
    ShiftedPosteriorMean,
    Sparse,
    TransposedMixingMatrix,
    WrongTriangularSide,
)

DEFAULT_TRAIN_X = [[float(v)] for v in np.linspace(0.0, 1.0, 8)]
DEFAULT_TEST_X = [[0.0625 + 0.125 * k] for k in range(4)]
DEFAULT_INDUCING_COUNT = 5


class ConfigError(ValueError):
    """Invalid configuration; the message names the key and constraint."""


@dataclass(frozen=True)
class ExperimentConfig:
    """Everything a run needs, fully validated."""

    model: GpModel
    sbc: SbcConfig
    diagnostics: DiagnosticsConfig
    hyper_prior: HyperPrior
    optimizer: OptimizerConfig
    data: tuple | None                 # (InputPoints, y array) or None
    valley_threshold: float | None


# --- helpers ------------------------------------------------------------------


def _fail(path: str, constraint: str):
    raise ConfigError(f"{path}: {constraint}")


def _check_keys(obj: dict, path: str, allowed: set):
    for key in obj:
        if key not in allowed:
            where = path if path else "top level"
            raise ConfigError(f"unknown key {key!r} (in {where}); allowed keys: {sorted(allowed)}")


def _as_object(value, path: str) -> dict:
    if not isinstance(value, dict):
        _fail(path, f"must be an object, got {type(value).__name__}")
    return value


def _as_number(value, path: str, *, positive=False, nonneg=False) -> float:
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        _fail(path, f"must be a number, got {type(value).__name__}")
    v = float(value)
    if not math.isfinite(v):
        _fail(path, "must be finite")
    if positive and not v > 0:
        _fail(path, f"must be > 0, got {v}")
    if nonneg and v < 0:
        _fail(path, f"must be >= 0, got {v}")
    return v


def _as_int(value, path: str, minimum: int | None = None) -> int:
    if isinstance(value, bool) or not isinstance(value, int):
        _fail(path, f"must be an integer, got {type(value).__name__}")
    if minimum is not None and value < minimum:
        _fail(path, f"must be >= {minimum}, got {value}")
    return value


def _as_points(value, path: str) -> np.ndarray:
    """Rows of input points; a flat list of numbers means one dimension."""
    if not isinstance(value, list) or not value:
        _fail(path, "must be a nonempty array of points")
    if all(isinstance(v, (int, float)) and not isinstance(v, bool) for v in value):
        rows = [[_as_number(v, f"{path}[{i}]")] for i, v in enumerate(value)]
    else:
        rows = []
        width = None
        for i, row in enumerate(value):
            if not isinstance(row, list) or not row:
                _fail(path, f"row {i} must be a nonempty array of coordinates")
            if width is None:
                width = len(row)
            elif len(row) != width:
                _fail(path, f"row {i} has {len(row)} coordinates, expected {width}")
            rows.append([_as_number(v, f"{path}[{i}][{j}]") for j, v in enumerate(row)])
    return np.array(rows, dtype=np.float64)


def _as_number_list(value, path: str, *, positive=False, nonneg=False) -> list:
    if isinstance(value, (int, float)) and not isinstance(value, bool):
        value = [value]
    if not isinstance(value, list) or not value:
        _fail(path, "must be a number or nonempty array of numbers")
    return [
        _as_number(v, f"{path}[{i}]", positive=positive, nonneg=nonneg)
        for i, v in enumerate(value)
    ]


# --- kernel codec -------------------------------------------------------------


def _parse_kernel(obj, path: str) -> KernelSpec:
    obj = _as_object(obj, path)
    kind = obj.get("type")
    if kind == "squared_exponential":
        _check_keys(obj, path, {"type", "signal_variance", "lengthscales"})
        sig = _as_number(obj.get("signal_variance", 1.0), f"{path}.signal_variance", positive=True)
        ell = _as_number_list(obj.get("lengthscales", [0.5]), f"{path}.lengthscales", positive=True)
        return SquaredExponential(sig, tuple(ell))
    if kind == "linear_coregionalization":
        _check_keys(obj, path, {"type", "latent_kernels", "mixing"})
        latents = obj.get("latent_kernels")
        if not isinstance(latents, list) or not latents:
            _fail(f"{path}.latent_kernels", "must be a nonempty array of kernels")
        parsed = tuple(
            _parse_kernel(k, f"{path}.latent_kernels[{i}]") for i, k in enumerate(latents)
        )
        mixing = obj.get("mixing")
        if mixing is None:
            _fail(f"{path}.mixing", "is required")
        w = _as_points(mixing, f"{path}.mixing")
        try:
            return LinearCoregionalization(parsed, w)
        except ValueError as exc:
            raise ConfigError(f"{path}: {exc}") from exc
    if kind == "sum":
        _check_keys(obj, path, {"type", "terms"})
        terms = obj.get("terms")
        if not isinstance(terms, list) or len(terms) < 2:
            _fail(f"{path}.terms", "must be an array of at least 2 kernels")
        parsed = tuple(_parse_kernel(t, f"{path}.terms[{i}]") for i, t in enumerate(terms))
        try:
            return SumKernel(parsed)
        except ValueError as exc:
            raise ConfigError(f"{path}: {exc}") from exc
    _fail(
        f"{path}.type",
        "must be one of 'squared_exponential', 'linear_coregionalization', 'sum', "
        f"got {kind!r}",
    )


def _kernel_to_jsonable(spec: KernelSpec) -> dict:
    if isinstance(spec, SquaredExponential):
        return {
            "type": "squared_exponential",
            "signal_variance": spec.signal_variance,
            "lengthscales": list(spec.lengthscales),
        }
    if isinstance(spec, LinearCoregionalization):
        return {
            "type": "linear_coregionalization",
            "latent_kernels": [_kernel_to_jsonable(k) for k in spec.latent_kernels],
            "mixing": spec.mixing.tolist(),
        }
    if isinstance(spec, SumKernel):
        return {"type": "sum", "terms": [_kernel_to_jsonable(t) for t in spec.terms]}
    raise TypeError(f"unknown kernel type {type(spec).__name__}")


# --- fault codec ---------------------------------------------------------------

_FAULT_NAMES = {
    "scaled_posterior_variance",
    "shifted_posterior_mean",
    "no_noise_in_predictive_variance",
    "transposed_mixing_matrix",
    "wrong_triangular_side",
}


def _parse_fault(obj, path: str) -> FaultSpec | None:
    if obj is None:
        return None
    obj = _as_object(obj, path)
    kind = obj.get("type")
    if kind == "scaled_posterior_variance":
        _check_keys(obj, path, {"type", "factor"})
        if "factor" not in obj:
            _fail(f"{path}.factor", "is required")
        factor = _as_number(obj["factor"], f"{path}.factor", positive=True)
        if factor == 1.0:
            _fail(f"{path}.factor", "must differ from 1 (a unit factor is not a fault)")
        return ScaledPosteriorVariance(factor)
    if kind == "shifted_posterior_mean":
        _check_keys(obj, path, {"type", "offset"})
        if "offset" not in obj:
            _fail(f"{path}.offset", "is required")
        offset = _as_number(obj["offset"], f"{path}.offset")
        if offset == 0.0:
            _fail(f"{path}.offset", "must be nonzero (a zero offset is not a fault)")
        return ShiftedPosteriorMean(offset)
    if kind == "no_noise_in_predictive_variance":
        _check_keys(obj, path, {"type"})
        return NoNoiseInPredictiveVariance()
    if kind == "transposed_mixing_matrix":
        _check_keys(obj, path, {"type"})
        return TransposedMixingMatrix()
    if kind == "wrong_triangular_side":
        _check_keys(obj, path, {"type"})
        return WrongTriangularSide()
    _fail(f"{path}.type", f"must be one of {sorted(_FAULT_NAMES)}, got {kind!r}")


def _fault_to_jsonable(fault: FaultSpec | None):
    if fault is None:
        return None
    if isinstance(fault, ScaledPosteriorVariance):
        return {"type": "scaled_posterior_variance", "factor": fault.factor}
    if isinstance(fault, ShiftedPosteriorMean):
        return {"type": "shifted_posterior_mean", "offset": fault.offset}
    if isinstance(fault, NoNoiseInPredictiveVariance):
        return {"type": "no_noise_in_predictive_variance"}
    if isinstance(fault, TransposedMixingMatrix):
        return {"type": "transposed_mixing_matrix"}
    if isinstance(fault, WrongTriangularSide):
        return {"type": "wrong_triangular_side"}
    raise TypeError(f"unknown fault type {type(fault).__name__}")


# --- section parsers ------------------------------------------------------------


def _parse_model(obj, path: str, train_x: InputPoints) -> GpModel:
    obj = _as_object(obj, path)
    _check_keys(obj, path, {"kernel", "noise_variance", "inference", "fault"})
    kernel = _parse_kernel(
        obj.get("kernel", {"type": "squared_exponential"}), f"{path}.kernel"
    )
    p = output_dim(kernel)
    noise = _as_number_list(
        obj.get("noise_variance", 0.1), f"{path}.noise_variance", positive=True
    )
    if len(noise) == 1 and p > 1:
        noise = noise * p
    if len(noise) != p:
        _fail(f"{path}.noise_variance", f"needs {p} entries for a {p}-output kernel, got {len(noise)}")

    inference_obj = obj.get("inference", "exact")
    if inference_obj == "exact":
        inference = Exact()
    elif isinstance(inference_obj, dict):
        _check_keys(inference_obj, f"{path}.inference", {"type", "inducing"})
        if inference_obj.get("type") != "sparse":
            _fail(f"{path}.inference.type", f"must be 'sparse', got {inference_obj.get('type')!r}")
        if "inducing" in inference_obj:
            z = _as_points(inference_obj["inducing"], f"{path}.inference.inducing")
        elif train_x.d == 1:
            lo, hi = float(train_x.values.min()), float(train_x.values.max())
            z = np.linspace(lo, hi, DEFAULT_INDUCING_COUNT)[:, None]
        else:
            _fail(
                f"{path}.inference.inducing",
                f"is required for {train_x.d}-dimensional inputs (no default grid)",
            )
        inference = Sparse(InputPoints(z))
    else:
        _fail(f"{path}.inference", "must be 'exact' or an object {\"type\": \"sparse\", ...}")

    fault = _parse_fault(obj.get("fault"), f"{path}.fault")
    try:
        return GpModel(kernel, GaussianLikelihood(tuple(noise)), inference, fault)
    except ValueError as exc:
        raise ConfigError(f"{path}: {exc}") from exc


def _parse_sbc(obj, path: str) -> SbcConfig:
    obj = _as_object(obj, path)
    _check_keys(obj, path, {"N", "L", "X", "Xstar", "base_seed"})
    n_trials = _as_int(obj.get("N", 1000), f"{path}.N", minimum=1)
    n_posterior = _as_int(obj.get("L", 100), f"{path}.L", minimum=1)
    x = _as_points(obj.get("X", DEFAULT_TRAIN_X), f"{path}.X")
    xstar = _as_points(obj.get("Xstar", DEFAULT_TEST_X), f"{path}.Xstar")
    seed = obj.get("base_seed", 0)
    if isinstance(seed, bool) or not isinstance(seed, int):
        _fail(f"{path}.base_seed", f"must be an integer, got {type(seed).__name__}")
    if not 0 <= seed < 2**64:
        _fail(f"{path}.base_seed", f"must be an unsigned 64-bit integer, got {seed}")
    try:
        return SbcConfig(
            x=InputPoints(x), xstar=InputPoints(xstar),
            n_trials=n_trials, n_posterior=n_posterior, base_seed=seed,
        )
    except ValueError as exc:
        raise ConfigError(f"{path}: {exc}") from exc


def _parse_diagnostics(obj, path: str) -> DiagnosticsConfig:
    obj = _as_object(obj, path)
    _check_keys(obj, path, {"alpha", "bins", "mc_reps", "band_alpha", "band_reps"})
    kwargs = {}
    if "alpha" in obj:
        kwargs["alpha"] = _as_number(obj["alpha"], f"{path}.alpha", positive=True)
    if "bins" in obj and obj["bins"] is not None:
        kwargs["n_bins"] = _as_int(obj["bins"], f"{path}.bins", minimum=2)
    if "mc_reps" in obj:
        kwargs["mc_reps"] = _as_int(obj["mc_reps"], f"{path}.mc_reps", minimum=999)
    if "band_alpha" in obj:
        kwargs["band_alpha"] = _as_number(obj["band_alpha"], f"{path}.band_alpha", positive=True)
    if "band_reps" in obj:
        kwargs["band_reps"] = _as_int(obj["band_reps"], f"{path}.band_reps", minimum=99)
    try:
        return DiagnosticsConfig(**kwargs)
    except ValueError as exc:
        raise ConfigError(f"{path}: {exc}") from exc


def _default_hyper_prior(model: GpModel) -> HyperPrior:
    if isinstance(model.kernel, SquaredExponential):
        mu = (
            math.log(model.kernel.signal_variance),
            *(math.log(l) for l in model.kernel.lengthscales),
            math.log(model.likelihood.noise_variance[0]),
        )
    else:
        mu = (0.0, math.log(0.5), math.log(0.1))
    return HyperPrior(mu=mu, sigma=(1.0,) * len(mu))


def _parse_hyper_prior(obj, path: str, model: GpModel) -> HyperPrior:
    if obj is None:
        return _default_hyper_prior(model)
    obj = _as_object(obj, path)
    _check_keys(obj, path, {"mu", "sigma"})
    if "mu" not in obj:
        _fail(f"{path}.mu", "is required")
    mu = _as_number_list(obj["mu"], f"{path}.mu")
    sigma_obj = obj.get("sigma", 1.0)
    sigma = _as_number_list(sigma_obj, f"{path}.sigma", nonneg=True)
    if len(sigma) == 1 and len(mu) > 1:
        sigma = sigma * len(mu)
    try:
        return HyperPrior(mu=tuple(mu), sigma=tuple(sigma))
    except ValueError as exc:
        raise ConfigError(f"{path}: {exc}") from exc


def _parse_optimizer(obj, path: str) -> OptimizerConfig:
    obj = _as_object(obj, path)
    _check_keys(obj, path, {"max_iters", "grad_tol", "restarts", "trial_restarts", "initial_step"})
    kwargs = {}
    if "max_iters" in obj:
        kwargs["max_iters"] = _as_int(obj["max_iters"], f"{path}.max_iters", minimum=0)
    if "grad_tol" in obj:
        kwargs["grad_tol"] = _as_number(obj["grad_tol"], f"{path}.grad_tol", positive=True)
    if "restarts" in obj:
        kwargs["restarts"] = _as_int(obj["restarts"], f"{path}.restarts", minimum=1)
    if "trial_restarts" in obj:
        kwargs["trial_restarts"] = _as_int(obj["trial_restarts"], f"{path}.trial_restarts", minimum=1)
    if "initial_step" in obj:
        kwargs["initial_step"] = _as_number(obj["initial_step"], f"{path}.initial_step", positive=True)
    try:
        return OptimizerConfig(**kwargs)
    except ValueError as exc:
        raise ConfigError(f"{path}: {exc}") from exc


def read_data_csv(path: str, input_dim: int, output_dim: int) -> tuple:
    """Training data from CSV with columns x_1..x_d, y_1..y_p (header row).

    Returns (InputPoints, y array).  Errors name the missing column or the
    offending row.
    """
    x_cols = [f"x_{j + 1}" for j in range(input_dim)]
    y_cols = [f"y_{i + 1}" for i in range(output_dim)]
    try:
        handle = open(path, newline="", encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"data.csv: cannot read {path!r}: {exc}") from exc
    with handle:
        reader = csv.DictReader(handle)
        if reader.fieldnames is None:
            raise ConfigError(f"data.csv: {path!r} is empty (header row required)")
        for col in x_cols + y_cols:
            if col not in reader.fieldnames:
                raise ConfigError(
                    f"data.csv: missing column {col!r} in {path!r} "
                    f"(have {reader.fieldnames})"
                )
        xs, ys = [], []
        for row_num, row in enumerate(reader, start=2):
            try:
                xs.append([float(row[c]) for c in x_cols])
                ys.append([float(row[c]) for c in y_cols])
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"data.csv: row {row_num} of {path!r} is malformed: {exc}") from exc
    if not xs:
        raise ConfigError(f"data.csv: {path!r} has no data rows")
    x = np.array(xs, dtype=np.float64)
    y = np.array(ys, dtype=np.float64)
    if not np.all(np.isfinite(y)):
        raise ConfigError(f"data.csv: {path!r} contains non-finite y values")
    try:
        return InputPoints(x), y
    except ValueError as exc:
        raise ConfigError(f"data.csv: {exc}") from exc


def _parse_data(obj, path: str, model: GpModel, sbc: SbcConfig) -> tuple | None:
    if obj is None:
        return None
    obj = _as_object(obj, path)
    if "csv" in obj:
        _check_keys(obj, path, {"csv"})
        if not isinstance(obj["csv"], str):
            _fail(f"{path}.csv", "must be a file path string")
        return read_data_csv(obj["csv"], sbc.x.d, model.p)
    _check_keys(obj, path, {"x", "y"})
    if "x" not in obj or "y" not in obj:
        _fail(path, "needs either 'csv' or both 'x' and 'y'")
    x = _as_points(obj["x"], f"{path}.x")
    y = _as_points(obj["y"], f"{path}.y")
    if x.shape[0] != y.shape[0]:
        _fail(path, f"x has {x.shape[0]} rows but y has {y.shape[0]}")
    if y.shape[1] != model.p:
        _fail(f"{path}.y", f"needs {model.p} columns for a {model.p}-output model, got {y.shape[1]}")
    try:
        return InputPoints(x), y
    except ValueError as exc:
        raise ConfigError(f"{path}.x: {exc}") from exc


TOP_LEVEL_KEYS = {
    "model", "sbc", "diagnostics", "hyper_prior", "optimizer", "data", "valley_threshold",
}


def parse_config(text: str) -> ExperimentConfig:
    """Parse and validate a JSON config document; empty object = defaults."""
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(
            f"config is not valid JSON: {exc.msg} at line {exc.lineno} column {exc.colno}"
        ) from exc
    if not isinstance(raw, dict):
        raise ConfigError(f"config must be a JSON object, got {type(raw).__name__}")
    _check_keys(raw, "", TOP_LEVEL_KEYS)

    sbc = _parse_sbc(raw.get("sbc", {}), "sbc")
    model = _parse_model(raw.get("model", {}), "model", sbc.x)
    if input_dim(model.kernel) != sbc.x.d:
        raise ConfigError(
            f"model.kernel: expects {input_dim(model.kernel)}-dimensional inputs "
            f"but sbc.X has dimension {sbc.x.d}"
        )
    diagnostics = _parse_diagnostics(raw.get("diagnostics", {}), "diagnostics")
    hyper_prior = _parse_hyper_prior(raw.get("hyper_prior"), "hyper_prior", model)
    optimizer = _parse_optimizer(raw.get("optimizer", {}), "optimizer")
    data = _parse_data(raw.get("data"), "data", model, sbc)

    threshold = raw.get("valley_threshold")
    if threshold is not None:
        threshold = _as_number(threshold, "valley_threshold", positive=True)

    if diagnostics.n_bins is not None and diagnostics.n_bins > sbc.n_posterior + 1:
        raise ConfigError(
            f"diagnostics.bins: must be <= L+1 = {sbc.n_posterior + 1}, got {diagnostics.n_bins}"
        )
    return ExperimentConfig(
        model=model,
        sbc=sbc,
        diagnostics=diagnostics,
        hyper_prior=hyper_prior,
        optimizer=optimizer,
        data=data,
        valley_threshold=threshold,
    )


def config_to_jsonable(cfg: ExperimentConfig) -> dict:
    """Canonical plain-dict form of a config (serialize/echo/round-trip)."""
    model = cfg.model
    out = {
        "model": {
            "kernel": _kernel_to_jsonable(model.kernel),
            "noise_variance": list(model.likelihood.noise_variance),
            "inference": (
                "exact"
                if isinstance(model.inference, Exact)
                else {"type": "sparse", "inducing": model.inference.inducing.values.tolist()}
            ),
            "fault": _fault_to_jsonable(model.fault),
        },
        "sbc": {
            "N": cfg.sbc.n_trials,
            "L": cfg.sbc.n_posterior,
            "X": cfg.sbc.x.values.tolist(),
            "Xstar": cfg.sbc.xstar.values.tolist(),
            "base_seed": cfg.sbc.base_seed,
        },
        "diagnostics": {
            "alpha": cfg.diagnostics.alpha,
            "bins": cfg.diagnostics.n_bins,
            "mc_reps": cfg.diagnostics.mc_reps,
            "band_alpha": cfg.diagnostics.band_alpha,
            "band_reps": cfg.diagnostics.band_reps,
        },
        "hyper_prior": {"mu": list(cfg.hyper_prior.mu), "sigma": list(cfg.hyper_prior.sigma)},
        "optimizer": {
            "max_iters": cfg.optimizer.max_iters,
            "grad_tol": cfg.optimizer.grad_tol,
            "restarts": cfg.optimizer.restarts,
            "trial_restarts": cfg.optimizer.trial_restarts,
            "initial_step": cfg.optimizer.initial_step,
        },
        "valley_threshold": cfg.valley_threshold,
    }
    if cfg.data is not None:
        x, y = cfg.data
        out["data"] = {"x": x.values.tolist(), "y": np.asarray(y).tolist()}
    else:
        out["data"] = None
    return out


def serialize_config(cfg: ExperimentConfig) -> str:
    return json.dumps(config_to_jsonable(cfg), indent=2, sort_keys=True) + "\n"
