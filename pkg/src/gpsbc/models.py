"""Gaussian process models: prior simulation, exact and sparse posteriors, faults.

The posterior computations never form an explicit inverse; everything runs
through Cholesky factors and triangular solves.  Fault injection corrupts
the *posterior* computation only: prior simulation always uses the declared
kernel, because the simulated data plays the role of ground truth that the
inference code under test is checked against.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Optional, Union

import numpy as np

from .kernels import (
    InputPoints,
    KernelSpec,
    LinearCoregionalization,
    SquaredExponential,
    eval_kernel,
    input_dim,
    latent_decomposition,
    output_dim,
    transpose_mixing,
)
from .linalg import CovMatrix, cholesky_with_jitter, mvn_sample, triangular_solve

LOG_2PI = math.log(2.0 * math.pi)
_VARIANCE_FLOOR = 1e-12


@dataclass(frozen=True)
class GaussianLikelihood:
    """Independent Gaussian observation noise, one variance per output."""

    noise_variance: tuple

    def __post_init__(self):
        nv = tuple(float(v) for v in np.atleast_1d(np.asarray(self.noise_variance, dtype=np.float64)))
        if len(nv) < 1:
            raise ValueError("need at least one noise variance")
        if any(not np.isfinite(v) or v <= 0 for v in nv):
            raise ValueError(f"noise variances must be positive and finite, got {nv}")
        object.__setattr__(self, "noise_variance", nv)

    @property
    def p(self) -> int:
        return len(self.noise_variance)


@dataclass(frozen=True)
class Exact:
    """Exact GP regression."""


@dataclass(frozen=True)
class Sparse:
    """Closed-form optimal sparse variational posterior on inducing points."""

    inducing: InputPoints

    def __post_init__(self):
        if self.inducing.n < 1:
            raise ValueError("sparse inference needs at least one inducing point")


@dataclass(frozen=True)
class NoNoiseInPredictiveVariance:
    """Posterior variance is missing the observation-noise term."""


@dataclass(frozen=True)
class TransposedMixingMatrix:
    """Posterior kernel evaluations use W^T in place of W."""


@dataclass(frozen=True)
class WrongTriangularSide:
    """The two triangular solves of the mean path run in swapped order."""


@dataclass(frozen=True)
class ScaledPosteriorVariance:
    factor: float

    def __post_init__(self):
        f = float(self.factor)
        if not np.isfinite(f) or f <= 0:
            raise ValueError(f"variance scale factor must be positive, got {f}")
        if f == 1.0:
            raise ValueError("variance scale factor of 1 is not a fault")
        object.__setattr__(self, "factor", f)


@dataclass(frozen=True)
class ShiftedPosteriorMean:
    offset: float

    def __post_init__(self):
        o = float(self.offset)
        if not np.isfinite(o):
            raise ValueError(f"mean offset must be finite, got {o}")
        if o == 0.0:
            raise ValueError("mean offset of 0 is not a fault")
        object.__setattr__(self, "offset", o)


FaultSpec = Union[
    NoNoiseInPredictiveVariance,
    TransposedMixingMatrix,
    WrongTriangularSide,
    ScaledPosteriorVariance,
    ShiftedPosteriorMean,
]


@dataclass(frozen=True)
class GpModel:
    """A zero-mean GP prior, its likelihood, an inference flavor, and at most one fault."""

    kernel: KernelSpec
    likelihood: GaussianLikelihood
    inference: Union[Exact, Sparse] = Exact()
    fault: Optional[FaultSpec] = None

    def __post_init__(self):
        p = output_dim(self.kernel)
        if self.likelihood.p != p:
            raise ValueError(
                f"likelihood has {self.likelihood.p} noise variances but the kernel has {p} outputs"
            )
        if isinstance(self.inference, Sparse):
            if self.inference.inducing.d != input_dim(self.kernel):
                raise ValueError(
                    f"inducing points have d={self.inference.inducing.d} but the kernel "
                    f"expects {input_dim(self.kernel)}-d inputs"
                )
            latent_decomposition(self.kernel)  # raises if sparse inference cannot handle it
        if isinstance(self.fault, TransposedMixingMatrix):
            transpose_mixing(self.kernel)  # raises unless square coregionalization

    @property
    def p(self) -> int:
        return output_dim(self.kernel)


@dataclass(frozen=True)
class PosteriorGaussian:
    """Flattened (output-major) Gaussian over function values at the test points."""

    mean: np.ndarray
    cov: CovMatrix
    chol: np.ndarray
    diag_clamped: int = 0

    def __post_init__(self):
        mu = np.array(np.asarray(self.mean, dtype=np.float64), copy=True)
        if mu.ndim != 1:
            raise ValueError(f"posterior mean must be a vector, got shape {mu.shape}")
        if self.cov.dim != mu.shape[0]:
            raise ValueError(
                f"posterior covariance dim {self.cov.dim} does not match mean dim {mu.shape[0]}"
            )
        mu.flags.writeable = False
        object.__setattr__(self, "mean", mu)

    @property
    def dim(self) -> int:
        return self.mean.shape[0]


def _build_posterior(mean: np.ndarray, cov_values: np.ndarray, diag_clamped: int = 0) -> PosteriorGaussian:
    sym = 0.5 * (cov_values + cov_values.T)
    # Formula round-off can leave variances a hair below zero; anything worse
    # than the floor is a genuine error and surfaces via the jitter ladder.
    diag = np.diag(sym).copy()
    np.fill_diagonal(sym, np.where((diag < 0.0) & (diag > -_VARIANCE_FLOOR), 0.0, diag))
    chol, jitter = cholesky_with_jitter(sym)
    return PosteriorGaussian(
        mean=mean,
        cov=CovMatrix(values=sym, jitter_applied=jitter),
        chol=chol,
        diag_clamped=diag_clamped,
    )


def _flatten(values: np.ndarray) -> np.ndarray:
    """(n, p) array of per-point outputs -> output-major vector of length n*p."""
    return np.asarray(values, dtype=np.float64).T.reshape(-1)


def _unflatten(vec: np.ndarray, n: int, p: int) -> np.ndarray:
    return vec.reshape(p, n).T


def sample_prior_joint(model: GpModel, x: InputPoints, xstar: InputPoints, rng: np.random.Generator):
    """One joint prior draw over the union of training and test locations.

    Returns ``(f, f_star)`` with shapes (n, p) and (m, p).  Locations shared
    between ``x`` and ``xstar`` receive the *same* function value (the draw
    happens once on the union of unique rows), which also keeps the joint
    covariance nonsingular when the two sets overlap.
    """
    if x.d != xstar.d:
        raise ValueError(f"training and test points disagree on dimension: {x.d} vs {xstar.d}")
    n, m = x.n, xstar.n
    if n + m == 0:
        raise ValueError("need at least one location to sample the prior")
    joint = np.vstack([x.values, xstar.values])
    uniq, inverse = np.unique(joint, axis=0, return_inverse=True)
    pts = InputPoints(uniq)
    p = model.p
    cov = eval_kernel(model.kernel, pts, pts)
    factor, _ = cholesky_with_jitter(cov)
    draw = mvn_sample(np.zeros(pts.n * p), factor, rng, count=1)[0]
    values = _unflatten(draw, pts.n, p)[inverse]
    return values[:n], values[n:]


def simulate_observations(f: np.ndarray, likelihood: GaussianLikelihood, rng: np.random.Generator) -> np.ndarray:
    """y = f + eps with eps ~ N(0, noise_variance) independently per output."""
    fv = np.asarray(f, dtype=np.float64)
    if fv.ndim != 2:
        raise ValueError(f"latent values must be (n, p), got shape {fv.shape}")
    if fv.shape[1] != likelihood.p:
        raise ValueError(
            f"latent values have {fv.shape[1]} outputs but likelihood has {likelihood.p}"
        )
    std = np.sqrt(np.asarray(likelihood.noise_variance))
    return fv + rng.standard_normal(fv.shape) * std[None, :]


def _posterior_kernel(model: GpModel) -> KernelSpec:
    if isinstance(model.fault, TransposedMixingMatrix):
        return transpose_mixing(model.kernel)
    return model.kernel


def _noise_vector(model: GpModel, n: int) -> np.ndarray:
    return np.repeat(np.asarray(model.likelihood.noise_variance, dtype=np.float64), n)


def _check_training(model: GpModel, x: InputPoints, y: np.ndarray) -> np.ndarray:
    yv = np.asarray(y, dtype=np.float64)
    if yv.ndim == 1:
        yv = yv[:, None]
    if yv.shape != (x.n, model.p):
        raise ValueError(f"observations must have shape ({x.n}, {model.p}), got {yv.shape}")
    if not np.all(np.isfinite(yv)):
        raise ValueError("observations must be finite")
    return yv


def exact_posterior(model: GpModel, x: InputPoints, y: np.ndarray, xstar: InputPoints) -> PosteriorGaussian:
    """Exact GP predictive over latent values at ``xstar`` given (x, y)."""
    yv = _check_training(model, x, y)
    if xstar.n < 1:
        raise ValueError("need at least one prediction point")
    kernel = _posterior_kernel(model)
    kss = eval_kernel(kernel, xstar, xstar)
    if x.n == 0:
        mean = np.zeros(xstar.n * model.p)
        cov = kss
    else:
        kxx = eval_kernel(kernel, x, x)
        kxs = eval_kernel(kernel, x, xstar)
        ky = kxx + np.diag(_noise_vector(model, x.n))
        g, _ = cholesky_with_jitter(ky)
        y_flat = _flatten(yv)
        if isinstance(model.fault, WrongTriangularSide):
            # Transposition bug: the solve order of the Cholesky pair is
            # swapped, computing (G^T G)^{-1} y instead of (G G^T)^{-1} y.
            alpha = triangular_solve(g, triangular_solve(g, y_flat, "lower-transpose"), "lower")
        else:
            alpha = triangular_solve(g, triangular_solve(g, y_flat, "lower"), "lower-transpose")
        mean = kxs.T @ alpha
        a = triangular_solve(g, kxs, "lower")
        cov = kss - a.T @ a
    post = _build_posterior(mean, cov)
    return apply_fault(post, model.fault, noise_variance=_noise_vector(model, xstar.n))


def sparse_posterior(model: GpModel, x: InputPoints, y: np.ndarray, xstar: InputPoints) -> PosteriorGaussian:
    """Closed-form optimal variational posterior with inducing points.

    Inducing variables are the latent functions at the shared locations Z;
    a coregionalization model therefore carries one independent sparse
    latent GP per latent kernel, mixed through W.  Whitened two-Cholesky
    form: with A = Luu^{-1} Kuf Sigma^{-1/2} and B = I + A A^T,

        mean = tmp2^T LB^{-1} A Sigma^{-1/2} y,
        cov  = Kss - tmp1^T tmp1 + tmp2^T tmp2,

    where tmp1 = Luu^{-1} Kus and tmp2 = LB^{-1} tmp1.
    """
    if not isinstance(model.inference, Sparse):
        raise ValueError("model does not request sparse inference")
    yv = _check_training(model, x, y)
    if x.n < 1:
        raise ValueError("sparse posterior needs at least one training point")
    if xstar.n < 1:
        raise ValueError("need at least one prediction point")
    kernel = _posterior_kernel(model)
    latents, w = latent_decomposition(kernel)
    z = model.inference.inducing
    n_ind = z.n
    q = len(latents)

    kuu = np.zeros((q * n_ind, q * n_ind))
    kz_x = []
    kz_s = []
    for j, latent in enumerate(latents):
        kuu[j * n_ind:(j + 1) * n_ind, j * n_ind:(j + 1) * n_ind] = eval_kernel(latent, z, z)
        kz_x.append(eval_kernel(latent, z, x))
        kz_s.append(eval_kernel(latent, z, xstar))
    # Row block j holds latent j; column block i is weighted by W[i, j].
    kuf = np.vstack([np.kron(w[:, j][None, :], kz_x[j]) for j in range(q)])
    kus = np.vstack([np.kron(w[:, j][None, :], kz_s[j]) for j in range(q)])
    kss = eval_kernel(kernel, xstar, xstar)

    luu, _ = cholesky_with_jitter(kuu)
    sigma = np.sqrt(_noise_vector(model, x.n))
    a = triangular_solve(luu, kuf, "lower") / sigma[None, :]
    b = np.eye(q * n_ind) + a @ a.T
    lb, _ = cholesky_with_jitter(b)
    tmp1 = triangular_solve(luu, kus, "lower")
    tmp2 = triangular_solve(lb, tmp1, "lower")
    a_err = a @ (_flatten(yv) / sigma)
    if isinstance(model.fault, WrongTriangularSide):
        c = triangular_solve(lb, a_err, "lower-transpose")
    else:
        c = triangular_solve(lb, a_err, "lower")
    mean = tmp2.T @ c
    cov = kss - tmp1.T @ tmp1 + tmp2.T @ tmp2
    post = _build_posterior(mean, cov)
    return apply_fault(post, model.fault, noise_variance=_noise_vector(model, xstar.n))


def apply_fault(post: PosteriorGaussian, fault: Optional[FaultSpec], noise_variance: Optional[np.ndarray] = None) -> PosteriorGaussian:
    """The single choke point through which every posterior passes.

    Exactly one fault can be active per model.  The variants that corrupt
    the finished posterior are applied here; TransposedMixingMatrix and
    WrongTriangularSide act earlier (kernel evaluation and solve order) and
    pass through unchanged.
    """
    if fault is None:
        return post
    if isinstance(fault, (TransposedMixingMatrix, WrongTriangularSide)):
        return post
    if isinstance(fault, ShiftedPosteriorMean):
        return PosteriorGaussian(
            mean=post.mean + fault.offset,
            cov=post.cov,
            chol=post.chol,
            diag_clamped=post.diag_clamped,
        )
    if isinstance(fault, ScaledPosteriorVariance):
        scaled = post.cov.values * fault.factor
        return PosteriorGaussian(
            mean=post.mean,
            cov=CovMatrix(values=scaled, jitter_applied=post.cov.jitter_applied * fault.factor),
            chol=post.chol * math.sqrt(fault.factor),
            diag_clamped=post.diag_clamped,
        )
    if isinstance(fault, NoNoiseInPredictiveVariance):
        if noise_variance is None:
            raise ValueError("NoNoiseInPredictiveVariance needs the per-coordinate noise variances")
        nv = np.asarray(noise_variance, dtype=np.float64)
        if nv.shape != (post.dim,):
            raise ValueError(f"noise variance vector must have shape ({post.dim},), got {nv.shape}")
        cov = post.cov.values.copy()
        diag = np.diag(cov) - nv
        clamped = int(np.count_nonzero(diag < _VARIANCE_FLOOR))
        np.fill_diagonal(cov, np.maximum(diag, _VARIANCE_FLOOR))
        chol, jitter = cholesky_with_jitter(cov)
        return PosteriorGaussian(
            mean=post.mean,
            cov=CovMatrix(values=cov, jitter_applied=jitter),
            chol=chol,
            diag_clamped=clamped,
        )
    raise ValueError(f"unknown fault variant: {fault!r}")


def sample_posterior(post: PosteriorGaussian, count: int, rng: np.random.Generator) -> np.ndarray:
    """``count`` draws from the posterior, shape (count, m*p), output-major."""
    return mvn_sample(post.mean, post.chol, rng, count=count)


def strip_fault(model: GpModel) -> GpModel:
    return replace(model, fault=None) if model.fault is not None else model


def log_marginal_likelihood(model: GpModel, x: InputPoints, y: np.ndarray, with_grad: bool = True):
    """Log evidence of a single-output squared-exponential model and its gradient.

    Returns ``(value, grad)`` where the gradient is taken with respect to
    the log-hyperparameters in the order (log signal_variance,
    log lengthscale_1 .. log lengthscale_d, log noise_variance).  With
    ``with_grad=False`` the second element is None (cheaper; used inside
    line searches).
    """
    if not isinstance(model.kernel, SquaredExponential):
        raise ValueError("log marginal likelihood supports single-output squared-exponential models")
    if model.p != 1:
        raise ValueError("log marginal likelihood supports single-output models only")
    yv = _check_training(model, x, y)
    n = x.n
    if n < 1:
        raise ValueError("log marginal likelihood needs at least one observation")
    yf = yv[:, 0]
    sig_f = model.kernel.signal_variance
    ell = np.asarray(model.kernel.lengthscales, dtype=np.float64)
    sig_n = model.likelihood.noise_variance[0]

    diff = x.values[:, None, :] - x.values[None, :, :]
    scaled_sq = (diff / ell) ** 2            # (n, n, d)
    k = sig_f * np.exp(-0.5 * scaled_sq.sum(axis=-1))
    ky = k + sig_n * np.eye(n)
    g, _ = cholesky_with_jitter(ky)
    half_solve = triangular_solve(g, yf, "lower")
    value = float(
        -0.5 * half_solve @ half_solve - np.sum(np.log(np.diag(g))) - 0.5 * n * LOG_2PI
    )
    if not with_grad:
        return value, None

    alpha = triangular_solve(g, half_solve, "lower-transpose")
    ky_inv = triangular_solve(g, triangular_solve(g, np.eye(n), "lower"), "lower-transpose")
    inner = np.outer(alpha, alpha) - ky_inv
    grad = np.empty(2 + ell.size)
    grad[0] = 0.5 * np.sum(inner * k)                      # d/d log sig_f^2
    for j in range(ell.size):
        grad[1 + j] = 0.5 * np.sum(inner * (k * scaled_sq[:, :, j]))
    grad[-1] = 0.5 * sig_n * np.trace(inner)               # d/d log sig_n^2
    return value, grad
