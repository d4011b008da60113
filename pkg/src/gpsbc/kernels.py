"""Kernel specifications and covariance evaluation for multi-output GPs.

Multi-output covariance matrices use output-major flattening everywhere in
this package: the row for output ``i`` at point ``a`` is ``i * n + a`` where
``n`` is the number of points on that axis.  All blocks for output 0 come
first, then all blocks for output 1, and so on.  CSV emitters, posterior
vectors, and rank tallies all follow the same convention.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Union

import numpy as np


@dataclass(frozen=True)
class InputPoints:
    """A set of n points in R^d stored as an (n, d) float64 array.

    The array is copied and frozen at construction.  Empty point sets
    (n = 0) are permitted so degenerate pipelines (no training data, or no
    held-out points) remain expressible; config parsing enforces n >= 1 for
    user-supplied configurations.
    """

    values: np.ndarray

    def __post_init__(self):
        v = np.array(self.values, dtype=np.float64)
        if v.ndim != 2:
            raise ValueError(f"input points must form a 2-d array, got ndim={v.ndim}")
        if v.shape[1] < 1:
            raise ValueError("input points need at least one coordinate per point")
        if not np.all(np.isfinite(v)):
            raise ValueError("input points must be finite")
        v.flags.writeable = False
        object.__setattr__(self, "values", v)

    @property
    def n(self) -> int:
        return self.values.shape[0]

    @property
    def d(self) -> int:
        return self.values.shape[1]

    @classmethod
    def empty(cls, d: int) -> "InputPoints":
        return cls(np.zeros((0, d)))


@dataclass(frozen=True)
class SquaredExponential:
    """ARD squared-exponential kernel: sigma^2 exp(-1/2 sum_j (dx_j / l_j)^2)."""

    signal_variance: float
    lengthscales: tuple

    def __post_init__(self):
        sv = float(self.signal_variance)
        if not np.isfinite(sv) or sv <= 0:
            raise ValueError(f"signal_variance must be positive and finite, got {sv}")
        ls = tuple(float(l) for l in np.atleast_1d(np.asarray(self.lengthscales, dtype=np.float64)))
        if len(ls) < 1:
            raise ValueError("lengthscales must have one entry per input dimension")
        if any(not np.isfinite(l) or l <= 0 for l in ls):
            raise ValueError(f"lengthscales must be positive and finite, got {ls}")
        object.__setattr__(self, "signal_variance", sv)
        object.__setattr__(self, "lengthscales", ls)


@dataclass(frozen=True)
class LinearCoregionalization:
    """p coupled outputs built from q independent latent kernels.

    cov(output i at x, output i' at x') = sum_q W[i, q] W[i', q] k_q(x, x').
    Latent kernels must be single-output; nesting another coregionalization
    inside the latents is rejected.
    """

    latent_kernels: tuple
    mixing: np.ndarray

    def __post_init__(self):
        latents = tuple(self.latent_kernels)
        if not latents:
            raise ValueError("coregionalization needs at least one latent kernel")
        for latent in latents:
            if _contains_coregionalization(latent):
                raise ValueError("coregionalization latents must not nest another coregionalization")
            if output_dim(latent) != 1:
                raise ValueError("coregionalization latents must be single-output kernels")
        dims = {input_dim(latent) for latent in latents}
        if len(dims) != 1:
            raise ValueError(f"latent kernels disagree on input dimension: {sorted(dims)}")
        w = np.array(self.mixing, dtype=np.float64)
        if w.ndim != 2:
            raise ValueError(f"mixing matrix must be 2-d, got ndim={w.ndim}")
        if w.shape[1] != len(latents):
            raise ValueError(
                f"mixing matrix has {w.shape[1]} columns but there are {len(latents)} latent kernels"
            )
        if w.shape[0] < 1:
            raise ValueError("mixing matrix needs at least one row")
        if not np.all(np.isfinite(w)):
            raise ValueError("mixing matrix must be finite")
        if np.any(np.all(w == 0.0, axis=1)):
            raise ValueError("mixing matrix has an all-zero row (an output with no signal)")
        w.flags.writeable = False
        object.__setattr__(self, "latent_kernels", latents)
        object.__setattr__(self, "mixing", w)


@dataclass(frozen=True)
class SumKernel:
    """Pointwise sum of kernels with identical output dimension."""

    terms: tuple

    def __post_init__(self):
        terms = tuple(self.terms)
        if not terms:
            raise ValueError("sum kernel needs at least one term")
        p = {output_dim(t) for t in terms}
        if len(p) != 1:
            raise ValueError(f"sum terms disagree on output dimension: {sorted(p)}")
        d = {input_dim(t) for t in terms}
        if len(d) != 1:
            raise ValueError(f"sum terms disagree on input dimension: {sorted(d)}")
        object.__setattr__(self, "terms", terms)


KernelSpec = Union[SquaredExponential, LinearCoregionalization, SumKernel]


def _contains_coregionalization(spec) -> bool:
    if isinstance(spec, LinearCoregionalization):
        return True
    if isinstance(spec, SumKernel):
        return any(_contains_coregionalization(t) for t in spec.terms)
    return False


def output_dim(spec: KernelSpec) -> int:
    if isinstance(spec, SquaredExponential):
        return 1
    if isinstance(spec, LinearCoregionalization):
        return spec.mixing.shape[0]
    if isinstance(spec, SumKernel):
        return output_dim(spec.terms[0])
    raise TypeError(f"not a kernel spec: {spec!r}")


def input_dim(spec: KernelSpec) -> int:
    if isinstance(spec, SquaredExponential):
        return len(spec.lengthscales)
    if isinstance(spec, LinearCoregionalization):
        return input_dim(spec.latent_kernels[0])
    if isinstance(spec, SumKernel):
        return input_dim(spec.terms[0])
    raise TypeError(f"not a kernel spec: {spec!r}")


def _se_matrix(spec: SquaredExponential, a: InputPoints, b: InputPoints) -> np.ndarray:
    ell = np.asarray(spec.lengthscales, dtype=np.float64)
    diff = a.values[:, None, :] - b.values[None, :, :]
    sq = np.sum((diff / ell) ** 2, axis=-1)
    return spec.signal_variance * np.exp(-0.5 * sq)


def eval_kernel(spec: KernelSpec, a: InputPoints, b: InputPoints) -> np.ndarray:
    """Dense covariance of ``spec`` between point sets, output-major flattened.

    Returns an (n_a * p, n_b * p) array where p = output_dim(spec).
    """
    if a.d != b.d:
        raise ValueError(f"point sets disagree on input dimension: {a.d} vs {b.d}")
    if input_dim(spec) != a.d:
        raise ValueError(
            f"kernel expects {input_dim(spec)}-d inputs but points have d={a.d}"
        )
    return _eval(spec, a, b)


def _eval(spec, a, b):
    if isinstance(spec, SquaredExponential):
        return _se_matrix(spec, a, b)
    if isinstance(spec, SumKernel):
        total = _eval(spec.terms[0], a, b)
        for term in spec.terms[1:]:
            total = total + _eval(term, a, b)
        return total
    if isinstance(spec, LinearCoregionalization):
        w = spec.mixing
        p = w.shape[0]
        out = np.zeros((a.n * p, b.n * p))
        for j, latent in enumerate(spec.latent_kernels):
            # kron places W[i,j] W[i',j] * K_j at block (i, i'): output-major.
            out += np.kron(np.outer(w[:, j], w[:, j]), _eval(latent, a, b))
        return out
    raise TypeError(f"not a kernel spec: {spec!r}")


def latent_decomposition(spec: KernelSpec):
    """Split a kernel into independent single-output latents and a mixing matrix.

    A coregionalization yields its own latents and W; any single-output
    kernel is its own sole latent with W = [[1.0]].  Multi-output sums have
    no such decomposition and are rejected (sparse inference needs one).
    """
    if isinstance(spec, LinearCoregionalization):
        return spec.latent_kernels, spec.mixing
    if output_dim(spec) == 1:
        return (spec,), np.ones((1, 1))
    raise ValueError("kernel has no latent decomposition; sparse inference supports "
                     "coregionalization or single-output kernels only")


def transpose_mixing(spec: KernelSpec) -> KernelSpec:
    """The same kernel with W replaced by W^T (square mixing matrices only)."""
    if not isinstance(spec, LinearCoregionalization):
        raise ValueError("transposed-mixing fault requires a coregionalization kernel")
    w = spec.mixing
    if w.shape[0] != w.shape[1]:
        raise ValueError(f"transposed-mixing fault requires a square mixing matrix, got {w.shape}")
    return LinearCoregionalization(latent_kernels=spec.latent_kernels, mixing=w.T.copy())
