"""Dense linear-algebra primitives shared by every inference path.

Covariance factorizations go through :func:`cholesky_with_jitter`, which
escalates a diagonal jitter ladder instead of ever forming an explicit
inverse.  Triangular systems are solved with :func:`triangular_solve`.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import solve_triangular

DEFAULT_JITTER = 1e-8
_LADDER_EXPONENTS = 7  # base * 10**k for k = 0..6, tried after the jitter-free attempt


class NotPositiveDefinite(Exception):
    """Cholesky failed at every rung of the jitter ladder."""

    def __init__(self, ladder):
        self.ladder = tuple(float(j) for j in ladder)
        super().__init__(
            "matrix is not positive definite; attempted jitter ladder: "
            + ", ".join(f"{j:.1e}" for j in self.ladder)
        )


class SingularTriangular(Exception):
    """Triangular factor has a zero on its diagonal."""


@dataclass(frozen=True)
class CovMatrix:
    """A symmetric covariance block plus the jitter that made it factorable."""

    values: np.ndarray
    jitter_applied: float = 0.0

    def __post_init__(self):
        v = np.array(self.values, dtype=np.float64)
        if v.ndim != 2 or v.shape[0] != v.shape[1]:
            raise ValueError(f"covariance must be square, got shape {v.shape}")
        if v.size:
            scale = max(float(np.max(np.abs(v))), 1.0)
            if float(np.max(np.abs(v - v.T))) > 1e-12 * scale:
                raise ValueError("covariance is not symmetric to 1e-12 relative tolerance")
        v.flags.writeable = False
        object.__setattr__(self, "values", v)

    @property
    def dim(self) -> int:
        return self.values.shape[0]


def cholesky_with_jitter(matrix: np.ndarray, base_jitter: float = DEFAULT_JITTER):
    """Lower Cholesky factor of ``matrix``, escalating diagonal jitter on failure.

    Attempts the factorization with no jitter first, then with
    ``base_jitter * 10**k`` for k = 0..6, returning the first factor that
    succeeds together with the jitter that was applied.

    Raises NotPositiveDefinite (carrying the attempted ladder) if the whole
    ladder is exhausted.
    """
    m = np.asarray(matrix, dtype=np.float64)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise ValueError(f"matrix must be square, got shape {m.shape}")
    if not np.all(np.isfinite(m)):
        raise ValueError("matrix has non-finite entries")
    if not base_jitter > 0:
        raise ValueError(f"base_jitter must be positive, got {base_jitter}")
    n = m.shape[0]
    if n == 0:
        return np.zeros((0, 0)), 0.0
    ladder = [0.0] + [base_jitter * 10.0**k for k in range(_LADDER_EXPONENTS)]
    eye = np.eye(n)
    for jitter in ladder:
        try:
            factor = np.linalg.cholesky(m + jitter * eye if jitter else m)
        except np.linalg.LinAlgError:
            continue
        return factor, jitter
    raise NotPositiveDefinite(ladder)


def triangular_solve(factor: np.ndarray, rhs: np.ndarray, side: str = "lower") -> np.ndarray:
    """Solve G x = rhs (side='lower') or G^T x = rhs (side='lower-transpose')."""
    if side not in ("lower", "lower-transpose"):
        raise ValueError(f"side must be 'lower' or 'lower-transpose', got {side!r}")
    g = np.asarray(factor, dtype=np.float64)
    b = np.asarray(rhs, dtype=np.float64)
    if g.ndim != 2 or g.shape[0] != g.shape[1]:
        raise ValueError(f"factor must be square, got shape {g.shape}")
    if b.shape[0] != g.shape[0]:
        raise ValueError(f"rhs leading dimension {b.shape[0]} does not match factor dimension {g.shape[0]}")
    if g.shape[0] == 0:
        return b.copy()
    if np.any(np.diag(g) == 0.0):
        raise SingularTriangular("triangular factor has a zero diagonal entry")
    trans = "T" if side == "lower-transpose" else "N"
    return solve_triangular(g, b, lower=True, trans=trans, check_finite=False)


def mvn_sample(mean: np.ndarray, chol_lower: np.ndarray, rng: np.random.Generator, count: int = 1) -> np.ndarray:
    """Draw ``count`` samples of N(mean, G G^T) given the lower factor G.

    Returns shape (count, dim).  Standard normals are consumed row by row,
    so two calls with count=1 produce exactly the rows one call with
    count=2 would produce (stream determinism contract).
    """
    mu = np.asarray(mean, dtype=np.float64)
    g = np.asarray(chol_lower, dtype=np.float64)
    if mu.ndim != 1:
        raise ValueError(f"mean must be a vector, got shape {mu.shape}")
    if g.shape != (mu.shape[0], mu.shape[0]):
        raise ValueError(f"factor shape {g.shape} does not match mean dimension {mu.shape[0]}")
    if count < 1:
        raise ValueError(f"count must be >= 1, got {count}")
    z = rng.standard_normal((count, mu.shape[0]))
    return mu[None, :] + z @ g.T
