"""Dense linear algebra, RNG, and small-matrix spectral utilities.

Everything operates on plain float64 numpy arrays in row-major layout.

Vectorization convention
------------------------
``vec_cm`` stacks matrix COLUMNS (Fortran order).  With this convention the
Kronecker identity

    (A kron B) @ vec_cm(X) == vec_cm(B @ X @ A.T)

holds exactly, which is what makes the structured-preconditioner
factorization and its efficient application interchangeable.  Do not mix
``vec_cm`` with numpy's default C-order ``ravel`` when moving between the
dense and factored representations.
"""

from __future__ import annotations

import numpy as np
from scipy.linalg import lapack as _lapack

from .errors import ContractError, DimensionError, NumericalError, OracleScaleError

FLOAT = np.float64

# Oracle-scale guards.  These routines materialize dense objects and are only
# meant for validating the production code paths at desk scale.
KRON_MAX_EXTENT = 256
SOLVE_SPD_MAX_N = 512
EIG_MAX_N = 256


def make_rng(seed):
    """Seeded PCG64 generator: identical call sequences give identical streams."""
    return np.random.default_rng(np.uint64(seed))


def spawn_rngs(seed, n):
    """n independent, reproducible substreams derived from one seed."""
    return [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(n)]


def as_matrix(a, name="array"):
    m = np.asarray(a, dtype=FLOAT)
    if m.ndim != 2:
        raise DimensionError(f"{name} must be 2-D, got shape {m.shape}")
    return m


def check_finite(a, name="array"):
    a = np.asarray(a)
    if not np.all(np.isfinite(a)):
        raise NumericalError(f"{name} contains non-finite entries")
    return a


def matmul(a, b):
    """Matrix product with explicit conformance checking."""
    a = as_matrix(a, "a")
    b = as_matrix(b, "b")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"inner extents disagree: {a.shape} x {b.shape}")
    return a @ b


def kron_dense(a, b):
    """Dense Kronecker product, guarded to oracle scale.

    Block (i, j) of the result equals a[i, j] * b.
    """
    a = as_matrix(a, "a")
    b = as_matrix(b, "b")
    p, q = a.shape
    r, s = b.shape
    if p * r > KRON_MAX_EXTENT or q * s > KRON_MAX_EXTENT:
        raise OracleScaleError(
            f"kron_dense result {p * r}x{q * s} exceeds guard {KRON_MAX_EXTENT}"
        )
    return np.kron(a, b)


def vec_cm(m):
    """Column-stacking vectorization (see module docstring)."""
    m = as_matrix(m, "m")
    return m.reshape(-1, order="F").copy()


def unvec_cm(v, p, q):
    """Inverse of vec_cm for a p x q matrix."""
    v = np.asarray(v, dtype=FLOAT).reshape(-1)
    if v.size != p * q:
        raise DimensionError(f"vector of length {v.size} cannot fill {p}x{q}")
    return v.reshape((p, q), order="F").copy()


def _require_symmetric(m, name, tol=1e-8):
    m = as_matrix(m, name)
    if m.shape[0] != m.shape[1]:
        raise DimensionError(f"{name} must be square, got {m.shape}")
    scale = max(np.abs(m).max(), 1.0)
    if np.abs(m - m.T).max() > tol * scale:
        raise ContractError(f"{name} is not symmetric within {tol} relative")
    return m


def solve_spd(m, rhs):
    """Solve m @ x = rhs for symmetric positive-definite m via Cholesky.

    Raises NumericalError with the 1-based failing pivot index when the
    factorization detects a non-SPD matrix.
    """
    m = _require_symmetric(m, "m")
    n = m.shape[0]
    if n > SOLVE_SPD_MAX_N:
        raise OracleScaleError(f"solve_spd limited to n <= {SOLVE_SPD_MAX_N}, got {n}")
    rhs = np.asarray(rhs, dtype=FLOAT)
    if rhs.shape[0] != n:
        raise DimensionError(f"rhs length {rhs.shape[0]} does not match n={n}")
    c, info = _lapack.dpotrf(m, lower=1)
    if info != 0:
        raise NumericalError(f"matrix is not SPD: pivot {info} failed", pivot=info)
    x, info = _lapack.dpotrs(c, rhs, lower=1)
    if info != 0:
        raise NumericalError(f"triangular solve failed with info={info}")
    return x


def sym_eig_min(m):
    """Smallest eigenvalue of a symmetric matrix."""
    m = _require_symmetric(m, "m")
    if m.shape[0] > EIG_MAX_N:
        raise OracleScaleError(f"sym_eig_min limited to n <= {EIG_MAX_N}, got {m.shape[0]}")
    return float(np.linalg.eigvalsh(m)[0])


def rand_orthogonal(rng, n):
    """Random orthogonal matrix, Haar-ish via QR with a positive-diagonal fix."""
    if n < 1:
        raise ContractError(f"n must be >= 1, got {n}")
    g = rng.standard_normal((n, n))
    q, r = np.linalg.qr(g)
    q = q * np.sign(np.diag(r))
    return q
