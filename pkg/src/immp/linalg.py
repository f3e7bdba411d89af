"""Symmetric positive (semi-)definite operators and small batched solves.

Mass matrices and friction matrices are represented by one of three
backends: ``Diagonal`` (including scalar multiples of the identity),
``Dense`` and ``Operator`` (matrix-free, user supplied apply/solve).
All ``apply``/``solve`` methods act on the last axis so that a leading
replica axis passes through untouched.
"""
from __future__ import annotations

import numpy as np
import scipy.linalg as sla

from .errors import GramSingular, SolverFailure


class SymOp:
    dim: int

    def apply(self, v):
        raise NotImplementedError

    def solve(self, v):
        raise NotImplementedError

    def matrix(self):
        return self.apply(np.eye(self.dim))

    def logdet(self):
        sign, ld = np.linalg.slogdet(self.matrix())
        return ld

    def sqrt_apply(self, u):
        """Apply a factor R with R R^T equal to this operator."""
        L = np.linalg.cholesky(self.matrix())
        return u @ L.T

    @property
    def diagonal(self):
        """Diagonal entries if the operator is diagonal, else None."""
        return None

    @property
    def is_zero(self):
        return False


class Diagonal(SymOp):
    def __init__(self, values, dim=None):
        values = np.asarray(values, dtype=float)
        if values.ndim == 0:
            if dim is None:
                raise ValueError("dim is required for a scalar diagonal")
            values = np.full(dim, float(values))
        if np.any(values < 0):
            raise ValueError("diagonal operator must be nonnegative")
        self.values = values
        self.dim = values.shape[0]

    def apply(self, v):
        return v * self.values

    def solve(self, v):
        return v / self.values

    def matrix(self):
        return np.diag(self.values)

    def logdet(self):
        return float(np.sum(np.log(self.values)))

    def sqrt_apply(self, u):
        return u * np.sqrt(self.values)

    @property
    def diagonal(self):
        return self.values

    @property
    def is_zero(self):
        return not np.any(self.values)

    @property
    def scalar(self):
        """The common value if the operator is a multiple of the identity."""
        if np.all(self.values == self.values[0]):
            return float(self.values[0])
        return None


class Dense(SymOp):
    def __init__(self, matrix):
        A = np.asarray(matrix, dtype=float)
        if A.ndim != 2 or A.shape[0] != A.shape[1]:
            raise ValueError("dense operator needs a square matrix")
        if not np.allclose(A, A.T, rtol=1e-12, atol=1e-14):
            raise ValueError("dense operator must be symmetric")
        self.A = 0.5 * (A + A.T)
        self.dim = A.shape[0]
        self._cho = None

    def _factor(self):
        if self._cho is None:
            self._cho = sla.cho_factor(self.A, lower=True)
        return self._cho

    def apply(self, v):
        return v @ self.A

    def solve(self, v):
        v = np.asarray(v, dtype=float)
        flat = v.reshape(-1, self.dim).T
        return sla.cho_solve(self._factor(), flat).T.reshape(v.shape)

    def matrix(self):
        return self.A.copy()

    def logdet(self):
        c, _ = self._factor()
        return float(2.0 * np.sum(np.log(np.diag(c))))

    def sqrt_apply(self, u):
        c, _ = self._factor()
        L = np.tril(c)
        return u @ L.T

    @property
    def is_zero(self):
        return not np.any(self.A)


class Operator(SymOp):
    """Matrix-free operator; ``solve`` is required wherever an inverse is used."""

    def __init__(self, apply, solve=None, dim=None):
        if dim is None:
            raise ValueError("matrix-free operators need an explicit dim")
        self._apply = apply
        self._solve = solve
        self.dim = int(dim)

    def apply(self, v):
        return self._apply(v)

    def solve(self, v):
        if self._solve is None:
            raise SolverFailure("matrix-free operator has no solve routine")
        return self._solve(v)


def as_operator(x, dim) -> SymOp:
    """Coerce a scalar, vector of diagonal entries, matrix or operator."""
    if isinstance(x, SymOp):
        if x.dim != dim:
            raise ValueError(f"operator has dim {x.dim}, expected {dim}")
        return x
    a = np.asarray(x, dtype=float)
    if a.ndim == 0:
        return Diagonal(a, dim)
    if a.ndim == 1:
        if a.shape[0] != dim:
            raise ValueError(f"diagonal has length {a.shape[0]}, expected {dim}")
        return Diagonal(a)
    if a.shape != (dim, dim):
        raise ValueError(f"matrix has shape {a.shape}, expected {(dim, dim)}")
    return Dense(a)


def generalized_max_eig(A: SymOp, B: SymOp) -> float:
    """Largest eigenvalue of B^{-1/2} A B^{-1/2} (A symmetric, B positive)."""
    if A.dim == 0:
        return 0.0
    if A.diagonal is not None and B.diagonal is not None:
        return float(np.max(A.diagonal / B.diagonal))
    w = sla.eigh(A.matrix(), B.matrix(), eigvals_only=True)
    return float(w[-1])


# ---------------------------------------------------------------------------
# small (n x n) batched symmetric systems


def small_solve(A, b):
    """Solve A x = b on the last axis; A is (n, n) or (..., n, n)."""
    n = A.shape[-1]
    if n == 1:
        return b / A[..., 0]
    if A.ndim == 2:
        flat = b.reshape(-1, n).T
        return np.linalg.solve(A, flat).T.reshape(b.shape)
    return np.linalg.solve(A, b[..., None])[..., 0]


def small_cholesky_logdet(A, cond_max=1e12):
    """log det of a batch of SPD matrices, raising GramSingular when needed.

    Returns (logdet, cond) where cond is the spectral condition number.
    """
    n = A.shape[-1]
    if n == 1:
        a = A[..., 0, 0]
        if np.any(~(a > 0)):
            raise GramSingular("Gram matrix is not positive definite", cond=np.inf)
        return np.log(a), np.ones_like(a)
    w = np.linalg.eigvalsh(A)
    lo, hi = w[..., 0], w[..., -1]
    if np.any(~(lo > 0)):
        raise GramSingular("Gram matrix is not positive definite", cond=np.inf)
    cond = hi / lo
    if np.any(cond > cond_max):
        raise GramSingular(
            f"Gram matrix condition number {np.max(cond):.3g} exceeds {cond_max:g}",
            cond=np.max(cond),
        )
    return np.sum(np.log(w), axis=-1), cond
