"""Sparse PSD group matrices and the linear-system black box.

Every group matrix is stored as a weighted sum of squared sparse linear
forms, ``L = sum_r c_r a_r a_r^T``.  A graph edge ``(u, v, w)`` is the row
``a = e_u - e_v`` with weight ``w``; an extra diagonal entry ``(u, d)`` is the
row ``a = e_u`` with weight ``d``.  :class:`SddMatrix` only admits those two
row kinds, which keeps it a weighted Laplacian plus a nonnegative diagonal.
:class:`GramMatrix` admits arbitrary rows and is used where a reduction needs
a PSD form that is not diagonally dominant (flow conservation ``B B^T``).
"""

from __future__ import annotations

from typing import Iterable, Sequence

import numpy as np
import scipy.sparse as sp
from scipy.sparse.csgraph import connected_components


class InconsistentSystemError(ValueError):
    """Right-hand side has a component along the null space of the matrix."""


class SingularMatrixError(np.linalg.LinAlgError):
    pass


class _RowForm:
    """Shared machinery for matrices given as ``sum_r c_r a_r a_r^T``."""

    n: int

    def row_form(self) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
        """Return ``(row, col, coef, weight)``: COO coefficients plus per-row weights."""
        raise NotImplementedError

    @property
    def num_rows(self) -> int:
        return len(self.row_form()[3])

    def _factor(self) -> tuple[sp.csr_matrix, np.ndarray]:
        cached = getattr(self, "_factor_cache", None)
        if cached is None:
            row, col, coef, weight = self.row_form()
            R = sp.csr_matrix((coef, (row, col)), shape=(len(weight), self.n))
            cached = (R, weight)
            self._factor_cache = cached
        return cached

    def apply(self, x) -> np.ndarray:
        x = _as_vector(x, self.n)
        R, c = self._factor()
        return R.T @ (c * (R @ x))

    def quad_form(self, z) -> float:
        z = _as_vector(z, self.n)
        R, c = self._factor()
        r = R @ z
        return float(np.dot(c, r * r))

    def to_sparse(self) -> sp.csr_matrix:
        R, c = self._factor()
        return (R.T @ sp.diags(c) @ R).tocsr()

    def to_dense(self) -> np.ndarray:
        return self.to_sparse().toarray()

    def diagonal(self) -> np.ndarray:
        R, c = self._factor()
        return np.asarray(R.multiply(R).T @ c).ravel()

    def gershgorin_bound(self) -> float:
        """Upper bound on the largest eigenvalue."""
        A = self.to_sparse()
        if A.nnz == 0:
            return 0.0
        return float(np.max(np.asarray(abs(A).sum(axis=1)).ravel()))


class SddMatrix(_RowForm):
    """Weighted graph Laplacian plus a nonnegative diagonal.

    Use :func:`assemble_laplacian` to build one from raw edge and diagonal
    lists; the constructor expects already-validated arrays.
    """

    def __init__(self, n: int, eu, ev, ew, du, dd):
        self.n = int(n)
        self.eu = np.asarray(eu, dtype=np.int64)
        self.ev = np.asarray(ev, dtype=np.int64)
        self.ew = np.asarray(ew, dtype=float)
        self.du = np.asarray(du, dtype=np.int64)
        self.dd = np.asarray(dd, dtype=float)

    @property
    def edges(self) -> list[tuple[int, int, float]]:
        return [(int(u), int(v), float(w)) for u, v, w in zip(self.eu, self.ev, self.ew)]

    @property
    def diag(self) -> list[tuple[int, float]]:
        return [(int(u), float(d)) for u, d in zip(self.du, self.dd)]

    def row_form(self):
        m, q = len(self.eu), len(self.du)
        er = np.arange(m)
        row = np.concatenate([er, er, m + np.arange(q)])
        col = np.concatenate([self.eu, self.ev, self.du])
        coef = np.concatenate([np.ones(m), -np.ones(m), np.ones(q)])
        weight = np.concatenate([self.ew, self.dd])
        return row, col, coef, weight

    def scaled(self, factor: float) -> "SddMatrix":
        if factor <= 0:
            raise ValueError("scale factor must be positive")
        return SddMatrix(self.n, self.eu, self.ev, self.ew * factor, self.du, self.dd * factor)

    def __repr__(self) -> str:
        return f"SddMatrix(n={self.n}, edges={len(self.eu)}, diag={len(self.du)})"


class GramMatrix(_RowForm):
    """PSD matrix ``sum_r c_r a_r a_r^T`` with arbitrary sparse rows ``a_r``."""

    def __init__(self, n: int, rows: Iterable[tuple[float, dict[int, float]]]):
        self.n = int(n)
        self.rows: list[tuple[float, dict[int, float]]] = []
        for c, coefs in rows:
            c = float(c)
            if not np.isfinite(c) or c < 0:
                raise ValueError(f"row weight must be nonnegative, got {c}")
            coefs = {int(u): float(a) for u, a in dict(coefs).items() if a != 0}
            for u in coefs:
                if not 0 <= u < self.n:
                    raise IndexError(f"row index {u} out of range for n={self.n}")
            if c > 0 and coefs:
                self.rows.append((c, coefs))

    def row_form(self):
        row, col, coef = [], [], []
        for r, (_, coefs) in enumerate(self.rows):
            for u, a in coefs.items():
                row.append(r)
                col.append(u)
                coef.append(a)
        weight = np.array([c for c, _ in self.rows], dtype=float)
        return (np.array(row, dtype=np.int64), np.array(col, dtype=np.int64),
                np.array(coef, dtype=float), weight)

    def scaled(self, factor: float) -> "GramMatrix":
        if factor <= 0:
            raise ValueError("scale factor must be positive")
        return GramMatrix(self.n, [(c * factor, coefs) for c, coefs in self.rows])

    def __repr__(self) -> str:
        return f"GramMatrix(n={self.n}, rows={len(self.rows)})"


def _as_vector(x, n: int) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.shape != (n,):
        raise ValueError(f"expected vector of length {n}, got shape {x.shape}")
    return x


def assemble_laplacian(n: int, edges: Iterable[Sequence] = (),
                       diag: Iterable[Sequence] = ()) -> SddMatrix:
    """Validate edge and diagonal lists and build an :class:`SddMatrix`.

    Parallel edges (in either orientation) are merged by adding weights, and
    repeated diagonal entries are summed.  Zero diagonal entries are dropped.
    """
    n = int(n)
    if n < 0:
        raise ValueError("n must be nonnegative")
    merged: dict[tuple[int, int], float] = {}
    for u, v, w in edges:
        u, v, w = int(u), int(v), float(w)
        if not (0 <= u < n and 0 <= v < n):
            raise IndexError(f"edge ({u}, {v}) out of range for n={n}")
        if u == v:
            raise ValueError(f"self loop at vertex {u}")
        if not np.isfinite(w) or w <= 0:
            raise ValueError(f"edge weight must be positive, got {w}")
        key = (u, v) if u < v else (v, u)
        merged[key] = merged.get(key, 0.0) + w
    dsum: dict[int, float] = {}
    for u, d in diag:
        u, d = int(u), float(d)
        if not 0 <= u < n:
            raise IndexError(f"diagonal index {u} out of range for n={n}")
        if not np.isfinite(d) or d < 0:
            raise ValueError(f"diagonal entry must be nonnegative, got {d}")
        dsum[u] = dsum.get(u, 0.0) + d
    keys = sorted(merged)
    eu = [k[0] for k in keys]
    ev = [k[1] for k in keys]
    ew = [merged[k] for k in keys]
    dkeys = sorted(u for u, d in dsum.items() if d > 0)
    return SddMatrix(n, eu, ev, ew, dkeys, [dsum[u] for u in dkeys])


def identity(n: int, scale: float = 1.0) -> SddMatrix:
    return assemble_laplacian(n, (), [(u, scale) for u in range(n)])


def apply(M: _RowForm, x) -> np.ndarray:
    """``M @ x`` from the row form, without dense assembly."""
    return M.apply(x)


def quad_norm(M: _RowForm, z) -> float:
    """``sqrt(z^T M z)``; tiny negative round-off is clamped to zero."""
    return float(np.sqrt(max(M.quad_form(z), 0.0)))


def as_sparse(M) -> sp.csr_matrix:
    if isinstance(M, _RowForm):
        return M.to_sparse()
    if sp.issparse(M):
        return M.tocsr()
    return sp.csr_matrix(np.asarray(M, dtype=float))


def singular_components(A: sp.spmatrix, rtol: float = 1e-12) -> list[np.ndarray]:
    """Connected blocks of ``A`` that annihilate the constant vector.

    These are the components on which a Laplacian-type matrix carries no
    diagonal term; their null space is spanned by the block indicator.
    """
    A = sp.csr_matrix(A)
    n = A.shape[0]
    if n == 0:
        return []
    ncomp, labels = connected_components(A, directed=False)
    rowsum = np.abs(np.asarray(A.sum(axis=1)).ravel())
    scale = np.abs(A.diagonal())
    bad = np.bincount(labels, weights=(rowsum > rtol * np.maximum(scale, 1e-300)).astype(float),
                      minlength=ncomp)
    return [np.flatnonzero(labels == c) for c in range(ncomp) if bad[c] == 0]


def solve_sdd(M, b, tol: float = 1e-9, max_iters: int | None = None,
              null_blocks: list[np.ndarray] | None = None) -> tuple[np.ndarray, float]:
    """Jacobi-preconditioned conjugate gradient for a PSD sparse system.

    Blocks whose row sums vanish are singular; on those the right-hand side
    must sum to zero, and the iterate is kept mean-free.  ``null_blocks`` may
    pass a precomputed list of such blocks to skip detection.

    Returns ``(x, relative_residual)`` where the residual is recomputed from
    scratch as ``||M x - b|| / ||b||``.
    """
    A = as_sparse(M)
    n = A.shape[0]
    b = np.array(b, dtype=float)
    if b.shape != (n,):
        raise ValueError(f"right-hand side has shape {b.shape}, expected ({n},)")
    if not np.all(np.isfinite(b)) or not np.all(np.isfinite(A.data)):
        raise ValueError("non-finite entries in system")
    if max_iters is None:
        max_iters = 10 * n + 200
    if null_blocks is None:
        null_blocks = singular_components(A)

    bnorm_in = np.linalg.norm(b)
    for blk in null_blocks:
        total = b[blk].sum()
        if abs(total) > 1e-8 * max(bnorm_in, 1e-300) * np.sqrt(len(blk)):
            raise InconsistentSystemError(
                f"right-hand side sums to {total:.3g} on a singular block of size {len(blk)}")
        b[blk] -= total / len(blk)

    bnorm = np.linalg.norm(b)
    x = np.zeros(n)
    if bnorm == 0.0:
        return x, 0.0

    d = A.diagonal().copy()
    d[d <= 0] = 1.0
    dinv = 1.0 / d

    r = b.copy()
    z = dinv * r
    p = z.copy()
    rz = r @ z
    target = tol * bnorm
    for it in range(1, max_iters + 1):
        Ap = A @ p
        pAp = p @ Ap
        if pAp <= 0:
            break
        alpha = rz / pAp
        x += alpha * p
        if it % 50 == 0:
            r = b - A @ x
        else:
            r -= alpha * Ap
        if np.linalg.norm(r) <= target:
            break
        z = dinv * r
        rz_new = r @ z
        p = z + (rz_new / rz) * p
        rz = rz_new

    for blk in null_blocks:
        x[blk] -= x[blk].mean()
    rel = float(np.linalg.norm(A @ x - b) / bnorm)
    return x, rel


def dense_solve(A, b) -> np.ndarray:
    """Solve a small dense system, refusing matrices singular to working precision."""
    A = np.asarray(A, dtype=float)
    b = np.asarray(b, dtype=float)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise ValueError(f"expected square matrix, got shape {A.shape}")
    if A.shape[0] == 0:
        return np.zeros(b.shape)
    cond = np.linalg.cond(A)
    if not np.isfinite(cond) or cond > 1.0 / (64 * np.finfo(float).eps):
        raise SingularMatrixError(f"matrix is singular to working precision (cond={cond:.3g})")
    x = np.linalg.solve(A, b)
    # one step of iterative refinement keeps the residual near machine precision
    x += np.linalg.solve(A, b - A @ x)
    return x
