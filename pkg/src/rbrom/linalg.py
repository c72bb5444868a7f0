"""Dense and sparse kernels used by every stage of the pipeline.

Factorizations (Cholesky, LU) are thin wrappers over LAPACK with this
package's validation and error surface on top. The thin SVD is a
hand-written one-sided Jacobi: it is deterministic for a fixed input,
needs no workspace tuning, and its accuracy on the short-and-fat or
tall-and-thin snapshot matrices seen here is at the round-off level.

All dense containers are float64 C-order numpy arrays. Sparse matrices
use the compressed-sparse-row triple (indptr, indices, data).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import solve_triangular
from scipy.linalg.lapack import dgetrf, dgetrs, dpotrf, dpotrs

from .errors import (
    ConvergenceError,
    NotPositiveDefiniteError,
    SingularMatrixError,
)

__all__ = [
    "CsrMatrix",
    "CholeskyFactor",
    "LuFactor",
    "as_matrix",
    "as_vector",
    "cholesky",
    "csr_add_scaled",
    "csr_matvec",
    "lu_factor",
    "lu_solve",
    "solve_spd",
    "thin_svd",
]

# Relative threshold below which singular values / pivots are treated as
# exact zeros.  Keyed to float64 round-off on the problem sizes in play.
_RANK_FLOOR = 1e-14


def as_matrix(a, name="array"):
    """Validate and return `a` as a finite float64 2-D array.

    Raises ValueError on wrong rank or non-finite entries.
    """
    out = np.ascontiguousarray(a, dtype=np.float64)
    if out.ndim != 2:
        raise ValueError(f"{name}: expected a 2-D array, got ndim={out.ndim}")
    if not np.all(np.isfinite(out)):
        raise ValueError(f"{name}: contains non-finite entries")
    return out


def as_vector(a, name="array"):
    """Validate and return `a` as a finite float64 1-D array."""
    out = np.ascontiguousarray(a, dtype=np.float64)
    if out.ndim != 1:
        raise ValueError(f"{name}: expected a 1-D array, got ndim={out.ndim}")
    if not np.all(np.isfinite(out)):
        raise ValueError(f"{name}: contains non-finite entries")
    return out


@dataclass(frozen=True)
class CsrMatrix:
    """Immutable CSR matrix over float64.

    Parameters
    ----------
    rows, cols : int
        Matrix dimensions.
    indptr : (rows+1,) int64 array
        Row pointer; row i owns entries indptr[i]:indptr[i+1].
    indices : (nnz,) int64 array
        Column index per entry, ascending within each row.
    data : (nnz,) float64 array
        Entry values.
    """

    rows: int
    cols: int
    indptr: np.ndarray
    indices: np.ndarray
    data: np.ndarray
    # Derived: starts of the nonempty-row segments, filled in __post_init__.
    _row_has_entries: np.ndarray = field(repr=False, default=None)
    _segment_starts: np.ndarray = field(repr=False, default=None)

    def __post_init__(self):
        indptr = np.ascontiguousarray(self.indptr, dtype=np.int64)
        indices = np.ascontiguousarray(self.indices, dtype=np.int64)
        data = np.ascontiguousarray(self.data, dtype=np.float64)
        if indptr.shape != (self.rows + 1,):
            raise ValueError("CsrMatrix: indptr length must be rows + 1")
        if indptr[0] != 0 or indptr[-1] != indices.size:
            raise ValueError("CsrMatrix: indptr endpoints inconsistent")
        if np.any(np.diff(indptr) < 0):
            raise ValueError("CsrMatrix: indptr must be nondecreasing")
        if indices.size != data.size:
            raise ValueError("CsrMatrix: indices/data length mismatch")
        if indices.size and (indices.min() < 0 or indices.max() >= self.cols):
            raise ValueError("CsrMatrix: column index out of range")
        if not np.all(np.isfinite(data)):
            raise ValueError("CsrMatrix: non-finite entries")
        object.__setattr__(self, "indptr", indptr)
        object.__setattr__(self, "indices", indices)
        object.__setattr__(self, "data", data)
        has = np.diff(indptr) > 0
        object.__setattr__(self, "_row_has_entries", has)
        object.__setattr__(self, "_segment_starts", indptr[:-1][has])

    @property
    def nnz(self):
        return int(self.data.size)

    @classmethod
    def from_coo(cls, rows, cols, row_idx, col_idx, values):
        """Build from coordinate triplets, summing duplicate positions."""
        row_idx = np.asarray(row_idx, dtype=np.int64)
        col_idx = np.asarray(col_idx, dtype=np.int64)
        values = np.asarray(values, dtype=np.float64)
        if not (row_idx.shape == col_idx.shape == values.shape):
            raise ValueError("from_coo: triplet arrays must share a shape")
        if row_idx.size == 0:
            return cls(rows, cols, np.zeros(rows + 1, dtype=np.int64),
                       np.zeros(0, dtype=np.int64), np.zeros(0))
        if row_idx.min() < 0 or row_idx.max() >= rows:
            raise ValueError("from_coo: row index out of range")
        if col_idx.min() < 0 or col_idx.max() >= cols:
            raise ValueError("from_coo: column index out of range")
        order = np.lexsort((col_idx, row_idx))
        r = row_idx[order]
        c = col_idx[order]
        v = values[order]
        first = np.empty(r.size, dtype=bool)
        first[0] = True
        first[1:] = (r[1:] != r[:-1]) | (c[1:] != c[:-1])
        starts = np.flatnonzero(first)
        data = np.add.reduceat(v, starts)
        rr = r[starts]
        cc = c[starts]
        counts = np.bincount(rr, minlength=rows)
        indptr = np.zeros(rows + 1, dtype=np.int64)
        np.cumsum(counts, out=indptr[1:])
        return cls(rows, cols, indptr, cc, data)

    @classmethod
    def from_dense(cls, a):
        a = as_matrix(a, "from_dense")
        r, c = np.nonzero(a)
        return cls(a.shape[0], a.shape[1], *_coo_triple(a, r, c))

    def matvec(self, x):
        """Return A @ x for a vector x of length `cols`."""
        x = np.asarray(x, dtype=np.float64)
        if x.shape != (self.cols,):
            raise ValueError(
                f"matvec: operand has shape {x.shape}, expected ({self.cols},)")
        out = np.zeros(self.rows)
        if self.data.size:
            products = self.data * x[self.indices]
            out[self._row_has_entries] = np.add.reduceat(
                products, self._segment_starts)
        return out

    def matmat(self, x):
        """Return A @ X for a dense (cols, k) matrix X."""
        x = as_matrix(x, "matmat operand")
        if x.shape[0] != self.cols:
            raise ValueError("matmat: inner dimensions disagree")
        out = np.zeros((self.rows, x.shape[1]))
        if self.data.size:
            products = self.data[:, None] * x[self.indices]
            out[self._row_has_entries] = np.add.reduceat(
                products, self._segment_starts, axis=0)
        return out

    def to_dense(self):
        out = np.zeros((self.rows, self.cols))
        for i in range(self.rows):
            lo, hi = self.indptr[i], self.indptr[i + 1]
            out[i, self.indices[lo:hi]] = self.data[lo:hi]
        return out


def _coo_triple(a, r, c):
    indptr = np.zeros(a.shape[0] + 1, dtype=np.int64)
    np.cumsum(np.bincount(r, minlength=a.shape[0]), out=indptr[1:])
    return indptr, c.astype(np.int64), a[r, c].astype(np.float64)


def csr_matvec(a: CsrMatrix, x):
    """Sparse matrix times dense vector."""
    return a.matvec(x)


def csr_add_scaled(terms):
    """Linear combination sum_j coeff_j * A_j of CSR matrices.

    Parameters
    ----------
    terms : sequence of (float, CsrMatrix)
        All matrices must share dimensions.

    Returns
    -------
    CsrMatrix
    """
    terms = list(terms)
    if not terms:
        raise ValueError("csr_add_scaled: empty term list")
    rows, cols = terms[0][1].rows, terms[0][1].cols
    ri, ci, vals = [], [], []
    for coeff, mat in terms:
        if (mat.rows, mat.cols) != (rows, cols):
            raise ValueError("csr_add_scaled: dimension mismatch")
        counts = np.diff(mat.indptr)
        ri.append(np.repeat(np.arange(rows, dtype=np.int64), counts))
        ci.append(mat.indices)
        vals.append(float(coeff) * mat.data)
    return CsrMatrix.from_coo(rows, cols,
                              np.concatenate(ri),
                              np.concatenate(ci),
                              np.concatenate(vals))


@dataclass(frozen=True)
class CholeskyFactor:
    """Lower-triangular factor L with M = L L^T."""

    l: np.ndarray

    @property
    def n(self):
        return self.l.shape[0]

    def solve(self, rhs):
        """Solve M x = rhs (rhs may be a vector or a matrix of columns)."""
        b = np.asarray(rhs, dtype=np.float64)
        vector = b.ndim == 1
        x, info = dpotrs(self.l, b if not vector else b[:, None], lower=1)
        if info != 0:
            raise SingularMatrixError(f"dpotrs failed with info={info}")
        return x[:, 0] if vector else x

    def apply_lt(self, x):
        """Return L^T @ x."""
        return self.l.T @ np.asarray(x, dtype=np.float64)

    def solve_lt(self, x):
        """Solve L^T y = x (x may hold multiple columns)."""
        return solve_triangular(self.l, np.asarray(x, dtype=np.float64),
                                lower=True, trans="T")


def cholesky(m) -> CholeskyFactor:
    """Cholesky factorization of a symmetric positive definite matrix.

    Parameters
    ----------
    m : (n, n) array
        Must be symmetric to within 1e-12 relative.

    Returns
    -------
    CholeskyFactor

    Raises
    ------
    NotPositiveDefiniteError
        If a pivot is not positive; the message names the failing row.
    """
    m = as_matrix(m, "cholesky operand")
    if m.shape[0] != m.shape[1]:
        raise ValueError("cholesky: matrix must be square")
    scale = np.abs(m).max()
    if scale > 0 and np.abs(m - m.T).max() > 1e-12 * scale:
        raise ValueError("cholesky: matrix is not symmetric")
    c, info = dpotrf(m, lower=1, clean=1)
    if info > 0:
        raise NotPositiveDefiniteError(
            f"matrix not positive definite: pivot at row {info - 1}")
    if info < 0:
        raise ValueError(f"cholesky: illegal argument {-info}")
    return CholeskyFactor(l=c)


def solve_spd(m, rhs):
    """Solve M x = rhs for symmetric positive definite M.

    `m` may be a matrix or an existing CholeskyFactor.
    """
    factor = m if isinstance(m, CholeskyFactor) else cholesky(m)
    return factor.solve(rhs)


@dataclass(frozen=True)
class LuFactor:
    """Pivoted LU factorization as returned by LAPACK dgetrf."""

    lu: np.ndarray
    piv: np.ndarray

    def solve(self, rhs):
        b = np.asarray(rhs, dtype=np.float64)
        vector = b.ndim == 1
        x, info = dgetrs(self.lu, self.piv, b if not vector else b[:, None])
        if info != 0:
            raise SingularMatrixError(f"dgetrs failed with info={info}")
        return x[:, 0] if vector else x


def lu_factor(a) -> LuFactor:
    """Pivoted LU factorization with a singularity check.

    Raises
    ------
    SingularMatrixError
        On an exactly zero pivot, or a pivot smaller than 1e-14 times the
        largest pivot (singular to working precision); names the pivot.
    """
    a = as_matrix(a, "lu operand")
    if a.shape[0] != a.shape[1]:
        raise ValueError("lu_factor: matrix must be square")
    lu, piv, info = dgetrf(a)
    if info < 0:
        raise ValueError(f"lu_factor: illegal argument {-info}")
    if info > 0:
        raise SingularMatrixError(f"matrix is singular: zero pivot at row {info - 1}")
    udiag = np.abs(np.diag(lu))
    if udiag.min() <= _RANK_FLOOR * udiag.max():
        row = int(np.argmin(udiag))
        raise SingularMatrixError(
            f"matrix is singular to working precision: pivot at row {row}")
    return LuFactor(lu=lu, piv=piv)


def lu_solve(a, rhs):
    """Solve A x = rhs; `a` may be a matrix or an existing LuFactor."""
    factor = a if isinstance(a, LuFactor) else lu_factor(a)
    return factor.solve(rhs)


def thin_svd(a, max_sweeps=30, tol=1e-12):
    """Thin singular value decomposition via one-sided Jacobi.

    Columns of the working matrix are orthogonalized in place by plane
    rotations; accumulated rotations give the right singular vectors.  The
    wide case is handled on the transpose.  Deterministic: cyclic pair
    ordering, no randomization.

    Parameters
    ----------
    a : (m, n) array
    max_sweeps : int
        Sweep budget; exceeding it raises ConvergenceError.
    tol : float
        A pair (p, q) is rotated only while |b_p . b_q| exceeds
        tol * ||b_p|| * ||b_q||.

    Returns
    -------
    (u, sigma, vt)
        u is (m, k), sigma (k,) descending, vt (k, n), k = min(m, n).
        Singular values below 1e-14 * sigma[0] are reported as exact zeros;
        the matching columns of u are an arbitrary orthonormal completion.
    """
    a = as_matrix(a, "thin_svd operand")
    if a.size == 0:
        raise ValueError("thin_svd: empty matrix")
    if a.shape[1] > a.shape[0]:
        u_t, sigma, vt_t = thin_svd(a.T, max_sweeps=max_sweeps, tol=tol)
        return vt_t.T, sigma, u_t.T

    b = a.copy()
    n = b.shape[1]
    v = np.eye(n)
    norms2 = np.einsum("ij,ij->j", b, b)
    converged = False
    for _ in range(max_sweeps):
        rotated = False
        # Columns at the zero floor carry singular values that are
        # reported as exact zeros; among them the off-diagonals are
        # rounding noise that would never pass the relative test, so
        # they are left alone.
        floor2 = (_RANK_FLOOR ** 2) * norms2.max()
        for p in range(n - 1):
            if norms2[p] <= floor2:
                continue
            bp = b[:, p]
            for q in range(p + 1, n):
                if norms2[q] <= floor2:
                    continue
                apq = bp @ b[:, q]
                denom2 = norms2[p] * norms2[q]
                if denom2 <= 0.0 or apq * apq <= (tol * tol) * denom2:
                    continue
                rotated = True
                tau = (norms2[q] - norms2[p]) / (2.0 * apq)
                t = np.sign(tau) / (abs(tau) + np.hypot(1.0, tau))
                if tau == 0.0:
                    t = 1.0
                c = 1.0 / np.hypot(1.0, t)
                s = c * t
                bq = b[:, q].copy()
                bpc = bp.copy()
                b[:, p] = c * bpc - s * bq
                b[:, q] = s * bpc + c * bq
                vq = v[:, q].copy()
                vpc = v[:, p].copy()
                v[:, p] = c * vpc - s * vq
                v[:, q] = s * vpc + c * vq
                norms2[p] -= t * apq
                norms2[q] += t * apq
        if not rotated:
            converged = True
            break
        # Cached norms drift across many rotations; refresh per sweep.
        norms2 = np.einsum("ij,ij->j", b, b)
    if not converged:
        worst = _max_relative_offdiag(b)
        raise ConvergenceError(
            f"thin_svd: no convergence in {max_sweeps} sweeps "
            f"(max relative off-diagonal {worst:.3e})")

    sigma = np.sqrt(np.einsum("ij,ij->j", b, b))
    order = np.argsort(-sigma, kind="stable")
    sigma = sigma[order]
    b = b[:, order]
    v = v[:, order]
    if sigma[0] > 0.0:
        sigma[sigma < _RANK_FLOOR * sigma[0]] = 0.0
    u = np.zeros_like(b)
    positive = sigma > 0.0
    u[:, positive] = b[:, positive] / sigma[positive]
    if not positive.all():
        _complete_orthonormal(u, int(positive.sum()))
    return u, sigma, v.T


def _max_relative_offdiag(b):
    g = b.T @ b
    d = np.sqrt(np.abs(np.diag(g)))
    denom = np.outer(d, d)
    with np.errstate(invalid="ignore", divide="ignore"):
        rel = np.abs(g) / np.where(denom > 0, denom, np.inf)
    np.fill_diagonal(rel, 0.0)
    return float(rel.max())


def _complete_orthonormal(u, k):
    """Fill columns k: of `u` with vectors orthonormal to columns :k.

    Canonical vectors are orthogonalized against the accepted columns
    (twice, which is enough for full precision) and kept unless they
    are numerically inside the span. The canonical basis spans the
    whole space, so one sweep normally completes;  a greedy pass over
    the leftover directions covers adversarial orderings.
    """
    m, n = u.shape
    col = k
    for cand in range(m):
        if col == n:
            return
        w = np.zeros(m)
        w[cand] = 1.0
        for _ in range(2):
            w -= u[:, :col] @ (u[:, :col].T @ w)
        norm = np.sqrt(w @ w)
        if norm > 1e-8:
            u[:, col] = w / norm
            col += 1
    while col < n:
        resid = np.eye(m) - u[:, :col] @ u[:, :col].T
        best = int(np.argmax(np.linalg.norm(resid, axis=0)))
        w = resid[:, best]
        w -= u[:, :col] @ (u[:, :col].T @ w)
        norm = np.sqrt(w @ w)
        if norm <= 1e-10:
            raise ConvergenceError(
                "thin_svd: failed to complete orthonormal basis")
        u[:, col] = w / norm
        col += 1
