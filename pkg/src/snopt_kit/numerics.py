"""Dense linear-algebra kernels shared by the rest of the package.

Matrices are plain ``numpy.ndarray`` objects.  Vectorisation is
column-major (Fortran order) everywhere: ``vec`` stacks columns, so the
two identities the preconditioner relies on,

    (A ⊗ B) (C ⊗ D)^T = (A C^T) ⊗ (B D^T)
    (A ⊗ B)^{-1} vec(W) = vec(B^{-1} W A^{-T}),

hold literally.  Mixing in a row-major ``reshape`` anywhere silently
breaks both, which is why :func:`vec` / :func:`unvec` are the only
sanctioned conversions.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

COND_LIMIT = 1e12
SYM_TOL = 1e-10


class SingularMatrix(ValueError):
    """A factor is numerically singular (condition estimate above 1e12)."""


class NotSymmetric(ValueError):
    """Input violates the symmetry tolerance of the eigensolver."""


def vec(mat: np.ndarray) -> np.ndarray:
    """Column-major vectorisation of a matrix."""
    return np.asarray(mat).reshape(-1, order="F")


def unvec(w: np.ndarray, rows: int, cols: int) -> np.ndarray:
    """Inverse of :func:`vec`; fails loudly on a size mismatch."""
    w = np.asarray(w)
    if w.size != rows * cols:
        raise ValueError(f"cannot unvec length {w.size} into {rows}x{cols}")
    return w.reshape(rows, cols, order="F")


def kron(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Kronecker product (package-wide spelling of ``numpy.kron``)."""
    return np.kron(np.asarray(a, dtype=float), np.asarray(b, dtype=float))


def _condition(mat: np.ndarray) -> float:
    """Condition estimate: eigenvalue ratio when symmetric, SVD otherwise.

    Only symmetric factors are ever inverted in this package, so the
    eigenvalue ratio is the cheap common case.
    """
    mat = np.asarray(mat, dtype=float)
    if mat.shape[0] != mat.shape[1]:
        raise ValueError("condition estimate needs a square matrix")
    if np.max(np.abs(mat - mat.T)) <= SYM_TOL * max(1.0, np.max(np.abs(mat))):
        lam = np.abs(np.linalg.eigvalsh(mat))
    else:
        lam = np.linalg.svd(mat, compute_uv=False)
    lo = lam.min()
    if lo == 0.0 or not np.isfinite(lam).all():
        return np.inf
    return float(lam.max() / lo)


def kron_solve_vec(a: np.ndarray, b: np.ndarray, w: np.ndarray) -> np.ndarray:
    """Solve ``(A ⊗ B) y = w`` without assembling the Kronecker product.

    Returns ``vec(B^{-1} unvec(w) A^{-T})``, which equals the dense solve
    under the column-major convention.  ``w`` must have length
    ``cols(A) * rows(B)``.
    """
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape[0] != a.shape[1] or b.shape[0] != b.shape[1]:
        raise ValueError("kron_solve_vec needs square factors")
    for name, mat in (("A", a), ("B", b)):
        if _condition(mat) > COND_LIMIT:
            raise SingularMatrix(f"factor {name} is numerically singular")
    mat_w = unvec(w, b.shape[0], a.shape[1])
    x = np.linalg.solve(b, mat_w)
    # X A^{-T} computed as solve(A, X^T)^T
    return vec(np.linalg.solve(a, x.T).T)


@dataclass
class SymEigen:
    """Eigendecomposition of a symmetric matrix, eigenvalues descending."""

    values: np.ndarray
    vectors: np.ndarray

    def reconstruct(self) -> np.ndarray:
        return self.vectors @ np.diag(self.values) @ self.vectors.T


def sym_eigen(mat: np.ndarray) -> SymEigen:
    """Eigendecomposition of a symmetric matrix via LAPACK ``eigh``.

    Raises :class:`NotSymmetric` when the asymmetry exceeds 1e-10 relative
    to the matrix scale.  Eigenvalues come back in descending order with
    eigenvectors as the matching columns.
    """
    mat = np.asarray(mat, dtype=float)
    if mat.ndim != 2 or mat.shape[0] != mat.shape[1]:
        raise ValueError("sym_eigen needs a square matrix")
    scale = max(1.0, float(np.max(np.abs(mat))) if mat.size else 1.0)
    if np.max(np.abs(mat - mat.T)) > SYM_TOL * scale:
        raise NotSymmetric("matrix is not symmetric within 1e-10")
    values, vectors = np.linalg.eigh(0.5 * (mat + mat.T))
    order = np.argsort(values)[::-1]
    return SymEigen(values=values[order], vectors=vectors[:, order])
