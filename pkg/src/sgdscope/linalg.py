"""Dense symmetric-matrix primitives for small optimization problems.

Everything here targets modest dimensions (tens to a few hundred): a
validated symmetric-matrix container, a cyclic Jacobi eigensolver, a
positive-semidefinite square root, and a solver for the stationary
covariance equation ``G @ H + H @ G = Q`` with ``H`` symmetric positive
definite.  The Jacobi route is deliberately self-contained so that library
eigensolvers can serve as independent references in the test suite.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

__all__ = [
    "LinAlgError",
    "SymmetryError",
    "ConvergenceError",
    "NotPositiveDefiniteError",
    "SymMatrix",
    "EigenDecomposition",
    "sym_eigendecompose",
    "sqrt_spd",
    "solve_lyapunov",
    "trace",
    "write_matrix_csv",
    "read_matrix_csv",
]

# Relative slack allowed between mirrored entries of a symmetric matrix.
SYMMETRY_RTOL = 1e-12
# Eigenvalues of an allegedly PSD matrix may undershoot zero by this
# fraction of the spectral norm before we call it indefinite.
PSD_EIGENVALUE_SLACK = 1e-10
# Positive-definiteness margin required of the curvature matrix in
# solve_lyapunov, relative to its spectral norm.
PD_MARGIN = 1e-12


class LinAlgError(ValueError):
    """Base class for matrix precondition and convergence failures."""


class SymmetryError(LinAlgError):
    """Raised when a matrix fails the symmetry tolerance."""


class ConvergenceError(LinAlgError):
    """Raised when an iterative routine exhausts its budget."""


class NotPositiveDefiniteError(LinAlgError):
    """Raised when a matrix misses a required definiteness margin."""


@dataclass(frozen=True)
class SymMatrix:
    """Immutable dense real symmetric matrix.

    The constructor copies its input, validates squareness, finiteness and
    symmetry (``|e[i,j] - e[j,i]| <= 1e-12 * max(1, |e[i,j]|)``), and freezes
    the underlying array.
    """

    entries: np.ndarray

    def __post_init__(self) -> None:
        arr = np.array(self.entries, dtype=float)
        if arr.ndim != 2 or arr.shape[0] != arr.shape[1]:
            raise LinAlgError(f"expected a square matrix, got shape {arr.shape}")
        if arr.shape[0] < 1:
            raise LinAlgError("matrix dimension must be at least 1")
        if not np.isfinite(arr).all():
            raise LinAlgError("matrix entries must be finite")
        diff = np.abs(arr - arr.T)
        bound = SYMMETRY_RTOL * np.maximum(1.0, np.abs(arr))
        if (diff > bound).any():
            i, j = np.unravel_index(np.argmax(diff - bound), arr.shape)
            raise SymmetryError(
                f"matrix is not symmetric: entries ({i},{j})={arr[i, j]!r} and "
                f"({j},{i})={arr[j, i]!r} differ beyond tolerance"
            )
        arr.setflags(write=False)
        object.__setattr__(self, "entries", arr)

    @property
    def dim(self) -> int:
        return self.entries.shape[0]

    @classmethod
    def identity(cls, dim: int) -> "SymMatrix":
        return cls(np.eye(dim))

    @classmethod
    def diagonal(cls, values) -> "SymMatrix":
        return cls(np.diag(np.asarray(values, dtype=float)))

    @classmethod
    def zero(cls, dim: int) -> "SymMatrix":
        return cls(np.zeros((dim, dim)))

    @classmethod
    def from_array(cls, array) -> "SymMatrix":
        return cls(np.asarray(array, dtype=float))


@dataclass(frozen=True)
class EigenDecomposition:
    """Spectral factorization M = V diag(w) V^T, eigenvalues ascending."""

    eigenvalues: np.ndarray
    eigenvectors: np.ndarray

    def reconstruct(self) -> np.ndarray:
        return (self.eigenvectors * self.eigenvalues) @ self.eigenvectors.T


def _offdiag_norm(a: np.ndarray) -> float:
    off = a - np.diag(np.diag(a))
    return float(np.linalg.norm(off))


def sym_eigendecompose(
    matrix: SymMatrix, *, max_sweeps: int = 100, tol: float = 1e-14
) -> EigenDecomposition:
    """Full eigendecomposition by cyclic Jacobi rotations.

    Sweeps the strict upper triangle in row order, annihilating one
    off-diagonal pair per rotation, until the off-diagonal Frobenius norm
    drops below ``tol`` times the Frobenius norm of the input, or the sweep
    budget runs out.

    Returns eigenvalues in ascending order with matching eigenvector
    columns.  Raises :class:`ConvergenceError` when the budget is exhausted.
    """
    a = np.array(matrix.entries)
    n = a.shape[0]
    v = np.eye(n)
    target = tol * float(np.linalg.norm(a))
    converged = n == 1 or _offdiag_norm(a) <= target
    sweeps = 0
    while not converged:
        if sweeps >= max_sweeps:
            raise ConvergenceError(
                f"cyclic Jacobi did not reach off-diagonal tolerance {target:.3e} "
                f"within {max_sweeps} sweeps (dim={n}, off-diagonal norm "
                f"{_offdiag_norm(a):.3e})"
            )
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = a[p, q]
                if apq == 0.0:
                    continue
                app = a[p, p]
                aqq = a[q, q]
                theta = (aqq - app) / (2.0 * apq)
                if abs(theta) > 1e150:
                    # theta**2 would overflow; use the small-angle limit.
                    t = 1.0 / (2.0 * theta)
                else:
                    t = math.copysign(1.0, theta) / (
                        abs(theta) + math.sqrt(theta * theta + 1.0)
                    )
                c = 1.0 / math.sqrt(t * t + 1.0)
                s = t * c

                row_p = a[p, :].copy()
                row_q = a[q, :].copy()
                a[p, :] = c * row_p - s * row_q
                a[q, :] = s * row_p + c * row_q
                col_p = a[:, p].copy()
                col_q = a[:, q].copy()
                a[:, p] = c * col_p - s * col_q
                a[:, q] = s * col_p + c * col_q
                # Overwrite the 2x2 block with the stable closed form; the
                # rotation zeroes the (p,q) pair by construction.
                a[p, p] = app - t * apq
                a[q, q] = aqq + t * apq
                a[p, q] = 0.0
                a[q, p] = 0.0

                vec_p = v[:, p].copy()
                vec_q = v[:, q].copy()
                v[:, p] = c * vec_p - s * vec_q
                v[:, q] = s * vec_p + c * vec_q
        sweeps += 1
        converged = _offdiag_norm(a) <= target
    eigenvalues = np.diag(a).copy()
    order = np.argsort(eigenvalues, kind="stable")
    return EigenDecomposition(
        eigenvalues=eigenvalues[order], eigenvectors=v[:, order]
    )


def sqrt_spd(matrix: SymMatrix) -> np.ndarray:
    """Factor R with R @ R.T equal to the given PSD matrix.

    Eigenvalues in ``[-1e-10 * ||M||_2, 0)`` are treated as roundoff and
    clamped to zero; anything below that margin raises
    :class:`NotPositiveDefiniteError`.
    """
    eig = sym_eigendecompose(matrix)
    w = eig.eigenvalues
    spectral_norm = float(np.abs(w).max())
    floor = -PSD_EIGENVALUE_SLACK * spectral_norm
    lowest = float(w.min())
    if lowest < floor:
        raise NotPositiveDefiniteError(
            f"matrix is not positive semidefinite: eigenvalue {lowest:.6e} "
            f"is below the roundoff floor {floor:.6e}"
        )
    clamped = np.clip(w, 0.0, None)
    return eig.eigenvectors * np.sqrt(clamped)


def solve_lyapunov(hessian: SymMatrix, rhs: SymMatrix) -> SymMatrix:
    """Solve G @ H + H @ G = Q for symmetric G with H symmetric PD.

    Diagonalizes H and divides the rotated right-hand side entrywise by the
    eigenvalue-pair sums.  H must be positive definite with margin
    ``min eig > 1e-12 * ||H||_2``.
    """
    if hessian.dim != rhs.dim:
        raise LinAlgError(
            f"dimension mismatch: hessian is {hessian.dim}x{hessian.dim}, "
            f"right-hand side is {rhs.dim}x{rhs.dim}"
        )
    eig = sym_eigendecompose(hessian)
    w = eig.eigenvalues
    spectral_norm = float(np.abs(w).max())
    if float(w.min()) <= PD_MARGIN * spectral_norm:
        raise NotPositiveDefiniteError(
            "stationary covariance undefined: curvature eigenvalue "
            f"{float(w.min()):.6e} fails the positive-definiteness margin "
            f"{PD_MARGIN * spectral_norm:.6e}"
        )
    v = eig.eigenvectors
    rotated = v.T @ rhs.entries @ v
    scaled = rotated / (w[:, None] + w[None, :])
    out = v @ scaled @ v.T
    out = 0.5 * (out + out.T)
    return SymMatrix(out)


def trace(matrix: SymMatrix) -> float:
    return float(np.trace(matrix.entries))


def write_matrix_csv(path, matrix: SymMatrix) -> None:
    """Write a matrix as CSV: a ``# dim=<n>`` comment line, then rows."""
    lines = [f"# dim={matrix.dim}"]
    for row in matrix.entries:
        lines.append(",".join(repr(float(x)) for x in row))
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def read_matrix_csv(path) -> SymMatrix:
    """Read a matrix written by :func:`write_matrix_csv`."""
    with open(path, "r", encoding="utf-8") as fh:
        raw = [line.strip() for line in fh]
    lines = [line for line in raw if line]
    if not lines or not lines[0].startswith("#"):
        raise LinAlgError(f"{path}: missing '# dim=<n>' header line")
    header = lines[0].lstrip("#").strip()
    if not header.startswith("dim="):
        raise LinAlgError(f"{path}: malformed header {lines[0]!r}")
    try:
        dim = int(header[len("dim=") :])
    except ValueError as exc:
        raise LinAlgError(f"{path}: malformed header {lines[0]!r}") from exc
    body = [line for line in lines[1:] if not line.startswith("#")]
    if len(body) != dim:
        raise LinAlgError(
            f"{path}: expected {dim} data rows, found {len(body)}"
        )
    rows = []
    for line in body:
        cells = line.split(",")
        if len(cells) != dim:
            raise LinAlgError(
                f"{path}: expected {dim} columns, found {len(cells)} in {line!r}"
            )
        rows.append([float(c) for c in cells])
    return SymMatrix(np.array(rows))
