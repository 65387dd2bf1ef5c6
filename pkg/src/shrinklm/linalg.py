"""Dense real linear-algebra kernels: SVD and Cholesky.

Everything here is self-contained numpy on float64 arrays (row-major).
The SVD is a one-sided Jacobi: rotations are applied to column pairs of
the matrix until all columns are mutually orthogonal, which gives U and
the singular values directly and accumulates V on the way. Jacobi is
slower than blocked LAPACK kernels but it is simple, accurate at the
matrix sizes used here, and fully deterministic.

All kernels are pure functions on immutable inputs; they never mutate
their arguments and are safe to call from multiple threads.
"""

from dataclasses import dataclass

import numpy as np

from .errors import NumericalError, ValidationError

# Jacobi sweep controls: a column pair is rotated while the normalized
# off-diagonal |a_i . a_j| / (|a_i| |a_j|) exceeds the tolerance.
JACOBI_TOL = 1e-12
JACOBI_MAX_SWEEPS = 100


def as_matrix(a, label: str = "matrix") -> np.ndarray:
    """Validate a 2-D real array: non-empty, finite, float64 copy-free view."""
    arr = np.asarray(a, dtype=np.float64)
    if arr.ndim != 2:
        raise ValidationError(f"{label}: expected a 2-D array, got ndim={arr.ndim}")
    if arr.size == 0:
        raise ValidationError(f"{label}: empty matrix ({arr.shape[0]}x{arr.shape[1]})")
    if not np.all(np.isfinite(arr)):
        raise ValidationError(f"{label}: non-finite entries (NaN/Inf) rejected")
    return np.ascontiguousarray(arr)


@dataclass
class SvdResult:
    """Thin SVD a = u @ diag(singular_values) @ vt.

    u is m x p with orthonormal columns, vt is p x n with orthonormal
    rows, p = min(m, n). Singular values are non-negative and sorted
    descending. The sign convention (first nonzero entry of each column
    of u is non-negative) makes the factorization deterministic.
    """

    u: np.ndarray
    singular_values: np.ndarray
    vt: np.ndarray

    def truncated(self, r: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Leading-r factors (u_r, s_r, vt_r)."""
        return self.u[:, :r], self.singular_values[:r], self.vt[:r, :]


def _jacobi_tall(a: np.ndarray, label: str) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """One-sided Jacobi on a tall matrix (m >= n). Returns (u, s, v)."""
    m, n = a.shape
    work = a.copy()
    v = np.eye(n)

    for _ in range(JACOBI_MAX_SWEEPS):
        # Column squared norms refreshed per sweep; rotations update them
        # incrementally below to avoid n*n full dots per pair.
        norms = np.einsum("ij,ij->j", work, work)
        rotated = False
        for i in range(n - 1):
            for j in range(i + 1, n):
                alpha = norms[i]
                beta = norms[j]
                gamma = float(work[:, i] @ work[:, j])
                if alpha == 0.0 or beta == 0.0:
                    continue
                if abs(gamma) <= JACOBI_TOL * np.sqrt(alpha * beta):
                    continue
                rotated = True
                zeta = (beta - alpha) / (2.0 * gamma)
                t = np.sign(zeta) / (abs(zeta) + np.sqrt(1.0 + zeta * zeta))
                if zeta == 0.0:
                    t = 1.0
                c = 1.0 / np.sqrt(1.0 + t * t)
                s = c * t
                col_i = work[:, i].copy()
                work[:, i] = c * col_i - s * work[:, j]
                work[:, j] = s * col_i + c * work[:, j]
                vcol_i = v[:, i].copy()
                v[:, i] = c * vcol_i - s * v[:, j]
                v[:, j] = s * vcol_i + c * v[:, j]
                norms[i] = c * c * alpha - 2.0 * c * s * gamma + s * s * beta
                norms[j] = s * s * alpha + 2.0 * c * s * gamma + c * c * beta
        if not rotated:
            break
    else:
        raise NumericalError(
            f"svd({label}): Jacobi did not converge within {JACOBI_MAX_SWEEPS} sweeps "
            f"for shape {m}x{n}"
        )

    sigma = np.sqrt(np.einsum("ij,ij->j", work, work))
    order = np.argsort(-sigma, kind="stable")
    sigma = sigma[order]
    work = work[:, order]
    v = v[:, order]

    u = np.zeros_like(work)
    nonzero = sigma > 0.0
    u[:, nonzero] = work[:, nonzero] / sigma[nonzero]

    # Zero singular values leave their U columns undetermined: complete the
    # basis by Gram-Schmidt against the columns already present.
    if not np.all(nonzero):
        filled = list(np.nonzero(nonzero)[0])
        for idx in np.nonzero(~nonzero)[0]:
            for k in range(m):
                cand = np.zeros(m)
                cand[k] = 1.0
                for f in filled:
                    cand -= (u[:, f] @ cand) * u[:, f]
                nrm = np.linalg.norm(cand)
                if nrm > 1e-8:
                    u[:, idx] = cand / nrm
                    filled.append(idx)
                    break
            else:
                raise NumericalError(f"svd({label}): could not complete orthonormal basis")
    return u, sigma, v


def svd(a, label: str = "matrix") -> SvdResult:
    """Deterministic thin SVD via one-sided Jacobi rotations.

    Raises NumericalError if the sweep cap is hit, ValidationError for
    empty or non-finite input.
    """
    arr = as_matrix(a, label)
    m, n = arr.shape
    if m >= n:
        u, sigma, v = _jacobi_tall(arr, label)
        vt = v.T.copy()
    else:
        # Wide matrix: factor the transpose, then a = v s u^T.
        ut, sigma, vtall = _jacobi_tall(np.ascontiguousarray(arr.T), label)
        u = vtall
        vt = ut.T.copy()

    # Sign convention: first nonzero entry of each u column non-negative.
    for i in range(sigma.shape[0]):
        col = u[:, i]
        nz = np.nonzero(col)[0]
        if nz.size and col[nz[0]] < 0.0:
            u[:, i] = -col
            vt[i, :] = -vt[i, :]
    return SvdResult(u=u, singular_values=sigma, vt=vt)


def cholesky(a, label: str = "matrix") -> np.ndarray:
    """Lower-triangular L with L @ L.T = a for a symmetric positive-definite a.

    Symmetry is enforced within 1e-10 (absolute, relative to the largest
    entry); a non-positive pivot raises NumericalError naming its index.
    """
    arr = as_matrix(a, label)
    n, n2 = arr.shape
    if n != n2:
        raise ValidationError(f"cholesky({label}): square matrix required, got {n}x{n2}")
    scale = max(1.0, float(np.max(np.abs(arr))))
    if np.max(np.abs(arr - arr.T)) > 1e-10 * scale:
        raise ValidationError(f"cholesky({label}): matrix not symmetric within 1e-10")

    low = np.zeros_like(arr)
    for j in range(n):
        pivot = arr[j, j] - low[j, :j] @ low[j, :j]
        if pivot <= 0.0 or not np.isfinite(pivot):
            raise NumericalError(
                f"cholesky({label}): not positive definite at pivot {j} (value {pivot:.3e})"
            )
        low[j, j] = np.sqrt(pivot)
        if j + 1 < n:
            low[j + 1 :, j] = (arr[j + 1 :, j] - low[j + 1 :, :j] @ low[j, :j]) / low[j, j]
    return low


def solve_lower_triangular(low: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Solve low @ x = b by forward substitution (low lower-triangular)."""
    n = low.shape[0]
    x = np.array(b, dtype=np.float64, copy=True)
    for i in range(n):
        if i:
            x[i] -= low[i, :i] @ x[:i]
        x[i] /= low[i, i]
    return x


def lower_triangular_inverse(low: np.ndarray) -> np.ndarray:
    """Inverse of a lower-triangular matrix, column by column."""
    n = low.shape[0]
    inv = np.zeros_like(low)
    eye = np.eye(n)
    for j in range(n):
        inv[:, j] = solve_lower_triangular(low, eye[:, j])
    return inv
