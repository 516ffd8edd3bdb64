"""Small dense linear-algebra helpers shared across modules."""

import numpy as np

from .errors import InvalidInput

HERMITIAN_ATOL = 1e-12
PSD_RTOL = 1e-10


def hermitian_defect(A):
    """Largest absolute entrywise deviation from Hermitian symmetry."""
    A = np.asarray(A)
    if A.size == 0:
        return 0.0
    return float(np.max(np.abs(A - A.conj().T)))


def check_hermitian(A, name="matrix", psd=False, atol=None):
    """Validate that ``A`` is square Hermitian (and optionally PSD); return it as complex.

    The Hermitian tolerance scales with the largest entry so that matrices
    produced by floating point products (e.g. ``S @ S.conj().T``) pass.
    """
    A = np.asarray(A, dtype=complex)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise InvalidInput(f"{name} must be square, got shape {A.shape}")
    scale = max(1.0, float(np.max(np.abs(A)))) if A.size else 1.0
    tol = HERMITIAN_ATOL * scale if atol is None else atol
    if hermitian_defect(A) > tol:
        raise InvalidInput(f"{name} is not Hermitian (defect {hermitian_defect(A):.3g})")
    if psd and A.size:
        w = np.linalg.eigvalsh(hermitize(A))
        if w[0] < -PSD_RTOL * max(w[-1], 0.0) - HERMITIAN_ATOL * scale:
            raise InvalidInput(f"{name} is not positive semidefinite (min eigenvalue {w[0]:.3g})")
    return A


def hermitize(A):
    return 0.5 * (A + A.conj().T)


def logdet_pd(A):
    """Natural log-determinant of a Hermitian positive-definite matrix.

    Uses a Cholesky factorization; if that fails, retries once with a
    diagonal jitter of ``1e-12 * trace``.
    """
    A = hermitize(np.asarray(A, dtype=complex))
    n = A.shape[0]
    if n == 0:
        return 0.0
    try:
        L = np.linalg.cholesky(A)
    except np.linalg.LinAlgError:
        jitter = 1e-12 * abs(np.trace(A).real)
        L = np.linalg.cholesky(A + jitter * np.eye(n))
    return 2.0 * float(np.sum(np.log(np.diag(L).real)))


def psd_sqrt_factor(A, rank_tol):
    """Return ``(U, w)`` with ``A ~= U diag(w) U^H`` keeping eigenvalues >= rank_tol * max.

    Eigen-pairs are sorted by decreasing eigenvalue.
    """
    A = hermitize(np.asarray(A, dtype=complex))
    w, U = np.linalg.eigh(A)
    order = np.argsort(-w, kind="stable")
    w, U = w[order], U[:, order]
    if w.size == 0 or w[0] <= 0.0:
        return U[:, :0], w[:0]
    keep = w >= rank_tol * w[0]
    return U[:, keep], w[keep]
