"""Dense complex/real linear algebra kernels used throughout the toolkit.

Every inverted matrix in this codebase is Hermitian positive definite, so
inversion goes through Cholesky (with a definiteness guard) rather than a
general LU path.
"""

import numpy as np

from .errors import NotPositiveDefinite, RankDeficient


def _cholesky_lower(a):
    """Lower Cholesky factor of a Hermitian PD matrix, or raise."""
    try:
        return np.linalg.cholesky(a)
    except np.linalg.LinAlgError as exc:
        raise NotPositiveDefinite(str(exc)) from exc


def hermitian_inverse(a):
    """Invert a Hermitian positive definite matrix via Cholesky.

    Works for real symmetric PD input as well. Raises NotPositiveDefinite
    when a Cholesky pivot fails.
    """
    a = np.asarray(a)
    low = _cholesky_lower(a)
    eye = np.eye(a.shape[0], dtype=low.dtype)
    # A^{-1} = L^{-H} L^{-1}
    linv = np.linalg.solve(low, eye)
    return linv.conj().T @ linv


def cholesky_upper(a):
    """Upper triangular C with C^T C = a, for real symmetric PD a."""
    a = np.asarray(a, dtype=np.float64)
    return _cholesky_lower(a).T.copy()


def real_composite(x):
    """Real representation of a complex vector or matrix.

    Vector a -> [Re(a); Im(a)]; matrix A -> [[Re A, -Im A], [Im A, Re A]].
    """
    x = np.asarray(x)
    if x.ndim <= 1:
        v = np.atleast_1d(x)
        return np.concatenate([v.real, v.imag]).astype(np.float64)
    if x.ndim != 2:
        raise ValueError("expected a scalar, vector, or matrix")
    return np.block([[x.real, -x.imag], [x.imag, x.real]]).astype(np.float64)


def real_vector_to_complex(v):
    """Inverse of real_composite on vectors: [Re; Im] -> complex."""
    v = np.asarray(v, dtype=np.float64)
    n = v.shape[0] // 2
    return v[:n] + 1j * v[n:]


def pseudo_inverse_fat(h):
    """Right pseudo-inverse H^H (H H^H)^{-1} of a fat full-row-rank matrix."""
    h = np.asarray(h, dtype=np.complex128)
    gram = h @ h.conj().T
    try:
        gram_inv = hermitian_inverse(gram)
    except NotPositiveDefinite as exc:
        raise RankDeficient("channel matrix is not full row rank") from exc
    return h.conj().T @ gram_inv


def frobenius_normalize(a):
    """Scale a matrix (or stack of matrices) to unit Frobenius norm."""
    a = np.asarray(a)
    if a.ndim == 2:
        return a / np.linalg.norm(a)
    norms = np.linalg.norm(a, axis=(-2, -1), keepdims=True)
    return a / norms
