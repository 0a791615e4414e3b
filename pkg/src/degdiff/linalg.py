"""Small dense linear algebra used throughout the package.

Everything here accepts stacks of matrices (leading batch axes) so that
the simulation layer can project thousands of states in one call.
"""

import numpy as np

DEFAULT_TOL_REL = 1e-10


class InvalidInputError(ValueError):
    """Raised when a matrix contains NaN or infinite entries."""


def _check_finite(m):
    m = np.asarray(m, dtype=float)
    if not np.all(np.isfinite(m)):
        raise InvalidInputError("matrix has non-finite entries")
    return m


def pinv(m, tol_rel=DEFAULT_TOL_REL):
    """Moore-Penrose pseudo-inverse.

    Singular values below ``tol_rel`` times the largest singular value of
    each matrix are treated as zero.

    Parameters
    ----------
    m : array_like, shape (..., r, c)
    tol_rel : float
        Relative rank cutoff, must be positive.

    Returns
    -------
    ndarray, shape (..., c, r)
    """
    if tol_rel <= 0:
        raise ValueError("tol_rel must be positive")
    m = _check_finite(m)
    u, s, vt = np.linalg.svd(m, full_matrices=False)
    smax = s[..., :1]
    keep = s > tol_rel * smax
    s_inv = np.where(keep, 1.0 / np.where(keep, s, 1.0), 0.0)
    return np.swapaxes(vt, -1, -2) @ (s_inv[..., :, None] * np.swapaxes(u, -1, -2))


def projection_range_adjoint(sigma, tol_rel=DEFAULT_TOL_REL):
    """Orthogonal projector of R^d onto the range of ``sigma.T``.

    For ``sigma`` of shape (..., n, d) this is ``P = sigma* (sigma sigma*)^+ sigma``.
    It is built from the right singular vectors belonging to the
    non-negligible singular values, which gives an exactly symmetric result.
    """
    sigma = _check_finite(sigma)
    _, s, vt = np.linalg.svd(sigma, full_matrices=False)
    keep = s > tol_rel * s[..., :1]
    v = np.swapaxes(vt, -1, -2) * keep[..., None, :]
    p = v @ np.swapaxes(v, -1, -2)
    return 0.5 * (p + np.swapaxes(p, -1, -2))


def norms(m):
    """Frobenius and operator (largest singular value) norms.

    Returns a dict with keys ``frobenius`` and ``operator``; for stacked
    input the values are arrays over the batch axes.
    """
    m = _check_finite(m)
    fro = np.sqrt(np.sum(m * m, axis=(-2, -1)))
    op = np.linalg.svd(m, compute_uv=False)[..., 0] if m.size else np.zeros(m.shape[:-2])
    if np.ndim(fro) == 0:
        return {"frobenius": float(fro), "operator": float(op)}
    return {"frobenius": fro, "operator": op}


def operator_norm(m):
    """Largest singular value, batched over leading axes."""
    return np.linalg.svd(np.asarray(m, dtype=float), compute_uv=False)[..., 0]
