"""Dense linear algebra used by the losses and evaluators.

All routines are pure functions of their inputs, float64 throughout.
"""
from typing import NamedTuple

import numpy as np

from . import _accel, kernels
from .errors import InvalidInputError, NumericFailureError

#: rank(H) < 2 is declared when sigma_2 <= RANK_TOL * sigma_1
RANK_TOL = 1e-12


class SVD(NamedTuple):
    U: np.ndarray
    sigma: np.ndarray
    V: np.ndarray


class Alignment(NamedTuple):
    rotation: np.ndarray
    degenerate: bool


def _as_matrix(a):
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2 or min(a.shape) < 1:
        raise InvalidInputError(f"expected a non-empty 2-D matrix, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise InvalidInputError("matrix contains non-finite entries")
    return a


def svd(a, max_sweeps=kernels.MAX_SWEEPS, backend=None):
    """Thin singular value decomposition by one-sided Jacobi rotations.

    Parameters
    ----------
    a : array_like, shape (m, n)
    max_sweeps : int
        Iteration cap; exceeding it raises :class:`NumericFailureError`.
    backend : {"numba", "numpy"}, optional
        Overrides the process-wide kernel selection.

    Returns
    -------
    SVD
        ``U`` (m, r), ``sigma`` (r,) descending, ``V`` (n, r) with
        ``r = min(m, n)`` and ``a == U @ diag(sigma) @ V.T``. The
        largest-magnitude entry of every ``U`` column is non-negative.
    """
    a = _as_matrix(a)
    m, n = a.shape
    transposed = n > m
    work = a.T if transposed else a
    backend = backend or _accel.backend_name()
    kernel = kernels.svd_tall_numba if backend == "numba" else kernels.svd_tall_numpy
    tol = kernels.jacobi_tolerance(work.shape[0])
    u, sigma, v, sweeps, ok = kernel(np.ascontiguousarray(work), tol, max_sweeps)
    if not ok:
        raise NumericFailureError(f"Jacobi SVD did not converge in {sweeps} sweeps")
    if transposed:
        u, v = v, u
        # keep the sign convention on the returned U
        best = np.argmax(np.abs(u), axis=0)
        signs = np.where(u[best, np.arange(u.shape[1])] < 0.0, -1.0, 1.0)
        u = u * signs
        v = v * signs
    return SVD(u, sigma, v)


def det3(m):
    """Determinant of a 3x3 matrix by cofactor expansion."""
    m = np.asarray(m, dtype=np.float64)
    if m.shape != (3, 3):
        raise InvalidInputError(f"det3 expects a 3x3 matrix, got {m.shape}")
    return float(kernels.det3_batch(m))


def _check_pair(p, q):
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if p.shape != q.shape or p.shape[-1] != 3:
        raise InvalidInputError(f"point sets must share shape (..., k, 3); got {p.shape} and {q.shape}")
    if p.shape[-2] < 3:
        raise InvalidInputError(f"Kabsch needs at least 3 points, got {p.shape[-2]}")
    if not (np.all(np.isfinite(p)) and np.all(np.isfinite(q))):
        raise InvalidInputError("point sets contain non-finite entries")
    return p, q


def kabsch_batch(p, q, backend=None):
    """Best proper rotations for a batch of centered point-set pairs.

    ``p`` and ``q`` have shape (B, k, 3) (``q`` may also be a single (k, 3)
    target shared by the batch). Returns ``(rotations (B, 3, 3), degenerate
    (B,) bool)`` where ``p[b] @ rotations[b]`` is the closest rotated copy
    of ``p[b]`` to ``q[b]``.
    """
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if q.ndim == 2 and p.ndim == 3:
        q = np.broadcast_to(q, p.shape)
    p, q = _check_pair(p, q)
    if p.ndim != 3:
        raise InvalidInputError(f"kabsch_batch expects (B, k, 3) arrays, got {p.shape}")
    backend = backend or _accel.backend_name()
    if backend == "numba":
        rots, degenerate, ok = kernels.kabsch_batch_numba(
            np.ascontiguousarray(p), np.ascontiguousarray(q), RANK_TOL
        )
    else:
        rots, degenerate, ok = kernels.kabsch_batch_numpy(p, q, RANK_TOL)
    if not ok:
        raise NumericFailureError("3x3 Jacobi SVD did not converge inside Kabsch")
    return rots, degenerate


def kabsch_umeyama(p, q, backend=None):
    """Proper rotation ``R`` minimizing ``||P @ R - Q||_F``.

    Both point sets must already be centered. With ``H = P.T @ Q = U S V.T``
    the result is ``U @ diag(1, 1, det(U V.T)) @ V.T``. When ``rank(H) < 2``
    the rotation is not unique; the standard-formula minimizer is returned
    and ``degenerate`` is set.
    """
    p, q = _check_pair(p, q)
    if p.ndim != 2:
        raise InvalidInputError(f"kabsch_umeyama expects (k, 3) arrays, got {p.shape}")
    rots, degenerate = kabsch_batch(p[None], q[None], backend=backend)
    return Alignment(rots[0], bool(degenerate[0]))


def rotation_from_axis_angle(axis, angle):
    """Rodrigues' formula, for building test rotations and synthetic data."""
    axis = np.asarray(axis, dtype=np.float64)
    axis = axis / np.linalg.norm(axis)
    x, y, z = axis
    k = np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])
    return np.eye(3) + np.sin(angle) * k + (1.0 - np.cos(angle)) * (k @ k)


def random_rotation(rng):
    """Uniformly distributed rotation (normalized Gaussian quaternion)."""
    w, x, y, z = rng.standard_normal(4)
    n = np.sqrt(w * w + x * x + y * y + z * z)
    w, x, y, z = w / n, x / n, y / n, z / n
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
            [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
            [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
        ]
    )
