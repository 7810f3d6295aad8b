"""Hot numeric kernels: one-sided Jacobi SVD and batched Kabsch alignment.

Every kernel has two implementations with the same contract:

* ``*_numba``: scalar loops compiled with ``numba.njit``. Cyclic pair order.
* ``*_numpy``: vectorized numpy. The thin SVD uses the round-robin
  (tournament) ordering so that ``n/2`` disjoint column pairs rotate at once.

The public wrappers in :mod:`subsetlift.linalg` pick one of them according to
:data:`subsetlift._accel.USE_NUMBA`. The two paths are not bit-identical (the
pair order differs) but each is deterministic.
"""
import numpy as np

from ._accel import optional_njit

EPS = np.finfo(np.float64).eps
# columns whose norm underflows are treated as exact zeros and completed
ZERO_COLUMN = 1e-280
MAX_SWEEPS = 100


def jacobi_tolerance(m):
    return max(1.0, np.sqrt(m)) * EPS


def negligible_sq(m, frob_sq):
    """Squared column norm below which a column is rounding noise.

    Such columns are left out of rotations (two noise columns can otherwise
    keep rotating forever) and are replaced by orthonormal completions.
    """
    return (m * EPS) ** 2 * frob_sq


# ---------------------------------------------------------------------------
# numba path
# ---------------------------------------------------------------------------


@optional_njit(cache=True, fastmath=True)
def _jacobi_sweeps_numba(at, vt, tol, max_sweeps):
    # at: (n, m), row j holds column j of A. vt: (n, n), row j holds column j of V.
    n, m = at.shape
    total = 0.0
    for p in range(n):
        for i in range(m):
            total += at[p, i] * at[p, i]
    floor = (m * 2.220446049250313e-16) ** 2 * total
    sweeps = 0
    for _ in range(max_sweeps):
        rotated = False
        for p in range(n - 1):
            for q in range(p + 1, n):
                a = 0.0
                b = 0.0
                g = 0.0
                for i in range(m):
                    x = at[p, i]
                    y = at[q, i]
                    a += x * x
                    b += y * y
                    g += x * y
                if g == 0.0 or a <= floor or b <= floor or abs(g) <= tol * np.sqrt(a * b):
                    continue
                rotated = True
                zeta = (b - a) / (2.0 * g)
                if zeta == 0.0:
                    t = 1.0
                elif abs(zeta) > 1e150:
                    t = 0.5 / zeta
                else:
                    t = np.sign(zeta) / (abs(zeta) + np.sqrt(1.0 + zeta * zeta))
                c = 1.0 / np.sqrt(1.0 + t * t)
                s = c * t
                for i in range(m):
                    x = at[p, i]
                    y = at[q, i]
                    at[p, i] = c * x - s * y
                    at[q, i] = s * x + c * y
                for i in range(n):
                    x = vt[p, i]
                    y = vt[q, i]
                    vt[p, i] = c * x - s * y
                    vt[q, i] = s * x + c * y
        sweeps += 1
        if not rotated:
            return sweeps, True
    return sweeps, False


@optional_njit(cache=True)
def _finish_numba(at, vt):
    """Sort, normalize, complete zero columns and fix signs."""
    n, m = at.shape
    s = np.empty(n)
    for j in range(n):
        acc = 0.0
        for i in range(m):
            acc += at[j, i] * at[j, i]
        s[j] = np.sqrt(acc)
    total = 0.0
    for j in range(n):
        total += s[j] * s[j]
    cut = max(m * 2.220446049250313e-16 * np.sqrt(total), 1e-280)
    order = np.argsort(-s, kind="mergesort")
    u = np.zeros((m, n))
    v = np.zeros((n, n))
    sigma = np.empty(n)
    missing = np.zeros(n, dtype=np.bool_)
    for j in range(n):
        idx = order[j]
        sigma[j] = s[idx]
        for i in range(n):
            v[i, j] = vt[idx, i]
        if s[idx] > cut:
            for i in range(m):
                u[i, j] = at[idx, i] / s[idx]
        else:
            sigma[j] = 0.0
            missing[j] = True
    # Gram-Schmidt completion against the standard basis
    candidate = 0
    for j in range(n):
        if not missing[j]:
            continue
        while candidate < m:
            w = np.zeros(m)
            w[candidate] = 1.0
            candidate += 1
            for _ in range(2):
                for c in range(n):
                    if missing[c] and c >= j:
                        continue
                    d = 0.0
                    for i in range(m):
                        d += u[i, c] * w[i]
                    for i in range(m):
                        w[i] -= d * u[i, c]
            nrm = 0.0
            for i in range(m):
                nrm += w[i] * w[i]
            nrm = np.sqrt(nrm)
            if nrm > 0.5:
                for i in range(m):
                    u[i, j] = w[i] / nrm
                missing[j] = False
                break
    for j in range(n):
        best = 0
        for i in range(1, m):
            if abs(u[i, j]) > abs(u[best, j]):
                best = i
        if u[best, j] < 0.0:
            for i in range(m):
                u[i, j] = -u[i, j]
            for i in range(n):
                v[i, j] = -v[i, j]
    return u, sigma, v


@optional_njit(cache=True)
def svd_tall_numba(a, tol, max_sweeps):
    """Thin SVD of a tall (m >= n) matrix. Returns (U, sigma, V, sweeps, ok)."""
    at = np.ascontiguousarray(a.T).copy()
    n = at.shape[0]
    vt = np.eye(n)
    sweeps, ok = _jacobi_sweeps_numba(at, vt, tol, max_sweeps)
    u, sigma, v = _finish_numba(at, vt)
    return u, sigma, v, sweeps, ok


@optional_njit(cache=True)
def kabsch_batch_numba(p, q, rank_tol):
    """Rotations minimizing ||P_b R_b - Q_b|| for every batch item.

    ``p`` and ``q`` have shape (B, k, 3). Returns (R, degenerate, ok).
    """
    nb = p.shape[0]
    k = p.shape[1]
    rots = np.empty((nb, 3, 3))
    degenerate = np.zeros(nb, dtype=np.bool_)
    all_ok = True
    tol = 4.0 * 2.220446049250313e-16
    for b in range(nb):
        h = np.zeros((3, 3))
        for i in range(k):
            for r in range(3):
                for c in range(3):
                    h[r, c] += p[b, i, r] * q[b, i, c]
        u, s, v, _, ok = svd_tall_numba(h, tol, 100)
        if not ok:
            all_ok = False
        if s[1] <= rank_tol * s[0] or s[0] == 0.0:
            degenerate[b] = True
        det_u = (u[0, 0] * (u[1, 1] * u[2, 2] - u[1, 2] * u[2, 1])
                 - u[0, 1] * (u[1, 0] * u[2, 2] - u[1, 2] * u[2, 0])
                 + u[0, 2] * (u[1, 0] * u[2, 1] - u[1, 1] * u[2, 0]))
        det_v = (v[0, 0] * (v[1, 1] * v[2, 2] - v[1, 2] * v[2, 1])
                 - v[0, 1] * (v[1, 0] * v[2, 2] - v[1, 2] * v[2, 0])
                 + v[0, 2] * (v[1, 0] * v[2, 1] - v[1, 1] * v[2, 0]))
        d = 1.0 if det_u * det_v >= 0.0 else -1.0
        for r in range(3):
            for c in range(3):
                rots[b, r, c] = u[r, 0] * v[c, 0] + u[r, 1] * v[c, 1] + d * u[r, 2] * v[c, 2]
    return rots, degenerate, all_ok


# ---------------------------------------------------------------------------
# numpy path
# ---------------------------------------------------------------------------


def _rotation_params(a, b, g, tol, floor=0.0):
    """Vectorized Rutishauser rotation; returns (c, s, active mask)."""
    active = (g != 0.0) & (a > floor) & (b > floor) & (np.abs(g) > tol * np.sqrt(a * b))
    safe_g = np.where(active, g, 1.0)
    zeta = (b - a) / (2.0 * safe_g)
    big = np.abs(zeta) > 1e150
    zeta_c = np.where(big, 1.0, zeta)
    t = np.where(
        zeta == 0.0,
        1.0,
        np.sign(zeta_c) / (np.abs(zeta_c) + np.sqrt(1.0 + zeta_c * zeta_c)),
    )
    t = np.where(big, 0.5 / np.where(big, zeta, 1.0), t)
    c = 1.0 / np.sqrt(1.0 + t * t)
    s = c * t
    c = np.where(active, c, 1.0)
    s = np.where(active, s, 0.0)
    return c, s, active


def _round_robin_rounds(n):
    """Pairings of an even number of columns, n - 1 rounds, each column once per round."""
    players = list(range(n))
    rounds = []
    for _ in range(n - 1):
        half = n // 2
        top = players[:half]
        bottom = players[half:][::-1]
        rounds.append((np.array(top), np.array(bottom)))
        players = [players[0]] + [players[-1]] + players[1:-1]
    return rounds


def _jacobi_sweeps_numpy(at, vt, tol, max_sweeps):
    n, m = at.shape
    rounds = _round_robin_rounds(n)
    floor = negligible_sq(m, float(np.einsum("ij,ij->", at, at)))
    sweeps = 0
    for _ in range(max_sweeps):
        rotated = False
        for top, bottom in rounds:
            x = at[top]
            y = at[bottom]
            a = np.einsum("ij,ij->i", x, x)
            b = np.einsum("ij,ij->i", y, y)
            g = np.einsum("ij,ij->i", x, y)
            c, s, active = _rotation_params(a, b, g, tol, floor)
            if not active.any():
                continue
            rotated = True
            c = c[:, None]
            s = s[:, None]
            at[top] = c * x - s * y
            at[bottom] = s * x + c * y
            vx = vt[top]
            vy = vt[bottom]
            vt[top] = c * vx - s * vy
            vt[bottom] = s * vx + c * vy
        sweeps += 1
        if not rotated:
            return sweeps, True
    return sweeps, False


def _complete_columns(u, missing):
    m, n = u.shape
    candidate = 0
    for j in np.flatnonzero(missing):
        keep = [c for c in range(n) if not missing[c] or c < j]
        while candidate < m:
            w = np.zeros(m)
            w[candidate] = 1.0
            candidate += 1
            basis = u[:, keep]
            for _ in range(2):
                w -= basis @ (basis.T @ w)
            nrm = np.linalg.norm(w)
            if nrm > 0.5:
                u[:, j] = w / nrm
                missing[j] = False
                break
    return u


def _fix_signs(u, v):
    best = np.argmax(np.abs(u), axis=0)
    signs = np.where(u[best, np.arange(u.shape[1])] < 0.0, -1.0, 1.0)
    return u * signs, v * signs


def svd_tall_numpy(a, tol, max_sweeps):
    """Thin SVD of a tall (m >= n) matrix. Returns (U, sigma, V, sweeps, ok)."""
    m, n = a.shape
    padded = n + (n % 2)
    at = np.zeros((padded, m))
    at[:n] = a.T
    vt = np.eye(padded)
    sweeps, ok = _jacobi_sweeps_numpy(at, vt, tol, max_sweeps)
    at = at[:n]
    vt = vt[:n, :n]
    s = np.sqrt(np.einsum("ij,ij->i", at, at))
    order = np.argsort(-s, kind="stable")
    s = s[order]
    at = at[order]
    v = vt[order].T.copy()
    missing = s <= max(np.sqrt(negligible_sq(m, float(s @ s))), ZERO_COLUMN)
    u = np.zeros((m, n))
    u[:, ~missing] = (at[~missing] / s[~missing, None]).T
    s = np.where(missing, 0.0, s)
    if missing.any():
        u = _complete_columns(u, missing.copy())
    u, v = _fix_signs(u, v)
    return u, s, v, sweeps, ok


_PAIRS3 = ((0, 1), (0, 2), (1, 2))


def _batched_svd3_numpy(h, max_sweeps=MAX_SWEEPS):
    """SVD of a stack of 3x3 matrices by cyclic Jacobi vectorized over the stack."""
    nb = h.shape[0]
    at = np.ascontiguousarray(np.swapaxes(h, 1, 2)).copy()
    vt = np.broadcast_to(np.eye(3), (nb, 3, 3)).copy()
    tol = 4.0 * EPS
    floor = negligible_sq(3, np.einsum("bij,bij->b", at, at))
    ok = False
    for _ in range(max_sweeps):
        rotated = False
        for p, q in _PAIRS3:
            x = at[:, p].copy()
            y = at[:, q].copy()
            a = np.einsum("ij,ij->i", x, x)
            b = np.einsum("ij,ij->i", y, y)
            g = np.einsum("ij,ij->i", x, y)
            c, s, active = _rotation_params(a, b, g, tol, floor)
            if not active.any():
                continue
            rotated = True
            c = c[:, None]
            s = s[:, None]
            at[:, p] = c * x - s * y
            at[:, q] = s * x + c * y
            vx = vt[:, p].copy()
            vy = vt[:, q].copy()
            vt[:, p] = c * vx - s * vy
            vt[:, q] = s * vx + c * vy
        if not rotated:
            ok = True
            break
    s = np.sqrt(np.einsum("bij,bij->bi", at, at))
    order = np.argsort(-s, axis=1, kind="stable")
    s = np.take_along_axis(s, order, axis=1)
    at = np.take_along_axis(at, order[:, :, None], axis=1)
    vt = np.take_along_axis(vt, order[:, :, None], axis=1)
    cut = np.maximum(np.sqrt(negligible_sq(3, np.einsum("bi,bi->b", s, s))), ZERO_COLUMN)
    missing = s <= cut[:, None]
    safe = np.where(missing, 1.0, s)
    u = np.swapaxes(at / safe[:, :, None], 1, 2)
    u = np.where(missing[:, None, :], 0.0, u)
    v = np.swapaxes(vt, 1, 2).copy()
    s = np.where(missing, 0.0, s)
    for b in np.flatnonzero(missing.any(axis=1)):
        u[b] = _complete_columns(u[b].copy(), missing[b].copy())
    best = np.argmax(np.abs(u), axis=1)
    picked = np.take_along_axis(u, best[:, None, :], axis=1)[:, 0, :]
    signs = np.where(picked < 0.0, -1.0, 1.0)
    return u * signs[:, None, :], s, v * signs[:, None, :], ok


def det3_batch(m):
    """Cofactor-expansion determinant of a (..., 3, 3) stack."""
    return (
        m[..., 0, 0] * (m[..., 1, 1] * m[..., 2, 2] - m[..., 1, 2] * m[..., 2, 1])
        - m[..., 0, 1] * (m[..., 1, 0] * m[..., 2, 2] - m[..., 1, 2] * m[..., 2, 0])
        + m[..., 0, 2] * (m[..., 1, 0] * m[..., 2, 1] - m[..., 1, 1] * m[..., 2, 0])
    )


def kabsch_batch_numpy(p, q, rank_tol):
    """Numpy twin of :func:`kabsch_batch_numba`."""
    h = np.einsum("bki,bkj->bij", p, q)
    u, s, v, ok = _batched_svd3_numpy(h)
    degenerate = (s[:, 1] <= rank_tol * s[:, 0]) | (s[:, 0] == 0.0)
    d = np.where(det3_batch(u) * det3_batch(v) >= 0.0, 1.0, -1.0)
    scale = np.stack([np.ones_like(d), np.ones_like(d), d], axis=1)
    rots = np.einsum("bik,bk,bjk->bij", u, scale, v)
    return rots, degenerate, ok


# ---------------------------------------------------------------------------
# batch normalization (features on the last axis of a 2-D array)
# ---------------------------------------------------------------------------


@optional_njit(cache=True, fastmath=True)
def batchnorm_forward_numba(x, gamma, beta, eps):
    n, f = x.shape
    mu = np.zeros(f)
    var = np.zeros(f)
    for i in range(n):
        for j in range(f):
            mu[j] += x[i, j]
    mu /= n
    for i in range(n):
        for j in range(f):
            d = x[i, j] - mu[j]
            var[j] += d * d
    var /= n
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = np.empty_like(x)
    out = np.empty_like(x)
    for i in range(n):
        for j in range(f):
            h = (x[i, j] - mu[j]) * inv_std[j]
            xhat[i, j] = h
            out[i, j] = h * gamma[j] + beta[j]
    return out, xhat, mu, var, inv_std


def batchnorm_forward_numpy(x, gamma, beta, eps):
    mu = x.mean(axis=0)
    centered = x - mu
    var = np.mean(centered * centered, axis=0)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv_std
    return xhat * gamma + beta, xhat, mu, var, inv_std


@optional_njit(cache=True, fastmath=True)
def batchnorm_backward_numba(g, xhat, gamma, inv_std):
    """Returns (dx, dgamma, dbeta) for train-mode batch norm."""
    n, f = g.shape
    dbeta = np.zeros(f)
    dgamma = np.zeros(f)
    for i in range(n):
        for j in range(f):
            dbeta[j] += g[i, j]
            dgamma[j] += g[i, j] * xhat[i, j]
    dx = np.empty_like(g)
    for i in range(n):
        for j in range(f):
            dx[i, j] = gamma[j] * inv_std[j] * (
                g[i, j] - dbeta[j] / n - xhat[i, j] * dgamma[j] / n
            )
    return dx, dgamma, dbeta


def batchnorm_backward_numpy(g, xhat, gamma, inv_std):
    dbeta = g.sum(axis=0)
    dgamma = np.sum(g * xhat, axis=0)
    n = g.shape[0]
    dx = (gamma * inv_std) * (g - dbeta / n - xhat * (dgamma / n))
    return dx, dgamma, dbeta
