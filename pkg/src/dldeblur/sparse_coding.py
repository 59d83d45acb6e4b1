"""Lasso sparse coding of patches and the unit-ball dictionary constraint.

The objective is ``||x - D a||_2^2 + lam * ||a||_1`` (no 1/2 factor), so the
smooth part has gradient ``2 D^T (D a - x)`` and the soft threshold of a
single coordinate is ``lam / 2``.

The solver is cyclic coordinate descent with covariance updates: ``D^T D``
and ``D^T x`` are formed once, after which each coordinate step costs O(k).
After every full sweep the linear system restricted to the current support
is solved directly and accepted when it is sign consistent and optimal.
Coherent dictionaries with small ``lam`` make plain coordinate descent
crawl, so after two sweeps the iterate is handed to a feature-sign
active-set search, which terminates exactly.
"""

from dataclasses import dataclass

import numpy as np
from numba import njit

from .errors import ConvergenceError, InvalidInputError

KKT_TOL = 1e-6
ZERO_TOL = 1e-10
MAX_SWEEPS = 10_000
_INNER_SWEEPS = 20
_FINISH_AFTER = 2
_FINISH_EVERY = 10


@dataclass(frozen=True)
class SparseCode:
    """Solution of one Lasso problem."""

    coefficients: np.ndarray
    active_set: np.ndarray
    objective_value: float


@njit(cache=True)
def _support(alpha):
    k = alpha.shape[0]
    n = 0
    for j in range(k):
        if alpha[j] != 0.0:
            n += 1
    idx = np.empty(n, np.int64)
    p = 0
    for j in range(k):
        if alpha[j] != 0.0:
            idx[p] = j
            p += 1
    return idx


@njit(cache=True)
def _gradient(G, c, alpha, g):
    """``g = 2 (G alpha - c)`` using only the nonzero columns."""
    idx = _support(alpha)
    k = c.shape[0]
    for j in range(k):
        v = -c[j]
        for i in idx:
            v += G[j, i] * alpha[i]
        g[j] = 2.0 * v


@njit(cache=True)
def _kkt_from_gram(G, c, lam, alpha):
    k = c.shape[0]
    g = np.empty(k)
    _gradient(G, c, alpha, g)
    worst = 0.0
    for j in range(k):
        a = alpha[j]
        if a > 0.0:
            v = abs(g[j] + lam)
        elif a < 0.0:
            v = abs(g[j] - lam)
        else:
            v = abs(g[j]) - lam
            if v < 0.0:
                v = 0.0
        if v > worst:
            worst = v
    return worst


@njit(cache=True)
def _coord_step(G, c, half, alpha, q, j):
    gjj = G[j, j]
    if gjj <= 0.0:
        return 0.0
    z = c[j] - q[j] + gjj * alpha[j]
    if z > half:
        new = (z - half) / gjj
    elif z < -half:
        new = (z + half) / gjj
    else:
        new = 0.0
    d = new - alpha[j]
    if d != 0.0:
        alpha[j] = new
        for i in range(q.shape[0]):
            q[i] += d * G[i, j]
    return abs(d)


@njit(cache=True)
def _chol_solve(A, b, out):
    """Cholesky solve of ``A x = b`` into ``out``; False if ``A`` is not
    safely positive definite (relative pivot below 1e-12)."""
    n = b.shape[0]
    L = np.zeros((n, n))
    scale = 0.0
    for i in range(n):
        scale = max(scale, A[i, i])
    floor = 1e-12 * scale
    for j in range(n):
        d = A[j, j]
        for p in range(j):
            d -= L[j, p] * L[j, p]
        if not d > floor:
            return False
        L[j, j] = np.sqrt(d)
        for i in range(j + 1, n):
            v = A[i, j]
            for p in range(j):
                v -= L[i, p] * L[j, p]
            L[i, j] = v / L[j, j]
    for i in range(n):
        v = b[i]
        for p in range(i):
            v -= L[i, p] * out[p]
        out[i] = v / L[i, i]
    for i in range(n - 1, -1, -1):
        v = out[i]
        for p in range(i + 1, n):
            v -= L[p, i] * out[p]
        out[i] = v / L[i, i]
    return True


@njit(cache=True)
def _null_vector(A, v):
    """Write into ``v`` a vector with ``A v ~ 0`` taken from the first
    failing Cholesky pivot; False if ``A`` is positive definite."""
    n = A.shape[0]
    L = np.zeros((n, n))
    scale = 0.0
    for i in range(n):
        scale = max(scale, A[i, i])
    floor = 1e-12 * scale
    for j in range(n):
        d = A[j, j]
        for p in range(j):
            d -= L[j, p] * L[j, p]
        if not d > floor:
            # column j depends on columns < j: solve L L^T w = A[:j, j]
            w = np.empty(j)
            for i in range(j):
                t = A[i, j]
                for p in range(i):
                    t -= L[i, p] * w[p]
                w[i] = t / L[i, i]
            for i in range(j - 1, -1, -1):
                t = w[i]
                for p in range(i + 1, j):
                    t -= L[p, i] * w[p]
                w[i] = t / L[i, i]
            v[:] = 0.0
            v[:j] = w
            v[j] = -1.0
            return True
        L[j, j] = np.sqrt(d)
        for i in range(j + 1, n):
            t = A[i, j]
            for p in range(j):
                t -= L[i, p] * L[j, p]
            L[i, j] = t / L[j, j]
    return False


@njit(cache=True)
def _null_move(Gs, theta, cur):
    """Shrink a dependent active set without raising the objective.

    Along a null direction ``v`` of ``Gs`` the fit is unchanged and the l1
    term is linear, so step in its non-increasing direction until a
    coordinate reaches zero. Returns the new values, or an empty array when
    no move is possible.
    """
    s = cur.shape[0]
    v = np.empty(s)
    if not _null_vector(Gs, v):
        return np.empty(0)
    h = 0.0
    for a in range(s):
        h += theta[a] * v[a]
    if h > 0.0:
        v = -v
    t_best = np.inf
    hit = -1
    for a in range(s):
        if cur[a] != 0.0 and cur[a] * v[a] < 0.0:
            t = -cur[a] / v[a]
            if t < t_best:
                t_best = t
                hit = a
        elif cur[a] == 0.0 and theta[a] * v[a] < 0.0:
            return np.empty(0)
    if hit < 0:
        return np.empty(0)
    out = cur + t_best * v
    out[hit] = 0.0
    return out


@njit(cache=True)
def _try_polish(G, c, lam, alpha, tol):
    """Solve the restricted system on the current support; keep it if valid."""
    k = c.shape[0]
    s = 0
    for j in range(k):
        if alpha[j] != 0.0:
            s += 1
    if s == 0:
        return False
    idx = np.empty(s, np.int64)
    p = 0
    for j in range(k):
        if alpha[j] != 0.0:
            idx[p] = j
            p += 1
    Gs = np.empty((s, s))
    rhs = np.empty(s)
    for a in range(s):
        ja = idx[a]
        sign = 1.0 if alpha[ja] > 0.0 else -1.0
        rhs[a] = c[ja] - 0.5 * lam * sign
        for b in range(s):
            Gs[a, b] = G[ja, idx[b]]
    sol = np.empty(s)
    # Singular restricted Gram: leave it to coordinate descent.
    if not _chol_solve(Gs, rhs, sol):
        return False
    cand = np.zeros(k)
    for a in range(s):
        ja = idx[a]
        if sol[a] * alpha[ja] <= 0.0:
            return False
        cand[ja] = sol[a]
    if _kkt_from_gram(G, c, lam, cand) <= tol:
        for j in range(k):
            alpha[j] = cand[j]
        return True
    return False


@njit(cache=True)
def _feature_sign(G, c, lam, alpha, tol, max_steps):
    """Active-set finisher started from ``alpha``; exact up to round-off.

    Each step solves the sign-constrained quadratic on the active set and
    does a discrete line search over the zero crossings, so the objective
    never increases. A linearly dependent active set is first shrunk along
    a null direction. Returns False when that is not possible, leaving
    ``alpha`` at the last (still improved) iterate.
    """
    k = c.shape[0]
    half = 0.5 * lam
    active = alpha != 0.0
    g = np.empty(k)
    for _ in range(max_steps):
        _gradient(G, c, alpha, g)
        # Optimality of the nonzero coordinates first.
        nz_ok = True
        for j in range(k):
            if alpha[j] != 0.0:
                sgn = 1.0 if alpha[j] > 0.0 else -1.0
                if abs(g[j] + lam * sgn) > 0.1 * tol:
                    nz_ok = False
                    break
        if nz_ok:
            best_j = -1
            best_v = tol
            for j in range(k):
                if alpha[j] == 0.0 and G[j, j] > 0.0:
                    v = abs(g[j]) - lam
                    if v > best_v:
                        best_v = v
                        best_j = j
            if best_j < 0:
                return True
            active[best_j] = True
        s = 0
        for j in range(k):
            if active[j]:
                s += 1
        idx = np.empty(s, np.int64)
        theta = np.empty(s)
        cur = np.empty(s)
        p = 0
        for j in range(k):
            if active[j]:
                idx[p] = j
                cur[p] = alpha[j]
                if alpha[j] > 0.0:
                    theta[p] = 1.0
                elif alpha[j] < 0.0:
                    theta[p] = -1.0
                else:
                    theta[p] = -1.0 if g[j] > 0.0 else 1.0
                p += 1
        Gs = np.empty((s, s))
        rhs = np.empty(s)
        for a in range(s):
            rhs[a] = c[idx[a]] - half * theta[a]
            for b in range(s):
                Gs[a, b] = G[idx[a], idx[b]]
        target = np.empty(s)
        if not _chol_solve(Gs, rhs, target):
            moved = _null_move(Gs, theta, cur)
            if moved.shape[0] == 0:
                return False
            for a in range(s):
                alpha[idx[a]] = moved[a]
                active[idx[a]] = moved[a] != 0.0
            continue
        # Objective along cur + t * step: quadratic part plus the l1 term.
        step = target - cur
        Gstep = Gs @ step
        quad = step @ Gstep
        lin = 2.0 * (cur @ Gstep) - 2.0 * ((rhs + half * theta) @ step)
        best_a = -1
        best_f = lin + quad + lam * np.abs(target).sum()
        for a in range(s):
            if cur[a] != 0.0 and cur[a] * target[a] < 0.0:
                t = cur[a] / (cur[a] - target[a])
                trial = cur + t * step
                trial[a] = 0.0
                f = t * lin + t * t * quad + lam * np.abs(trial).sum()
                if f < best_f:
                    best_f = f
                    best_a = a
        if best_a < 0:
            best = target
        else:
            t = cur[best_a] / (cur[best_a] - target[best_a])
            best = cur + t * step
            best[best_a] = 0.0
        for a in range(s):
            alpha[idx[a]] = best[a]
            active[idx[a]] = best[a] != 0.0
    return _kkt_from_gram(G, c, lam, alpha) <= tol


@njit(cache=True)
def _cd_solve(G, c, lam, alpha, tol, zero_tol, max_sweeps):
    k = c.shape[0]
    half = 0.5 * lam
    q = G @ alpha
    sweeps = 0
    full = 0
    while sweeps < max_sweeps:
        for j in range(k):
            _coord_step(G, c, half, alpha, q, j)
        sweeps += 1
        full += 1
        if _kkt_from_gram(G, c, lam, alpha) <= tol:
            break
        if _try_polish(G, c, lam, alpha, tol):
            break
        if full % _FINISH_EVERY == _FINISH_AFTER:
            if _feature_sign(G, c, lam, alpha, tol, 4 * k + 10):
                break
            q = G @ alpha
        # Cheap passes restricted to the current support.
        for _ in range(_INNER_SWEEPS):
            biggest = 0.0
            for j in range(k):
                if alpha[j] != 0.0:
                    d = _coord_step(G, c, half, alpha, q, j)
                    if d > biggest:
                        biggest = d
            sweeps += 1
            if biggest < 1e-3 * tol or sweeps >= max_sweeps:
                break
        q = G @ alpha
    for j in range(k):
        if abs(alpha[j]) < zero_tol:
            alpha[j] = 0.0
    return sweeps, _kkt_from_gram(G, c, lam, alpha)


@njit(cache=True)
def _cd_batch(G, C, lam, tol, zero_tol, max_sweeps, warm):
    n, k = C.shape
    A = np.zeros((n, k))
    viol = np.empty(n)
    sweeps = np.empty(n, np.int64)
    prev = np.zeros(k)
    for i in range(n):
        c = C[i].copy()
        if warm and i > 0:
            # finish directly from the previous row's solution
            a = prev.copy()
            if _feature_sign(G, c, lam, a, tol, 4 * k + 10):
                v = _kkt_from_gram(G, c, lam, a)
                if v <= tol:
                    A[i] = a
                    viol[i] = v
                    sweeps[i] = 0
                    prev = a
                    continue
        a = np.zeros(k)
        s, v = _cd_solve(G, c, lam, a, tol, zero_tol, max_sweeps)
        prev = a
        A[i] = a
        viol[i] = v
        sweeps[i] = s
    return A, viol, sweeps


def _check_problem(x, D, lam):
    D = np.asarray(D, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    if D.ndim != 2:
        raise InvalidInputError("dictionary must be a 2-D array")
    if x.shape[-1] != D.shape[0]:
        raise InvalidInputError(
            f"signal length {x.shape[-1]} does not match dictionary rows {D.shape[0]}")
    if not lam > 0:
        raise InvalidInputError(f"lambda must be positive, got {lam}")
    if not (np.all(np.isfinite(D)) and np.all(np.isfinite(x))):
        raise InvalidInputError("non-finite entries in signal or dictionary")
    return x, D


def lasso_objective(x, D, lam, alpha):
    r = x - D @ alpha
    return float(r @ r + lam * np.abs(alpha).sum())


def lasso_solve(x, D, lam, alpha0=None, tol=KKT_TOL, max_sweeps=MAX_SWEEPS):
    """Sparse code of one signal.

    Parameters
    ----------
    x : ndarray, shape (m,)
    D : ndarray, shape (m, k)
    lam : float
        Weight of the l1 penalty, must be positive.
    alpha0 : ndarray, shape (k,), optional
        Starting point (defaults to zero).

    Returns
    -------
    SparseCode

    Raises
    ------
    ConvergenceError
        If the optimality violation is still above ``tol`` after
        ``max_sweeps`` sweeps.
    """
    x, D = _check_problem(x, D, lam)
    if x.ndim != 1:
        raise InvalidInputError("lasso_solve expects a single signal")
    G = D.T @ D
    c = D.T @ x
    alpha = np.zeros(D.shape[1]) if alpha0 is None else np.array(alpha0, dtype=np.float64)
    _, viol = _cd_solve(G, c, float(lam), alpha, tol, ZERO_TOL, max_sweeps)
    if viol > tol:
        raise ConvergenceError(f"Lasso did not converge (violation {viol:.3e})", viol)
    active = np.flatnonzero(alpha)
    return SparseCode(alpha, active, lasso_objective(x, D, lam, alpha))


def lasso_batch(X, D, lam, tol=KKT_TOL, max_sweeps=MAX_SWEEPS, warm_start=False):
    """Solve one Lasso problem per row of ``X`` with a shared dictionary.

    Returns the ``(n, k)`` coefficient matrix and a boolean mask of rows
    whose solve met the tolerance. Rows that failed are left as they stood
    at the iteration cap; callers decide whether to skip or raise.

    ``warm_start`` starts each row's active-set search from the previous
    row's code, falling back to a cold solve. It pays off when consecutive
    rows are similar, such as overlapping patches in raster order.
    """
    X, D = _check_problem(X, D, lam)
    X = np.atleast_2d(X)
    G = D.T @ D
    C = X @ D
    A, viol, _ = _cd_batch(G, np.ascontiguousarray(C), float(lam), tol, ZERO_TOL, max_sweeps,
                           bool(warm_start))
    return A, viol <= tol


def lasso_kkt_residual(x, D, lam, alpha):
    """Largest violation of the Lasso optimality conditions at ``alpha``."""
    x = np.asarray(x, dtype=np.float64)
    D = np.asarray(D, dtype=np.float64)
    alpha = np.asarray(alpha, dtype=np.float64)
    if D.ndim != 2 or x.shape != (D.shape[0],) or alpha.shape != (D.shape[1],):
        raise InvalidInputError(
            f"inconsistent shapes x{x.shape}, D{D.shape}, alpha{alpha.shape}")
    g = 2.0 * D.T @ (D @ alpha - x)
    nz = alpha != 0
    viol = np.where(nz, np.abs(g + lam * np.sign(alpha)), np.maximum(0.0, np.abs(g) - lam))
    return float(viol.max(initial=0.0))


def project_unit_columns(D):
    """Euclidean projection onto matrices whose columns have norm <= 1."""
    D = np.array(D, dtype=np.float64)
    if not np.all(np.isfinite(D)):
        raise InvalidInputError("non-finite dictionary entries")
    norms = np.sqrt(np.einsum("ij,ij->j", D, D))
    over = norms > 1.0
    D[:, over] /= norms[over]
    # round-off can leave a norm at 1 + ulp; shrink by an ulp until the
    # same norm computation gives <= 1, so projecting again is a no-op
    while True:
        still = np.sqrt(np.einsum("ij,ij->j", D, D)) > 1.0
        if not still.any():
            return D
        D[:, still] *= 1.0 - np.finfo(np.float64).epsneg
