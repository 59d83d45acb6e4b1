"""Independent reference implementations used by the tests."""

import itertools

import numpy as np

from dldeblur.sparse_coding import lasso_solve


def lasso_oracle(x, D, lam, max_support=4, tol=1e-9):
    """Enumerate supports of size <= max_support and all sign patterns.

    Each (support, sign) pair gives the stationary point of the restricted
    quadratic; a candidate is kept when its signs agree with the pattern.
    The best kept candidate is returned together with a flag telling
    whether it satisfies the full optimality conditions (then it is the
    global minimizer, the problem being convex).
    """
    m, k = D.shape
    G = D.T @ D
    c = D.T @ x
    best, best_obj = np.zeros(k), float(x @ x)
    for size in range(1, max_support + 1):
        for S in itertools.combinations(range(k), size):
            S = list(S)
            GS = G[np.ix_(S, S)]
            if np.linalg.cond(GS) > 1e10:
                continue
            inv = np.linalg.inv(GS)
            base = inv @ c[S]
            for signs in itertools.product((-1.0, 1.0), repeat=size):
                a_S = base - 0.5 * lam * inv @ np.array(signs)
                if np.any(np.sign(a_S) != signs):
                    continue
                a = np.zeros(k)
                a[S] = a_S
                r = x - D @ a
                obj = float(r @ r + lam * np.abs(a).sum())
                if obj < best_obj:
                    best, best_obj = a, obj
    g = 2.0 * D.T @ (D @ best - x)
    nz = best != 0
    viol = np.where(nz, np.abs(g + lam * np.sign(best)), np.maximum(0.0, np.abs(g) - lam))
    return best, best_obj, float(viol.max(initial=0.0)) <= tol


def gauss_solve(A, B):
    """Gaussian elimination with partial pivoting, column by column of ``B``."""
    A = np.array(A, dtype=np.float64)
    B = np.array(B, dtype=np.float64).reshape(len(A), -1)
    n = len(A)
    M = np.hstack([A, B])
    for col in range(n):
        piv = col + int(np.argmax(np.abs(M[col:, col])))
        M[[col, piv]] = M[[piv, col]]
        for r in range(col + 1, n):
            M[r] -= M[r, col] / M[col, col] * M[col]
    X = np.zeros_like(B)
    for r in range(n - 1, -1, -1):
        X[r] = (M[r, n:] - M[r, r + 1:n] @ X[r + 1:]) / M[r, r]
    return X


def inv3(A):
    """Inverse of a 3x3 matrix through the adjugate."""
    a, b, c = A[0]
    d, e, f = A[1]
    g, h, i = A[2]
    det = a * (e * i - f * h) - b * (d * i - f * g) + c * (d * h - e * g)
    adj = np.array([
        [e * i - f * h, c * h - b * i, b * f - c * e],
        [f * g - d * i, a * i - c * g, c * d - a * f],
        [d * h - e * g, b * g - a * h, a * e - b * d],
    ])
    return adj / det


def sample_loss(W, Ds, alpha, b_tilde, s):
    r = s - W @ b_tilde - Ds @ alpha
    return float(r @ r)


def fd_gradient(f, X, h):
    """Central finite differences of scalar ``f`` over every entry of ``X``."""
    G = np.zeros_like(X)
    for idx in np.ndindex(X.shape):
        Xp, Xm = X.copy(), X.copy()
        Xp[idx] += h
        Xm[idx] -= h
        G[idx] = (f(Xp) - f(Xm)) / (2 * h)
    return G


def tight_code(b, Db, lam):
    return lasso_solve(b, Db, lam, tol=1e-13)


def support_signature(code):
    return tuple(code.active_set), tuple(np.sign(code.coefficients[code.active_set]))


def db_fd_gradient(W, Ds, Db, lam, b, b_tilde, s, h):
    """Finite-difference gradient in ``Db`` with the Lasso re-solved each time.

    Returns ``(gradient, stable)`` where ``stable`` says whether every
    perturbation kept the support and signs of the unperturbed code.
    """
    ref = support_signature(tight_code(b, Db, lam))
    stable = True
    G = np.zeros_like(Db)
    for idx in np.ndindex(Db.shape):
        vals = []
        for sgn in (1.0, -1.0):
            D = Db.copy()
            D[idx] += sgn * h
            code = tight_code(b, D, lam)
            if support_signature(code) != ref:
                stable = False
            vals.append(sample_loss(W, Ds, code.coefficients, b_tilde, s))
        G[idx] = (vals[0] - vals[1]) / (2 * h)
    return G, stable


def random_instance(rng, m_s=3, m_b=3, k=8, target=(2, 5)):
    """Small random model and sample whose Lasso support size lies in ``target``."""
    from dldeblur.dict_learn import Model
    while True:
        Db = rng.standard_normal((m_b * m_b, k))
        Db /= np.linalg.norm(Db, axis=0)
        b = rng.standard_normal(m_b * m_b)
        lam = rng.uniform(0.1, 0.6) * np.abs(2 * Db.T @ b).max()
        code = tight_code(b, Db, lam)
        if target[0] <= code.active_set.size <= target[1]:
            break
    model = Model(Db, rng.standard_normal((m_s * m_s, k)),
                  rng.standard_normal((m_s * m_s, m_b * m_b)) * 0.3, lam, m_s, m_b)
    b_tilde = b + 0.1 * rng.standard_normal(b.size)
    s = rng.standard_normal(m_s * m_s)
    return model, b, b_tilde, s


def reflect(j, n):
    # half-sample symmetric extension, written independently of the library
    while j < 0 or j >= n:
        j = -j - 1 if j < 0 else 2 * n - 1 - j
    return j


def naive_convolve(img, k):
    h, w = img.shape
    kh, kw = k.shape
    out = np.zeros_like(img)
    for r in range(h):
        for c in range(w):
            acc = 0.0
            for a in range(kh):
                for b in range(kw):
                    acc += k[a, b] * img[reflect(r - (a - kh // 2), h), reflect(c - (b - kw // 2), w)]
            out[r, c] = acc
    return out
