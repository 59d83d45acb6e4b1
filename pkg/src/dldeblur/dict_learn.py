"""Learning the blurry dictionary, the sharp dictionary and the linear predictor.

A model predicts a sharp patch ``s`` from a blurry patch ``b`` (and its
denoised version ``bt``) as ``W bt + Ds alpha(b, Db)`` where ``alpha`` is the
Lasso code of ``b`` over ``Db``. Training minimizes the mean squared
prediction error by projected stochastic gradient descent, differentiating
through the Lasso via its active set.

Per-sample *directions* in this module are exact negative gradients of the
sample loss ``||s - W bt - Ds alpha||^2``; the update is
``param += rho_t * mean(direction)``.
"""

import copy
import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy import linalg

from .errors import (
    ConvergenceError,
    DegenerateActiveSetError,
    EmptyBatchError,
    InvalidInputError,
    NumericError,
)
from .sparse_coding import SparseCode, lasso_batch, lasso_solve, project_unit_columns

log = logging.getLogger(__name__)

BETA_COND_LIMIT = 1e12
RHO_GRID = (1e-2, 1e-1, 1.0, 1e1, 1e2)
DICT_RATE_GRID = (1.0, 10.0, 100.0, 1e3, 1e4, 1e5, 1e6)


@dataclass
class PatchPairSet:
    """Aligned training triples: raw blurry, denoised blurry and sharp patches.

    Rows are flattened patches; row ``i`` of every array comes from the
    same pixel of the same image pair.
    """

    blurry: np.ndarray
    blurry_denoised: np.ndarray
    sharp: np.ndarray
    centers: np.ndarray | None = None

    def __post_init__(self):
        n = len(self.blurry)
        if len(self.blurry_denoised) != n or len(self.sharp) != n:
            raise InvalidInputError("patch arrays have different lengths")
        if self.blurry.shape[1:] != self.blurry_denoised.shape[1:]:
            raise InvalidInputError("blurry and denoised patches differ in size")

    @property
    def n(self):
        return len(self.blurry)

    def __len__(self):
        return self.n

    def subset(self, idx):
        return PatchPairSet(
            self.blurry[idx], self.blurry_denoised[idx], self.sharp[idx],
            None if self.centers is None else self.centers[idx])

    @staticmethod
    def concatenate(sets):
        sets = list(sets)
        centers = None
        if sets and all(s.centers is not None for s in sets):
            centers = np.concatenate([s.centers for s in sets])
        return PatchPairSet(
            np.concatenate([s.blurry for s in sets]),
            np.concatenate([s.blurry_denoised for s in sets]),
            np.concatenate([s.sharp for s in sets]),
            centers)


@dataclass
class TrainConfig:
    """Optimizer and sampling hyper-parameters.

    ``rho`` and ``t0`` may be left as ``None``: ``rho`` is then picked by a
    short pilot run over :data:`RHO_GRID` and ``t0`` defaults to a tenth of
    the number of steps. ``dict_rate`` multiplies the step of the blurry
    dictionary only; the curvature of the loss in ``W`` is orders of
    magnitude larger than in ``Db``, so a common step that keeps ``W``
    stable leaves ``Db`` almost frozen. ``None`` picks it from
    :data:`DICT_RATE_GRID` by a second pilot run.
    """

    k: int = 512
    lam: float = 0.1
    mu: float = 1e-8
    rho: float | None = None
    t0: float | None = None
    batch_size: int = 500
    passes: int = 1
    init_epochs: int = 1
    rng_seed: int = 0
    validation_size: int = 5000
    log_every: int = 100
    pilot_size: int = 10_000
    stage1: str = "exact"
    dict_rate: float | None = None

    def __post_init__(self):
        for name in ("k", "batch_size", "passes", "init_epochs", "log_every", "pilot_size"):
            if int(getattr(self, name)) < 1:
                raise InvalidInputError(f"{name} must be >= 1")
        if not (self.lam > 0 and self.mu > 0):
            raise InvalidInputError("lambda and mu must be positive")
        if self.rho is not None and self.rho < 0:
            raise InvalidInputError("rho must be non-negative")
        if self.dict_rate is not None and self.dict_rate < 0:
            raise InvalidInputError("dict_rate must be non-negative")
        if self.t0 is not None and self.t0 < 0:
            raise InvalidInputError("t0 must be non-negative")
        if self.stage1 not in ("exact", "sgd"):
            raise InvalidInputError("stage1 must be 'exact' or 'sgd'")


@dataclass
class Model:
    """Learned ``(Db, Ds, W)`` with the geometry they were trained for.

    ``linear_baseline`` optionally keeps the ridge predictor fitted on its
    own, which is the reference the dictionary terms are compared against.
    """

    dict_blurry: np.ndarray
    dict_sharp: np.ndarray
    linear_predictor: np.ndarray
    lam: float
    patch_size_sharp: int
    patch_size_blurry: int
    linear_baseline: np.ndarray | None = None

    def __post_init__(self):
        self.dict_blurry = np.asarray(self.dict_blurry, dtype=np.float64)
        self.dict_sharp = np.asarray(self.dict_sharp, dtype=np.float64)
        self.linear_predictor = np.asarray(self.linear_predictor, dtype=np.float64)
        if self.linear_baseline is not None:
            self.linear_baseline = np.asarray(self.linear_baseline, dtype=np.float64)
        self.validate()

    @property
    def k(self):
        return self.dict_blurry.shape[1]

    def validate(self):
        ms, mb = self.patch_size_sharp, self.patch_size_blurry
        if ms % 2 == 0 or mb % 2 == 0 or mb < ms or ms < 1:
            raise InvalidInputError(f"invalid patch sizes m_s={ms}, m_b={mb}")
        if self.dict_blurry.shape[0] != mb * mb:
            raise InvalidInputError("blurry dictionary rows do not match m_b^2")
        if self.dict_sharp.shape != (ms * ms, self.k):
            raise InvalidInputError("sharp dictionary shape does not match m_s^2 x k")
        if self.linear_predictor.shape != (ms * ms, mb * mb):
            raise InvalidInputError("linear predictor shape does not match m_s^2 x m_b^2")
        if not self.lam > 0:
            raise InvalidInputError("lambda must be positive")
        if self.linear_baseline is not None and \
                self.linear_baseline.shape != self.linear_predictor.shape:
            raise InvalidInputError("linear baseline shape does not match the predictor")
        for name in ("dict_blurry", "dict_sharp", "linear_predictor", "linear_baseline"):
            if getattr(self, name) is None:
                continue
            if not np.all(np.isfinite(getattr(self, name))):
                raise NumericError(f"{name} has non-finite entries")
        norms = np.linalg.norm(self.dict_blurry, axis=0)
        if np.any(norms > 1.0 + 1e-12):
            raise InvalidInputError("blurry dictionary has columns of norm > 1")

    def linear_only(self):
        """Pure linear model: sharp dictionary zeroed, and ``W`` replaced by
        the stand-alone ridge predictor when one is stored."""
        W = self.linear_predictor if self.linear_baseline is None else self.linear_baseline
        return replace(self, dict_sharp=np.zeros_like(self.dict_sharp), linear_predictor=W)

    def copy(self):
        return copy.deepcopy(self)


@dataclass
class TrainResult:
    model: Model
    log: list = field(default_factory=list)
    stage1_objective: float = math.nan
    final_objective: float = math.nan
    rho: float = math.nan
    dict_rate: float = math.nan
    t0: float = math.nan
    skipped: int = 0


def learning_rate(t, cfg):
    """``rho / (t + t0)`` for step ``t >= 1``."""
    if t < 1:
        raise InvalidInputError("step index starts at 1")
    return cfg.rho / (t + cfg.t0)


# -- linear part ------------------------------------------------------------

def _solve_normal(gram, cross):
    """Solve ``gram X = cross`` for a symmetric positive definite ``gram``."""
    if not (np.all(np.isfinite(gram)) and np.all(np.isfinite(cross))):
        raise NumericError("non-finite normal equations")
    try:
        return linalg.solve(gram, cross, assume_a="pos")
    except (linalg.LinAlgError, ValueError):
        return linalg.lstsq(gram, cross)[0]


def ridge_fit(pairs, mu, chunk=50_000):
    """Ridge regression ``W`` of sharp patches on denoised blurry patches.

    Minimizes ``(1/n) sum ||s_i - W bt_i||^2 + mu ||W||_F^2`` through the
    accumulated normal equations.
    """
    if pairs.n < 1:
        raise InvalidInputError("ridge_fit needs at least one pair")
    if not mu > 0:
        raise InvalidInputError("mu must be positive")
    p = pairs.blurry_denoised.shape[1]
    gram = np.zeros((p, p))
    cross = np.zeros((p, pairs.sharp.shape[1]))
    for lo in range(0, pairs.n, chunk):
        X = np.asarray(pairs.blurry_denoised[lo:lo + chunk], dtype=np.float64)
        S = np.asarray(pairs.sharp[lo:lo + chunk], dtype=np.float64)
        gram += X.T @ X
        cross += X.T @ S
    gram /= pairs.n
    cross /= pairs.n
    gram[np.diag_indices(p)] += mu
    return _solve_normal(gram, cross).T


# -- implicit differentiation -----------------------------------------------

def _beta_on_support(Gram_active, rhs):
    w, V = np.linalg.eigh(Gram_active)
    if w[0] <= 0 or w[-1] / w[0] > BETA_COND_LIMIT:
        raise DegenerateActiveSetError(
            f"active-set Gram matrix is singular (eigenvalues {w[0]:.3e}..{w[-1]:.3e})")
    return V @ ((V.T @ rhs) / w)


def compute_beta(code, D_b, D_s, W, b, s):
    """Adjoint vector of the Lasso code for the prediction loss.

    ``beta`` is zero off the active set and solves
    ``(Db_A^T Db_A) beta_A = -Ds_A^T (s - Ds alpha - W b)`` on it, where ``b``
    is the patch fed to the linear predictor.
    """
    alpha = np.asarray(code.coefficients, dtype=np.float64)
    beta = np.zeros_like(alpha)
    active = np.asarray(code.active_set, dtype=np.int64)
    if active.size == 0:
        return beta
    r = s - D_s @ alpha - W @ b
    Da = D_b[:, active]
    beta[active] = _beta_on_support(Da.T @ Da, -(D_s[:, active].T @ r))
    return beta


@dataclass
class BatchDirections:
    """Mean descent directions over the usable samples of a batch."""

    W: np.ndarray
    D_s: np.ndarray
    D_b: np.ndarray | None
    objective: float
    used: int
    skipped: int


def batch_directions(model, batch, with_dict_blurry=True):
    """Negative gradients of the per-sample loss, averaged over ``batch``.

    Samples whose Lasso fails to converge or whose active set is degenerate
    are left out of the average and counted in ``skipped``.
    """
    B = np.asarray(batch.blurry, dtype=np.float64)
    Bt = np.asarray(batch.blurry_denoised, dtype=np.float64)
    S = np.asarray(batch.sharp, dtype=np.float64)
    Db, Ds, W = model.dict_blurry, model.dict_sharp, model.linear_predictor
    A, ok = lasso_batch(B, Db, model.lam)
    R = S - Bt @ W.T - A @ Ds.T
    Beta = np.zeros_like(A) if with_dict_blurry else None
    if with_dict_blurry:
        G = Db.T @ Db
        DsR = R @ Ds
        for i in np.flatnonzero(ok):
            act = np.flatnonzero(A[i])
            if act.size == 0:
                continue
            try:
                Beta[i, act] = _beta_on_support(G[np.ix_(act, act)], -DsR[i, act])
            except DegenerateActiveSetError:
                ok[i] = False
    used = int(ok.sum())
    skipped = len(ok) - used
    if used == 0:
        raise EmptyBatchError(f"all {len(ok)} samples of the batch were skipped")
    if skipped:
        log.debug("skipped %d of %d samples", skipped, len(ok))
        A, R, B, Bt = A[ok], R[ok], B[ok], Bt[ok]
        if with_dict_blurry:
            Beta = Beta[ok]
    objective = float(np.einsum("ij,ij->", R, R) / used)
    dW = 2.0 * R.T @ Bt / used
    dDs = 2.0 * R.T @ A / used
    dDb = None
    if with_dict_blurry:
        resid_b = B - A @ Db.T
        dDb = -2.0 * (resid_b.T @ Beta - Db @ (Beta.T @ A)) / used
    return BatchDirections(dW, dDs, dDb, objective, used, skipped)


def sample_directions(model, b, b_tilde, s):
    """Per-sample descent directions ``(dW, dDs, dDb)`` (negative gradients)."""
    batch = PatchPairSet(np.atleast_2d(b), np.atleast_2d(b_tilde), np.atleast_2d(s))
    d = batch_directions(model, batch)
    return d.W, d.D_s, d.D_b


def _apply(model, d, rho_t, dict_rate=1.0):
    D_b = model.dict_blurry
    if d.D_b is not None:
        D_b = project_unit_columns(D_b + dict_rate * rho_t * d.D_b)
    return replace(
        model,
        dict_blurry=D_b,
        dict_sharp=model.dict_sharp + rho_t * d.D_s,
        linear_predictor=model.linear_predictor + rho_t * d.W,
    )


def sgd_step(model, batch, t, cfg, update_dict_blurry=True):
    """One projected mini-batch step at iteration ``t``; returns the new model."""
    return _sgd_step(model, batch, t, cfg, update_dict_blurry)[0]


def _sgd_step(model, batch, t, cfg, update_dict_blurry):
    if batch.n == 0:
        raise EmptyBatchError("empty batch")
    d = batch_directions(model, batch, with_dict_blurry=update_dict_blurry)
    rate = 1.0 if cfg.dict_rate is None else cfg.dict_rate
    return _apply(model, d, learning_rate(t, cfg), rate), d


# -- objectives -------------------------------------------------------------

def prediction_objective(model, data, chunk=2000):
    """Mean of ``||s - W bt - Ds alpha(b)||^2`` over ``data``."""
    total = 0.0
    for lo in range(0, data.n, chunk):
        B = np.asarray(data.blurry[lo:lo + chunk], dtype=np.float64)
        Bt = np.asarray(data.blurry_denoised[lo:lo + chunk], dtype=np.float64)
        S = np.asarray(data.sharp[lo:lo + chunk], dtype=np.float64)
        A, _ = lasso_batch(B, model.dict_blurry, model.lam)
        R = S - Bt @ model.linear_predictor.T - A @ model.dict_sharp.T
        total += float(np.einsum("ij,ij->", R, R))
    return total / data.n


def dictionary_objective(X, D, lam):
    """Mean of ``||x - D alpha||^2 + lam ||alpha||_1`` with optimal codes."""
    X = np.asarray(X, dtype=np.float64)
    A, _ = lasso_batch(X, D, lam)
    R = X - A @ D.T
    return float((np.einsum("ij,ij->", R, R) + lam * np.abs(A).sum()) / len(X))


# -- unsupervised initialization -------------------------------------------

def _revive_dead_atoms(D, A, Xb, codes):
    """Swap atoms that have never been used for the worst-fit batch patches.

    Duplicate starting atoms otherwise stay dead forever. Modifies ``D`` and
    ``codes`` in place.
    """
    dead = np.flatnonzero((np.diag(A) <= 1e-12) & ~codes.any(axis=0))
    if dead.size == 0 or len(Xb) == 0:
        return
    resid = np.linalg.norm(Xb - codes @ D.T, axis=1)
    for j, i in zip(dead, np.argsort(-resid, kind="stable")):
        if resid[i] <= 1e-8:
            break
        D[:, j] = Xb[i] / np.linalg.norm(Xb[i])
        codes[i] = 0.0
        codes[i, j] = Xb[i] @ D[:, j]

def init_unsupervised(blurry_patches, k, lam, cfg, holdout=2000):
    """Reconstructive dictionary for the blurry patches (online learning).

    Starts from ``k`` randomly drawn patches scaled to unit norm and runs
    ``cfg.init_epochs`` passes of mini-batch online dictionary learning:
    codes of a batch feed the sufficient statistics ``A = sum a a^T`` and
    ``B = sum x a^T``, then one block-coordinate pass updates the atoms and
    projects each onto the unit ball.
    """
    X = blurry_patches
    n = len(X)
    if n < k:
        raise InvalidInputError(f"need at least k={k} patches, got {n}")
    rng = np.random.default_rng(cfg.rng_seed)
    D = np.array(X[rng.choice(n, size=k, replace=False)], dtype=np.float64).T
    norms = np.linalg.norm(D, axis=0)
    dead = norms < 1e-8
    if dead.any():
        D[:, dead] = rng.standard_normal((D.shape[0], int(dead.sum())))
        norms[dead] = np.linalg.norm(D[:, dead], axis=0)
    D /= norms
    m = D.shape[0]
    A = np.zeros((k, k))
    Bs = np.zeros((m, k))
    eta = cfg.batch_size
    for epoch in range(cfg.init_epochs):
        order = rng.permutation(n)
        for lo in range(0, n, eta):
            Xb = np.asarray(X[order[lo:lo + eta]], dtype=np.float64)
            codes, ok = lasso_batch(Xb, D, lam)
            codes, Xb = codes[ok], Xb[ok]
            _revive_dead_atoms(D, A, Xb, codes)
            A += codes.T @ codes
            Bs += Xb.T @ codes
            for j in range(k):
                if A[j, j] <= 1e-12:
                    continue
                u = D[:, j] + (Bs[:, j] - D @ A[:, j]) / A[j, j]
                D[:, j] = u / max(np.linalg.norm(u), 1.0)
        log.info("unsupervised init: epoch %d done", epoch + 1)
    return project_unit_columns(D)


# -- supervised training ----------------------------------------------------

def _stage1_exact(model, data, mu, chunk=5000):
    """Optimal ``(W, Ds)`` for a frozen ``Db`` by least squares on ``[bt, alpha]``."""
    p = data.blurry_denoised.shape[1]
    k = model.k
    gram = np.zeros((p + k, p + k))
    cross = np.zeros((p + k, data.sharp.shape[1]))
    for lo in range(0, data.n, chunk):
        B = np.asarray(data.blurry[lo:lo + chunk], dtype=np.float64)
        Bt = np.asarray(data.blurry_denoised[lo:lo + chunk], dtype=np.float64)
        S = np.asarray(data.sharp[lo:lo + chunk], dtype=np.float64)
        A, ok = lasso_batch(B, model.dict_blurry, model.lam)
        Z = np.hstack([Bt[ok], A[ok]])
        gram += Z.T @ Z
        cross += Z.T @ S[ok]
    gram /= data.n
    cross /= data.n
    gram[np.diag_indices(p + k)] += mu
    coef = _solve_normal(gram, cross).T
    return replace(model, linear_predictor=coef[:, :p], dict_sharp=coef[:, p:])


def _support_restart_check(model, b):
    """True when a Lasso restart from a dense start finds the same support."""
    try:
        first = lasso_solve(b, model.dict_blurry, model.lam)
        again = lasso_solve(b, model.dict_blurry, model.lam,
                            alpha0=np.full(model.k, 1.0 / model.k))
    except ConvergenceError:
        return True
    return np.array_equal(first.active_set, again.active_set)


def _run_sgd(model, train, val, cfg, steps, rng, update_dict_blurry, records, stage, step0=0):
    """Run ``steps`` projected SGD iterations with per-epoch reshuffling."""
    eta = min(cfg.batch_size, train.n)
    order = rng.permutation(train.n)
    pos = 0
    skipped = 0
    mismatches = 0
    for t in range(1, steps + 1):
        if pos + eta > train.n:
            order = rng.permutation(train.n)
            pos = 0
        idx = order[pos:pos + eta]
        pos += eta
        batch = train.subset(np.sort(idx))
        model, d = _sgd_step(model, batch, t, cfg, update_dict_blurry)
        skipped += d.skipped
        if update_dict_blurry and not _support_restart_check(
                model, np.asarray(batch.blurry[0], dtype=np.float64)):
            mismatches += 1
        if t % cfg.log_every == 0 or t == steps:
            val_obj = prediction_objective(model, val) if val is not None else math.nan
            rec = {
                "stage": stage,
                "step": step0 + t,
                "rho_t": learning_rate(t, cfg),
                "batch_objective": d.objective,
                "validation_objective": val_obj,
                "skipped": skipped,
                "support_mismatches": mismatches,
            }
            records.append(rec)
            log.info("stage %s step %d val %.6g skipped %d", stage, step0 + t, val_obj, skipped)
            if val is not None and not math.isfinite(val_obj):
                raise NumericError(f"validation objective became {val_obj} at step {t}")
    return model, skipped


def _pilot_objective(model, pilot, val, cfg, pilot_steps, update_dict_blurry):
    rng = np.random.default_rng(cfg.rng_seed + 1)
    try:
        with np.errstate(all="ignore"):
            m, _ = _run_sgd(model, pilot, None, cfg, pilot_steps, rng,
                            update_dict_blurry, [], "pilot")
            obj = prediction_objective(m, val)
    except (NumericError, EmptyBatchError, InvalidInputError, FloatingPointError):
        obj = math.inf
    return obj if math.isfinite(obj) else math.inf


def select_learning_rate(model, train, val, cfg, steps, update_dict_blurry=True,
                         grid=RHO_GRID, dict_grid=DICT_RATE_GRID):
    """Pick ``(rho, dict_rate)`` by the validation objective of short pilot runs.

    ``rho`` is chosen first with the blurry dictionary frozen, then the
    dictionary multiplier with that ``rho``. Values already set in ``cfg``
    are kept.
    """
    pilot_n = min(cfg.pilot_size, train.n)
    pilot = train.subset(np.arange(pilot_n))
    pilot_steps = max(1, pilot_n // min(cfg.batch_size, pilot_n))
    t0 = cfg.t0 if cfg.t0 is not None else steps / 10.0
    base = replace(cfg, t0=t0, log_every=pilot_steps + 1)
    rho = cfg.rho
    if rho is None:
        scores = []
        for r in grid:
            scores.append(_pilot_objective(model, pilot, val, replace(base, rho=r), pilot_steps,
                                           False))
            log.info("pilot rho=%g objective=%.6g", r, scores[-1])
        rho = grid[int(np.argmin(scores))]
    rate = cfg.dict_rate
    if update_dict_blurry and rate is None:
        scores = []
        for r in dict_grid:
            scores.append(_pilot_objective(model, pilot, val,
                                           replace(base, rho=rho, dict_rate=r), pilot_steps, True))
            log.info("pilot dict_rate=%g objective=%.6g", r, scores[-1])
        rate = dict_grid[int(np.argmin(scores))]
    return rho, (1.0 if rate is None else rate)


def split_validation(data, cfg):
    """Deterministic train/validation split of ``data``."""
    n_val = min(cfg.validation_size, data.n // 10)
    rng = np.random.default_rng(cfg.rng_seed + 7)
    perm = rng.permutation(data.n)
    val_idx = np.sort(perm[:n_val])
    train_idx = np.sort(perm[n_val:])
    return data.subset(train_idx), (data.subset(val_idx) if n_val else None)


def train_supervised(data, init_b, cfg, validation=None, m_s=None, m_b=None):
    """Two-stage supervised training.

    Stage (i) keeps ``init_b`` fixed and fits ``(W, Ds)``; stage (ii) runs
    projected SGD on all three parameters for ``passes * n / batch_size``
    steps. When ``validation`` is not given, a split of ``data`` is held out.
    """
    if data.n == 0:
        raise InvalidInputError("no training data")
    init_b = np.asarray(init_b, dtype=np.float64)
    if np.any(np.linalg.norm(init_b, axis=0) > 1.0 + 1e-12):
        raise InvalidInputError("initial blurry dictionary is not feasible")
    m_b = m_b or math.isqrt(data.blurry.shape[1])
    m_s = m_s or math.isqrt(data.sharp.shape[1])
    if validation is None:
        train, val = split_validation(data, cfg)
    else:
        train, val = data, validation
    if val is None:
        val = train
    k = init_b.shape[1]
    model = Model(
        dict_blurry=init_b,
        dict_sharp=np.zeros((data.sharp.shape[1], k)),
        linear_predictor=ridge_fit(train, cfg.mu),
        lam=cfg.lam,
        patch_size_sharp=m_s,
        patch_size_blurry=m_b,
    )
    model.linear_baseline = model.linear_predictor.copy()
    eta = min(cfg.batch_size, train.n)
    steps = max(1, (cfg.passes * train.n) // eta)
    t0 = cfg.t0 if cfg.t0 is not None else steps / 10.0
    records = []
    result = TrainResult(model=model, log=records, t0=t0)
    rng = np.random.default_rng(cfg.rng_seed + 3)

    if cfg.stage1 == "exact":
        model = _stage1_exact(model, train, cfg.mu)
    else:
        rho1, _ = select_learning_rate(model, train, val, cfg, steps, update_dict_blurry=False)
        model, skipped = _run_sgd(model, train, val, replace(cfg, rho=rho1, t0=t0), steps,
                                  rng, False, records, "i")
        result.skipped += skipped
    result.stage1_objective = prediction_objective(model, val)
    records.append({"stage": "i", "step": 0, "validation_objective": result.stage1_objective})

    rho, rate = select_learning_rate(model, train, val, cfg, steps, update_dict_blurry=True)
    run_cfg = replace(cfg, rho=rho, t0=t0, dict_rate=rate)
    model, skipped = _run_sgd(model, train, val, run_cfg, steps, rng, True, records, "ii")
    result.skipped += skipped
    result.model = model
    result.rho = rho
    result.dict_rate = rate
    result.final_objective = records[-1]["validation_objective"]
    return result
