"""Weighted estimation kernels used by the EM M-steps.

All four fitters share the same report type and conventions:

* deterministic: identical inputs (including row order) give identical output;
* scale-free stopping: convergence metrics are normalized by total weight, so
  multiplying all weights by a positive constant changes nothing;
* rows with zero weight are legal and contribute nothing.

The multinomial-logit fitter is a damped Newton maximizer with a box bound on
the coefficients: every accepted step strictly increases the weighted
log-likelihood, which is what makes the EM drivers built on top of it
monotone.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg

DEFAULT_TOL = 1e-8
DEFAULT_MAX_ITER = 200
COEF_BOUND = 30.0
MIN_STEP = 2.0**-30

# floors applied to squared residuals / correlation products before the
# log / log-ratio transforms
RESID_SQ_FLOOR = 1e-300
PRODUCT_CLAMP = 1.0 - 1e-6


@dataclass
class WeightedDataset:
    """Design matrix, outcome, and non-negative row weights."""

    X: np.ndarray
    y: np.ndarray
    w: np.ndarray

    def __post_init__(self):
        self.X = np.ascontiguousarray(self.X, dtype=np.float64)
        self.w = np.ascontiguousarray(self.w, dtype=np.float64)
        if self.X.ndim != 2:
            raise ValueError("X must be 2-D")
        if len(self.y) != len(self.X) or len(self.w) != len(self.X):
            raise ValueError("X, y, w must have equal length")
        if not np.all(np.isfinite(self.X)):
            raise ValueError("X must be finite")
        if not np.all(np.isfinite(self.w)) or np.any(self.w < 0):
            raise ValueError("weights must be finite and >= 0")
        if float(self.w.sum()) <= 0.0:
            raise ValueError("total weight must be positive")


@dataclass
class FitReport:
    """Result of one kernel fit.

    ``gradient_norm`` is the sup-norm of the weight-normalized (projected)
    gradient; ``converged`` is True only when it is at or below the requested
    tolerance.  ``reason`` qualifies non-standard exits ("diverged",
    "stalled", "max_iter", "rank_deficient").
    """

    coefficients: np.ndarray
    objective: float
    gradient_norm: float
    iterations: int
    converged: bool
    reason: str = ""
    residuals: np.ndarray | None = None


# ---------------------------------------------------------------------------
# weighted multinomial logit
# ---------------------------------------------------------------------------


def _mlogit_objective(X, y_idx, w, B):
    scores = X @ B.T
    shifted = scores - scores.max(axis=1, keepdims=True)
    logz = np.log(np.exp(shifted).sum(axis=1))
    picked = shifted[np.arange(len(y_idx)), y_idx]
    return float(np.dot(w, picked - logz))


def _mlogit_probs(X, B):
    scores = X @ B.T
    shifted = scores - scores.max(axis=1, keepdims=True)
    expd = np.exp(shifted)
    return expd / expd.sum(axis=1, keepdims=True)


def _free_gradient(X, y_idx, w, probs, free):
    # gradient per free class: X' (w * (1{y=j} - p_j))
    g = np.empty((len(free), X.shape[1]))
    for a, j in enumerate(free):
        g[a] = X.T @ (w * ((y_idx == j).astype(float) - probs[:, j]))
    return g


def mlogit_gradient(
    X: np.ndarray, y: np.ndarray, w: np.ndarray, B: np.ndarray, *, base: int = 0
) -> np.ndarray:
    """Gradient of the weighted multinomial-logit log-likelihood.

    Returned for the non-base coefficient rows only, stacked in class order
    as a (n_classes - 1, d) array — the derivative of the objective that
    ``fit_weighted_mlogit`` maximizes, evaluated at ``B``.
    """
    data = WeightedDataset(X, y, w)
    B = np.asarray(B, dtype=np.float64)
    y_idx = np.asarray(y, dtype=np.int64)
    free = [j for j in range(B.shape[0]) if j != base]
    return _free_gradient(data.X, y_idx, data.w, _mlogit_probs(data.X, B), free)


def fit_weighted_mlogit(
    X: np.ndarray,
    y: np.ndarray,
    w: np.ndarray,
    n_classes: int,
    *,
    base: int = 0,
    init: np.ndarray | None = None,
    tol: float = DEFAULT_TOL,
    max_iter: int = DEFAULT_MAX_ITER,
    coef_bound: float = COEF_BOUND,
) -> FitReport:
    """Maximize the weighted multinomial-logit log-likelihood.

    Class ``base`` keeps an identically-zero coefficient row.  Coefficients
    are constrained to the box [-coef_bound, coef_bound]; a solution pinned
    to the boundary is reported with ``converged=False`` and reason
    "diverged" (the likelihood keeps improving toward infinity there, which
    happens under class separation).

    Newton steps are damped by halving until the objective strictly
    improves, so the objective never decreases from ``init``.
    """
    data = WeightedDataset(X, y, w)
    X, w = data.X, data.w
    y_idx = np.asarray(y, dtype=np.int64)
    if np.any((y_idx < 0) | (y_idx >= n_classes)):
        raise ValueError("outcome labels out of range")
    if not 0 <= base < n_classes:
        raise ValueError("base class out of range")
    n, d = X.shape
    free = [j for j in range(n_classes) if j != base]
    if not free:  # a single class: the model is vacuous and already maximal
        return FitReport(np.zeros((1, d)), 0.0, 0.0, 0, True)

    B = np.zeros((n_classes, d))
    if init is not None:
        init = np.asarray(init, dtype=np.float64)
        if init.shape != (n_classes, d):
            raise ValueError(f"init must have shape {(n_classes, d)}")
        if np.any(np.abs(init[base]) > 1e-12):
            raise ValueError("init must keep the base-class row at zero")
        B = np.clip(init, -coef_bound, coef_bound)
        B[base] = 0.0

    w_total = float(w.sum())
    sqrt_w = np.sqrt(w)
    obj = _mlogit_objective(X, y_idx, w, B)
    grad_norm = np.inf
    converged = False
    reason = ""
    it = 0

    for it in range(1, max_iter + 1):
        probs = _mlogit_probs(X, B)
        g = _free_gradient(X, y_idx, w, probs, free)
        pg = g.copy()
        for a, j in enumerate(free):
            hi = B[j] >= coef_bound - 1e-12
            lo = B[j] <= -coef_bound + 1e-12
            pg[a][hi & (pg[a] > 0)] = 0.0
            pg[a][lo & (pg[a] < 0)] = 0.0
        grad_norm = float(np.abs(pg).max()) / w_total
        if grad_norm <= tol:
            converged = True
            break

        # Hessian of the negative objective: block (j,l) =
        #   delta_jl X'diag(w p_j)X - X'diag(w p_j p_l)X
        nf = len(free)
        Z = np.empty((n, nf * d))
        H = np.zeros((nf * d, nf * d))
        for a, j in enumerate(free):
            wp = w * probs[:, j]
            H[a * d:(a + 1) * d, a * d:(a + 1) * d] = X.T @ (wp[:, None] * X)
            Z[:, a * d:(a + 1) * d] = X * (sqrt_w * probs[:, j])[:, None]
        H -= Z.T @ Z

        gvec = pg.ravel()
        delta = None
        ridge = 0.0
        trace = float(np.trace(H)) / max(nf * d, 1)
        for attempt in range(6):
            try:
                c, low = scipy.linalg.cho_factor(
                    H + ridge * np.eye(nf * d), check_finite=False
                )
                delta = scipy.linalg.cho_solve((c, low), gvec, check_finite=False)
                break
            except scipy.linalg.LinAlgError:
                ridge = max(trace * 1e-8, 1e-12) * (100.0**attempt)
        if delta is None:
            reason = "rank_deficient"
            break
        delta = delta.reshape(nf, d)

        alpha = 1.0
        accepted = False
        while alpha >= MIN_STEP:
            cand = B.copy()
            for a, j in enumerate(free):
                cand[j] = np.clip(B[j] + alpha * delta[a], -coef_bound, coef_bound)
            obj_cand = _mlogit_objective(X, y_idx, w, cand)
            if obj_cand > obj:
                B = cand
                obj = obj_cand
                accepted = True
                break
            alpha *= 0.5
        if not accepted:
            reason = "stalled"
            break
    else:
        reason = "max_iter"

    at_bound = bool(np.any(np.abs(B[free]) >= coef_bound - 1e-9))
    if at_bound:
        converged = False
        reason = "diverged"
    return FitReport(
        coefficients=B,
        objective=obj,
        gradient_norm=grad_norm,
        iterations=it,
        converged=converged,
        reason=reason,
    )


# ---------------------------------------------------------------------------
# weighted least squares (and the two transformed variants)
# ---------------------------------------------------------------------------


def solve_weighted_normal_equations(
    A: np.ndarray, b: np.ndarray
) -> tuple[np.ndarray, bool]:
    """Solve A beta = b for a symmetric PSD A, adding a ridge only when A is
    (numerically) rank deficient.  Returns (beta, used_ridge).

    Deficiency is detected from the Cholesky factor: a pivot whose square is
    tiny relative to the column's own diagonal means the column is almost an
    exact combination of the previous ones.
    """
    d = A.shape[0]
    ridge = 0.0
    trace = float(np.trace(A)) / max(d, 1)
    for attempt in range(6):
        try:
            c, low = scipy.linalg.cho_factor(
                A + ridge * np.eye(d), check_finite=False
            )
            pivots = np.diag(c) ** 2
            if ridge == 0.0 and np.any(pivots < 1e-10 * np.diag(A)):
                raise scipy.linalg.LinAlgError("near rank deficiency")
            beta = scipy.linalg.cho_solve((c, low), b, check_finite=False)
            return beta, ridge > 0.0
        except scipy.linalg.LinAlgError:
            ridge = max(trace * 1e-8, 1e-12) * (100.0**attempt)
    raise np.linalg.LinAlgError("normal equations unsolvable even with ridge")


def ols_gradient(
    X: np.ndarray, y: np.ndarray, w: np.ndarray, beta: np.ndarray
) -> np.ndarray:
    """Gradient of the weighted least-squares objective -0.5 sum w (y - Xb)^2
    with respect to the coefficients, evaluated at ``beta``."""
    X = np.asarray(X, dtype=np.float64)
    resid = np.asarray(y, dtype=np.float64) - X @ np.asarray(beta, np.float64)
    return X.T @ (np.asarray(w, dtype=np.float64) * resid)


def fit_weighted_ols(X: np.ndarray, y: np.ndarray, w: np.ndarray) -> FitReport:
    """Weighted least squares via the normal equations.

    A rank-deficient cross-product matrix falls back to a small ridge and is
    reported via ``reason="rank_deficient"`` (still ``converged=True``: the
    returned coefficients solve the regularized system exactly).
    """
    data = WeightedDataset(X, y, w)
    X, w = data.X, data.w
    y = np.ascontiguousarray(data.y, dtype=np.float64)
    if not np.all(np.isfinite(y)):
        raise ValueError("y must be finite")
    Xw = X * w[:, None]
    A = X.T @ Xw
    b = X.T @ (w * y)
    beta, used_ridge = solve_weighted_normal_equations(A, b)
    resid = y - X @ beta
    grad = np.abs(ols_gradient(X, y, w, beta)).max() / float(w.sum())
    return FitReport(
        coefficients=beta,
        objective=float(-np.dot(w, resid * resid)),
        gradient_norm=float(grad),
        iterations=1,
        converged=True,
        reason="rank_deficient" if used_ridge else "",
        residuals=resid,
    )


def fit_log_variance(
    X: np.ndarray, residuals: np.ndarray, w: np.ndarray
) -> FitReport:
    """Regress log squared residuals on X (squares floored at a tiny positive
    value so exact zeros stay finite)."""
    residuals = np.asarray(residuals, dtype=np.float64)
    target = np.log(np.maximum(residuals * residuals, RESID_SQ_FLOOR))
    return fit_weighted_ols(X, target, w)


def fit_fisher_link(
    X: np.ndarray, products: np.ndarray, w: np.ndarray
) -> FitReport:
    """Regress the log-ratio link of residual products on X.

    Products are clamped into (-1, 1) before the transform; realized products
    of standardized residuals routinely fall outside that interval.
    """
    products = np.asarray(products, dtype=np.float64)
    c = np.clip(products, -PRODUCT_CLAMP, PRODUCT_CLAMP)
    target = np.log1p(c) - np.log1p(-c)
    return fit_weighted_ols(X, target, w)
