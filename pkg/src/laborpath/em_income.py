"""EM estimation of the earnings process, and the joint re-maximization.

Phase 2 holds the state-process coefficients fixed and alternates a 12-cell
joint E-step with a four-part M-step (mean, log-variance, correlation link,
class membership).  Phase 3 re-maximizes everything, re-running the
state-process M-step on the class-marginal of the joint posterior.

The income M-step is a sequential recipe, not an exact maximizer of the
EM minorant, so the drivers guard every update: a candidate that lowers the
observed log-likelihood is pulled back toward the previous iterate by
successive halving, with the previous iterate itself as the final fallback.
"""

import json
import os
from dataclasses import dataclass

import numpy as np

from . import kernels, model
from . import panel as panel_mod
from .em_mobility import (
    EMStep,
    MONOTONE_TOL,
    MobilityDesigns,
    NEWTON_ITER_IN_EM,
    m_step_mobility,
)
from .panel import PanelArrays
from .params import (
    IncomeParams,
    MobilityParams,
    ModelConfig,
    block_shapes,
    kappa_y_columns,
    mu_columns,
    params_distance,
    sigma_columns,
    xi_columns,
)

# A log-squared-residual regression estimates log sigma^2 + E[log chi^2_1];
# adding -E[log chi^2_1] = log 2 - digamma(1/2) to the fitted intercept
# removes the bias.
HARVEY_INTERCEPT = 1.2703628454614782
SIGMA_FLOOR = 1e-6
MAX_HALVINGS = 25


@dataclass
class IncomeEMResult:
    params: IncomeParams
    posterior: np.ndarray  # (P, K_m, K_y)
    loglik: float
    trace: list[EMStep]
    converged: bool
    n_iterations: int


@dataclass
class JointEMResult:
    mobility: MobilityParams
    income: IncomeParams
    posterior: np.ndarray
    loglik: float
    trace: list[EMStep]
    converged: bool
    n_iterations: int


class IncomeDesigns:
    """Design matrices for the income M-step.

    The class-replicated dataset is never materialized: the mean,
    log-variance, and correlation regressions accumulate their normal
    equations cell by cell, touching one class-specific design at a time.
    Only the per-person membership design (a few columns) is stacked.
    """

    def __init__(self, panel: PanelArrays, K_m: int, K_y: int):
        self.K_m, self.K_y = int(K_m), int(K_y)
        P = panel.n_persons
        fixed = panel.fixed_design()

        # ---- membership logit stack: ky-major, then km, then persons ----
        names_k = kappa_y_columns(self.K_m)
        idxk = panel_mod._index_map(names_k)
        bk = np.zeros((P, len(names_k)))
        bk[:, [idxk[n] for n in panel_mod._FIXED_NAMES]] = fixed
        bk[:, idxk["const"]] = 1.0
        km_stack = np.tile(bk, (self.K_m, 1))
        for k in range(1, self.K_m):
            km_stack[k * P : (k + 1) * P, idxk[f"km{k}"]] = 1.0
        self.X_member = np.tile(km_stack, (self.K_y, 1))
        self.y_member = np.repeat(np.arange(self.K_y), self.K_m * P)

        # ---- employed-row features ----
        emp = panel.employed_rows
        self.emp_person = panel.row_person[emp]
        self.wage = panel.log_wage[emp]
        self.n_emp = len(emp)
        state = panel.state[emp]
        xp = panel.xp[emp]
        fx = fixed[self.emp_person]
        self._state_dummy = {
            s: (state == s).astype(float) for s in range(1, model.N_STATES)
        }

        self.mu_idx = panel_mod._index_map(mu_columns(self.K_y))
        Xm = np.zeros((self.n_emp, len(self.mu_idx)))
        for s in range(2, model.N_STATES):
            Xm[:, self.mu_idx[f"s{s}"]] = self._state_dummy[s]
            Xm[:, self.mu_idx[f"xp:s{s}"]] = xp * self._state_dummy[s]
        Xm[:, self.mu_idx["xp"]] = xp
        Xm[:, self.mu_idx["xp_sq"]] = xp * xp
        Xm[:, [self.mu_idx[n] for n in panel_mod._FIXED_NAMES]] = fx
        Xm[:, self.mu_idx["const"]] = 1.0
        self._mu_base = Xm

        self.sigma_idx = panel_mod._index_map(sigma_columns(self.K_m, self.K_y))
        Xs = np.zeros((self.n_emp, len(self.sigma_idx)))
        for s in range(2, model.N_STATES):
            Xs[:, self.sigma_idx[f"s{s}"]] = self._state_dummy[s]
            Xs[:, self.sigma_idx[f"xp:s{s}"]] = xp * self._state_dummy[s]
        for s in range(1, model.N_STATES):
            Xs[:, self.sigma_idx[f"xp_sq:s{s}"]] = xp * xp * self._state_dummy[s]
        Xs[:, self.sigma_idx["xp"]] = xp
        Xs[:, [self.sigma_idx[n] for n in panel_mod._FIXED_NAMES]] = fx
        Xs[:, self.sigma_idx["const"]] = 1.0
        self._sigma_base = Xs

        # ---- employed-pair features ----
        pr = panel.pair_rows
        self.pair_person = panel.row_person[pr]
        self.n_pair = len(pr)
        emp_pos = np.full(panel.n_rows, -1, dtype=np.int64)
        emp_pos[emp] = np.arange(self.n_emp)
        self.pair_cur_emp = emp_pos[pr]
        self.pair_prev_emp = emp_pos[pr - 1]
        cur, prev = panel.state[pr], panel.state[pr - 1]
        xp_c, xp_p = panel.xp[pr], panel.xp[pr - 1]
        self._cur_dummy = {
            s: (cur == s).astype(float) for s in range(2, model.N_STATES)
        }
        self.xi_idx = panel_mod._index_map(xi_columns(self.K_m, self.K_y))
        Xx = np.zeros((self.n_pair, len(self.xi_idx)))
        for s in range(2, model.N_STATES):
            Xx[:, self.xi_idx[f"cur{s}"]] = self._cur_dummy[s]
        for s in range(1, model.N_STATES):
            d = (prev == s).astype(float)
            Xx[:, self.xi_idx[f"prev{s}"]] = d
            Xx[:, self.xi_idx[f"xp_prev:prev{s}"]] = xp_p * d
        Xx[:, self.xi_idx["xp"]] = xp_c
        Xx[:, self.xi_idx["xp_sq"]] = xp_c * xp_c
        Xx[:, self.xi_idx["xp_prev"]] = xp_p
        Xx[:, self.xi_idx["const"]] = 1.0
        self._xi_base = Xx

    # -- class-specific design builders (copy base, switch on the dummies) --

    def mu_design(self, ky: int) -> np.ndarray:
        X = self._mu_base.copy()
        if ky > 0:
            for s in range(1, model.N_STATES):
                X[:, self.mu_idx[f"s{s}:ky{ky}"]] = self._state_dummy[s]
        return X

    def sigma_design(self, km: int, ky: int) -> np.ndarray:
        X = self._sigma_base.copy()
        if km > 0:
            X[:, self.sigma_idx[f"km{km}"]] = 1.0
        if ky > 0:
            for s in range(1, model.N_STATES):
                X[:, self.sigma_idx[f"s{s}:ky{ky}"]] = self._state_dummy[s]
        return X

    def xi_design(self, km: int, ky: int) -> np.ndarray:
        X = self._xi_base.copy()
        if km > 0:
            X[:, self.xi_idx[f"km{km}"]] = 1.0
        if ky > 0:
            X[:, self.xi_idx[f"ky{ky}"]] = 1.0
            for s in range(2, model.N_STATES):
                X[:, self.xi_idx[f"ky{ky}:cur{s}"]] = self._cur_dummy[s]
        return X

    def member_weights(self, posterior: np.ndarray) -> np.ndarray:
        return np.ascontiguousarray(posterior.transpose(2, 1, 0)).ravel()


def e_step_joint(
    panel: PanelArrays,
    theta_m: MobilityParams,
    theta_y: IncomeParams,
    mobility_part: np.ndarray | None = None,
) -> tuple[np.ndarray, float]:
    """Joint posterior over the K_m x K_y cells and the observed loglik."""
    cells = panel_mod.joint_cell_logliks(
        panel, theta_m, theta_y, mobility_part=mobility_part
    )
    return panel_mod.posterior_from_cells(cells)


def m_step_income(
    designs: IncomeDesigns,
    posterior: np.ndarray,
    current: IncomeParams,
    *,
    tol: float = kernels.DEFAULT_TOL,
    max_iter: int = NEWTON_ITER_IN_EM,
) -> IncomeParams:
    """One pass of the income M-step recipe.

    Steps run strictly in order, each consuming the previous step's output:
    conditional mean, log-variance (with the log-chi-square intercept
    correction), correlation link on renormalized residual products, and
    finally class membership.  Weighted sums over the virtual class copies
    are accumulated cell by cell.
    """
    K_m, K_y = designs.K_m, designs.K_y
    post_emp = posterior[designs.emp_person]  # (n_emp, K_m, K_y)
    post_pair = posterior[designs.pair_person]

    # ---- mean ----
    w_ky = post_emp.sum(axis=1)
    d_mu = len(designs.mu_idx)
    A = np.zeros((d_mu, d_mu))
    b = np.zeros(d_mu)
    for c in range(K_y):
        X = designs.mu_design(c)
        w = w_ky[:, c]
        A += X.T @ (X * w[:, None])
        b += X.T @ (w * designs.wage)
    mu_new, _ = kernels.solve_weighted_normal_equations(A, b)

    resid = np.column_stack(
        [designs.wage - designs.mu_design(c) @ mu_new for c in range(K_y)]
    )

    # ---- log-variance ----
    logsq = np.log(np.maximum(resid * resid, kernels.RESID_SQ_FLOOR))
    d_sg = len(designs.sigma_idx)
    A = np.zeros((d_sg, d_sg))
    b = np.zeros(d_sg)
    for k in range(K_m):
        for c in range(K_y):
            X = designs.sigma_design(k, c)
            w = post_emp[:, k, c]
            A += X.T @ (X * w[:, None])
            b += X.T @ (w * logsq[:, c])
    sigma_new, _ = kernels.solve_weighted_normal_equations(A, b)
    sigma_new[designs.sigma_idx["const"]] += HARVEY_INTERCEPT

    # ---- correlation link ----
    d_xi = len(designs.xi_idx)
    A = np.zeros((d_xi, d_xi))
    b = np.zeros(d_xi)
    for k in range(K_m):
        for c in range(K_y):
            sd = np.exp(0.5 * (designs.sigma_design(k, c) @ sigma_new))
            std = resid[:, c] / np.maximum(sd, SIGMA_FLOOR)
            prod = std[designs.pair_cur_emp] * std[designs.pair_prev_emp]
            prod = np.clip(prod, -kernels.PRODUCT_CLAMP, kernels.PRODUCT_CLAMP)
            t = np.log1p(prod) - np.log1p(-prod)
            X = designs.xi_design(k, c)
            w = post_pair[:, k, c]
            A += X.T @ (X * w[:, None])
            b += X.T @ (w * t)
    xi_new, _ = kernels.solve_weighted_normal_equations(A, b)

    # ---- class membership ----
    if K_y > 1:
        fit = kernels.fit_weighted_mlogit(
            designs.X_member,
            designs.y_member,
            designs.member_weights(posterior),
            K_y,
            init=current.kappa_y_full(),
            tol=tol,
            max_iter=max_iter,
        )
        kappa_new = fit.coefficients[1:]
    else:
        kappa_new = np.zeros((0, designs.X_member.shape[1]))

    return IncomeParams(kappa_new, mu_new, sigma_new, xi_new)


def normalized_residual_moments(
    panel: PanelArrays, theta_y: IncomeParams, posterior: np.ndarray
) -> tuple[float, float]:
    """Posterior-weighted mean and variance of the standardized residuals."""
    ev = panel_mod.IncomeEvaluator(panel, theta_y)
    post_emp = posterior[ev.emp_person]
    total = num = sq = 0.0
    for k in range(theta_y.K_m):
        for c in range(theta_y.K_y):
            std = ev.cell_std_resid(k, c)
            w = post_emp[:, k, c]
            total += w.sum()
            num += float(w @ std)
            sq += float(w @ (std * std))
    mean = num / total
    return mean, sq / total - mean * mean


def pooled_income_init(
    panel: PanelArrays, K_m: int, K_y: int, seed: int, scale: float = 0.1
) -> IncomeParams:
    """Small random coefficients, with the mean and log-variance intercepts
    anchored at the pooled moments of observed log-wages.

    Without the anchors the first E-step evaluates wage densities many
    standard deviations off-scale and class separation starts from pure
    noise.  The anchors are class-symmetric, so no label ordering is baked
    in.
    """
    rng = np.random.default_rng(seed)
    shp = block_shapes(K_m, K_y)
    kappa = rng.uniform(-scale, scale, shp["kappa_y"])
    mu = rng.uniform(-scale, scale, shp["mu"])
    sigma = rng.uniform(-scale, scale, shp["sigma"])
    xi = rng.uniform(-scale, scale, shp["xi"])
    wage = panel.log_wage[panel.employed_rows]
    mu[-1] = float(wage.mean())
    sigma[-1] = float(np.log(max(wage.var(), SIGMA_FLOOR**2)))
    return IncomeParams(kappa, mu, sigma, xi)


def _blend_income(a: IncomeParams, b: IncomeParams, alpha: float) -> IncomeParams:
    if alpha >= 1.0:
        return b
    return IncomeParams(
        a.kappa_y + alpha * (b.kappa_y - a.kappa_y),
        a.mu + alpha * (b.mu - a.mu),
        a.sigma + alpha * (b.sigma - a.sigma),
        a.xi + alpha * (b.xi - a.xi),
    )


def _write_checkpoint(
    directory: str,
    phase: str,
    iteration: int,
    loglik: float,
    theta_m: MobilityParams,
    theta_y: IncomeParams,
) -> None:
    os.makedirs(directory, exist_ok=True)
    path = os.path.join(directory, f"{phase}_iter{iteration:04d}.json")
    payload = {
        "phase": phase,
        "iteration": iteration,
        "loglik": loglik,
        "mobility": theta_m.to_dict(),
        "income": theta_y.to_dict(),
    }
    tmp = path + ".tmp"
    with open(tmp, "w") as fh:
        json.dump(payload, fh, sort_keys=True)
    os.replace(tmp, path)


def run_em_income(
    panel: PanelArrays,
    theta_m: MobilityParams,
    *,
    config: ModelConfig | None = None,
    seed: int = 0,
    init: IncomeParams | None = None,
    checkpoint_dir: str | None = None,
    checkpoint_every: int = 25,
) -> IncomeEMResult:
    """Fit the earnings block with the state process held fixed."""
    cfg = config or ModelConfig()
    designs = IncomeDesigns(panel, cfg.K_m, cfg.K_y)
    mob_part = panel_mod.log_prior_mobility(panel, theta_m) + (
        panel_mod.mobility_loglik_matrix(panel, theta_m)
    )
    theta = init if init is not None else pooled_income_init(
        panel, cfg.K_m, cfg.K_y, seed
    )
    posterior, loglik = e_step_joint(panel, theta_m, theta, mobility_part=mob_part)
    trace: list[EMStep] = []
    converged = False
    it = 0
    for it in range(1, cfg.max_em_iter + 1):
        candidate = m_step_income(designs, posterior, theta, tol=cfg.kernel_tol)
        alpha, accepted = 1.0, False
        for _ in range(MAX_HALVINGS):
            trial = _blend_income(theta, candidate, alpha)
            new_post, new_ll = e_step_joint(
                panel, theta_m, trial, mobility_part=mob_part
            )
            if new_ll >= loglik:
                accepted = True
                break
            alpha *= 0.5
        if accepted:
            distance = params_distance(theta_m, theta, theta_m, trial)
            theta, posterior, loglik = trial, new_post, new_ll
        else:
            alpha, distance = 0.0, 0.0  # exact fallback: keep the iterate
        trace.append(EMStep(it, loglik, distance, alpha, "income"))
        if checkpoint_dir and it % checkpoint_every == 0:
            _write_checkpoint(checkpoint_dir, "income", it, loglik, theta_m, theta)
        if distance < cfg.em_tol:
            converged = True
            break
    return IncomeEMResult(theta, posterior, loglik, trace, converged, it)


def run_em_joint(
    panel: PanelArrays,
    theta_m: MobilityParams,
    theta_y: IncomeParams,
    *,
    config: ModelConfig | None = None,
    checkpoint_dir: str | None = None,
    checkpoint_every: int = 25,
) -> JointEMResult:
    """Re-maximize all coefficients from the phase-1/phase-2 solution.

    The state-process block is refit on the class-marginal posterior, which
    never lowers the likelihood; only the income block needs the damping
    guard.
    """
    cfg = config or ModelConfig()
    designs_m = MobilityDesigns(panel, cfg.K_m)
    designs_y = IncomeDesigns(panel, cfg.K_m, cfg.K_y)
    posterior, loglik = e_step_joint(panel, theta_m, theta_y)
    trace: list[EMStep] = []
    converged = False
    it = 0
    for it in range(1, cfg.max_em_iter + 1):
        cand_m, _ = m_step_mobility(
            designs_m, posterior.sum(axis=2), theta_m, tol=cfg.kernel_tol
        )
        cand_y = m_step_income(designs_y, posterior, theta_y, tol=cfg.kernel_tol)
        alpha, accepted = 1.0, False
        for _ in range(MAX_HALVINGS):
            trial_y = _blend_income(theta_y, cand_y, alpha)
            new_post, new_ll = e_step_joint(panel, cand_m, trial_y)
            if new_ll >= loglik:
                accepted = True
                break
            alpha *= 0.5
        if not accepted:
            # alpha -> 0: the pure state-process update, which is a
            # guaranteed ascent step
            alpha = 0.0
            trial_y = theta_y
            new_post, new_ll = e_step_joint(panel, cand_m, trial_y)
            if new_ll < loglik - MONOTONE_TOL:
                raise RuntimeError(
                    f"log-likelihood decreased at joint iteration {it}: "
                    f"{loglik:.10f} -> {new_ll:.10f}"
                )
        distance = params_distance(theta_m, theta_y, cand_m, trial_y)
        theta_m, theta_y = cand_m, trial_y
        posterior, loglik = new_post, new_ll
        trace.append(EMStep(it, loglik, distance, alpha, "joint"))
        if checkpoint_dir and it % checkpoint_every == 0:
            _write_checkpoint(checkpoint_dir, "joint", it, loglik, theta_m, theta_y)
        if distance < cfg.em_tol:
            converged = True
            break
    return JointEMResult(
        theta_m, theta_y, posterior, loglik, trace, converged, it
    )


@dataclass
class SequentialResult:
    mobility: MobilityParams
    income: IncomeParams
    posterior: np.ndarray
    loglik: float
    trace: list[EMStep]
    converged: bool


def estimate_sequential(
    panel: PanelArrays,
    *,
    config: ModelConfig | None = None,
    seed: int = 0,
    checkpoint_dir: str | None = None,
) -> SequentialResult:
    """Run all three phases: state process, earnings, joint re-maximization."""
    from .em_mobility import run_em_mobility

    cfg = config or ModelConfig()
    p1 = run_em_mobility(panel, config=cfg, seed=seed)
    p2 = run_em_income(
        panel, p1.params, config=cfg, seed=seed, checkpoint_dir=checkpoint_dir
    )
    p3 = run_em_joint(
        panel, p1.params, p2.params, config=cfg, checkpoint_dir=checkpoint_dir
    )
    trace = p1.trace + p2.trace + p3.trace
    converged = p1.converged and p2.converged and p3.converged
    return SequentialResult(
        p3.mobility, p3.income, p3.posterior, p3.loglik, trace, converged
    )
