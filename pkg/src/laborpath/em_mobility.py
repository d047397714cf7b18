"""EM estimation of the state process with discrete transition classes.

The complete-data model factors into three multinomial logits (class
membership, first-year state, year-to-year transitions), so the M-step is
three weighted-logit fits sharing one set of posterior weights.  Each fit is
warm-started at the current coefficients and only accepts strict improvements
of its own objective, which makes every EM update a generalized EM step: the
observed log-likelihood cannot decrease.
"""

from dataclasses import dataclass

import numpy as np

from . import kernels, model
from . import panel as panel_mod
from .kernels import FitReport
from .panel import PanelArrays
from .params import (
    ModelConfig,
    MobilityParams,
    block_shapes,
    chi0_columns,
    chi_columns,
    params_distance,
)

MONOTONE_TOL = 1e-8
NEWTON_ITER_IN_EM = 25


@dataclass(frozen=True)
class EMStep:
    """One row of an EM trace."""

    iteration: int
    loglik: float
    distance: float
    step_scale: float
    phase: str


@dataclass
class MobilityEMResult:
    params: MobilityParams
    posterior: np.ndarray  # (P, K_m)
    loglik: float
    trace: list[EMStep]
    converged: bool
    n_iterations: int


class MobilityDesigns:
    """Stacked design matrices for the three M-step regressions.

    Every person (or transition) is replicated once per latent class.  The
    class-membership block carries the class as the *label*; the state blocks
    carry it through the class dummy columns.  The matrices depend only on
    the data, so they are built once per run and reused across iterations —
    only the weights change.
    """

    def __init__(self, panel: PanelArrays, K_m: int):
        self.K_m = int(K_m)
        P = panel.n_persons
        fixed = panel.fixed_design()

        base = np.column_stack([fixed, np.ones(P)])
        self.X_class = np.tile(base, (self.K_m, 1))
        self.y_class = np.repeat(np.arange(self.K_m), P)

        names0 = chi0_columns(self.K_m)
        idx0 = panel_mod._index_map(names0)
        b0 = np.zeros((P, len(names0)))
        b0[:, [idx0[n] for n in panel_mod._FIXED_NAMES]] = fixed
        b0[:, idx0["const"]] = 1.0
        self.X_init = np.tile(b0, (self.K_m, 1))
        for k in range(1, self.K_m):
            self.X_init[k * P : (k + 1) * P, idx0[f"km{k}"]] = 1.0
        self.y_init = np.tile(panel.state[panel.first_rows], self.K_m)

        feats = panel_mod._transition_features(panel)
        n_tr = len(feats["rows"])
        names = chi_columns(self.K_m)
        idx = panel_mod._index_map(names)
        bt = np.zeros((n_tr, len(names)))
        prev, xp_prev = feats["prev_state"], feats["xp_prev"]
        for s in range(1, model.N_STATES):
            dummy = (prev == s).astype(float)
            bt[:, idx[f"prev{s}"]] = dummy
            bt[:, idx[f"xp_prev:prev{s}"]] = xp_prev * dummy
        bt[:, idx["xp_prev"]] = xp_prev
        bt[:, idx["xp_sq_prev"]] = xp_prev**2
        bt[:, [idx[n] for n in panel_mod._FIXED_NAMES]] = fixed[feats["person"]]
        bt[:, idx["const"]] = 1.0
        self.X_trans = np.tile(bt, (self.K_m, 1))
        for k in range(1, self.K_m):
            self.X_trans[k * n_tr : (k + 1) * n_tr, idx[f"km{k}"]] = 1.0
        self.y_trans = np.tile(feats["next_state"], self.K_m)
        self._trans_person = feats["person"]
        self.n_persons = P
        self.n_trans = n_tr

    def person_weights(self, posterior: np.ndarray) -> np.ndarray:
        """Class-major raveled weights for the per-person blocks."""
        return np.ascontiguousarray(posterior.T).ravel()

    def transition_weights(self, posterior: np.ndarray) -> np.ndarray:
        return np.ascontiguousarray(posterior[self._trans_person].T).ravel()


def e_step_mobility(
    panel: PanelArrays, theta_m: MobilityParams
) -> tuple[np.ndarray, float]:
    return panel_mod.posterior_mobility(panel, theta_m)


def m_step_mobility(
    designs: MobilityDesigns,
    posterior: np.ndarray,
    current: MobilityParams,
    *,
    tol: float = kernels.DEFAULT_TOL,
    max_iter: int = NEWTON_ITER_IN_EM,
) -> tuple[MobilityParams, tuple[FitReport, FitReport, FitReport]]:
    """Warm-started M-step; each block strictly improves its own objective."""
    w_person = designs.person_weights(posterior)
    w_trans = designs.transition_weights(posterior)
    r_class = kernels.fit_weighted_mlogit(
        designs.X_class, designs.y_class, w_person, designs.K_m,
        init=current.kappa_m_full(), tol=tol, max_iter=max_iter,
    )
    r_init = kernels.fit_weighted_mlogit(
        designs.X_init, designs.y_init, w_person, model.N_STATES,
        init=current.chi0_full(), tol=tol, max_iter=max_iter,
    )
    r_trans = kernels.fit_weighted_mlogit(
        designs.X_trans, designs.y_trans, w_trans, model.N_STATES,
        init=current.chi_full(), tol=tol, max_iter=max_iter,
    )
    new = MobilityParams(
        r_class.coefficients[1:], r_init.coefficients[1:], r_trans.coefficients[1:]
    )
    return new, (r_class, r_init, r_trans)


def random_mobility_init(K_m: int, seed: int, scale: float = 0.1) -> MobilityParams:
    """Small random coefficients; breaks the label symmetry between classes."""
    rng = np.random.default_rng(seed)
    shp = block_shapes(K_m, 2)
    return MobilityParams(
        rng.uniform(-scale, scale, shp["kappa_m"]),
        rng.uniform(-scale, scale, shp["chi0"]),
        rng.uniform(-scale, scale, shp["chi"]),
    )


def _run_single_mobility(
    panel: PanelArrays,
    designs: MobilityDesigns,
    init: MobilityParams,
    cfg: ModelConfig,
) -> MobilityEMResult:
    theta = init
    posterior, loglik = e_step_mobility(panel, theta)
    trace: list[EMStep] = []
    converged = False
    it = 0
    for it in range(1, cfg.max_em_iter + 1):
        candidate, _ = m_step_mobility(
            designs, posterior, theta, tol=cfg.kernel_tol
        )
        new_post, new_ll = e_step_mobility(panel, candidate)
        if new_ll < loglik - MONOTONE_TOL:
            raise RuntimeError(
                f"log-likelihood decreased at iteration {it}: "
                f"{loglik:.10f} -> {new_ll:.10f}"
            )
        distance = params_distance(theta, None, candidate, None)
        trace.append(EMStep(it, new_ll, distance, 1.0, "mobility"))
        theta, posterior, loglik = candidate, new_post, new_ll
        if distance < cfg.em_tol:
            converged = True
            break
    return MobilityEMResult(theta, posterior, loglik, trace, converged, it)


def run_em_mobility(
    panel: PanelArrays,
    *,
    config: ModelConfig | None = None,
    seed: int = 0,
    init: MobilityParams | None = None,
) -> MobilityEMResult:
    """Fit the state-process mixture; returns the best of ``n_restarts`` runs.

    Restart ``r`` initializes from seed ``seed + 1000 * r``; an explicit
    ``init`` suppresses restarts.
    """
    cfg = config or ModelConfig()
    designs = MobilityDesigns(panel, cfg.K_m)
    n_runs = 1 if init is not None else max(1, cfg.n_restarts)
    best: MobilityEMResult | None = None
    for r in range(n_runs):
        start = init if init is not None else random_mobility_init(
            cfg.K_m, seed + 1000 * r
        )
        result = _run_single_mobility(panel, designs, start, cfg)
        if best is None or result.loglik > best.loglik:
            best = result
    assert best is not None
    return best
