"""Columnar panel storage and batch likelihood evaluation.

:mod:`laborpath.model` defines every quantity one person-year at a time; this
module holds the same objects as flat arrays indexed by person and row so the
EM loops and simulators can evaluate whole panels at once.  Scores are always
assembled from the named column layouts in :mod:`laborpath.params` (never by
hard-coded positions), and the batch results are pinned to the scalar
reference implementations by the test suite.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from . import model
from .params import (
    IncomeParams,
    MobilityParams,
    chi0_columns,
    chi_columns,
    kappa_m_columns,
    kappa_y_columns,
    mu_columns,
    sigma_columns,
    xi_columns,
)


def _index_map(names: Sequence[str]) -> dict[str, int]:
    return {name: i for i, name in enumerate(names)}


# ---------------------------------------------------------------------------
# panel container
# ---------------------------------------------------------------------------


@dataclass
class PanelArrays:
    """A panel in flat columnar form.

    Person-level arrays have length P; row-level arrays have length n and are
    sorted by person, then year.  ``person_ptr`` delimits each person's row
    span: person i owns rows ``person_ptr[i]:person_ptr[i+1]``.

    ``log_wage`` is NaN exactly where ``state == 0``.
    """

    person_ids: np.ndarray
    female: np.ndarray
    educ: np.ndarray  # 0 / 1 / 2
    first_xp: np.ndarray
    row_person: np.ndarray
    year: np.ndarray
    state: np.ndarray
    log_wage: np.ndarray
    xp: np.ndarray
    person_ptr: np.ndarray

    def __post_init__(self):
        self.person_ids = np.asarray(self.person_ids, dtype=np.int64)
        self.female = np.asarray(self.female, dtype=np.float64)
        self.educ = np.asarray(self.educ, dtype=np.int64)
        self.first_xp = np.asarray(self.first_xp, dtype=np.float64)
        self.row_person = np.asarray(self.row_person, dtype=np.int64)
        self.year = np.asarray(self.year, dtype=np.int64)
        self.state = np.asarray(self.state, dtype=np.int64)
        self.log_wage = np.asarray(self.log_wage, dtype=np.float64)
        self.xp = np.asarray(self.xp, dtype=np.float64)
        self.person_ptr = np.asarray(self.person_ptr, dtype=np.int64)
        self._validate()

    def _validate(self):
        P, n = self.n_persons, self.n_rows
        for name in ("female", "educ", "first_xp"):
            if len(getattr(self, name)) != P:
                raise ValueError(f"person column '{name}' has wrong length")
        for name in ("year", "state", "log_wage", "xp"):
            if len(getattr(self, name)) != n:
                raise ValueError(f"row column '{name}' has wrong length")
        if self.person_ptr[0] != 0 or self.person_ptr[-1] != n:
            raise ValueError("person_ptr must span all rows")
        if np.any(np.diff(self.person_ptr) <= 0):
            raise ValueError("every person needs at least one row")
        if not np.array_equal(
            self.row_person, np.repeat(np.arange(P), np.diff(self.person_ptr))
        ):
            raise ValueError("row_person inconsistent with person_ptr")
        if np.any((self.state < 0) | (self.state >= model.N_STATES)):
            raise ValueError("state out of range")
        emp = self.state != 0
        if np.any(~np.isfinite(self.log_wage[emp])):
            raise ValueError("employed rows require finite log_wage")
        if np.any(np.isfinite(self.log_wage[~emp])):
            raise ValueError("non-employment rows must have NaN log_wage")
        same = self.row_person[1:] == self.row_person[:-1]
        if np.any(same & (np.diff(self.year) <= 0)):
            raise ValueError("years must be strictly increasing within person")

    # -- sizes ---------------------------------------------------------------

    @property
    def n_persons(self) -> int:
        return len(self.person_ids)

    @property
    def n_rows(self) -> int:
        return len(self.state)

    # -- derived row index sets (cached) --------------------------------------

    @property
    def first_rows(self) -> np.ndarray:
        """Row index of each person's first observation."""
        return self.person_ptr[:-1]

    @property
    def transition_rows(self) -> np.ndarray:
        """Rows that follow the previous calendar year of the same person."""
        cached = getattr(self, "_transition_rows", None)
        if cached is None:
            same = self.row_person[1:] == self.row_person[:-1]
            adjacent = np.diff(self.year) == 1
            cached = np.flatnonzero(same & adjacent) + 1
            self._transition_rows = cached
        return cached

    @property
    def employed_rows(self) -> np.ndarray:
        cached = getattr(self, "_employed_rows", None)
        if cached is None:
            cached = np.flatnonzero(self.state != 0)
            self._employed_rows = cached
        return cached

    @property
    def pair_rows(self) -> np.ndarray:
        """Transition rows where both sides of the pair are employed."""
        cached = getattr(self, "_pair_rows", None)
        if cached is None:
            tr = self.transition_rows
            cached = tr[(self.state[tr] != 0) & (self.state[tr - 1] != 0)]
            self._pair_rows = cached
        return cached

    def is_contiguous(self) -> bool:
        """True when every person's years have no calendar gaps."""
        same = self.row_person[1:] == self.row_person[:-1]
        return bool(np.all(np.diff(self.year)[same] == 1))

    # -- construction ----------------------------------------------------------

    @staticmethod
    def from_histories(histories: Iterable[model.IndividualHistory]) -> "PanelArrays":
        histories = list(histories)
        ids, fem, educ, fxp = [], [], [], []
        row_p, years, states, wages, xps = [], [], [], [], []
        ptr = [0]
        for i, h in enumerate(histories):
            ids.append(h.person_id)
            fem.append(h.zf.female)
            educ.append(h.zf.educ)
            fxp.append(h.zf.first_xp)
            for obs in h.years:
                row_p.append(i)
                years.append(obs.year)
                states.append(obs.state)
                wages.append(np.nan if obs.log_wage is None else obs.log_wage)
                xps.append(obs.xp)
            ptr.append(len(row_p))
        return PanelArrays(
            ids, fem, educ, fxp, row_p, years, states, wages, xps, ptr
        )

    def to_histories(self) -> list[model.IndividualHistory]:
        out = []
        for i in range(self.n_persons):
            a, b = self.person_ptr[i], self.person_ptr[i + 1]
            zf = model.FixedCovariates(
                float(self.female[i]), int(self.educ[i]), float(self.first_xp[i])
            )
            obs = tuple(
                model.YearObservation(
                    int(self.year[r]),
                    int(self.state[r]),
                    None if self.state[r] == 0 else float(self.log_wage[r]),
                    float(self.xp[r]),
                )
                for r in range(a, b)
            )
            out.append(model.IndividualHistory(int(self.person_ids[i]), zf, obs))
        return out

    def subset(self, person_mask: np.ndarray) -> "PanelArrays":
        """New panel restricted to the selected persons."""
        person_mask = np.asarray(person_mask, dtype=bool)
        keep = np.flatnonzero(person_mask)
        row_keep = person_mask[self.row_person]
        counts = np.diff(self.person_ptr)[keep]
        ptr = np.concatenate([[0], np.cumsum(counts)])
        return PanelArrays(
            self.person_ids[keep],
            self.female[keep],
            self.educ[keep],
            self.first_xp[keep],
            np.repeat(np.arange(len(keep)), counts),
            self.year[row_keep],
            self.state[row_keep],
            self.log_wage[row_keep],
            self.xp[row_keep],
            ptr,
        )

    def fixed_design(self) -> np.ndarray:
        """(P, 4) matrix of (female, educ_med, educ_high, first_xp)."""
        cached = getattr(self, "_fixed_design", None)
        if cached is None:
            cached = np.column_stack(
                [
                    self.female,
                    (self.educ == 1).astype(float),
                    (self.educ == 2).astype(float),
                    self.first_xp,
                ]
            )
            self._fixed_design = cached
        return cached


# ---------------------------------------------------------------------------
# score assembly helpers (named-column driven)
# ---------------------------------------------------------------------------

_FIXED_NAMES = ("female", "educ_med", "educ_high", "first_xp")


def _fixed_part(coefs: np.ndarray, idx: dict[str, int], fixed: np.ndarray) -> np.ndarray:
    cols = np.array([idx[n] for n in _FIXED_NAMES])
    return fixed @ coefs[cols]


def _per_state(coefs: np.ndarray, idx: dict[str, int], pattern: str,
               states: range) -> np.ndarray:
    """Length-5 lookup of one coefficient per state (0 where absent)."""
    out = np.zeros(model.N_STATES)
    for s in states:
        out[s] = coefs[idx[pattern.format(s)]]
    return out


def _class_offsets(coefs_rows: np.ndarray, idx: dict[str, int], prefix: str,
                   K: int) -> np.ndarray:
    """(K, n_rows_of_block) class-dummy offsets, class 0 row zero."""
    out = np.zeros((K, coefs_rows.shape[0]))
    for k in range(1, K):
        out[k] = coefs_rows[:, idx[f"{prefix}{k}"]]
    return out


# ---------------------------------------------------------------------------
# class priors
# ---------------------------------------------------------------------------


def log_prior_mobility_from_fixed(
    fixed: np.ndarray, theta_m: MobilityParams
) -> np.ndarray:
    """(P, K_m) log P(km | zf) from a (P, 4) fixed-covariate matrix."""
    idx = _index_map(kappa_m_columns())
    K_m = theta_m.K_m
    scores = np.zeros((len(fixed), K_m))
    for k in range(1, K_m):
        row = theta_m.kappa_m[k - 1]
        scores[:, k] = _fixed_part(row, idx, fixed) + row[idx["const"]]
    return model.log_softmax(scores, axis=1)


def log_prior_income_from_fixed(
    fixed: np.ndarray, theta_y: IncomeParams
) -> np.ndarray:
    """(P, K_m, K_y) log P(ky | zf, km) from a (P, 4) fixed-covariate matrix."""
    K_m, K_y = theta_y.K_m, theta_y.K_y
    idx = _index_map(kappa_y_columns(K_m))
    scores = np.zeros((len(fixed), K_m, K_y))
    km_off = _class_offsets(theta_y.kappa_y, idx, "km", K_m)  # (K_m, K_y-1)
    for ky in range(1, K_y):
        row = theta_y.kappa_y[ky - 1]
        base = _fixed_part(row, idx, fixed) + row[idx["const"]]
        scores[:, :, ky] = base[:, None] + km_off[:, ky - 1][None, :]
    return model.log_softmax(scores, axis=2)


def log_prior_mobility(panel: PanelArrays, theta_m: MobilityParams) -> np.ndarray:
    """(P, K_m) log P(km | zf)."""
    return log_prior_mobility_from_fixed(panel.fixed_design(), theta_m)


def log_prior_income(panel: PanelArrays, theta_y: IncomeParams) -> np.ndarray:
    """(P, K_m, K_y) log P(ky | zf, km)."""
    return log_prior_income_from_fixed(panel.fixed_design(), theta_y)


# ---------------------------------------------------------------------------
# mobility log-likelihood matrix
# ---------------------------------------------------------------------------


def initial_state_scores_from_fixed(
    fixed: np.ndarray, theta_m: MobilityParams
) -> np.ndarray:
    """(P, K_m, 5) logit scores of the first-year state."""
    K_m = theta_m.K_m
    idx = _index_map(chi0_columns(K_m))
    base = np.zeros((len(fixed), model.N_STATES))
    for s in range(1, model.N_STATES):
        row = theta_m.chi0[s - 1]
        base[:, s] = _fixed_part(row, idx, fixed) + row[idx["const"]]
    km_off = np.zeros((K_m, model.N_STATES))
    for k in range(1, K_m):
        km_off[k, 1:] = theta_m.chi0[:, idx[f"km{k}"]]
    return base[:, None, :] + km_off[None, :, :]


def _transition_features(panel: PanelArrays):
    tr = panel.transition_rows
    return {
        "rows": tr,
        "person": panel.row_person[tr],
        "prev_state": panel.state[tr - 1],
        "next_state": panel.state[tr],
        "xp_prev": panel.xp[tr - 1],
    }


def transition_scores_base(
    prev_state: np.ndarray,
    xp_prev: np.ndarray,
    fixed_rows: np.ndarray,
    theta_m: MobilityParams,
) -> np.ndarray:
    """(n, 5) transition logit scores excluding the km offsets."""
    idx = _index_map(chi_columns(theta_m.K_m))
    base = np.zeros((len(prev_state), model.N_STATES))
    for s in range(1, model.N_STATES):
        row = theta_m.chi[s - 1]
        prev_main = _per_state(row, idx, "prev{}", range(1, model.N_STATES))
        prev_xp = _per_state(row, idx, "xp_prev:prev{}", range(1, model.N_STATES))
        base[:, s] = (
            prev_main[prev_state]
            + row[idx["xp_prev"]] * xp_prev
            + prev_xp[prev_state] * xp_prev
            + row[idx["xp_sq_prev"]] * xp_prev * xp_prev
            + _fixed_part(row, idx, fixed_rows)
            + row[idx["const"]]
        )
    return base


def transition_km_offsets(theta_m: MobilityParams) -> np.ndarray:
    """(K_m, 5) additive transition-score offsets of the km dummies."""
    idx = _index_map(chi_columns(theta_m.K_m))
    off = np.zeros((theta_m.K_m, model.N_STATES))
    for k in range(1, theta_m.K_m):
        off[k, 1:] = theta_m.chi[:, idx[f"km{k}"]]
    return off


def mobility_loglik_matrix(panel: PanelArrays, theta_m: MobilityParams) -> np.ndarray:
    """(P, K_m) state-trajectory log-likelihood for every mobility class."""
    if not panel.is_contiguous():
        raise ValueError("mobility likelihood requires a gap-free panel")
    K_m = theta_m.K_m
    first_scores = initial_state_scores_from_fixed(panel.fixed_design(), theta_m)
    first_lp = model.log_softmax(first_scores, axis=2)
    first_state = panel.state[panel.first_rows]
    P = panel.n_persons
    out = first_lp[
        np.arange(P)[:, None], np.arange(K_m)[None, :], first_state[:, None]
    ].copy()

    ft = _transition_features(panel)
    if len(ft["rows"]):
        base = transition_scores_base(
            ft["prev_state"], ft["xp_prev"],
            panel.fixed_design()[ft["person"]], theta_m,
        )
        km_off = transition_km_offsets(theta_m)
        next_state = ft["next_state"]
        for k in range(K_m):
            lp = model.log_softmax(base + km_off[k][None, :], axis=1)
            picked = lp[np.arange(len(next_state)), next_state]
            out[:, k] += np.bincount(
                ft["person"], weights=picked, minlength=panel.n_persons
            )
    return out


# ---------------------------------------------------------------------------
# income log-likelihood tensor
# ---------------------------------------------------------------------------


class IncomeEvaluator:
    """Precomputed class-independent pieces of the wage likelihood.

    The class-dependent parts of every score are additive scalar offsets
    (class dummies and state-by-class dummies), so one pass builds the base
    scores and each of the K_m*K_y cells costs only vector arithmetic.
    """

    def __init__(self, panel: PanelArrays, theta_y: IncomeParams):
        self.panel = panel
        self.theta = theta_y
        K_m, K_y = theta_y.K_m, theta_y.K_y
        self.K_m, self.K_y = K_m, K_y

        emp = panel.employed_rows
        self.emp_rows = emp
        self.emp_person = panel.row_person[emp]
        state = panel.state[emp]
        xp = panel.xp[emp]
        fixed = panel.fixed_design()[self.emp_person]
        y = panel.log_wage[emp]

        # ---- mean: depends on ky only ----
        mi = _index_map(mu_columns(K_y))
        mu = theta_y.mu
        s_main = _per_state(mu, mi, "s{}", range(2, model.N_STATES))
        s_xp = _per_state(mu, mi, "xp:s{}", range(2, model.N_STATES))
        mu_base = (
            s_main[state]
            + mu[mi["xp"]] * xp
            + s_xp[state] * xp
            + mu[mi["xp_sq"]] * xp * xp
            + _fixed_part(mu, mi, fixed)
            + mu[mi["const"]]
        )
        sky = np.zeros((model.N_STATES, K_y))
        for s in range(1, model.N_STATES):
            for k in range(1, K_y):
                sky[s, k] = mu[mi[f"s{s}:ky{k}"]]
        # (n_emp, K_y) conditional means
        self.means = mu_base[:, None] + sky[state]
        self.resid = y[:, None] - self.means

        # ---- log-variance: km and ky offsets ----
        si = _index_map(sigma_columns(K_m, K_y))
        sg = theta_y.sigma
        g_main = _per_state(sg, si, "s{}", range(2, model.N_STATES))
        g_xp = _per_state(sg, si, "xp:s{}", range(2, model.N_STATES))
        g_xp_sq = _per_state(sg, si, "xp_sq:s{}", range(1, model.N_STATES))
        self.logvar_base = (
            g_main[state]
            + sg[si["xp"]] * xp
            + g_xp[state] * xp
            + g_xp_sq[state] * xp * xp
            + _fixed_part(sg, si, fixed)
            + sg[si["const"]]
        )
        self.logvar_km = np.zeros(K_m)
        for k in range(1, K_m):
            self.logvar_km[k] = sg[si[f"km{k}"]]
        sky_g = np.zeros((model.N_STATES, K_y))
        for s in range(1, model.N_STATES):
            for k in range(1, K_y):
                sky_g[s, k] = sg[si[f"s{s}:ky{k}"]]
        self.logvar_sky = sky_g[state]  # (n_emp, K_y)

        # ---- correlation link over employed pairs ----
        pr = panel.pair_rows
        self.pair_rows_ = pr
        self.pair_person = panel.row_person[pr]
        xi = theta_y.xi
        xii = _index_map(xi_columns(K_m, K_y))
        cur, prev = panel.state[pr], panel.state[pr - 1]
        xp_c, xp_p = panel.xp[pr], panel.xp[pr - 1]
        cur_main = _per_state(xi, xii, "cur{}", range(2, model.N_STATES))
        prev_main = _per_state(xi, xii, "prev{}", range(1, model.N_STATES))
        prev_xp = _per_state(xi, xii, "xp_prev:prev{}", range(1, model.N_STATES))
        self.link_base = (
            cur_main[cur]
            + prev_main[prev]
            + xi[xii["xp"]] * xp_c
            + xi[xii["xp_sq"]] * xp_c * xp_c
            + xi[xii["xp_prev"]] * xp_p
            + prev_xp[prev] * xp_p
            + xi[xii["const"]]
        )
        self.link_km = np.zeros(K_m)
        for k in range(1, K_m):
            self.link_km[k] = xi[xii[f"km{k}"]]
        ky_cur = np.zeros((K_y, model.N_STATES))
        for k in range(1, K_y):
            ky_cur[k, 0] = xi[xii[f"ky{k}"]]
            ky_cur[k, 1] = xi[xii[f"ky{k}"]]
            for s in (2, 3, 4):
                ky_cur[k, s] = xi[xii[f"ky{k}"]] + xi[xii[f"ky{k}:cur{s}"]]
        self.link_ky_cur = ky_cur[:, cur].T  # (n_pair, K_y)

        # map each pair's current row into the employed-row arrays
        emp_pos = np.full(panel.n_rows, -1, dtype=np.int64)
        emp_pos[emp] = np.arange(len(emp))
        self.pair_cur_emp = emp_pos[pr]
        self.pair_prev_emp = emp_pos[pr - 1]

    def cell_sd(self, km: int, ky: int) -> np.ndarray:
        logvar = self.logvar_base + self.logvar_km[km] + self.logvar_sky[:, ky]
        return np.exp(0.5 * logvar)

    def cell_tau(self, km: int, ky: int) -> np.ndarray:
        score = self.link_base + self.link_km[km] + self.link_ky_cur[:, ky]
        tau = np.tanh(0.5 * score)
        return np.clip(tau, -model.CORR_CLAMP, model.CORR_CLAMP)

    def cell_std_resid(self, km: int, ky: int) -> np.ndarray:
        """(n_emp,) standardized residuals for one latent cell."""
        return self.resid[:, ky] / self.cell_sd(km, ky)

    def loglik_cell(self, km: int, ky: int) -> np.ndarray:
        """(P,) per-person wage log-likelihood for one latent cell.

        First year of each employed run: marginal normal.  Later years of a
        run: normal conditional on the previous standardized value, which is
        the pairwise-overlap decomposition in conditional form.
        """
        panel = self.panel
        sd = self.cell_sd(km, ky)
        z = self.resid[:, ky] / sd
        terms = -0.5 * (z * z + model.LOG_2PI) - np.log(sd)
        if len(self.pair_rows_):
            tau = self.cell_tau(km, ky)
            z_c = z[self.pair_cur_emp]
            z_p = z[self.pair_prev_emp]
            one_m = 1.0 - tau * tau
            cond = (z_c - tau * z_p) ** 2 / one_m
            pair_terms = (
                -0.5 * (cond + model.LOG_2PI + np.log(one_m))
                - np.log(sd[self.pair_cur_emp])
            )
            # replace the marginal contribution of pair-current rows
            terms[self.pair_cur_emp] = pair_terms
        return np.bincount(self.emp_person, weights=terms, minlength=panel.n_persons)

    def loglik_tensor(self) -> np.ndarray:
        """(P, K_m, K_y) wage log-likelihood for every latent cell."""
        out = np.empty((self.panel.n_persons, self.K_m, self.K_y))
        for km in range(self.K_m):
            for ky in range(self.K_y):
                out[:, km, ky] = self.loglik_cell(km, ky)
        return out


def income_loglik_tensor(panel: PanelArrays, theta_y: IncomeParams) -> np.ndarray:
    return IncomeEvaluator(panel, theta_y).loglik_tensor()


# ---------------------------------------------------------------------------
# pointwise wage-equation evaluation (simulation paths)
# ---------------------------------------------------------------------------


def income_mean_eval(
    state: np.ndarray,
    xp: np.ndarray,
    fixed_rows: np.ndarray,
    ky: np.ndarray,
    theta_y: IncomeParams,
) -> np.ndarray:
    """Log-wage conditional mean per row; every argument is per-row."""
    K_y = theta_y.K_y
    mi = _index_map(mu_columns(K_y))
    mu = theta_y.mu
    s_main = _per_state(mu, mi, "s{}", range(2, model.N_STATES))
    s_xp = _per_state(mu, mi, "xp:s{}", range(2, model.N_STATES))
    sky = np.zeros((model.N_STATES, K_y))
    for s in range(1, model.N_STATES):
        for k in range(1, K_y):
            sky[s, k] = mu[mi[f"s{s}:ky{k}"]]
    return (
        s_main[state]
        + mu[mi["xp"]] * xp
        + s_xp[state] * xp
        + mu[mi["xp_sq"]] * xp * xp
        + _fixed_part(mu, mi, fixed_rows)
        + mu[mi["const"]]
        + sky[state, ky]
    )


def income_sd_eval(
    state: np.ndarray,
    xp: np.ndarray,
    fixed_rows: np.ndarray,
    km: np.ndarray,
    ky: np.ndarray,
    theta_y: IncomeParams,
) -> np.ndarray:
    """Log-wage conditional standard deviation per row."""
    K_m, K_y = theta_y.K_m, theta_y.K_y
    si = _index_map(sigma_columns(K_m, K_y))
    sg = theta_y.sigma
    g_main = _per_state(sg, si, "s{}", range(2, model.N_STATES))
    g_xp = _per_state(sg, si, "xp:s{}", range(2, model.N_STATES))
    g_xp_sq = _per_state(sg, si, "xp_sq:s{}", range(1, model.N_STATES))
    km_off = np.zeros(K_m)
    for k in range(1, K_m):
        km_off[k] = sg[si[f"km{k}"]]
    sky = np.zeros((model.N_STATES, K_y))
    for s in range(1, model.N_STATES):
        for k in range(1, K_y):
            sky[s, k] = sg[si[f"s{s}:ky{k}"]]
    logvar = (
        g_main[state]
        + sg[si["xp"]] * xp
        + g_xp[state] * xp
        + g_xp_sq[state] * xp * xp
        + _fixed_part(sg, si, fixed_rows)
        + sg[si["const"]]
        + km_off[km]
        + sky[state, ky]
    )
    return np.exp(0.5 * logvar)


def pair_tau_eval(
    cur_state: np.ndarray,
    prev_state: np.ndarray,
    xp: np.ndarray,
    xp_prev: np.ndarray,
    km: np.ndarray,
    ky: np.ndarray,
    theta_y: IncomeParams,
) -> np.ndarray:
    """Adjacent-year wage correlation per row (both years employed)."""
    K_m, K_y = theta_y.K_m, theta_y.K_y
    xii = _index_map(xi_columns(K_m, K_y))
    xi = theta_y.xi
    cur_main = _per_state(xi, xii, "cur{}", range(2, model.N_STATES))
    prev_main = _per_state(xi, xii, "prev{}", range(1, model.N_STATES))
    prev_xp = _per_state(xi, xii, "xp_prev:prev{}", range(1, model.N_STATES))
    km_off = np.zeros(K_m)
    for k in range(1, K_m):
        km_off[k] = xi[xii[f"km{k}"]]
    ky_cur = np.zeros((K_y, model.N_STATES))
    for k in range(1, K_y):
        ky_cur[k, :] = xi[xii[f"ky{k}"]]
        for s in (2, 3, 4):
            ky_cur[k, s] += xi[xii[f"ky{k}:cur{s}"]]
    score = (
        cur_main[cur_state]
        + prev_main[prev_state]
        + xi[xii["xp"]] * xp
        + xi[xii["xp_sq"]] * xp * xp
        + xi[xii["xp_prev"]] * xp_prev
        + prev_xp[prev_state] * xp_prev
        + xi[xii["const"]]
        + km_off[km]
        + ky_cur[ky, cur_state]
    )
    tau = np.tanh(0.5 * score)
    return np.clip(tau, -model.CORR_CLAMP, model.CORR_CLAMP)


# ---------------------------------------------------------------------------
# posteriors and observed likelihood
# ---------------------------------------------------------------------------


def joint_cell_logliks(
    panel: PanelArrays,
    theta_m: MobilityParams,
    theta_y: IncomeParams,
    mobility_part: np.ndarray | None = None,
) -> np.ndarray:
    """(P, K_m, K_y) complete-data log-likelihood of every latent cell.

    ``mobility_part`` may carry a precomputed ``log_prior_mobility +
    mobility_loglik_matrix`` sum (it is constant while mobility coefficients
    are held fixed).
    """
    if mobility_part is None:
        mobility_part = log_prior_mobility(panel, theta_m) + mobility_loglik_matrix(
            panel, theta_m
        )
    return (
        mobility_part[:, :, None]
        + log_prior_income(panel, theta_y)
        + income_loglik_tensor(panel, theta_y)
    )


def posterior_from_cells(cells: np.ndarray) -> tuple[np.ndarray, float]:
    """Normalize complete-data cell log-likelihoods into posteriors.

    Returns the posterior array (same shape, summing to 1 over the class
    axes) and the observed log-likelihood (log-sum-exp per person, exactly
    accumulated over persons).
    """
    P = cells.shape[0]
    flat = cells.reshape(P, -1)
    top = flat.max(axis=1)
    w = np.exp(flat - top[:, None])
    norm = w.sum(axis=1)
    post = (w / norm[:, None]).reshape(cells.shape)
    loglik = math.fsum((top + np.log(norm)).tolist())
    return post, loglik


def observed_loglik_panel(
    panel: PanelArrays,
    theta_m: MobilityParams,
    theta_y: IncomeParams,
    mobility_part: np.ndarray | None = None,
) -> float:
    cells = joint_cell_logliks(panel, theta_m, theta_y, mobility_part)
    _, ll = posterior_from_cells(cells)
    return ll


def observed_loglik_mobility(panel: PanelArrays, theta_m: MobilityParams) -> float:
    """Observed log-likelihood of the state process alone (ky integrated out
    trivially: wages are ignored)."""
    cells = log_prior_mobility(panel, theta_m) + mobility_loglik_matrix(panel, theta_m)
    top = cells.max(axis=1)
    return math.fsum((top + np.log(np.exp(cells - top[:, None]).sum(axis=1))).tolist())


def posterior_mobility(
    panel: PanelArrays, theta_m: MobilityParams
) -> tuple[np.ndarray, float]:
    """(P, K_m) posterior over mobility classes and the observed log-likelihood."""
    cells = log_prior_mobility(panel, theta_m) + mobility_loglik_matrix(panel, theta_m)
    top = cells.max(axis=1)
    w = np.exp(cells - top[:, None])
    norm = w.sum(axis=1)
    ll = math.fsum((top + np.log(norm)).tolist())
    return w / norm[:, None], ll
