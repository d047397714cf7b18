"""Core model mathematics: state/earnings scores, densities, likelihoods.

The model tracks individuals through five labor-market states (see
``params.STATE_LABELS``) and, while employed, a log-earnings process.  Both
layers condition on fixed covariates and on a pair of discrete latent classes:
a mobility class ``km`` entering the state dynamics and an earnings class
``ky`` entering the earnings equations (``km`` also enters the second-moment
earnings equations directly).

Everything here is scalar-or-small-vector reference code operating on one
individual at a time; the batch counterparts used by the estimation loops
live in :mod:`laborpath.panel`.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .params import (
    N_STATES,
    IncomeParams,
    MobilityParams,
    ModelConfig,
)

LOG_2PI = math.log(2.0 * math.pi)

# Correlations are kept strictly inside (-1, 1) so the bivariate density and
# the inverse link stay finite.
CORR_CLAMP = 1.0 - 1e-9

# Products of realized standardized residuals can land outside (-1, 1); the
# link regression clamps them less aggressively than the density guard.
PRODUCT_CLAMP = 1.0 - 1e-6

EXPERIENCE_STEP = 0.1  # one employed year, measured in decades


# ---------------------------------------------------------------------------
# Covariate containers
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class FixedCovariates:
    """Time-invariant individual covariates.

    Attributes:
        female: indicator (0.0 or 1.0).
        educ: education level, 0 = low, 1 = medium, 2 = high.
        first_xp: labor-market experience (decades) at panel entry.
    """

    female: float
    educ: int
    first_xp: float

    def __post_init__(self) -> None:
        if self.female not in (0, 1, 0.0, 1.0):
            raise ValueError(f"female must be 0 or 1, got {self.female!r}")
        if self.educ not in (0, 1, 2):
            raise ValueError(f"educ must be 0, 1 or 2, got {self.educ!r}")
        if not math.isfinite(self.first_xp) or self.first_xp < 0:
            raise ValueError(f"first_xp must be finite and >= 0, got {self.first_xp!r}")

    @property
    def educ_med(self) -> float:
        return 1.0 if self.educ == 1 else 0.0

    @property
    def educ_high(self) -> float:
        return 1.0 if self.educ == 2 else 0.0

    def base_row(self) -> np.ndarray:
        """Common covariate prefix (female, educ_med, educ_high, first_xp)."""
        return np.array(
            [float(self.female), self.educ_med, self.educ_high, self.first_xp]
        )


@dataclass(frozen=True)
class TimeVaryingCovariates:
    """Per-year covariates: accumulated experience in decades."""

    xp: float

    def __post_init__(self) -> None:
        if not math.isfinite(self.xp) or self.xp < 0:
            raise ValueError(f"xp must be finite and >= 0, got {self.xp!r}")

    @property
    def xp_sq(self) -> float:
        return self.xp * self.xp


@dataclass(frozen=True)
class YearObservation:
    """One person-year: calendar year, state, and log earnings if employed."""

    year: int
    state: int
    log_wage: float | None
    xp: float

    def __post_init__(self) -> None:
        if not 0 <= self.state < N_STATES:
            raise ValueError(f"state must be in 0..{N_STATES - 1}, got {self.state}")
        if self.state == 0 and self.log_wage is not None:
            raise ValueError("log_wage must be None in non-employment")
        if self.state != 0:
            if self.log_wage is None or not math.isfinite(self.log_wage):
                raise ValueError("employed person-year requires finite log_wage")

    @property
    def zv(self) -> TimeVaryingCovariates:
        return TimeVaryingCovariates(self.xp)


@dataclass(frozen=True)
class IndividualHistory:
    """A person's observed trajectory, sorted by year.

    ``years`` may contain calendar gaps when freshly loaded; the likelihood
    functions that require a contiguous trajectory say so and raise otherwise.
    """

    person_id: int
    zf: FixedCovariates
    years: tuple[YearObservation, ...]

    def __post_init__(self) -> None:
        if len(self.years) == 0:
            raise ValueError("history must contain at least one year")
        yrs = [obs.year for obs in self.years]
        if any(b <= a for a, b in zip(yrs, yrs[1:])):
            raise ValueError("years must be strictly increasing")

    @property
    def n_years(self) -> int:
        return len(self.years)

    def is_contiguous(self) -> bool:
        yrs = [obs.year for obs in self.years]
        return all(b == a + 1 for a, b in zip(yrs, yrs[1:]))

    @staticmethod
    def from_states(
        person_id: int,
        zf: FixedCovariates,
        first_year: int,
        states: Sequence[int],
        log_wages: Sequence[float | None],
    ) -> "IndividualHistory":
        """Build a contiguous history, deriving experience from the states.

        Experience starts at ``zf.first_xp`` and accrues ``EXPERIENCE_STEP``
        per employed year.
        """
        if len(states) != len(log_wages):
            raise ValueError("states and log_wages must have equal length")
        xp = experience_path(zf.first_xp, states)
        obs = tuple(
            YearObservation(first_year + t, int(s), w, float(x))
            for t, (s, w, x) in enumerate(zip(states, log_wages, xp))
        )
        return IndividualHistory(person_id, zf, obs)


def experience_path(first_xp: float, states: Sequence[int]) -> np.ndarray:
    """Experience (decades) for each year of a contiguous state sequence.

    The first year carries ``first_xp``; each employed year adds one tenth of
    a decade to the following year's stock.
    """
    states_arr = np.asarray(states)
    xp = np.empty(len(states_arr))
    if len(states_arr) == 0:
        return xp
    xp[0] = first_xp
    if len(states_arr) > 1:
        employed = (states_arr[:-1] != 0).astype(float)
        xp[1:] = first_xp + EXPERIENCE_STEP * np.cumsum(employed)
    return xp


# ---------------------------------------------------------------------------
# Design rows (the single source of truth for covariate layouts)
# ---------------------------------------------------------------------------


def class_row_mobility(zf: FixedCovariates) -> np.ndarray:
    """Design row for the mobility-class membership logit."""
    return np.concatenate([zf.base_row(), [1.0]])


def class_row_income(zf: FixedCovariates, km: int, K_m: int) -> np.ndarray:
    """Design row for the earnings-class membership logit (given ``km``)."""
    _check_class(km, K_m, "km")
    dummies = np.zeros(K_m - 1)
    if km >= 1:
        dummies[km - 1] = 1.0
    return np.concatenate([zf.base_row(), dummies, [1.0]])


def initial_state_row(zf: FixedCovariates, km: int, K_m: int) -> np.ndarray:
    """Design row for the first observed state logit (same layout as above)."""
    return class_row_income(zf, km, K_m)


def transition_row(
    prev_state: int,
    zv_prev: TimeVaryingCovariates,
    zf: FixedCovariates,
    km: int,
    K_m: int,
) -> np.ndarray:
    """Design row for the year-to-year state transition logit.

    Experience terms are lagged: they describe the year being left.
    Non-employment is the omitted previous-state category.
    """
    _check_state(prev_state)
    _check_class(km, K_m, "km")
    prev = np.zeros(4)
    xp_prev_inter = np.zeros(4)
    if prev_state >= 1:
        prev[prev_state - 1] = 1.0
        xp_prev_inter[prev_state - 1] = zv_prev.xp
    km_dummies = np.zeros(K_m - 1)
    if km >= 1:
        km_dummies[km - 1] = 1.0
    return np.concatenate(
        [
            prev,
            [zv_prev.xp],
            xp_prev_inter,
            [zv_prev.xp_sq],
            zf.base_row(),
            km_dummies,
            [1.0],
        ]
    )


def income_mean_row(
    state: int,
    zv: TimeVaryingCovariates,
    zf: FixedCovariates,
    ky: int,
    K_y: int,
) -> np.ndarray:
    """Design row for the log-earnings level equation (employed states only)."""
    _check_employed_state(state)
    _check_class(ky, K_y, "ky")
    s = np.zeros(3)
    if state >= 2:
        s[state - 2] = 1.0
    xp_s = zv.xp * s
    sky = np.zeros(4 * (K_y - 1))
    if ky >= 1:
        sky[(state - 1) * (K_y - 1) + (ky - 1)] = 1.0
    return np.concatenate(
        [s, [zv.xp], xp_s, [zv.xp_sq], zf.base_row(), sky, [1.0]]
    )


def income_logvar_row(
    state: int,
    zv: TimeVaryingCovariates,
    zf: FixedCovariates,
    km: int,
    ky: int,
    K_m: int,
    K_y: int,
) -> np.ndarray:
    """Design row for the log-variance equation of log earnings."""
    _check_employed_state(state)
    _check_class(km, K_m, "km")
    _check_class(ky, K_y, "ky")
    s = np.zeros(3)
    if state >= 2:
        s[state - 2] = 1.0
    xp_s = zv.xp * s
    xp_sq_s = np.zeros(4)
    xp_sq_s[state - 1] = zv.xp_sq
    km_dummies = np.zeros(K_m - 1)
    if km >= 1:
        km_dummies[km - 1] = 1.0
    sky = np.zeros(4 * (K_y - 1))
    if ky >= 1:
        sky[(state - 1) * (K_y - 1) + (ky - 1)] = 1.0
    return np.concatenate(
        [s, [zv.xp], xp_s, xp_sq_s, zf.base_row(), km_dummies, sky, [1.0]]
    )


def pair_link_row(
    cur_state: int,
    prev_state: int,
    zv_cur: TimeVaryingCovariates,
    zv_prev: TimeVaryingCovariates,
    km: int,
    ky: int,
    K_m: int,
    K_y: int,
) -> np.ndarray:
    """Design row for the adjacent-year correlation link equation.

    Both years of the pair are employed, so both state blocks use employed
    categories (current base: state 1; previous enters as four dummies to the
    row's own base of none — a previous employed state is always one of them).
    """
    _check_employed_state(cur_state)
    _check_employed_state(prev_state)
    _check_class(km, K_m, "km")
    _check_class(ky, K_y, "ky")
    cur = np.zeros(3)
    if cur_state >= 2:
        cur[cur_state - 2] = 1.0
    prev = np.zeros(4)
    prev[prev_state - 1] = 1.0
    xp_prev_inter = np.zeros(4)
    xp_prev_inter[prev_state - 1] = zv_prev.xp
    ky_dummies = np.zeros(K_y - 1)
    if ky >= 1:
        ky_dummies[ky - 1] = 1.0
    km_dummies = np.zeros(K_m - 1)
    if km >= 1:
        km_dummies[km - 1] = 1.0
    ky_cur = np.zeros((K_y - 1) * 3)
    if ky >= 1 and cur_state >= 2:
        ky_cur[(ky - 1) * 3 + (cur_state - 2)] = 1.0
    return np.concatenate(
        [
            cur,
            prev,
            [zv_cur.xp, zv_cur.xp_sq, zv_prev.xp],
            xp_prev_inter,
            ky_dummies,
            km_dummies,
            ky_cur,
            [1.0],
        ]
    )


def _check_state(state: int) -> None:
    if not 0 <= state < N_STATES:
        raise ValueError(f"state must be in 0..{N_STATES - 1}, got {state}")


def _check_employed_state(state: int) -> None:
    if not 1 <= state < N_STATES:
        raise ValueError(f"employed state must be in 1..{N_STATES - 1}, got {state}")


def _check_class(k: int, K: int, name: str) -> None:
    if not 0 <= k < K:
        raise ValueError(f"{name} must be in 0..{K - 1}, got {k}")


# ---------------------------------------------------------------------------
# Softmax utilities
# ---------------------------------------------------------------------------


def log_softmax(scores: np.ndarray, axis: int = -1) -> np.ndarray:
    """Stable log-softmax along ``axis``."""
    scores = np.asarray(scores, dtype=np.float64)
    shifted = scores - np.max(scores, axis=axis, keepdims=True)
    lse = np.log(np.sum(np.exp(shifted), axis=axis, keepdims=True))
    return shifted - lse


def softmax(scores: np.ndarray, axis: int = -1) -> np.ndarray:
    return np.exp(log_softmax(scores, axis=axis))


# ---------------------------------------------------------------------------
# Class priors and state probabilities
# ---------------------------------------------------------------------------


def class_prior_mobility(zf: FixedCovariates, params: MobilityParams) -> np.ndarray:
    """P(km | zf) over mobility classes; class 0 is the logit base."""
    row = class_row_mobility(zf)
    return softmax(params.kappa_m_full() @ row)


def class_prior_income(
    zf: FixedCovariates, km: int, params: IncomeParams
) -> np.ndarray:
    """P(ky | zf, km) over earnings classes; class 0 is the logit base."""
    row = class_row_income(zf, km, params.K_m)
    return softmax(params.kappa_y_full() @ row)


def initial_state_probs(
    zf: FixedCovariates, km: int, params: MobilityParams
) -> np.ndarray:
    """P(S_1 | zf, km) over the five states; non-employment is the base."""
    row = initial_state_row(zf, km, params.K_m)
    return softmax(params.chi0_full() @ row)


def transition_probs(
    prev_state: int,
    zv_prev: TimeVaryingCovariates,
    zf: FixedCovariates,
    km: int,
    params: MobilityParams,
) -> np.ndarray:
    """P(S_t | S_{t-1}, zv_{t-1}, zf, km); non-employment is the base."""
    row = transition_row(prev_state, zv_prev, zf, km, params.K_m)
    return softmax(params.chi_full() @ row)


# ---------------------------------------------------------------------------
# Earnings equation pieces
# ---------------------------------------------------------------------------


def income_mean(
    state: int,
    zv: TimeVaryingCovariates,
    zf: FixedCovariates,
    ky: int,
    params: IncomeParams,
) -> float:
    """Conditional mean of log earnings."""
    return float(params.mu @ income_mean_row(state, zv, zf, ky, params.K_y))


def income_sd(
    state: int,
    zv: TimeVaryingCovariates,
    zf: FixedCovariates,
    km: int,
    ky: int,
    params: IncomeParams,
) -> float:
    """Conditional standard deviation of log earnings (exp of half the score)."""
    score = float(
        params.sigma
        @ income_logvar_row(state, zv, zf, km, ky, params.K_m, params.K_y)
    )
    return math.exp(0.5 * score)


def pair_correlation(
    cur_state: int,
    prev_state: int,
    zv_cur: TimeVaryingCovariates,
    zv_prev: TimeVaryingCovariates,
    km: int,
    ky: int,
    params: IncomeParams,
) -> float:
    """Correlation of adjacent standardized log earnings, in (-1, 1).

    The linear score is mapped through ``2*logistic(score) - 1`` (equivalently
    ``tanh(score/2)``) and clamped away from the endpoints so downstream
    densities stay finite.
    """
    score = float(
        params.xi
        @ pair_link_row(
            cur_state, prev_state, zv_cur, zv_prev, km, ky, params.K_m, params.K_y
        )
    )
    tau = math.tanh(0.5 * score)
    return max(-CORR_CLAMP, min(CORR_CLAMP, tau))


def fisher_link(c: float) -> float:
    """Inverse of ``pair_correlation``'s response: ln((1+c)/(1-c)).

    Accepts any c in (-1, 1); callers regressing realized residual products
    clamp to ``PRODUCT_CLAMP`` first.
    """
    if not -1.0 < c < 1.0:
        raise ValueError(f"correlation must be in (-1, 1), got {c!r}")
    return 2.0 * math.atanh(c)


def rho_from_sigma_tau(sigma_sq: float, tau: float) -> float:
    """Autoregression coefficient implied by (variance, adjacent correlation).

    Solves ``tau * rho**2 + sigma_sq * rho - tau = 0`` for the root in
    [-1, 1], via the rationalized form ``2*tau / (sigma_sq +
    sqrt(sigma_sq**2 + 4*tau**2))`` which is exact at tau = 0 and loses no
    precision for small tau.  Satisfies |rho| <= min(1, |tau|/sigma_sq).
    """
    if sigma_sq < 0 or not math.isfinite(sigma_sq):
        raise ValueError(f"sigma_sq must be finite and >= 0, got {sigma_sq!r}")
    if not math.isfinite(tau):
        raise ValueError(f"tau must be finite, got {tau!r}")
    if tau == 0.0:
        return 0.0
    return 2.0 * tau / (sigma_sq + math.hypot(sigma_sq, 2.0 * tau))


# ---------------------------------------------------------------------------
# Densities
# ---------------------------------------------------------------------------


def normal_logpdf(x: float) -> float:
    """Standard normal log density."""
    return -0.5 * (x * x + LOG_2PI)


def bivariate_normal_logpdf(u: float, v: float, corr: float) -> float:
    """Log density of a standard bivariate normal with correlation ``corr``."""
    if not -1.0 < corr < 1.0:
        raise ValueError(f"corr must be in (-1, 1), got {corr!r}")
    one_m = 1.0 - corr * corr
    quad = (u * u - 2.0 * corr * u * v + v * v) / one_m
    return -0.5 * (quad + math.log(one_m)) - LOG_2PI


# ---------------------------------------------------------------------------
# Per-individual likelihood contributions
# ---------------------------------------------------------------------------


def mobility_loglik(
    history: IndividualHistory, km: int, params: MobilityParams
) -> float:
    """Log-likelihood of the state trajectory given the mobility class.

    Requires a contiguous history (no calendar gaps): the first year uses the
    initial-state logit, every later year the transition logit.
    """
    if not history.is_contiguous():
        raise ValueError("mobility_loglik requires a contiguous history")
    zf = history.zf
    obs = history.years
    lp = log_softmax(params.chi0_full() @ initial_state_row(zf, km, params.K_m))
    total = float(lp[obs[0].state])
    for prev, cur in zip(obs, obs[1:]):
        row = transition_row(prev.state, prev.zv, zf, km, params.K_m)
        lp = log_softmax(params.chi_full() @ row)
        total += float(lp[cur.state])
    return total


def income_loglik(
    history: IndividualHistory, km: int, ky: int, params: IncomeParams
) -> float:
    """Log-likelihood of observed log earnings given both classes.

    Earnings contribute only in employed years.  Within each maximal run of
    consecutive employed years, the first year contributes its marginal
    normal density and each adjacent pair contributes the bivariate density
    of the two standardized values minus the already-counted marginal of the
    earlier one.  Runs separated by non-employment (or, defensively, by a
    calendar gap) are independent.
    """
    zf = history.zf
    total = 0.0
    prev_obs: YearObservation | None = None
    prev_std: float | None = None
    for obs in history.years:
        if obs.state == 0:
            prev_obs = None
            continue
        mean = income_mean(obs.state, obs.zv, zf, ky, params)
        sd = income_sd(obs.state, obs.zv, zf, km, ky, params)
        std = (obs.log_wage - mean) / sd
        in_run = (
            prev_obs is not None
            and prev_obs.state != 0
            and obs.year == prev_obs.year + 1
        )
        if in_run:
            tau = pair_correlation(
                obs.state, prev_obs.state, obs.zv, prev_obs.zv, km, ky, params
            )
            total += (
                bivariate_normal_logpdf(std, prev_std, tau)
                - normal_logpdf(prev_std)
                - math.log(sd)
            )
        else:
            total += normal_logpdf(std) - math.log(sd)
        prev_obs = obs
        prev_std = std
    return total


def complete_loglik(
    history: IndividualHistory,
    km: int,
    ky: int,
    theta_m: MobilityParams,
    theta_y: IncomeParams,
) -> float:
    """Joint log-likelihood of (classes, states, earnings) for one person."""
    zf = history.zf
    lp_km = log_softmax(theta_m.kappa_m_full() @ class_row_mobility(zf))
    lp_ky = log_softmax(
        theta_y.kappa_y_full() @ class_row_income(zf, km, theta_y.K_m)
    )
    return (
        float(lp_km[km])
        + float(lp_ky[ky])
        + mobility_loglik(history, km, theta_m)
        + income_loglik(history, km, ky, theta_y)
    )


def observed_loglik(
    history: IndividualHistory,
    theta_m: MobilityParams,
    theta_y: IncomeParams,
    config: ModelConfig,
) -> float:
    """Marginal log-likelihood, classes summed out (log-sum-exp over cells)."""
    cells = np.array(
        [
            complete_loglik(history, km, ky, theta_m, theta_y)
            for km in range(config.K_m)
            for ky in range(config.K_y)
        ]
    )
    top = float(np.max(cells))
    return top + math.log(float(np.sum(np.exp(cells - top))))
