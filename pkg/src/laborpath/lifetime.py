"""Discounted lifetime-earnings values and sector counterfactuals.

Careers are simulated (or taken as given) up to the year before age 60,
valued as a discounted sum of wage flows — zero flow in non-employment —
plus a retirement annuity anchored on the last wage in activity.  The
counterfactual pair the rest of the package builds on: hold one full-time
job for life versus move freely under the estimated dynamics.
"""

from dataclasses import dataclass, replace

import numpy as np

from .panel import PanelArrays
from .params import PUBLIC_STATES, IncomeParams, MobilityParams, ModelConfig
from .simulate import (
    FirstSpells,
    SeededStream,
    SimulatedPanel,
    draw_classes,
    simulate_panel,
    spell_covariates,
)

RETIREMENT_HORIZON = 22
WIDE_UNCERTAINTY_GROUP = 100

SECTOR_STATE = {"public": 2, "private": 1}


def _rr_for_states(rr, states: np.ndarray) -> np.ndarray:
    """Replacement rate per trajectory; a pair means (public, private)."""
    states = np.asarray(states)
    if np.isscalar(rr) or isinstance(rr, float):
        return np.full(states.shape, float(rr))
    rr_pub, rr_pvt = rr
    return np.where(np.isin(states, PUBLIC_STATES), rr_pub, rr_pvt)


def retirement_value(last_log_wage, beta: float, rr, horizon_years: int = RETIREMENT_HORIZON):
    """Value at retirement of a constant income flow for ``horizon_years``
    years: rr * exp(y) * (1 - beta^h) / (1 - beta)."""
    if not 0.0 < beta < 1.0:
        raise ValueError("beta must be in (0, 1)")
    rr = np.asarray(rr, dtype=float)
    return rr * np.exp(last_log_wage) * (1.0 - beta**horizon_years) / (1.0 - beta)


def lifetime_value(
    states,
    log_wages,
    beta: float,
    rr,
    horizon_years: int = RETIREMENT_HORIZON,
) -> tuple[float, bool]:
    """Discounted value of one trajectory up to retirement.

    Returns ``(value, never_employed)``.  Employed years contribute
    exp(log wage); non-employment contributes zero.  The retirement annuity
    is anchored on the last employed year's wage (and, for a sector pair
    ``rr``, that year's sector); with no employed year there is no anchor
    and the value is 0.0 with the flag set.
    """
    states = np.asarray(states)
    lw = np.asarray(log_wages, dtype=float)
    if states.ndim != 1 or len(states) == 0 or states.shape != lw.shape:
        raise ValueError("need one non-empty state path with matching wages")
    employed = states != 0
    flows = np.where(employed, np.exp(np.where(employed, lw, 0.0)), 0.0)
    value = float(np.power(beta, np.arange(len(states))) @ flows)
    emp_idx = np.flatnonzero(employed)
    if len(emp_idx) == 0:
        return 0.0, True
    last = emp_idx[-1]
    rr_v = float(_rr_for_states(rr, states[last : last + 1])[0])
    v_ret = float(retirement_value(lw[last], beta, rr_v, horizon_years))
    return value + beta ** len(states) * v_ret, False


@dataclass
class LifetimeResult:
    """Per-person lifetime values for one scenario."""

    scenario: str
    person_ids: np.ndarray
    value: np.ndarray
    log_value: np.ndarray  # NaN where value is 0 (never employed)
    never_employed: np.ndarray
    female: np.ndarray
    educ: np.ndarray
    first_state: np.ndarray
    beta: float
    rr: object

    def subset(self, mask: np.ndarray) -> "LifetimeResult":
        return replace(
            self,
            person_ids=self.person_ids[mask],
            value=self.value[mask],
            log_value=self.log_value[mask],
            never_employed=self.never_employed[mask],
            female=self.female[mask],
            educ=self.educ[mask],
            first_state=self.first_state[mask],
        )

    @property
    def n_valid(self) -> int:
        return int((~self.never_employed).sum())


def cohort_lifetime_values(
    panel: PanelArrays,
    *,
    beta: float,
    rr,
    horizon_years: int = RETIREMENT_HORIZON,
    scenario: str = "",
) -> LifetimeResult:
    """Vectorized ``lifetime_value`` over every person in a panel."""
    if not 0.0 < beta < 1.0:
        raise ValueError("beta must be in (0, 1)")
    P = panel.n_persons
    counts = np.diff(panel.person_ptr)
    t_within = np.arange(panel.n_rows) - np.repeat(panel.person_ptr[:-1], counts)
    employed = panel.state != 0
    flows = np.where(employed, np.exp(np.where(employed, panel.log_wage, 0.0)), 0.0)
    flow_value = np.bincount(
        panel.row_person, weights=flows * np.power(beta, t_within), minlength=P
    )

    emp = panel.employed_rows
    person_emp = panel.row_person[emp]
    never = np.bincount(person_emp, minlength=P) == 0
    # emp is row-sorted, so the last employed row of a person is the one
    # before the next person's span starts
    last_pos = np.searchsorted(person_emp, np.arange(P), side="right") - 1
    safe = np.where(never, 0, last_pos)
    last_state = panel.state[emp[safe]] if len(emp) else np.zeros(P, dtype=np.int64)
    last_wage = panel.log_wage[emp[safe]] if len(emp) else np.zeros(P)
    rr_arr = _rr_for_states(rr, last_state)
    ret = np.power(beta, counts) * retirement_value(
        last_wage, beta, rr_arr, horizon_years
    )
    value = flow_value + np.where(never, 0.0, ret)
    with np.errstate(divide="ignore"):
        log_value = np.where(value > 0, np.log(np.maximum(value, 1e-300)), np.nan)
    return LifetimeResult(
        scenario=scenario,
        person_ids=panel.person_ids.copy(),
        value=value,
        log_value=log_value,
        never_employed=never,
        female=panel.female.copy(),
        educ=panel.educ.copy(),
        first_state=panel.state[panel.first_rows].copy(),
        beta=beta,
        rr=rr,
    )


# ---------------------------------------------------------------------------
# scenario simulation
# ---------------------------------------------------------------------------

def entry_age(first_xp: np.ndarray, config: ModelConfig) -> np.ndarray:
    """Age at first observation, reconstructed from starting experience."""
    return config.entry_age_offset + 10.0 * np.asarray(first_xp, dtype=float)


def _truncate_at_age(panel: PanelArrays, ages_at_entry: np.ndarray, max_age: float) -> PanelArrays:
    first_year = panel.year[panel.first_rows]
    row_age = ages_at_entry[panel.row_person] + (
        panel.year - first_year[panel.row_person]
    )
    keep = row_age < max_age
    counts = np.bincount(panel.row_person[keep], minlength=panel.n_persons)
    if np.any(counts == 0):
        raise ValueError("a trajectory lost every year to the age cutoff")
    return PanelArrays(
        panel.person_ids,
        panel.female,
        panel.educ,
        panel.first_xp,
        panel.row_person[keep],
        panel.year[keep],
        panel.state[keep],
        panel.log_wage[keep],
        panel.xp[keep],
        np.concatenate([[0], np.cumsum(counts)]),
    )


def simulate_to_retirement(
    spells: FirstSpells,
    theta_m: MobilityParams,
    theta_y: IncomeParams,
    *,
    seed: int,
    config: ModelConfig | None = None,
    draw_initial: bool = False,
    force_state: int | None = None,
) -> SimulatedPanel:
    """Simulate each spell forward until the year before age 60.

    ``force_state`` pins the whole trajectory to one employed state (the
    held-job counterfactual); the observed first wage then anchors only the
    people who actually started in that state — everyone else draws a fresh
    first wage.
    """
    cfg = config or ModelConfig()
    entry = entry_age(spells.first_xp, cfg)
    horizon = np.maximum(np.ceil(cfg.retirement_age - entry).astype(int), 1)
    first_year = spells.first_year.astype(np.int64)
    end_year = int((first_year + horizon - 1).max())

    cov = spell_covariates(spells)
    km, ky = draw_classes(cov, theta_m, theta_y, SeededStream(seed))
    if draw_initial:
        initial_state = initial_log_wage = None
    elif force_state is not None:
        initial_state = None
        initial_log_wage = np.where(
            spells.first_state == force_state, spells.first_log_wage, np.nan
        )
    else:
        initial_state = spells.first_state
        initial_log_wage = spells.first_log_wage
    sim = simulate_panel(
        cov,
        km,
        ky,
        theta_m,
        theta_y,
        int(first_year.min()),
        end_year,
        seed,
        cfg,
        initial_state=initial_state,
        initial_log_wage=initial_log_wage,
        first_year=first_year,
        force_state=force_state,
    )
    panel = _truncate_at_age(sim.panel, entry, cfg.retirement_age)
    panel.person_ids = spells.person_ids.copy()
    return SimulatedPanel(panel, sim.km, sim.ky)


def job_for_life_values(
    spells: FirstSpells,
    theta_m: MobilityParams,
    theta_y: IncomeParams,
    sector: str,
    *,
    seed: int,
    config: ModelConfig | None = None,
    beta: float | None = None,
    rr=None,
) -> LifetimeResult:
    """Lifetime values when the same full-time job is held every year."""
    cfg = config or ModelConfig()
    if sector not in SECTOR_STATE:
        raise ValueError(f"sector must be one of {sorted(SECTOR_STATE)}")
    sim = simulate_to_retirement(
        spells, theta_m, theta_y, seed=seed, config=cfg,
        force_state=SECTOR_STATE[sector],
    )
    return cohort_lifetime_values(
        sim.panel,
        beta=cfg.beta if beta is None else beta,
        rr=cfg.RR if rr is None else rr,
        horizon_years=cfg.retirement_horizon_years,
        scenario=f"job_for_life_{sector}",
    )


def mobility_values(
    spells: FirstSpells,
    theta_m: MobilityParams,
    theta_y: IncomeParams,
    *,
    start_condition: str = "unconditional",
    seed: int,
    config: ModelConfig | None = None,
    beta: float | None = None,
    rr=None,
    draw_initial: bool = False,
) -> LifetimeResult:
    """Lifetime values under the full estimated dynamics.

    ``start_condition`` keeps everyone ("unconditional") or restricts to
    people first observed in public or private full-time work.
    """
    cfg = config or ModelConfig()
    conditions = {
        "unconditional": None,
        "observed_public": 2,
        "observed_private": 1,
    }
    if start_condition not in conditions:
        raise ValueError(f"start_condition must be one of {sorted(conditions)}")
    sim = simulate_to_retirement(
        spells, theta_m, theta_y, seed=seed, config=cfg, draw_initial=draw_initial
    )
    res = cohort_lifetime_values(
        sim.panel,
        beta=cfg.beta if beta is None else beta,
        rr=cfg.RR if rr is None else rr,
        horizon_years=cfg.retirement_horizon_years,
        scenario=f"mobility_{start_condition}",
    )
    want = conditions[start_condition]
    if want is not None:
        res = res.subset(spells.first_state == want)
    return res


# ---------------------------------------------------------------------------
# quantile comparison
# ---------------------------------------------------------------------------

@dataclass
class PremiumCurve:
    """Per-percentile difference of log lifetime-value quantiles, A minus B."""

    percentiles: np.ndarray
    log_diff: np.ndarray
    group_a: str
    group_b: str
    n_a: int
    n_b: int
    wide_uncertainty: bool

    def sign_changes(self) -> np.ndarray:
        """Percentiles (left edge) where the curve crosses zero."""
        s = np.sign(self.log_diff)
        flips = np.flatnonzero(s[:-1] * s[1:] < 0)
        return self.percentiles[flips]


def premium_curve(
    a: LifetimeResult,
    b: LifetimeResult,
    percentiles: np.ndarray | None = None,
) -> PremiumCurve:
    """Quantile-by-quantile log-value premium of group A over group B.

    Never-employed trajectories carry no log value and are excluded.  Small
    groups (< 100 usable values on either side) flag the curve as
    wide-uncertainty rather than failing.
    """
    if percentiles is None:
        percentiles = np.arange(1, 100)
    percentiles = np.asarray(percentiles)
    if len(percentiles) == 0 or np.any(np.diff(percentiles) <= 0):
        raise ValueError("percentile grid must be strictly increasing")
    if percentiles[0] <= 0 or percentiles[-1] >= 100:
        raise ValueError("percentiles must lie strictly between 0 and 100")
    va = a.log_value[~a.never_employed]
    vb = b.log_value[~b.never_employed]
    if len(va) == 0 or len(vb) == 0:
        raise ValueError("both groups need at least one employed trajectory")
    qa = np.quantile(va, percentiles / 100.0)
    qb = np.quantile(vb, percentiles / 100.0)
    return PremiumCurve(
        percentiles=percentiles,
        log_diff=qa - qb,
        group_a=a.scenario,
        group_b=b.scenario,
        n_a=len(va),
        n_b=len(vb),
        wide_uncertainty=min(len(va), len(vb)) < WIDE_UNCERTAINTY_GROUP,
    )
