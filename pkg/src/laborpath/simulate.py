"""Synthetic panels and forward prediction.

Randomness is *keyed*, not sequential: every draw is a pure function of
(global seed, person id, purpose tag, calendar year) through a 64-bit mix.
Consequences the rest of the package relies on:

* results are independent of person ordering, batching, and thread count;
* two runs with the same seed reuse identical innovations, so counterfactual
  scenarios that share a seed are exactly paired (the wage-noise stream does
  not depend on the scenario's employment path — noise is drawn for everyone
  every year and only consumed when employed);
* any subset of people can be re-simulated bit-identically.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, fields
from typing import Mapping

import numpy as np
import scipy.special

from . import model, panel as panel_mod
from .panel import PanelArrays
from .params import IncomeParams, MobilityParams, ModelConfig

# purpose tags of the keyed random streams
TAG_KM = 1
TAG_KY = 2
TAG_INIT_STATE = 3
TAG_TRANS = 4
TAG_WAGE = 5
TAG_FEMALE = 6
TAG_EDUC = 7
TAG_XP0 = 8

_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)
_GOLDEN = np.uint64(0x9E3779B97F4A7C15)


def _mix(h: np.ndarray) -> np.ndarray:
    """64-bit finalizer scrambling all input bits into all output bits."""
    h = h.astype(np.uint64, copy=True)
    h ^= h >> np.uint64(30)
    h *= _M1
    h ^= h >> np.uint64(27)
    h *= _M2
    h ^= h >> np.uint64(31)
    return h


class SeededStream:
    """Counter-based random stream keyed by (seed, person, tag, year)."""

    def __init__(self, seed: int):
        if not 0 <= int(seed) < 2**63:
            raise ValueError("seed must be a non-negative 63-bit integer")
        self.seed = int(seed)

    def _hash(self, pid: np.ndarray, tag: int, t: int) -> np.ndarray:
        pid = np.asarray(pid, dtype=np.uint64)
        h = _mix(np.full_like(pid, np.uint64(self.seed)) + _GOLDEN)
        h = _mix(h ^ (pid + _GOLDEN))
        h = _mix(h ^ (np.uint64(tag) + _GOLDEN))
        h = _mix(h ^ (np.uint64(t) + _GOLDEN))
        return h

    def uniform(self, pid, tag: int, t: int = 0) -> np.ndarray:
        """Uniform draws strictly inside (0, 1)."""
        h = self._hash(np.atleast_1d(pid), tag, t)
        return ((h >> np.uint64(11)).astype(np.float64) + 0.5) * 2.0**-53

    def normal(self, pid, tag: int, t: int = 0) -> np.ndarray:
        return scipy.special.ndtri(self.uniform(pid, tag, t))


def _draw_categorical(probs: np.ndarray, u: np.ndarray) -> np.ndarray:
    """Row-wise inverse-CDF draw from (n, K) probabilities."""
    cdf = np.cumsum(probs, axis=1)
    idx = (u[:, None] > cdf).sum(axis=1)
    return np.minimum(idx, probs.shape[1] - 1)


# ---------------------------------------------------------------------------
# population specification
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PopulationSpec:
    """Covariate distribution and calendar window of a synthetic cohort."""

    n: int
    start_year: int = 2012
    end_year: int = 2019
    female_share: float = 0.5
    educ_shares: tuple[float, float, float] = (0.69, 0.16, 0.15)
    first_xp_range: tuple[float, float] = (0.0, 3.0)

    def __post_init__(self):
        if self.n <= 0:
            raise ValueError("n must be positive")
        if self.end_year < self.start_year:
            raise ValueError("end_year must be >= start_year")
        if not 0.0 <= self.female_share <= 1.0:
            raise ValueError("female_share must be in [0, 1]")
        shares = tuple(float(s) for s in self.educ_shares)
        if len(shares) != 3 or any(s < 0 for s in shares):
            raise ValueError("educ_shares must be three non-negative numbers")
        if abs(sum(shares) - 1.0) > 1e-9:
            raise ValueError("educ_shares must sum to 1")
        object.__setattr__(self, "educ_shares", shares)
        lo, hi = (float(x) for x in self.first_xp_range)
        if lo < 0 or hi < lo:
            raise ValueError("first_xp_range must satisfy 0 <= lo <= hi")
        object.__setattr__(self, "first_xp_range", (lo, hi))

    @property
    def n_years(self) -> int:
        return self.end_year - self.start_year + 1

    def to_dict(self) -> dict:
        return {
            f.name: (list(v) if isinstance(v := getattr(self, f.name), tuple) else v)
            for f in fields(self)
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "PopulationSpec":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown population keys: {sorted(unknown)}")
        kw = dict(d)
        for key in ("educ_shares", "first_xp_range"):
            if isinstance(kw.get(key), list):
                kw[key] = tuple(kw[key])
        return cls(**kw)


def draw_covariates(spec: PopulationSpec, stream: SeededStream) -> dict:
    """Person ids and fixed covariates for a synthetic cohort."""
    pids = np.arange(spec.n, dtype=np.int64)
    female = (stream.uniform(pids, TAG_FEMALE) < spec.female_share).astype(float)
    u_e = stream.uniform(pids, TAG_EDUC)
    cuts = np.cumsum(spec.educ_shares)
    educ = (u_e[:, None] > cuts[None, :2]).sum(axis=1)
    lo, hi = spec.first_xp_range
    first_xp = lo + (hi - lo) * stream.uniform(pids, TAG_XP0)
    return {
        "person_ids": pids,
        "female": female,
        "educ": educ.astype(np.int64),
        "first_xp": first_xp,
    }


def _fixed_matrix(cov: Mapping) -> np.ndarray:
    return np.column_stack(
        [
            cov["female"],
            (cov["educ"] == 1).astype(float),
            (cov["educ"] == 2).astype(float),
            cov["first_xp"],
        ]
    )


# ---------------------------------------------------------------------------
# latent class draws
# ---------------------------------------------------------------------------


def draw_classes(
    cov: Mapping,
    theta_m: MobilityParams,
    theta_y: IncomeParams,
    stream: SeededStream,
) -> tuple[np.ndarray, np.ndarray]:
    """Draw (km, ky) for every person from the class membership model."""
    pids = np.asarray(cov["person_ids"])
    fixed = _fixed_matrix(cov)
    pri_m = np.exp(panel_mod.log_prior_mobility_from_fixed(fixed, theta_m))
    km = _draw_categorical(pri_m, stream.uniform(pids, TAG_KM))
    pri_y_all = np.exp(panel_mod.log_prior_income_from_fixed(fixed, theta_y))
    pri_y = pri_y_all[np.arange(len(pids)), km]
    ky = _draw_categorical(pri_y, stream.uniform(pids, TAG_KY))
    return km, ky


# ---------------------------------------------------------------------------
# forward simulation
# ---------------------------------------------------------------------------


@dataclass
class SimulatedPanel:
    """A simulated panel plus the latent classes that generated it."""

    panel: PanelArrays
    km: np.ndarray
    ky: np.ndarray


def _step_wages(
    theta_y: IncomeParams,
    cfg: ModelConfig,
    state: np.ndarray,
    prev_state: np.ndarray | None,
    xp: np.ndarray,
    xp_prev: np.ndarray | None,
    fixed: np.ndarray,
    km: np.ndarray,
    ky: np.ndarray,
    ytilde_prev: np.ndarray,
    z: np.ndarray,
) -> tuple[np.ndarray, np.ndarray]:
    """One year of wage dynamics; returns (log_wage, ytilde).

    ``ytilde`` is the standardized deviation carried by the autoregression.
    Rows not employed this year return NaN wages and an untouched carry.
    """
    n = len(state)
    log_wage = np.full(n, np.nan)
    ytilde = ytilde_prev.copy()
    emp = state != 0
    if not np.any(emp):
        return log_wage, ytilde
    idx = np.flatnonzero(emp)
    st = state[idx]
    mean = panel_mod.income_mean_eval(st, xp[idx], fixed[idx], ky[idx], theta_y)
    sd = panel_mod.income_sd_eval(st, xp[idx], fixed[idx], km[idx], ky[idx], theta_y)
    fresh = np.ones(len(idx), dtype=bool)
    y_new = np.empty(len(idx))
    if prev_state is not None:
        linked = prev_state[idx] != 0
        if np.any(linked):
            li = idx[linked]
            tau = panel_mod.pair_tau_eval(
                state[li], prev_state[li], xp[li], xp_prev[li],
                km[li], ky[li], theta_y,
            )
            if cfg.rho_mode == "correlation_consistent":
                coef, scale = tau, np.sqrt(1.0 - tau * tau)
            else:  # paper_formula: AR coefficient from the closed form
                var = sd[linked] ** 2
                with np.errstate(invalid="ignore"):
                    coef = np.where(
                        tau == 0.0,
                        0.0,
                        2.0 * tau / (var + np.hypot(var, 2.0 * tau)),
                    )
                scale = np.ones_like(coef)
            y_new[linked] = coef * ytilde_prev[li] + scale * z[li]
            fresh[linked] = False
    y_new[fresh] = z[idx[fresh]]
    log_wage[idx] = mean + sd * y_new
    ytilde[idx] = y_new
    return log_wage, ytilde


def simulate_panel(
    cov: Mapping,
    km: np.ndarray,
    ky: np.ndarray,
    theta_m: MobilityParams,
    theta_y: IncomeParams,
    start_year: int,
    end_year: int,
    seed: int,
    config: ModelConfig | None = None,
    *,
    initial_state: np.ndarray | None = None,
    initial_log_wage: np.ndarray | None = None,
    first_year: np.ndarray | None = None,
    force_state: int | None = None,
) -> SimulatedPanel:
    """Simulate trajectories for a cohort with known classes.

    By default every person starts at ``start_year`` with a state drawn from
    the first-year logit.  ``initial_state`` (with optional
    ``initial_log_wage``) pins the first year instead, and ``first_year``
    staggers entry: person rows start at their own first year.

    ``force_state`` pins every year of every trajectory to one employed
    state (no state draws at all), for held-job counterfactuals.  NaN
    entries in ``initial_log_wage`` mean "no anchor": that person's first
    wage is drawn from the model.
    """
    cfg = config or ModelConfig()
    if force_state is not None and not 1 <= force_state < model.N_STATES:
        raise ValueError("force_state must be an employed state")
    stream = SeededStream(seed)
    pids = np.asarray(cov["person_ids"])
    P = len(pids)
    fixed = _fixed_matrix(cov)
    first_xp = np.asarray(cov["first_xp"], dtype=float)
    if first_year is None:
        first_year = np.full(P, start_year, dtype=np.int64)
    else:
        first_year = np.asarray(first_year, dtype=np.int64)
        if np.any(first_year < start_year) or np.any(first_year > end_year):
            raise ValueError("first_year outside the simulation window")

    years = list(range(start_year, end_year + 1))
    T = len(years)
    state_t = np.zeros((T, P), dtype=np.int64)
    wage_t = np.full((T, P), np.nan)
    xp_t = np.zeros((T, P))
    active_t = np.zeros((T, P), dtype=bool)

    state = np.zeros(P, dtype=np.int64)
    xp = first_xp.copy()
    ytilde = np.zeros(P)

    for ti, year in enumerate(years):
        entering = first_year == year
        ongoing = first_year < year
        active = entering | ongoing
        active_t[ti] = active
        if not np.any(active):
            continue

        new_state = state.copy()
        # state update
        if force_state is not None:
            new_state[active] = force_state
            if np.any(entering):
                xp[entering] = first_xp[entering]
        elif np.any(entering):
            e = np.flatnonzero(entering)
            if initial_state is not None:
                first_states = np.asarray(initial_state, dtype=np.int64)
                new_state[e] = first_states[e]
            else:
                scores = panel_mod.initial_state_scores_from_fixed(fixed[e], theta_m)
                probs = np.exp(model.log_softmax(scores, axis=2))
                probs_km = probs[np.arange(len(e)), km[e]]
                u = stream.uniform(pids[e], TAG_INIT_STATE, year)
                new_state[e] = _draw_categorical(probs_km, u)
            xp[e] = first_xp[e]
        if force_state is None and np.any(ongoing):
            o = np.flatnonzero(ongoing)
            # the transition conditions on last year's experience stock
            base = panel_mod.transition_scores_base(
                state[o], xp_t[ti - 1][o], fixed[o], theta_m
            )
            off = panel_mod.transition_km_offsets(theta_m)
            probs = np.exp(model.log_softmax(base + off[km[o]], axis=1))
            u = stream.uniform(pids[o], TAG_TRANS, year)
            new_state[o] = _draw_categorical(probs, u)

        # wage update (noise drawn for everyone, consumed when employed)
        z = stream.normal(pids, TAG_WAGE, year)
        prev_state = np.where(ongoing, state, 0)
        log_wage, ytilde_new = _step_wages(
            theta_y, cfg, np.where(active, new_state, 0), prev_state,
            xp, xp_t[ti - 1] if ti > 0 else xp, fixed, km, ky, ytilde, z,
        )
        if initial_log_wage is not None and np.any(entering):
            given = np.asarray(initial_log_wage, dtype=float)
            if np.any(np.isinf(given)):
                bad = pids[np.isinf(given)][:5]
                raise ValueError(
                    f"infinite anchor log wage (persons {bad.tolist()})"
                )
            e = np.flatnonzero(entering & (new_state != 0) & np.isfinite(given))
            if len(e):
                mean = panel_mod.income_mean_eval(
                    new_state[e], xp[e], fixed[e], ky[e], theta_y
                )
                sd = panel_mod.income_sd_eval(
                    new_state[e], xp[e], fixed[e], km[e], ky[e], theta_y
                )
                log_wage[e] = given[e]
                ytilde_new[e] = (given[e] - mean) / sd

        state_t[ti] = np.where(active, new_state, 0)
        wage_t[ti] = np.where(active, log_wage, np.nan)
        xp_t[ti] = xp
        ytilde = ytilde_new
        state = state_t[ti]
        # experience accrues after an employed year
        xp = np.where(active & (state != 0), xp + model.EXPERIENCE_STEP, xp)

    # assemble person-major rows, skipping pre-entry years (active years of a
    # person are contiguous, so masked selection keeps calendar order)
    counts = active_t.sum(axis=0)
    mask = active_t.T  # (P, T)
    years_grid = np.broadcast_to(np.array(years, dtype=np.int64), (P, T))
    pan = PanelArrays(
        pids,
        cov["female"],
        cov["educ"],
        first_xp,
        np.repeat(np.arange(P, dtype=np.int64), counts),
        years_grid[mask],
        state_t.T[mask],
        wage_t.T[mask],
        xp_t.T[mask],
        np.concatenate([[0], np.cumsum(counts)]),
    )
    return SimulatedPanel(pan, np.asarray(km), np.asarray(ky))


def generate_panel(
    spec: PopulationSpec,
    theta_m: MobilityParams,
    theta_y: IncomeParams,
    seed: int,
    config: ModelConfig | None = None,
) -> SimulatedPanel:
    """Draw a synthetic cohort (covariates, classes, trajectories)."""
    stream = SeededStream(seed)
    cov = draw_covariates(spec, stream)
    km, ky = draw_classes(cov, theta_m, theta_y, stream)
    return simulate_panel(
        cov, km, ky, theta_m, theta_y, spec.start_year, spec.end_year, seed, config
    )


def simulate_individual(
    zf: model.FixedCovariates,
    km: int,
    ky: int,
    theta_m: MobilityParams,
    theta_y: IncomeParams,
    person_id: int,
    start_year: int,
    end_year: int,
    seed: int,
    config: ModelConfig | None = None,
) -> model.IndividualHistory:
    """Scalar reference simulation of one person (same keyed draws as the
    vectorized engine, so both produce identical trajectories)."""
    cfg = config or ModelConfig()
    stream = SeededStream(seed)
    pid = np.array([person_id], dtype=np.int64)
    states: list[int] = []
    wages: list[float | None] = []
    xp = zf.first_xp
    xp_prev = zf.first_xp
    ytilde = 0.0
    for year in range(start_year, end_year + 1):
        if not states:
            probs = model.initial_state_probs(zf, km, theta_m)
            u = float(stream.uniform(pid, TAG_INIT_STATE, year)[0])
        else:
            probs = model.transition_probs(
                int(states[-1]), model.TimeVaryingCovariates(xp_prev), zf, km, theta_m
            )
            u = float(stream.uniform(pid, TAG_TRANS, year)[0])
        s = int(np.minimum((u > np.cumsum(probs)).sum(), 4))
        z = float(stream.normal(pid, TAG_WAGE, year)[0])
        if s != 0:
            zv = model.TimeVaryingCovariates(xp)
            mean = model.income_mean(s, zv, zf, ky, theta_y)
            sd = model.income_sd(s, zv, zf, km, ky, theta_y)
            if states and states[-1] != 0:
                tau = model.pair_correlation(
                    s, int(states[-1]), zv, model.TimeVaryingCovariates(xp_prev),
                    km, ky, theta_y,
                )
                if cfg.rho_mode == "correlation_consistent":
                    ytilde = tau * ytilde + math.sqrt(1.0 - tau * tau) * z
                else:
                    rho = model.rho_from_sigma_tau(sd * sd, tau)
                    ytilde = rho * ytilde + z
            else:
                ytilde = z
            wages.append(mean + sd * ytilde)
        else:
            wages.append(None)
        states.append(s)
        xp_prev = xp
        if s != 0:
            xp += model.EXPERIENCE_STEP
    return model.IndividualHistory.from_states(
        person_id, zf, start_year, states, wages
    )


# ---------------------------------------------------------------------------
# prediction from observed first spells
# ---------------------------------------------------------------------------


@dataclass
class FirstSpells:
    """The anchor year of each person to be projected forward."""

    person_ids: np.ndarray
    female: np.ndarray
    educ: np.ndarray
    first_xp: np.ndarray
    first_year: np.ndarray
    first_state: np.ndarray
    first_log_wage: np.ndarray  # NaN when not employed

    @staticmethod
    def from_panel(panel: PanelArrays) -> "FirstSpells":
        first = panel.first_rows
        return FirstSpells(
            person_ids=panel.person_ids.copy(),
            female=panel.female.copy(),
            educ=panel.educ.copy(),
            first_xp=panel.first_xp.copy(),
            first_year=panel.year[first].copy(),
            first_state=panel.state[first].copy(),
            first_log_wage=panel.log_wage[first].copy(),
        )


def spell_covariates(spells: FirstSpells) -> dict:
    """Covariate dict for simulating a spell cohort.

    Draw keys use positions, not the caller's person identifiers, so any
    two scenario runs over the same spell list share their random draws.
    """
    return {
        "person_ids": np.arange(len(spells.person_ids), dtype=np.int64),
        "female": spells.female,
        "educ": spells.educ,
        "first_xp": spells.first_xp,
    }


def predict_panel(
    spells: FirstSpells,
    theta_m: MobilityParams,
    theta_y: IncomeParams,
    end_year: int,
    seed: int,
    config: ModelConfig | None = None,
    *,
    draw_initial: bool = False,
) -> SimulatedPanel:
    """Project observed people forward from their first observation.

    Classes are drawn from the membership model given covariates.  By
    default the observed first-year (state, wage) anchors each trajectory;
    ``draw_initial=True`` redraws the first year from the model instead
    (in-sample mode).
    """
    cov = spell_covariates(spells)
    stream = SeededStream(seed)
    km, ky = draw_classes(cov, theta_m, theta_y, stream)
    start_year = int(spells.first_year.min())
    if end_year < int(spells.first_year.max()):
        raise ValueError("end_year precedes some first observations")
    sim = simulate_panel(
        cov,
        km,
        ky,
        theta_m,
        theta_y,
        start_year,
        end_year,
        seed,
        config,
        initial_state=None if draw_initial else spells.first_state,
        initial_log_wage=None if draw_initial else spells.first_log_wage,
        first_year=spells.first_year,
    )
    # keep the caller's person identifiers
    sim.panel.person_ids = spells.person_ids.copy()
    return sim
