"""Lifetime values: closed forms, brute-force oracles, and counterfactuals."""

import numpy as np
import pytest

from laborpath.lifetime import (
    LifetimeResult,
    PremiumCurve,
    cohort_lifetime_values,
    entry_age,
    job_for_life_values,
    lifetime_value,
    mobility_values,
    premium_curve,
    retirement_value,
    simulate_to_retirement,
)
from laborpath.params import (
    IncomeParams,
    MobilityParams,
    ModelConfig,
    mu_columns,
    sigma_columns,
    xi_columns,
)
from laborpath.simulate import FirstSpells, PopulationSpec, generate_panel
from test_model import K_M, K_Y, random_income, random_mobility

import oracles


# ---------------------------------------------------------------------------
# retirement annuity
# ---------------------------------------------------------------------------

def test_retirement_value_closed_form():
    got = retirement_value(0.0, 0.95, 0.4, 22)
    want = 0.4 * oracles.annuity_brute(0.95, 22)
    assert abs(got - want) < 1e-12
    assert abs(got - 0.4 * (1 - 0.95**22) / 0.05) < 1e-12


def test_retirement_value_edge_cases():
    assert retirement_value(1.3, 0.95, 0.0) == 0.0
    # one-year horizon: the factor collapses to 1
    assert abs(retirement_value(0.7, 0.6, 0.5, 1) - 0.5 * np.exp(0.7)) < 1e-14
    with pytest.raises(ValueError):
        retirement_value(0.0, 1.0, 0.4)
    with pytest.raises(ValueError):
        retirement_value(0.0, 0.0, 0.4)


def test_retirement_value_vectorized():
    wages = np.array([0.0, 1.0, 2.5])
    got = retirement_value(wages, 0.9, 0.4)
    for w, g in zip(wages, got):
        assert abs(g - retirement_value(float(w), 0.9, 0.4)) < 1e-12


# ---------------------------------------------------------------------------
# single-trajectory values
# ---------------------------------------------------------------------------

def test_lifetime_value_geometric_example():
    # three employed years at wage 1 (log 0), no retirement flow
    value, flag = lifetime_value([1, 1, 1], [0.0, 0.0, 0.0], beta=0.5, rr=0.0)
    assert not flag
    assert abs(value - 1.75) < 1e-14


def test_lifetime_value_never_employed():
    value, flag = lifetime_value([0, 0, 0], [np.nan] * 3, beta=0.95, rr=0.4)
    assert flag and value == 0.0


def test_lifetime_value_matches_brute_oracle():
    rng = np.random.default_rng(0)
    for trial in range(1000):
        L = rng.integers(1, 36)
        states = rng.integers(0, 5, L)
        lw = np.where(states != 0, rng.normal(10, 0.5, L), np.nan)
        beta = rng.uniform(0.8, 0.99)
        rr = rng.uniform(0.2, 0.8)
        got, flag = lifetime_value(states, lw, beta, rr)
        flows = np.where(states != 0, np.exp(np.where(states != 0, lw, 0.0)), 0.0)
        want = oracles.discounted_sum_brute(flows, beta)
        emp = np.flatnonzero(states != 0)
        if len(emp):
            assert not flag
            want += (
                beta ** L * rr * np.exp(lw[emp[-1]]) * oracles.annuity_brute(beta, 22)
            )
        else:
            assert flag
        assert abs(got - want) <= 1e-10 * max(1.0, abs(want))


def test_lifetime_value_sector_specific_rr():
    states = [1, 0, 4]  # last employed year is public part-time
    lw = [10.0, np.nan, 9.0]
    pub, _ = lifetime_value(states, lw, 0.95, (0.75, 0.71))
    flat, _ = lifetime_value(states, lw, 0.95, 0.75)
    assert abs(pub - flat) < 1e-12
    states2 = [2, 0, 3]  # ends private part-time
    pvt, _ = lifetime_value(states2, lw, 0.95, (0.75, 0.71))
    flat2, _ = lifetime_value(states2, lw, 0.95, 0.71)
    assert abs(pvt - flat2) < 1e-12


def test_lifetime_value_monotone_in_beta_and_rr():
    states = [1, 0, 2, 2]
    lw = [9.5, np.nan, 9.8, 10.0]
    v1, _ = lifetime_value(states, lw, 0.90, 0.4)
    v2, _ = lifetime_value(states, lw, 0.95, 0.4)
    assert v2 > v1
    v3, _ = lifetime_value(states, lw, 0.90, 0.5)
    assert v3 > v1


def test_lifetime_value_input_validation():
    with pytest.raises(ValueError):
        lifetime_value([], [], 0.95, 0.4)
    with pytest.raises(ValueError):
        lifetime_value([1, 2], [10.0], 0.95, 0.4)


# ---------------------------------------------------------------------------
# cohort vectorization
# ---------------------------------------------------------------------------

def sim_cohort(seed=0, n=150):
    rng = np.random.default_rng(seed)
    m = random_mobility(rng, scale=0.5)
    y = random_income(rng, scale=0.3)
    mu = y.mu.copy()
    mu[-1] = 10.0
    sigma = y.sigma.copy()
    sigma[-1] = -3.0
    y = IncomeParams(y.kappa_y, mu, sigma, y.xi)
    spec = PopulationSpec(n=n, start_year=2012, end_year=2019)
    return m, y, generate_panel(spec, m, y, seed=seed + 1)


def test_cohort_values_match_scalar_loop():
    _, _, sim = sim_cohort()
    res = cohort_lifetime_values(sim.panel, beta=0.95, rr=(0.75, 0.71))
    p = sim.panel
    for i in range(p.n_persons):
        a, b = p.person_ptr[i], p.person_ptr[i + 1]
        want, flag = lifetime_value(
            p.state[a:b], p.log_wage[a:b], 0.95, (0.75, 0.71)
        )
        assert abs(res.value[i] - want) <= 1e-10 * max(1.0, abs(want))
        assert res.never_employed[i] == flag
        if flag:
            assert np.isnan(res.log_value[i])
        else:
            assert abs(res.log_value[i] - np.log(want)) < 1e-12


# ---------------------------------------------------------------------------
# scenario engines
# ---------------------------------------------------------------------------

def make_spells(sim):
    return FirstSpells.from_panel(sim.panel)


def test_simulate_to_retirement_age_cutoff():
    m, y, sim = sim_cohort(seed=3, n=120)
    spells = make_spells(sim)
    cfg = ModelConfig()
    out = simulate_to_retirement(spells, m, y, seed=9, config=cfg)
    p = out.panel
    entry = entry_age(spells.first_xp, cfg)
    for i in range(p.n_persons):
        a, b = p.person_ptr[i], p.person_ptr[i + 1]
        n_years = b - a
        last_age = entry[i] + (n_years - 1)
        assert last_age < 60.0
        assert entry[i] + n_years >= 60.0  # one more year would retire them
        np.testing.assert_array_equal(
            p.year[a:b], spells.first_year[i] + np.arange(n_years)
        )


def test_forced_sector_pins_every_state():
    m, y, sim = sim_cohort(seed=4, n=80)
    spells = make_spells(sim)
    out = simulate_to_retirement(spells, m, y, seed=5, force_state=2)
    assert np.all(out.panel.state == 2)
    # anchored people keep their observed first wage
    anchored = spells.first_state == 2
    first = out.panel.first_rows
    if anchored.any():
        np.testing.assert_allclose(
            out.panel.log_wage[first][anchored],
            spells.first_log_wage[anchored],
        )
    # everyone else got a model draw: finite wage in every year
    assert np.all(np.isfinite(out.panel.log_wage))


def test_identical_sector_laws_give_zero_premium():
    # wipe every coefficient distinguishing state 1 from state 2 in the wage
    # laws: the two forced-sector counterfactuals coincide exactly
    m, y, sim = sim_cohort(seed=6, n=250)
    mu = y.mu.copy()
    sg = y.sigma.copy()
    xi = y.xi.copy()
    names_mu = list(mu_columns(K_Y))
    mu[names_mu.index("s2")] = 0.0
    mu[names_mu.index("xp:s2")] = 0.0
    for k in range(1, K_Y):
        mu[names_mu.index(f"s2:ky{k}")] = mu[names_mu.index(f"s1:ky{k}")]
    names_sg = list(sigma_columns(K_M, K_Y))
    sg[names_sg.index("s2")] = 0.0
    sg[names_sg.index("xp:s2")] = 0.0
    sg[names_sg.index("xp_sq:s2")] = sg[names_sg.index("xp_sq:s1")]
    for k in range(1, K_Y):
        sg[names_sg.index(f"s2:ky{k}")] = sg[names_sg.index(f"s1:ky{k}")]
    names_xi = list(xi_columns(K_M, K_Y))
    xi[names_xi.index("cur2")] = 0.0
    xi[names_xi.index("prev2")] = xi[names_xi.index("prev1")]
    xi[names_xi.index("xp_prev:prev2")] = xi[names_xi.index("xp_prev:prev1")]
    for k in range(1, K_Y):
        xi[names_xi.index(f"ky{k}:cur2")] = 0.0
    flat = IncomeParams(y.kappa_y, mu, sg, xi)
    spells = make_spells(sim)
    # neutralize anchoring asymmetry: nobody starts employed in either sector
    spells = FirstSpells(
        spells.person_ids, spells.female, spells.educ, spells.first_xp,
        spells.first_year, np.zeros_like(spells.first_state),
        np.full(len(spells.person_ids), np.nan),
    )
    a = job_for_life_values(spells, m, flat, "public", seed=7)
    b = job_for_life_values(spells, m, flat, "private", seed=7)
    curve = premium_curve(a, b)
    np.testing.assert_allclose(curve.log_diff, 0.0, atol=1e-12)


def flat_wage_laws(y):
    """Make every employed state share one wage law whose mean rises with
    experience, with no serial linking.  Holding a job then dominates any
    path with employment gaps year by year: gap years pay zero and slow the
    experience clock, and the shared per-year noise cancels."""
    mu = np.zeros_like(y.mu)
    names_mu = list(mu_columns(K_Y))
    mu[names_mu.index("xp")] = 0.4
    mu[names_mu.index("const")] = 10.0
    sg = np.zeros_like(y.sigma)
    names_sg = list(sigma_columns(K_M, K_Y))
    sg[names_sg.index("female")] = 0.1
    sg[names_sg.index("const")] = -2.0
    return IncomeParams(y.kappa_y, mu, sg, np.zeros_like(y.xi))


def test_job_for_life_dominates_mobility_at_every_quantile():
    rng = np.random.default_rng(8)
    m, y, _ = sim_cohort(seed=8)
    # frequent employment from every origin so nobody stays jobless for good
    chi = m.chi.copy()
    chi[:, -1] += 1.5
    m = MobilityParams(m.kappa_m, m.chi0, chi)
    n = 800
    spells = FirstSpells(
        person_ids=np.arange(n),
        female=(rng.random(n) < 0.5).astype(float),
        educ=rng.integers(0, 3, n),
        first_xp=np.zeros(n),
        first_year=np.full(n, 2012),
        first_state=np.zeros(n, dtype=np.int64),
        first_log_wage=np.full(n, np.nan),
    )
    flat = flat_wage_laws(y)
    jfl = job_for_life_values(spells, m, flat, "private", seed=11, rr=0.0)
    mob = mobility_values(spells, m, flat, seed=11, rr=0.0)
    assert not mob.never_employed.any()
    # jobless start year makes the per-person ordering strict for everyone
    assert np.all(jfl.value > mob.value)
    curve = premium_curve(jfl, mob)
    assert np.all(curve.log_diff > 0)


def test_mobility_start_condition_filters():
    m, y, sim = sim_cohort(seed=9, n=300)
    spells = make_spells(sim)
    pub = mobility_values(spells, m, y, start_condition="observed_public", seed=3)
    assert np.all(pub.first_state == 2)
    assert len(pub.value) == int((spells.first_state == 2).sum())
    with pytest.raises(ValueError):
        mobility_values(spells, m, y, start_condition="nope", seed=3)


def test_scenario_runs_share_wage_draws():
    # identical keyed draws: a person forced into their own observed path's
    # sector sees the same first wage in both scenario engines
    m, y, sim = sim_cohort(seed=10, n=200)
    spells = make_spells(sim)
    jfl = simulate_to_retirement(spells, m, y, seed=13, force_state=1)
    mob = simulate_to_retirement(spells, m, y, seed=13)
    np.testing.assert_array_equal(jfl.km, mob.km)
    np.testing.assert_array_equal(jfl.ky, mob.ky)
    # wherever the mobility run also realizes private full-time with an
    # identical wage history, the wages match bit for bit
    p_j, p_m = jfl.panel, mob.panel
    first_j, first_m = p_j.first_rows, p_m.first_rows
    same_start = (p_m.state[first_m] == 1) & (spells.first_state == 1)
    np.testing.assert_array_equal(
        p_j.log_wage[first_j][same_start], p_m.log_wage[first_m][same_start]
    )


# ---------------------------------------------------------------------------
# premium curves
# ---------------------------------------------------------------------------

def fake_result(values, scenario="x", seed=0):
    values = np.asarray(values, dtype=float)
    n = len(values)
    rng = np.random.default_rng(seed)
    return LifetimeResult(
        scenario=scenario,
        person_ids=np.arange(n),
        value=values,
        log_value=np.where(values > 0, np.log(np.maximum(values, 1e-300)), np.nan),
        never_employed=values <= 0,
        female=rng.integers(0, 2, n).astype(float),
        educ=rng.integers(0, 3, n),
        first_state=rng.integers(0, 5, n),
        beta=0.95,
        rr=0.4,
    )


def test_premium_curve_zero_for_identical_groups():
    vals = np.exp(np.random.default_rng(1).normal(12, 1, 500))
    c = premium_curve(fake_result(vals, "a"), fake_result(vals, "b"))
    np.testing.assert_array_equal(c.log_diff, 0.0)
    assert not c.wide_uncertainty
    assert c.n_a == c.n_b == 500


def test_premium_curve_shift_equivariance():
    rng = np.random.default_rng(2)
    vals = np.exp(rng.normal(12, 1, 400))
    delta = 0.37
    c = premium_curve(fake_result(vals * np.exp(delta), "a"), fake_result(vals, "b"))
    np.testing.assert_allclose(c.log_diff, delta, atol=1e-12)


def test_premium_curve_antisymmetry():
    rng = np.random.default_rng(3)
    a = fake_result(np.exp(rng.normal(12, 1, 300)), "a")
    b = fake_result(np.exp(rng.normal(12.2, 0.8, 350)), "b")
    ab = premium_curve(a, b)
    ba = premium_curve(b, a)
    np.testing.assert_allclose(ab.log_diff, -ba.log_diff, atol=1e-12)


def test_premium_curve_flags_and_exclusions():
    rng = np.random.default_rng(4)
    small = fake_result(np.exp(rng.normal(12, 1, 60)), "a")
    big = fake_result(np.exp(rng.normal(12, 1, 500)), "b")
    assert premium_curve(small, big).wide_uncertainty
    # never-employed values are excluded from the quantile basis
    mixed = np.concatenate([np.exp(rng.normal(12, 1, 200)), np.zeros(50)])
    c = premium_curve(fake_result(mixed, "a"), big)
    assert c.n_a == 200
    assert np.all(np.isfinite(c.log_diff))


def test_premium_curve_validates_grid():
    rng = np.random.default_rng(5)
    a = fake_result(np.exp(rng.normal(12, 1, 200)), "a")
    with pytest.raises(ValueError):
        premium_curve(a, a, percentiles=np.array([10, 10, 20]))
    with pytest.raises(ValueError):
        premium_curve(a, a, percentiles=np.array([0, 50]))


def test_quantile_rule_is_linear_interpolation():
    # with 101 sorted points, percentile p lands exactly on order statistic p
    vals = np.exp(np.sort(np.random.default_rng(6).normal(12, 1, 101)))
    a = fake_result(vals, "a")
    base = fake_result(np.ones(101) * np.e, "b")  # log value exactly 1
    c = premium_curve(a, base)
    np.testing.assert_allclose(
        c.log_diff, np.log(vals)[c.percentiles] - 1.0, atol=1e-12
    )


def test_sign_change_detection():
    grid = np.arange(1, 100)
    diff = np.where(grid < 46, 0.3, -0.2)
    c = PremiumCurve(grid, diff, "a", "b", 500, 500, False)
    assert list(c.sign_changes()) == [45]
