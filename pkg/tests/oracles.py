"""Independent reference implementations used to validate the package.

Everything here is deliberately written from scratch against the model
definitions, *not* by calling into laborpath internals: scores are accumulated
from coefficient dictionaries keyed by column name (so packing/layout bugs in
the package are caught), densities use the explicit quadratic form in extended
precision, and likelihoods use a different but equivalent factorization than
the package (conditional chain vs. pairwise-overlap decomposition).
"""

from __future__ import annotations

import math

import numpy as np

LOG_2PI = math.log(2.0 * math.pi)


# ---------------------------------------------------------------------------
# named-coefficient score builders
# ---------------------------------------------------------------------------

def dict_from_block(names, values) -> dict:
    """Pair a column-name tuple with a 1-D coefficient vector."""
    names = list(names)
    values = np.asarray(values, dtype=float).ravel()
    assert len(names) == len(values), (len(names), len(values))
    return dict(zip(names, (float(v) for v in values)))


def _fixed_terms(c: dict, female, educ, first_xp) -> float:
    s = c["female"] * female + c["first_xp"] * first_xp
    if educ == 1:
        s += c["educ_med"]
    elif educ == 2:
        s += c["educ_high"]
    return s


def score_class_m(c, female, educ, first_xp) -> float:
    return _fixed_terms(c, female, educ, first_xp) + c["const"]


def score_class_y(c, female, educ, first_xp, km) -> float:
    s = _fixed_terms(c, female, educ, first_xp) + c["const"]
    if km >= 1:
        s += c[f"km{km}"]
    return s


score_initial_state = score_class_y  # same covariates and layout


def score_transition(c, prev_state, xp_prev, female, educ, first_xp, km) -> float:
    s = _fixed_terms(c, female, educ, first_xp) + c["const"]
    s += c["xp_prev"] * xp_prev + c["xp_sq_prev"] * xp_prev * xp_prev
    if prev_state >= 1:
        s += c[f"prev{prev_state}"]
        s += c[f"xp_prev:prev{prev_state}"] * xp_prev
    if km >= 1:
        s += c[f"km{km}"]
    return s


def score_mean(c, state, xp, female, educ, first_xp, ky) -> float:
    s = _fixed_terms(c, female, educ, first_xp) + c["const"]
    s += c["xp"] * xp + c["xp_sq"] * xp * xp
    if state >= 2:
        s += c[f"s{state}"] + c[f"xp:s{state}"] * xp
    if ky >= 1:
        s += c[f"s{state}:ky{ky}"]
    return s


def score_logvar(c, state, xp, female, educ, first_xp, km, ky) -> float:
    s = _fixed_terms(c, female, educ, first_xp) + c["const"]
    s += c["xp"] * xp + c[f"xp_sq:s{state}"] * xp * xp
    if state >= 2:
        s += c[f"s{state}"] + c[f"xp:s{state}"] * xp
    if km >= 1:
        s += c[f"km{km}"]
    if ky >= 1:
        s += c[f"s{state}:ky{ky}"]
    return s


def score_link(c, cur_state, prev_state, xp, xp_prev, km, ky) -> float:
    s = c["const"] + c["xp"] * xp + c["xp_sq"] * xp * xp + c["xp_prev"] * xp_prev
    s += c[f"prev{prev_state}"] + c[f"xp_prev:prev{prev_state}"] * xp_prev
    if cur_state >= 2:
        s += c[f"cur{cur_state}"]
    if km >= 1:
        s += c[f"km{km}"]
    if ky >= 1:
        s += c[f"ky{ky}"]
        if cur_state >= 2:
            s += c[f"ky{ky}:cur{cur_state}"]
    return s


def softmax_probs(scores) -> np.ndarray:
    """Plain softmax in extended precision (scores assumed moderate)."""
    z = np.exp(np.asarray(scores, dtype=np.longdouble))
    return np.asarray(z / z.sum(), dtype=float)


# ---------------------------------------------------------------------------
# densities in extended precision
# ---------------------------------------------------------------------------

def bivariate_logpdf_quadform(u, v, corr) -> float:
    """Standard bivariate normal log-density via the explicit 2x2 form:
    -log(2*pi) - 0.5*log(det) - 0.5 * x' Sigma^{-1} x, in longdouble."""
    u = np.longdouble(u)
    v = np.longdouble(v)
    r = np.longdouble(corr)
    det = 1 - r * r
    quad = (u * u - 2 * r * u * v + v * v) / det
    return float(-np.log(2 * np.pi) - np.log(det) / 2 - quad / 2)


def normal_logpdf_ld(x) -> float:
    x = np.longdouble(x)
    return float(-(x * x) / 2 - np.log(2 * np.pi) / 2)


# ---------------------------------------------------------------------------
# income log-likelihood of one person: conditional-chain factorization
# ---------------------------------------------------------------------------

def income_loglik_chain(states, years, log_wages, means, sds, taus) -> float:
    """Per-person wage log-likelihood via sequential conditioning.

    Inputs are aligned per year.  ``taus[t]`` is the correlation linking year
    t to year t-1 (ignored unless both are employed and adjacent in calendar
    time).  Within an employed run: first year is marginal N(mean, sd^2); a
    later year is conditionally normal with mean ``mean + sd*tau*prev_std``
    and variance ``sd^2*(1-tau^2)``.
    """
    total = []
    prev_state = 0
    prev_year = None
    prev_std = 0.0
    for t, s in enumerate(states):
        if s == 0:
            prev_state = 0
            prev_year = years[t]
            continue
        std = (np.longdouble(log_wages[t]) - np.longdouble(means[t])) / np.longdouble(sds[t])
        if prev_state != 0 and prev_year is not None and years[t] == prev_year + 1:
            tau = np.longdouble(taus[t])
            resid = (std - tau * prev_std) / np.sqrt(1 - tau * tau)
            term = (
                -(resid * resid) / 2
                - np.log(2 * np.pi) / 2
                - np.log(1 - tau * tau) / 2
                - np.log(np.longdouble(sds[t]))
            )
        else:
            term = -(std * std) / 2 - np.log(2 * np.pi) / 2 - np.log(np.longdouble(sds[t]))
        total.append(term)
        prev_state = s
        prev_year = years[t]
        prev_std = std
    return float(np.sum(np.asarray(total, dtype=np.longdouble))) if total else 0.0


# ---------------------------------------------------------------------------
# brute-force mixture over latent cells
# ---------------------------------------------------------------------------

def mixture_loglik_brute(cell_logliks) -> float:
    """log sum_k exp(l_k) with the classes' complete log-likelihoods given;
    computed in longdouble without the max-shift trick."""
    cells = np.asarray(cell_logliks, dtype=np.longdouble)
    return float(np.log(np.sum(np.exp(cells))))


def posterior_brute(cell_logliks) -> np.ndarray:
    cells = np.asarray(cell_logliks, dtype=np.longdouble)
    w = np.exp(cells)
    return np.asarray(w / w.sum(), dtype=float)


# ---------------------------------------------------------------------------
# lifetime values
# ---------------------------------------------------------------------------

def discounted_sum_brute(flows, beta) -> float:
    """sum_t beta^t * flows[t] via fsum over exactly-computed terms."""
    return math.fsum(float(beta) ** t * float(f) for t, f in enumerate(flows))


def annuity_brute(beta, horizon) -> float:
    """sum_{j=0}^{horizon-1} beta^j."""
    return math.fsum(float(beta) ** j for j in range(horizon))


# ---------------------------------------------------------------------------
# numerical differentiation
# ---------------------------------------------------------------------------

def central_fd_gradient(f, x, h=1e-6) -> np.ndarray:
    """Central finite-difference gradient of scalar f at x."""
    x = np.asarray(x, dtype=float)
    g = np.zeros_like(x)
    for i in range(x.size):
        e = np.zeros_like(x)
        e.flat[i] = h
        g.flat[i] = (f(x + e) - f(x - e)) / (2.0 * h)
    return g


# ---------------------------------------------------------------------------
# order statistics (winsorization oracle)
# ---------------------------------------------------------------------------

def nearest_rank(values, pct) -> float:
    """Nearest-rank percentile: the ceil(pct/100 * n)-th smallest value."""
    v = np.sort(np.asarray(values, dtype=float))
    n = len(v)
    rank = int(math.ceil(pct / 100.0 * n))
    rank = min(max(rank, 1), n)
    return float(v[rank - 1])
