"""Parameter containers, model configuration, and design-matrix layouts.

The model has five employment states (0 = non-employment, 1 = private
full-time, 2 = public full-time, 3 = private part-time, 4 = public part-time)
and two discrete latent traits per person: a transition class k_m in
{0..K_m-1} driving state dynamics and an income class k_y in {0..K_y-1}
driving the wage process.  Class 0 / state 0 are always the multinomial-logit
base categories and carry identically-zero coefficient rows.

Coefficient blocks:
    kappa_m : class-membership logits for k_m given fixed covariates
    chi0    : first-year state logits given fixed covariates and k_m
    chi     : year-over-year state transition logits
    kappa_y : income-class logits for k_y given fixed covariates and k_m
    mu      : linear model for the mean of log-wage
    sigma   : linear model for log-variance of log-wage (sd = sqrt(exp(.)))
    xi      : linear model for the Fisher-type link of the lag-1 correlation

Every layout function returns the exact column order used across the package;
the constant term is always the last column.
"""

from __future__ import annotations

from dataclasses import dataclass, fields, replace
from typing import Mapping

import numpy as np

N_STATES = 5
STATE_LABELS = ("nonemp", "pvt_ft", "pub_ft", "pvt_pt", "pub_pt")

#: states counting as public-sector / private-sector employment
PUBLIC_STATES = (2, 4)
PRIVATE_STATES = (1, 3)

RHO_MODES = ("correlation_consistent", "paper_formula")


# ---------------------------------------------------------------------------
# design layouts
# ---------------------------------------------------------------------------

def _km_dummies(K_m: int) -> list[str]:
    return [f"km{k}" for k in range(1, K_m)]


def _ky_dummies(K_y: int) -> list[str]:
    return [f"ky{k}" for k in range(1, K_y)]


def kappa_m_columns() -> tuple[str, ...]:
    """Columns of the transition-class membership logit."""
    return ("female", "educ_med", "educ_high", "first_xp", "const")


def kappa_y_columns(K_m: int) -> tuple[str, ...]:
    """Columns of the income-class membership logit (conditions on k_m)."""
    return ("female", "educ_med", "educ_high", "first_xp",
            *_km_dummies(K_m), "const")


def chi0_columns(K_m: int) -> tuple[str, ...]:
    """Columns of the first-year state logit; identical layout to kappa_y."""
    return kappa_y_columns(K_m)


def chi_columns(K_m: int) -> tuple[str, ...]:
    """Columns of the state-transition logit.

    Everything time-varying is measured at t-1: the previous state dummies,
    previous experience (in decades), its interactions with the previous
    state, and its square.
    """
    prev = [f"prev{s}" for s in range(1, N_STATES)]
    xp_prev_int = [f"xp_prev:prev{s}" for s in range(1, N_STATES)]
    return (*prev, "xp_prev", *xp_prev_int, "xp_sq_prev",
            "female", "educ_med", "educ_high", "first_xp",
            *_km_dummies(K_m), "const")


def _state_ky_interactions(K_y: int) -> list[str]:
    return [f"s{s}:ky{k}" for s in range(1, N_STATES) for k in range(1, K_y)]


def mu_columns(K_y: int) -> tuple[str, ...]:
    """Columns of the log-wage mean regression (base state is 1)."""
    return ("s2", "s3", "s4", "xp", "xp:s2", "xp:s3", "xp:s4", "xp_sq",
            "female", "educ_med", "educ_high", "first_xp",
            *_state_ky_interactions(K_y), "const")


def sigma_columns(K_m: int, K_y: int) -> tuple[str, ...]:
    """Columns of the log-variance regression for log-wage."""
    return ("s2", "s3", "s4", "xp", "xp:s2", "xp:s3", "xp:s4",
            "xp_sq:s1", "xp_sq:s2", "xp_sq:s3", "xp_sq:s4",
            "female", "educ_med", "educ_high", "first_xp",
            *_km_dummies(K_m), *_state_ky_interactions(K_y), "const")


def xi_columns(K_m: int, K_y: int) -> tuple[str, ...]:
    """Columns of the lag-1 correlation link regression.

    Current-state dummies use base state 1; previous-state dummies cover all
    four employed states (a pair only exists when both years are employed).
    Experience enters at the current year (level and square) and at the
    previous year (level, plus interactions with the previous state).
    """
    prev = [f"prev{s}" for s in range(1, N_STATES)]
    xp_prev_int = [f"xp_prev:prev{s}" for s in range(1, N_STATES)]
    ky_cur = [f"ky{k}:cur{s}" for k in range(1, K_y) for s in (2, 3, 4)]
    return ("cur2", "cur3", "cur4", *prev, "xp", "xp_sq", "xp_prev",
            *xp_prev_int, *_ky_dummies(K_y), *_km_dummies(K_m),
            *ky_cur, "const")


def block_shapes(K_m: int, K_y: int) -> dict[str, tuple[int, ...]]:
    """Expected array shape of every coefficient block (non-base rows only)."""
    return {
        "kappa_m": (K_m - 1, len(kappa_m_columns())),
        "chi0": (N_STATES - 1, len(chi0_columns(K_m))),
        "chi": (N_STATES - 1, len(chi_columns(K_m))),
        "kappa_y": (K_y - 1, len(kappa_y_columns(K_m))),
        "mu": (len(mu_columns(K_y)),),
        "sigma": (len(sigma_columns(K_m, K_y)),),
        "xi": (len(xi_columns(K_m, K_y)),),
    }


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ModelConfig:
    """Model dimensions, economic constants, and numerical tolerances.

    RR may be a single replacement rate or a (public, private) pair applied
    by the sector of the last employed state before retirement.
    """

    K_m: int = 4
    K_y: int = 3
    beta: float = 0.95
    RR: float | tuple[float, float] = 0.4
    retirement_age: int = 60
    retirement_horizon_years: int = 22
    em_tol: float = 1e-3
    kernel_tol: float = 1e-8
    rho_mode: str = "correlation_consistent"
    max_em_iter: int = 500
    max_newton_iter: int = 200
    n_restarts: int = 1
    entry_age_offset: float = 25.0

    def __post_init__(self):
        if self.K_m < 1 or self.K_y < 1:
            raise ValueError("class counts must be >= 1")
        if not 0.0 < self.beta < 1.0:
            raise ValueError("beta must lie in (0, 1)")
        if self.rho_mode not in RHO_MODES:
            raise ValueError(f"rho_mode must be one of {RHO_MODES}")
        rr = self.RR
        if isinstance(rr, (list, tuple)):
            if len(rr) != 2:
                raise ValueError("RR pair must be (public, private)")
            object.__setattr__(self, "RR", (float(rr[0]), float(rr[1])))
        else:
            object.__setattr__(self, "RR", float(rr))

    def rr_for_state(self, state: int) -> float:
        """Replacement rate applied to a retiree whose last job was `state`."""
        if isinstance(self.RR, tuple):
            return self.RR[0] if state in PUBLIC_STATES else self.RR[1]
        return self.RR

    def to_dict(self) -> dict:
        out = {}
        for f in fields(self):
            v = getattr(self, f.name)
            out[f.name] = list(v) if isinstance(v, tuple) else v
        return out

    @classmethod
    def from_dict(cls, d: Mapping) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        kw = dict(d)
        if isinstance(kw.get("RR"), list):
            kw["RR"] = tuple(kw["RR"])
        return cls(**kw)

    def with_(self, **kw) -> "ModelConfig":
        return replace(self, **kw)


# ---------------------------------------------------------------------------
# parameter containers
# ---------------------------------------------------------------------------

def _freeze(a) -> np.ndarray:
    arr = np.ascontiguousarray(np.asarray(a, dtype=np.float64))
    arr.flags.writeable = False
    return arr


def _with_base_row(block: np.ndarray) -> np.ndarray:
    """Prepend the zero row of the base category to a logit block."""
    return np.vstack([np.zeros((1, block.shape[1])), block])


@dataclass(frozen=True)
class MobilityParams:
    """State-dynamics coefficients: class membership, initial state, transitions.

    All blocks store non-base rows only (class/state 0 is the zero base).
    Arrays are read-only after construction.
    """

    kappa_m: np.ndarray  # (K_m-1, 5)
    chi0: np.ndarray     # (4, 5 + K_m)
    chi: np.ndarray      # (4, 15 + K_m)

    def __post_init__(self):
        for name in ("kappa_m", "chi0", "chi"):
            object.__setattr__(self, name, _freeze(getattr(self, name)))
        if not all(np.all(np.isfinite(getattr(self, n)))
                   for n in ("kappa_m", "chi0", "chi")):
            raise ValueError("mobility coefficients must be finite")

    @property
    def K_m(self) -> int:
        return self.kappa_m.shape[0] + 1

    def validate(self, K_m: int) -> None:
        shapes = block_shapes(K_m, 2)
        for name in ("kappa_m", "chi0", "chi"):
            got = getattr(self, name).shape
            want = shapes[name]
            if got != want:
                raise ValueError(
                    f"block '{name}' has shape {got}, expected {want}")

    def kappa_m_full(self) -> np.ndarray:
        return _with_base_row(self.kappa_m)

    def chi0_full(self) -> np.ndarray:
        return _with_base_row(self.chi0)

    def chi_full(self) -> np.ndarray:
        return _with_base_row(self.chi)

    def concat(self) -> np.ndarray:
        """All coefficients as one flat vector (convergence metric order)."""
        return np.concatenate([self.kappa_m.ravel(), self.chi0.ravel(),
                               self.chi.ravel()])

    @classmethod
    def zeros(cls, K_m: int) -> "MobilityParams":
        s = block_shapes(K_m, 2)
        return cls(np.zeros(s["kappa_m"]), np.zeros(s["chi0"]),
                   np.zeros(s["chi"]))

    def to_dict(self) -> dict:
        return {"kappa_m": self.kappa_m.tolist(),
                "chi0": self.chi0.tolist(),
                "chi": self.chi.tolist()}

    @classmethod
    def from_dict(cls, d: Mapping) -> "MobilityParams":
        kappa_m = np.asarray(d["kappa_m"], dtype=float)
        if kappa_m.size == 0:
            # a single-class block serializes as []; restore its column count
            kappa_m = kappa_m.reshape(0, 5)
        return cls(kappa_m,
                   np.asarray(d["chi0"], dtype=float),
                   np.asarray(d["chi"], dtype=float))


@dataclass(frozen=True)
class IncomeParams:
    """Wage-process coefficients: income-class membership, mean, dispersion,
    and lag-1 correlation link.  Arrays are read-only after construction."""

    kappa_y: np.ndarray  # (K_y-1, 5 + K_m)
    mu: np.ndarray       # (13 + 4*(K_y-1),)
    sigma: np.ndarray    # (16 + (K_m-1) + 4*(K_y-1),)
    xi: np.ndarray

    def __post_init__(self):
        for name in ("kappa_y", "mu", "sigma", "xi"):
            object.__setattr__(self, name, _freeze(getattr(self, name)))
        if not all(np.all(np.isfinite(getattr(self, n)))
                   for n in ("kappa_y", "mu", "sigma", "xi")):
            raise ValueError("income coefficients must be finite")

    @property
    def K_y(self) -> int:
        return self.kappa_y.shape[0] + 1

    @property
    def K_m(self) -> int:
        # kappa_y columns: 4 covariates + (K_m - 1) class dummies + const
        return self.kappa_y.shape[1] - 4

    def validate(self, K_m: int, K_y: int) -> None:
        shapes = block_shapes(K_m, K_y)
        for name in ("kappa_y", "mu", "sigma", "xi"):
            got = getattr(self, name).shape
            want = shapes[name]
            if got != want:
                raise ValueError(
                    f"block '{name}' has shape {got}, expected {want}")

    def kappa_y_full(self) -> np.ndarray:
        return _with_base_row(self.kappa_y)

    def concat(self) -> np.ndarray:
        return np.concatenate([self.kappa_y.ravel(), self.mu, self.sigma,
                               self.xi])

    @classmethod
    def zeros(cls, K_m: int, K_y: int) -> "IncomeParams":
        s = block_shapes(K_m, K_y)
        return cls(np.zeros(s["kappa_y"]), np.zeros(s["mu"]),
                   np.zeros(s["sigma"]), np.zeros(s["xi"]))

    def to_dict(self) -> dict:
        return {"kappa_y": self.kappa_y.tolist(), "mu": self.mu.tolist(),
                "sigma": self.sigma.tolist(), "xi": self.xi.tolist()}

    @classmethod
    def from_dict(cls, d: Mapping) -> "IncomeParams":
        kappa_y = np.asarray(d["kappa_y"], dtype=float)
        sigma = np.asarray(d["sigma"], dtype=float)
        if kappa_y.size == 0:
            # a single-class block serializes as []; its column count is
            # 4 + K_m, and with K_y == 1 sigma has 15 + K_m entries
            kappa_y = kappa_y.reshape(0, 4 + (sigma.shape[0] - 15))
        return cls(kappa_y,
                   np.asarray(d["mu"], dtype=float),
                   sigma,
                   np.asarray(d["xi"], dtype=float))


def params_distance(a_m: MobilityParams, a_y: IncomeParams | None,
                    b_m: MobilityParams, b_y: IncomeParams | None) -> float:
    """Euclidean distance between two full coefficient vectors."""
    va = [a_m.concat()] + ([a_y.concat()] if a_y is not None else [])
    vb = [b_m.concat()] + ([b_y.concat()] if b_y is not None else [])
    return float(np.linalg.norm(np.concatenate(va) - np.concatenate(vb)))
