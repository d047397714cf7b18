"""Latent-class careers: employment dynamics, earnings, and counterfactuals.

The package estimates a five-state employment process and a conditional
earnings process with discrete unobserved heterogeneity, simulates careers
under the fitted laws, and values them as discounted lifetime earnings.

Attribute access is lazy so that ``import laborpath`` stays cheap: the
command-line front end must be able to pin BLAS thread counts through
environment variables before numpy is first imported.
"""

from importlib import import_module

__version__ = "0.1.0"

_EXPORTS = {
    # configuration and coefficient containers
    "ModelConfig": ".params",
    "MobilityParams": ".params",
    "IncomeParams": ".params",
    "N_STATES": ".params",
    "STATE_LABELS": ".params",
    "PUBLIC_STATES": ".params",
    "PRIVATE_STATES": ".params",
    # scalar model primitives
    "FixedCovariates": ".model",
    "YearObservation": ".model",
    "IndividualHistory": ".model",
    # columnar panels
    "PanelArrays": ".panel",
    # simulation
    "PopulationSpec": ".simulate",
    "FirstSpells": ".simulate",
    "SimulatedPanel": ".simulate",
    "generate_panel": ".simulate",
    "predict_panel": ".simulate",
    "simulate_panel": ".simulate",
    # estimation
    "run_em_mobility": ".em_mobility",
    "MobilityEMResult": ".em_mobility",
    "run_em_income": ".em_income",
    "run_em_joint": ".em_income",
    "estimate_sequential": ".em_income",
    "SequentialResult": ".em_income",
    # lifetime values and counterfactuals
    "lifetime_value": ".lifetime",
    "retirement_value": ".lifetime",
    "cohort_lifetime_values": ".lifetime",
    "simulate_to_retirement": ".lifetime",
    "job_for_life_values": ".lifetime",
    "mobility_values": ".lifetime",
    "premium_curve": ".lifetime",
    "PremiumCurve": ".lifetime",
    "LifetimeResult": ".lifetime",
    # diagnostics
    "transition_matrix": ".diagnostics",
    "matrix_distance": ".diagnostics",
    "wage_histogram": ".diagnostics",
    "composition_table": ".diagnostics",
    "TransitionMatrix": ".diagnostics",
    "CompositionTable": ".diagnostics",
    "WageHistogram": ".diagnostics",
    # input/output
    "load_panel": ".panel_io",
    "save_panel": ".panel_io",
    "prepare_panel": ".panel_io",
    "impute_nonemployment": ".panel_io",
    "winsorize_wages": ".panel_io",
    "load_params": ".panel_io",
    "save_params": ".panel_io",
    "published_params": ".panel_io",
    "ParameterSet": ".panel_io",
    "PanelFormatError": ".panel_io",
}

__all__ = sorted(_EXPORTS) + ["__version__"]


def __getattr__(name: str):
    try:
        module_name = _EXPORTS[name]
    except KeyError:
        raise AttributeError(f"module {__name__!r} has no attribute {name!r}")
    value = getattr(import_module(module_name, __name__), name)
    globals()[name] = value
    return value


def __dir__():
    return sorted(set(globals()) | set(_EXPORTS))
