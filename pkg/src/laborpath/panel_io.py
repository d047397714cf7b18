"""Panel CSV round trip, preparation rules, and parameter-file serialization.

The canonical panel format is one CSV row per person-year with the exact
header ``person_id,year,state,log_wage,female,educ,first_xp``; the wage
column is empty exactly when the state is non-employment.  Preparation
applies the documented cleaning rules — too-short trajectories dropped,
missing years imputed as non-employment, wages winsorized within
state-by-year cells — and is idempotent.  Parameter sets travel as a
versioned JSON document with one named block per coefficient family.
"""

import csv
import json
import math
import os
from dataclasses import dataclass, field
from importlib import resources

import numpy as np

from . import model
from .panel import PanelArrays
from .params import IncomeParams, MobilityParams, ModelConfig

PANEL_HEADER = ("person_id", "year", "state", "log_wage", "female", "educ", "first_xp")
PARAMS_FORMAT = "laborpath-params-v1"
MIN_SPELLS = 3
MALFORMED_ABORT_SHARE = 0.01
WINSOR_MIN_CELL = 100
WINSOR_LOW_PCT = 1
WINSOR_HIGH_PCT = 99


class PanelFormatError(ValueError):
    """The file cannot be read as a panel at all (bad header, too many
    malformed rows); distinct from per-row problems, which are reported."""


# ---------------------------------------------------------------------------
# panel CSV
# ---------------------------------------------------------------------------

@dataclass
class ValidationReport:
    n_rows: int = 0
    malformed: list = field(default_factory=list)     # (line_number, message)
    dropped_short: list = field(default_factory=list)  # person ids with < 3 rows

    @property
    def n_loaded(self) -> int:
        return self.n_rows - len(self.malformed)


def _parse_row(row: list[str], line_no: int):
    if len(row) != len(PANEL_HEADER):
        raise ValueError(f"expected {len(PANEL_HEADER)} fields, got {len(row)}")
    pid = int(row[0])
    year = int(row[1])
    state = int(row[2])
    if not 0 <= state < model.N_STATES:
        raise ValueError(f"state {state} out of range")
    wage_text = row[3].strip()
    if state == 0:
        if wage_text:
            raise ValueError("wage present in a non-employment year")
        wage = None
    else:
        if not wage_text:
            raise ValueError("employed year is missing its wage")
        wage = float(wage_text)
        if not math.isfinite(wage):
            raise ValueError("wage must be finite")
    female = float(row[4])
    if female not in (0.0, 1.0):
        raise ValueError(f"female must be 0 or 1, got {row[4]}")
    educ = int(row[5])
    if educ not in (0, 1, 2):
        raise ValueError(f"educ must be 0, 1 or 2, got {row[5]}")
    first_xp = float(row[6])
    if not math.isfinite(first_xp) or first_xp < 0:
        raise ValueError(f"first_xp must be finite and >= 0, got {row[6]}")
    return pid, year, state, wage, female, educ, first_xp


def load_panel(
    path, min_spells: int = MIN_SPELLS
) -> tuple[list[model.IndividualHistory], ValidationReport]:
    """Read a canonical panel CSV into per-person histories.

    Malformed rows are skipped and recorded with their line numbers; more
    than 1% of them aborts the load.  Persons left with fewer than
    ``min_spells`` observed years are dropped and reported (pass 1 to keep
    everyone, e.g. for a first-spells file).  Experience is reconstructed
    from the first-year stock, accruing only over observed employed years
    (missing years count as non-employment, matching the imputation rule).
    """
    by_person: dict[int, dict] = {}
    report = ValidationReport()
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise PanelFormatError(f"{path}: empty file, expected a header")
        if tuple(header) != PANEL_HEADER:
            raise PanelFormatError(
                f"{path}: header must be {','.join(PANEL_HEADER)}"
            )
        for line_no, row in enumerate(reader, start=2):
            if not row:
                continue
            report.n_rows += 1
            try:
                pid, year, state, wage, female, educ, first_xp = _parse_row(
                    row, line_no
                )
                rec = by_person.setdefault(
                    pid, {"zf": (female, educ, first_xp), "years": {}}
                )
                if rec["zf"] != (female, educ, first_xp):
                    raise ValueError(
                        f"person {pid} changes fixed covariates mid-panel"
                    )
                if year in rec["years"]:
                    raise ValueError(f"duplicate year {year} for person {pid}")
                rec["years"][year] = (state, wage)
            except ValueError as exc:
                report.malformed.append((line_no, str(exc)))
    if report.n_rows and len(report.malformed) > MALFORMED_ABORT_SHARE * report.n_rows:
        raise PanelFormatError(
            f"{path}: {len(report.malformed)} of {report.n_rows} rows are "
            f"malformed (limit {MALFORMED_ABORT_SHARE:.0%}); first problem at "
            f"line {report.malformed[0][0]}: {report.malformed[0][1]}"
        )

    histories = []
    for pid in sorted(by_person):
        rec = by_person[pid]
        if len(rec["years"]) < min_spells:
            report.dropped_short.append(pid)
            continue
        female, educ, first_xp = rec["zf"]
        zf = model.FixedCovariates(female, educ, first_xp)
        obs = []
        xp = first_xp
        prev_state = None
        for year in sorted(rec["years"]):
            state, wage = rec["years"][year]
            if prev_state is not None and prev_state != 0:
                xp += model.EXPERIENCE_STEP
            obs.append(model.YearObservation(year, state, wage, xp))
            prev_state = state
        histories.append(model.IndividualHistory(pid, zf, tuple(obs)))
    return histories, report


def _fmt(x: float) -> str:
    return repr(float(x))


def save_panel(panel, path) -> None:
    """Write histories or a ``PanelArrays`` as canonical CSV, sorted by
    person then year."""
    if isinstance(panel, PanelArrays):
        histories = panel.to_histories()
    else:
        histories = list(panel)
    histories = sorted(histories, key=lambda h: h.person_id)
    tmp = f"{path}.tmp"
    with open(tmp, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(PANEL_HEADER)
        for h in histories:
            for obs in h.years:
                writer.writerow([
                    h.person_id,
                    obs.year,
                    obs.state,
                    "" if obs.log_wage is None else _fmt(obs.log_wage),
                    _fmt(h.zf.female),
                    h.zf.educ,
                    _fmt(h.zf.first_xp),
                ])
    os.replace(tmp, path)


# ---------------------------------------------------------------------------
# preparation rules
# ---------------------------------------------------------------------------

def impute_nonemployment(
    histories,
    end_year: int,
    max_age: float = 60.0,
    config: ModelConfig | None = None,
) -> list[model.IndividualHistory]:
    """Fill in the years a person is silently out of work.

    Interior calendar gaps become non-employment rows.  A person who stops
    appearing before ``end_year`` gets trailing non-employment rows for every
    missing year in which they are still younger than ``max_age`` (age is
    reconstructed from entry experience).  Contiguous full-length histories
    come back unchanged.
    """
    cfg = config or ModelConfig()
    out = []
    for h in histories:
        observed = {obs.year: obs for obs in h.years}
        first_year = h.years[0].year
        last_year = h.years[-1].year
        entry = cfg.entry_age_offset + 10.0 * h.zf.first_xp
        years = list(range(first_year, last_year + 1))
        for year in range(last_year + 1, end_year + 1):
            if entry + (year - first_year) < max_age:
                years.append(year)
            else:
                break
        if len(years) == h.n_years:
            out.append(h)
            continue
        states = [observed[y].state if y in observed else 0 for y in years]
        wages = [observed[y].log_wage if y in observed else None for y in years]
        out.append(
            model.IndividualHistory.from_states(
                h.person_id, h.zf, first_year, states, wages
            )
        )
    return out


@dataclass
class WinsorReport:
    clamped_low: int = 0
    clamped_high: int = 0
    skipped_cells: list = field(default_factory=list)  # (state, year, n)


def _nearest_rank(sorted_vals: np.ndarray, pct: int) -> float:
    """p-th percentile as the ceil(p*n/100)-th smallest value."""
    n = len(sorted_vals)
    idx = math.ceil(pct * n / 100)
    return float(sorted_vals[max(idx, 1) - 1])


def winsorize_wages(histories) -> tuple[list[model.IndividualHistory], WinsorReport]:
    """Clamp wages to their state-by-year cell's 1st/99th percentiles.

    Cells with fewer than 100 wages are left alone and reported — clamping
    a small cell to its own extremes would erase real variation.
    """
    cells: dict[tuple[int, int], list[float]] = {}
    for h in histories:
        for obs in h.years:
            if obs.state != 0:
                cells.setdefault((obs.state, obs.year), []).append(obs.log_wage)

    report = WinsorReport()
    bounds = {}
    for key in sorted(cells):
        vals = np.sort(np.asarray(cells[key]))
        if len(vals) < WINSOR_MIN_CELL:
            report.skipped_cells.append((*key, len(vals)))
            continue
        bounds[key] = (
            _nearest_rank(vals, WINSOR_LOW_PCT),
            _nearest_rank(vals, WINSOR_HIGH_PCT),
        )

    out = []
    for h in histories:
        obs_out = []
        changed = False
        for obs in h.years:
            cell = bounds.get((obs.state, obs.year))
            if cell is None:
                obs_out.append(obs)
                continue
            lo, hi = cell
            w = obs.log_wage
            if w < lo:
                report.clamped_low += 1
                w = lo
            elif w > hi:
                report.clamped_high += 1
                w = hi
            if w != obs.log_wage:
                obs = model.YearObservation(obs.year, obs.state, w, obs.xp)
                changed = True
            obs_out.append(obs)
        out.append(
            model.IndividualHistory(h.person_id, h.zf, tuple(obs_out))
            if changed else h
        )
    return out, report


@dataclass
class PrepReport:
    dropped_short: list
    n_imputed_rows: int
    winsor: WinsorReport


def prepare_panel(
    histories,
    end_year: int | None = None,
    max_age: float | None = None,
    config: ModelConfig | None = None,
) -> tuple[PanelArrays, PrepReport]:
    """Run the full preparation pipeline and assemble the columnar panel.

    Too-short trajectories are dropped, then gaps are imputed, then wages
    winsorized.  ``end_year`` defaults to the latest observed year.  The
    pipeline is idempotent: preparing an already-prepared panel changes
    nothing.
    """
    cfg = config or ModelConfig()
    histories = list(histories)
    kept = [h for h in histories if h.n_years >= MIN_SPELLS]
    dropped = [h.person_id for h in histories if h.n_years < MIN_SPELLS]
    if not kept:
        raise ValueError("no person has enough observed years")
    if end_year is None:
        end_year = max(h.years[-1].year for h in kept)
    if max_age is None:
        max_age = float(cfg.retirement_age)
    n_before = sum(h.n_years for h in kept)
    imputed = impute_nonemployment(kept, end_year, max_age, cfg)
    n_added = sum(h.n_years for h in imputed) - n_before
    winsorized, winsor_report = winsorize_wages(imputed)
    panel = PanelArrays.from_histories(winsorized)
    return panel, PrepReport(dropped, n_added, winsor_report)


# ---------------------------------------------------------------------------
# parameter files
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ParameterSet:
    """One estimated (or published) model: coefficients plus configuration."""

    mobility: MobilityParams
    income: IncomeParams
    config: ModelConfig


def _params_payload(ps: ParameterSet) -> dict:
    return {
        "format": PARAMS_FORMAT,
        "config": ps.config.to_dict(),
        "mobility": ps.mobility.to_dict(),
        "income": ps.income.to_dict(),
    }


def params_to_json(ps: ParameterSet) -> str:
    return json.dumps(_params_payload(ps), sort_keys=True, indent=2) + "\n"


def save_params(ps: ParameterSet, path) -> None:
    tmp = f"{path}.tmp"
    with open(tmp, "w") as fh:
        fh.write(params_to_json(ps))
    os.replace(tmp, path)


_BLOCK_KEYS = {
    "mobility": ("kappa_m", "chi0", "chi"),
    "income": ("kappa_y", "mu", "sigma", "xi"),
}


def params_from_json(text: str, source: str = "<string>") -> ParameterSet:
    doc = json.loads(text)
    if not isinstance(doc, dict):
        raise ValueError(f"{source}: parameter file must be a JSON object")
    if doc.get("format") != PARAMS_FORMAT:
        raise ValueError(
            f"{source}: format tag must be {PARAMS_FORMAT!r}, "
            f"got {doc.get('format')!r}"
        )
    known_top = {"format", "config", "mobility", "income"}
    for key in doc:
        if key not in known_top:
            raise ValueError(f"{source}: unknown key {key!r}")
    for key in known_top:
        if key not in doc:
            raise ValueError(f"{source}: missing block {key!r}")
    for block, keys in _BLOCK_KEYS.items():
        for key in doc[block]:
            if key not in keys:
                raise ValueError(f"{source}: unknown key {key!r} in {block!r}")
        for key in keys:
            if key not in doc[block]:
                raise ValueError(f"{source}: missing key {key!r} in {block!r}")
    config = ModelConfig.from_dict(doc["config"])
    mobility = MobilityParams.from_dict(doc["mobility"])
    income = IncomeParams.from_dict(doc["income"])
    mobility.validate(config.K_m)
    income.validate(config.K_m, config.K_y)
    return ParameterSet(mobility, income, config)


def load_params(path) -> ParameterSet:
    with open(path) as fh:
        return params_from_json(fh.read(), source=str(path))


def published_params() -> ParameterSet:
    """The parameter set shipped with the package (the published estimates)."""
    text = (
        resources.files("laborpath")
        .joinpath("data/published_params.json")
        .read_text()
    )
    return params_from_json(text, source="published_params.json")
