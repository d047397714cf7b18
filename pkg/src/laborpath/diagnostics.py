"""Fit diagnostics: transition matrices, wage histograms, composition tables.

Everything here is pure aggregation over a panel — frequency estimates of
the state dynamics, binned wage densities, and demographic breakdowns by
latent class — so fitted models can be compared against the data (or two
panels against each other) cell by cell.
"""

from dataclasses import dataclass

import numpy as np

from .lifetime import entry_age
from .panel import PanelArrays
from .params import N_STATES, PUBLIC_STATES, STATE_LABELS, ModelConfig

ROW_SUM_TOL = 1e-9
DEFAULT_BIN_WIDTH = 0.05
AGE_BANDS = ((-np.inf, 30.0), (30.0, 45.0), (45.0, np.inf))
AGE_BAND_LABELS = ("le30", "31_45", "gt45")
EDUC_LABELS = ("low", "med", "high")


# ---------------------------------------------------------------------------
# transition matrices
# ---------------------------------------------------------------------------

@dataclass
class TransitionMatrix:
    """Empirical one-year transition frequencies plus state occupancy.

    ``probs`` rows are conditional on the origin state; an origin never
    observed leaves its row NaN rather than inventing a uniform row.
    """

    counts: np.ndarray            # (5, 5) transition pair counts
    probs: np.ndarray             # (5, 5) row-conditional frequencies
    occupancy: np.ndarray         # (5,) state shares over all observations
    n_transitions: int
    n_observations: int
    empty: bool = False

    def undefined_rows(self) -> np.ndarray:
        return self.counts.sum(axis=1) == 0

    def validate(self) -> None:
        defined = ~self.undefined_rows()
        if self.empty:
            if defined.any():
                raise ValueError("empty matrix cannot have defined rows")
            return
        sums = self.probs[defined].sum(axis=1)
        if np.any(np.abs(sums - 1.0) > ROW_SUM_TOL):
            raise ValueError("transition rows must sum to 1")
        if self.n_observations and abs(self.occupancy.sum() - 1.0) > ROW_SUM_TOL:
            raise ValueError("occupancy must sum to 1")


def _person_mask(panel: PanelArrays, person_filter, classes) -> np.ndarray:
    if person_filter is None:
        return np.ones(panel.n_persons, dtype=bool)
    if callable(person_filter):
        record = {
            "female": panel.female,
            "educ": panel.educ,
            "first_xp": panel.first_xp,
        }
        if classes is not None:
            record["km"], record["ky"] = classes
        mask = np.asarray(person_filter(record))
    else:
        mask = np.asarray(person_filter)
    if mask.shape != (panel.n_persons,) or mask.dtype != np.bool_:
        raise ValueError("person filter must produce one boolean per person")
    return mask


def transition_matrix(
    panel: PanelArrays,
    person_filter=None,
    classes: tuple[np.ndarray, np.ndarray] | None = None,
) -> TransitionMatrix:
    """Frequency matrix of year-over-year state moves.

    ``person_filter`` restricts the sample: a boolean mask over persons, or
    a callable receiving a dict of person-level arrays (``female``, ``educ``,
    ``first_xp``, plus ``km``/``ky`` when ``classes`` is given) and returning
    one.  An empty selection yields a matrix with the ``empty`` flag set.
    """
    mask = _person_mask(panel, person_filter, classes)
    counts = np.zeros((N_STATES, N_STATES), dtype=np.int64)
    occupancy = np.full(N_STATES, np.nan)
    if not mask.any():
        probs = np.full((N_STATES, N_STATES), np.nan)
        return TransitionMatrix(counts, probs, occupancy, 0, 0, empty=True)

    row_keep = mask[panel.row_person]
    states = panel.state[row_keep]
    occupancy = np.bincount(states, minlength=N_STATES) / len(states)

    same_person = panel.row_person[1:] == panel.row_person[:-1]
    adjacent = panel.year[1:] == panel.year[:-1] + 1
    pair = same_person & adjacent & row_keep[1:]
    prev = panel.state[:-1][pair]
    nxt = panel.state[1:][pair]
    np.add.at(counts, (prev, nxt), 1)

    row_sums = counts.sum(axis=1)
    with np.errstate(invalid="ignore"):
        probs = counts / np.where(row_sums == 0, np.nan, row_sums)[:, None]
    out = TransitionMatrix(
        counts, probs, occupancy, int(pair.sum()), int(len(states))
    )
    out.validate()
    return out


def matrix_distance(a: TransitionMatrix, b: TransitionMatrix) -> float:
    """Sup-norm over transition cells defined in both matrices.

    The occupancy row never enters; NaN rows (unobserved origins) are
    skipped on whichever side they occur.
    """
    if a.probs.shape != b.probs.shape:
        raise ValueError("transition matrices must have the same shape")
    both = ~(np.isnan(a.probs) | np.isnan(b.probs))
    if not both.any():
        raise ValueError("no cell is defined in both matrices")
    return float(np.max(np.abs(a.probs[both] - b.probs[both])))


# ---------------------------------------------------------------------------
# wage histograms
# ---------------------------------------------------------------------------

@dataclass
class HistogramGroup:
    left_edges: np.ndarray
    density: np.ndarray
    n: int

    @property
    def empty(self) -> bool:
        return self.n == 0


@dataclass
class WageHistogram:
    bin_width: float
    group_keys: tuple[str, ...]
    groups: dict

    def validate(self) -> None:
        for g in self.groups.values():
            if g.empty:
                continue
            mass = g.density.sum() * self.bin_width
            if abs(mass - 1.0) > ROW_SUM_TOL:
                raise ValueError("histogram mass must be 1 per group")


def _sector_of(states: np.ndarray) -> np.ndarray:
    out = np.full(states.shape, "none", dtype=object)
    out[np.isin(states, PUBLIC_STATES)] = "public"
    out[np.isin(states, (1, 3))] = "private"
    return out


def _row_key_column(panel: PanelArrays, key: str, classes):
    if key == "state":
        return panel.state
    if key == "sector":
        return _sector_of(panel.state)
    if key == "female":
        return panel.female[panel.row_person].astype(np.int64)
    if key == "educ":
        return panel.educ[panel.row_person]
    if key in ("km", "ky"):
        if classes is None:
            raise ValueError(f"grouping by {key!r} needs latent classes")
        km, ky = classes
        return (km if key == "km" else ky)[panel.row_person]
    raise ValueError(f"unknown group key {key!r}")


def wage_histogram(
    panel: PanelArrays,
    bin_width: float = DEFAULT_BIN_WIDTH,
    group_keys: tuple[str, ...] = (),
    classes: tuple[np.ndarray, np.ndarray] | None = None,
) -> WageHistogram:
    """Normalized log-wage histogram per group.

    Groups come from the observed combinations of ``group_keys`` (drawn from
    state, sector, female, educ, km, ky) over all rows; within a group only
    employed rows carry wages, so a group of pure non-employment comes back
    empty rather than erroring.  Bin edges are anchored at
    ``floor(min/width) * width`` so equal samples always bin identically.
    """
    if not bin_width > 0:
        raise ValueError("bin width must be positive")
    group_keys = tuple(group_keys)
    cols = [_row_key_column(panel, k, classes) for k in group_keys]
    if cols:
        combos = sorted({tuple(c[i] for c in cols) for i in range(panel.n_rows)})
    else:
        combos = [()]
    employed = panel.state != 0

    groups = {}
    for combo in combos:
        in_group = np.ones(panel.n_rows, dtype=bool)
        for c, v in zip(cols, combo):
            in_group &= c == v
        wages = panel.log_wage[in_group & employed]
        if len(wages) == 0:
            groups[combo] = HistogramGroup(np.empty(0), np.empty(0), 0)
            continue
        start = np.floor(wages.min() / bin_width) * bin_width
        n_bins = int(np.floor((wages.max() - start) / bin_width)) + 1
        edges = start + bin_width * np.arange(n_bins + 1)
        if edges[-1] < wages.max():  # right-boundary rounding guard
            edges = np.append(edges, edges[-1] + bin_width)
        counts, _ = np.histogram(wages, bins=edges)
        density = counts / (len(wages) * bin_width)
        groups[combo] = HistogramGroup(edges[:-1], density, int(len(wages)))
    out = WageHistogram(bin_width, group_keys, groups)
    out.validate()
    return out


def histogram_l1_distance(a: HistogramGroup, b: HistogramGroup, bin_width: float) -> float:
    """Integrated absolute difference of two binned densities."""
    if a.empty or b.empty:
        raise ValueError("cannot compare an empty histogram group")
    lo = min(a.left_edges[0], b.left_edges[0])
    hi = max(a.left_edges[-1], b.left_edges[-1]) + bin_width
    n = int(round((hi - lo) / bin_width))
    da = np.zeros(n)
    db = np.zeros(n)
    ia = np.rint((a.left_edges - lo) / bin_width).astype(int)
    ib = np.rint((b.left_edges - lo) / bin_width).astype(int)
    da[ia] = a.density
    db[ib] = b.density
    return float(np.abs(da - db).sum() * bin_width)


# ---------------------------------------------------------------------------
# composition tables
# ---------------------------------------------------------------------------

@dataclass
class CompositionTable:
    """Demographics of each latent class, one row per class."""

    class_ids: np.ndarray
    counts: np.ndarray
    share: np.ndarray             # of all individuals
    female_share: np.ndarray
    educ_shares: np.ndarray       # (K, 3) low / med / high
    age_shares: np.ndarray        # (K, 3) at first observed year

    def validate(self) -> None:
        for block in (self.share[None, :], self.educ_shares, self.age_shares):
            if np.any(block < -ROW_SUM_TOL) or np.any(block > 1 + ROW_SUM_TOL):
                raise ValueError("shares must lie in [0, 1]")
        nonzero = self.counts > 0
        for block in (self.educ_shares, self.age_shares):
            sums = block[nonzero].sum(axis=1)
            if np.any(np.abs(sums - 1.0) > ROW_SUM_TOL):
                raise ValueError("per-class shares must sum to 1")


def composition_table(
    panel: PanelArrays,
    classes: np.ndarray,
    config: ModelConfig | None = None,
) -> CompositionTable:
    """Class sizes and demographic mix for one latent-class assignment.

    ``classes`` holds one integer label per person.  Ages are taken at each
    person's first observed year, reconstructed from starting experience.
    """
    cfg = config or ModelConfig()
    classes = np.asarray(classes)
    if classes.shape != (panel.n_persons,):
        raise ValueError("need one class label per person")
    K = int(classes.max()) + 1 if len(classes) else 0
    ages = entry_age(panel.first_xp, cfg)
    counts = np.bincount(classes, minlength=K)
    female = np.zeros(K)
    educ = np.zeros((K, 3))
    age = np.zeros((K, 3))
    for k in range(K):
        sel = classes == k
        if not sel.any():
            continue
        female[k] = panel.female[sel].mean()
        for e in range(3):
            educ[k, e] = (panel.educ[sel] == e).mean()
        for j, (lo, hi) in enumerate(AGE_BANDS):
            age[k, j] = ((ages[sel] > lo) & (ages[sel] <= hi)).mean()
    out = CompositionTable(
        np.arange(K), counts, counts / max(panel.n_persons, 1),
        female, educ, age,
    )
    out.validate()
    return out


# ---------------------------------------------------------------------------
# CSV emitters
# ---------------------------------------------------------------------------

def transition_matrix_csv(tm: TransitionMatrix) -> str:
    lines = ["origin," + ",".join(f"to_{s}" for s in STATE_LABELS) + ",row_count"]
    for i, label in enumerate(STATE_LABELS):
        cells = ",".join(f"{p:.6f}" if np.isfinite(p) else "" for p in tm.probs[i])
        lines.append(f"{label},{cells},{tm.counts[i].sum()}")
    occ = ",".join(
        f"{p:.6f}" if np.isfinite(p) else "" for p in tm.occupancy
    )
    lines.append(f"occupancy,{occ},{tm.n_observations}")
    return "\n".join(lines) + "\n"


def wage_histogram_csv(h: WageHistogram) -> str:
    head = list(h.group_keys) + ["bin_left", "density", "n"]
    lines = [",".join(head)]
    for combo, g in h.groups.items():
        prefix = ",".join(str(v) for v in combo)
        if g.empty:
            lines.append(f"{prefix}{',' if prefix else ''},,0")
            continue
        for left, d in zip(g.left_edges, g.density):
            row = f"{left:.6f},{d:.6f},{g.n}"
            lines.append(f"{prefix},{row}" if prefix else row)
    return "\n".join(lines) + "\n"


def composition_csv(t: CompositionTable) -> str:
    head = (
        ["class", "count", "share", "female"]
        + [f"educ_{e}" for e in EDUC_LABELS]
        + [f"age_{a}" for a in AGE_BAND_LABELS]
    )
    lines = [",".join(head)]
    for i, k in enumerate(t.class_ids):
        vals = [
            str(int(k)), str(int(t.counts[i])), f"{t.share[i]:.6f}",
            f"{t.female_share[i]:.6f}",
            *(f"{v:.6f}" for v in t.educ_shares[i]),
            *(f"{v:.6f}" for v in t.age_shares[i]),
        ]
        lines.append(",".join(vals))
    return "\n".join(lines) + "\n"
