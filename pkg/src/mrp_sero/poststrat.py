"""Poststratification of posterior draws into population prevalence.

For each posterior draw the true prevalence of every demographic cell is
averaged with weights proportional to the cell's population count.  The
true prevalence is used, not the test-positive probability: assay
misclassification is a property of the measurement, not of the population.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from math import gcd
from typing import Iterable, Mapping, Optional, Sequence

import numpy as np
from scipy.special import expit

from .domain import (
    CELL_AGE, CELL_COUNTY, CELL_RACE, CELL_SEX, AgeGroup, AssayKind, County,
    Population, PoststratTable, Race, Sex,
)
from .model import ModelSpec, cell_eta
from .sampler import Draws

QUANTILES = (0.025, 0.25, 0.5, 0.75, 0.975)
QUANTILE_NAMES = ("q025", "q25", "q50", "q75", "q975")

MARGINS = {
    "sex": (Sex, CELL_SEX),
    "age": (AgeGroup, CELL_AGE),
    "race": (Race, CELL_RACE),
    "county": (County, CELL_COUNTY),
}


def _weights(counts: np.ndarray) -> np.ndarray:
    """Normalized cell weights.

    Integer tables are first divided by the gcd of their counts so that
    rescaling a table by an integer factor gives bit-identical weights.
    """
    c = np.asarray(counts)
    if np.issubdtype(c.dtype, np.integer):
        g = gcd(*(int(v) for v in c if v)) or 1
        c = c // g
    c = c.astype(float)
    return c / c.sum()


def _as_flat(draws) -> np.ndarray:
    return draws.flat() if isinstance(draws, Draws) else np.atleast_2d(np.asarray(draws, dtype=float))


def cell_prevalence(draws, spec: ModelSpec, week: int) -> np.ndarray:
    """True prevalence per draw and cell, shape (n_draws, 60)."""
    return expit(cell_eta(_as_flat(draws), spec, week))


def _check_table(table: PoststratTable, spec: ModelSpec, draws):
    flat = _as_flat(draws)
    if flat.shape[1] != spec.dim:
        raise ValueError(f"draws have {flat.shape[1]} columns, spec expects {spec.dim}")
    if np.asarray(table.counts).shape != (len(CELL_SEX),):
        raise ValueError("table does not cover the model's demographic cells")


def poststratify_week(draws, table: PoststratTable, week: int, spec: ModelSpec,
                      cells: Optional[np.ndarray] = None) -> np.ndarray:
    """Population prevalence for each draw at ``week``.

    ``cells`` optionally restricts the average to a boolean mask of cells.
    """
    _check_table(table, spec, draws)
    pi = cell_prevalence(draws, spec, week)
    counts = np.asarray(table.counts)
    if cells is not None:
        counts = np.where(cells, counts, 0)
        if counts.sum() <= 0:
            raise ValueError("selected cells have zero population")
    return pi @ _weights(counts)


@dataclass(frozen=True)
class Summary:
    mean: float
    sd: float
    quantiles: tuple[float, ...]

    @classmethod
    def of(cls, values: np.ndarray) -> "Summary":
        v = np.asarray(values, dtype=float)
        sd = float(v.std(ddof=1)) if v.size > 1 else 0.0
        return cls(float(v.mean()), sd, tuple(float(q) for q in np.quantile(v, QUANTILES)))


def summarize(values: np.ndarray) -> Summary:
    return Summary.of(values)


@dataclass
class PrevalenceSeries:
    population: Population
    assay: AssayKind
    weeks: np.ndarray
    mean: np.ndarray
    sd: np.ndarray
    quantiles: np.ndarray  # (n_weeks, 5)

    def __post_init__(self):
        self.weeks = np.asarray(self.weeks, dtype=np.int64)
        self.mean = np.asarray(self.mean, dtype=float)
        self.sd = np.asarray(self.sd, dtype=float)
        self.quantiles = np.asarray(self.quantiles, dtype=float).reshape(len(self.weeks), len(QUANTILES))

    def __len__(self):
        return len(self.weeks)

    def __eq__(self, other):
        if not isinstance(other, PrevalenceSeries):
            return NotImplemented
        return (self.population == other.population and self.assay == other.assay
                and np.array_equal(self.weeks, other.weeks) and np.array_equal(self.mean, other.mean)
                and np.array_equal(self.sd, other.sd) and np.array_equal(self.quantiles, other.quantiles))


def weekly_series(draws, table: PoststratTable, spec: ModelSpec, assay: AssayKind = AssayKind.PCR,
                  weeks: Optional[Iterable[int]] = None) -> PrevalenceSeries:
    weeks = list(range(spec.n_weeks)) if weeks is None else [int(w) for w in weeks]
    summaries = [Summary.of(poststratify_week(draws, table, w, spec)) for w in weeks]
    return PrevalenceSeries(
        population=table.population,
        assay=assay,
        weeks=np.array(weeks, dtype=np.int64),
        mean=np.array([s.mean for s in summaries]),
        sd=np.array([s.sd for s in summaries]),
        quantiles=np.array([s.quantiles for s in summaries]).reshape(len(weeks), len(QUANTILES)),
    )


def weekly_series_all(draws, tables: Sequence[PoststratTable], spec: ModelSpec,
                      assay: AssayKind = AssayKind.PCR) -> list[PrevalenceSeries]:
    return [weekly_series(draws, t, spec, assay) for t in tables]


@dataclass(frozen=True)
class ImmunityDecomposition:
    """Natural-immunity lower bound: total prevalence minus the vaccination rate, per draw."""

    mean: float
    sd: float
    clamped_fraction: float
    values: np.ndarray = field(repr=False, compare=False)

    @property
    def clamped(self) -> bool:
        return self.clamped_fraction > 0


def decompose_immunity(total, vaccination_rate: float) -> ImmunityDecomposition:
    """Per-draw ``max(0, total - vaccination_rate)``.

    This treats published vaccination coverage as exact and assumes every
    vaccinated person is seropositive, so the result is a lower-bound
    heuristic for naturally acquired seropositivity.
    """
    if not 0.0 <= vaccination_rate <= 1.0:
        raise ValueError(f"vaccination rate {vaccination_rate} outside [0, 1]")
    t = np.atleast_1d(np.asarray(total, dtype=float))
    raw = t - vaccination_rate
    vals = np.maximum(raw, 0.0)
    sd = float(vals.std(ddof=1)) if vals.size > 1 else 0.0
    return ImmunityDecomposition(float(vals.mean()), sd, float(np.mean(raw < 0)), vals)


@dataclass(frozen=True)
class SubgroupRow:
    week: int
    margin: str
    level: str
    total_count: float
    mean: float
    sd: float
    empty: bool = False
    vaccination_rate: Optional[float] = None
    natural_mean: Optional[float] = None
    natural_sd: Optional[float] = None
    natural_clamped_fraction: Optional[float] = None


@dataclass
class SubgroupTable:
    population: Population
    rows: list[SubgroupRow]

    def row(self, margin: str, level: str, week: Optional[int] = None) -> SubgroupRow:
        for r in self.rows:
            if r.margin == margin and r.level == level and (week is None or r.week == week):
                return r
        raise KeyError((margin, level, week))


def margin_levels(margin: str) -> list[tuple[str, np.ndarray]]:
    """(level label, boolean cell mask) pairs for ``margin``."""
    if margin == "overall":
        return [("overall", np.ones(len(CELL_SEX), dtype=bool))]
    try:
        enum_cls, codes = MARGINS[margin]
    except KeyError:
        raise ValueError(f"unknown margin {margin!r}; expected overall, {', '.join(MARGINS)}") from None
    return [(lvl.value, codes == lvl.code) for lvl in enum_cls]


def subgroup_draws(draws, table: PoststratTable, week: int, spec: ModelSpec,
                   margins: Sequence[str] = ("overall", "sex", "race", "age")):
    """Per-draw subgroup prevalence: list of (margin, level, total_count, values or None)."""
    _check_table(table, spec, draws)
    pi = cell_prevalence(draws, spec, week)
    counts = np.asarray(table.counts)
    out = []
    for margin in margins:
        for level, mask in margin_levels(margin):
            sub = np.where(mask, counts, 0)
            total = sub.sum()
            vals = pi @ _weights(sub) if total > 0 else None
            out.append((margin, level, total, vals))
    return out


def subgroup_estimates(draws, table: PoststratTable, week: int, spec: ModelSpec,
                       margins: Sequence[str] = ("overall", "sex", "race", "age"),
                       vaccination: Optional[Mapping[tuple[str, str], float]] = None) -> SubgroupTable:
    """Poststratified prevalence for each level of each margin.

    Levels with no population are kept as rows flagged ``empty`` with NaN
    estimates.  When ``vaccination`` maps ``(margin, level)`` to a rate the
    row also carries the natural-immunity decomposition.
    """
    rows = []
    for margin, level, total, vals in subgroup_draws(draws, table, week, spec, margins):
        if vals is None:
            rows.append(SubgroupRow(week, margin, level, float(total), float("nan"), float("nan"), empty=True))
            continue
        s = Summary.of(vals)
        rate = None if vaccination is None else vaccination.get((margin, level))
        if rate is None:
            rows.append(SubgroupRow(week, margin, level, float(total), s.mean, s.sd))
        else:
            dec = decompose_immunity(vals, rate)
            rows.append(SubgroupRow(week, margin, level, float(total), s.mean, s.sd, False,
                                    float(rate), dec.mean, dec.sd, dec.clamped_fraction))
    return SubgroupTable(table.population, rows)
