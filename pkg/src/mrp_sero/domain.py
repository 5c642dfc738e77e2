"""Core vocabulary: demographic categories, test records, poststratification
tables and misclassification prior data.

Cell ordering
-------------
The 2 x 5 x 3 x 2 = 60 demographic cells are enumerated with sex varying
slowest, then age group, then race, with county varying fastest::

    index = ((sex * 5 + age) * 3 + race) * 2 + county

so ``(female, a0_17, black, lake)`` is cell 0 and ``(male, a75plus, other,
porter)`` is cell 59.  The order is part of the file formats and must not
change.
"""
from __future__ import annotations

import datetime as dt
import enum
import itertools
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np


class _Category(enum.Enum):
    """Enum whose value is the lowercase file token; order is declaration order."""

    @property
    def code(self) -> int:
        return list(type(self)).index(self)

    @classmethod
    def parse(cls, token: str):
        try:
            return cls(token)
        except ValueError:
            allowed = ", ".join(m.value for m in cls)
            raise ValueError(f"unknown {cls.__name__} label {token!r} (expected one of: {allowed})") from None


class Sex(_Category):
    FEMALE = "female"
    MALE = "male"


class AgeGroup(_Category):
    A0_17 = "a0_17"
    A18_34 = "a18_34"
    A35_64 = "a35_64"
    A65_74 = "a65_74"
    A75PLUS = "a75plus"


class Race(_Category):
    BLACK = "black"
    WHITE = "white"
    OTHER = "other"


class County(_Category):
    LAKE = "lake"
    PORTER = "porter"

    @classmethod
    def parse(cls, token: str):
        if token.lower() == "cook":
            raise ValueError(
                "county 'cook' is not modeled; map South Cook County records to 'lake' before ingestion"
            )
        return super().parse(token)


class AssayKind(_Category):
    PCR = "pcr"
    IGGN = "iggn"
    IGGNS = "iggns"


class Population(_Category):
    HOSPITAL = "hospital"
    COMMUNITY = "community"


SHAPE = (len(Sex), len(AgeGroup), len(Race), len(County))
N_CELLS = int(np.prod(SHAPE))


@dataclass(frozen=True, order=True)
class Covariates:
    sex: Sex
    age_group: AgeGroup
    race: Race
    county: County

    @property
    def male(self) -> float:
        """Centered sex indicator: +0.5 for males, -0.5 for females."""
        return 0.5 if self.sex is Sex.MALE else -0.5

    @property
    def codes(self) -> tuple[int, int, int, int]:
        return (self.sex.code, self.age_group.code, self.race.code, self.county.code)


def cell_index(c: Covariates) -> int:
    return int(np.ravel_multi_index(c.codes, SHAPE))


def covariates_of(index: int) -> Covariates:
    if not 0 <= index < N_CELLS:
        raise ValueError(f"cell index {index} outside [0, {N_CELLS})")
    s, a, r, k = np.unravel_index(index, SHAPE)
    return Covariates(list(Sex)[s], list(AgeGroup)[a], list(Race)[r], list(County)[k])


def all_covariates() -> list[Covariates]:
    return [Covariates(*combo) for combo in itertools.product(Sex, AgeGroup, Race, County)]


# Per-cell category codes, indexed by cell.  Handy for vectorised evaluation.
CELL_SEX, CELL_AGE, CELL_RACE, CELL_COUNTY = (
    np.asarray(v, dtype=np.int64) for v in np.unravel_index(np.arange(N_CELLS), SHAPE)
)
CELL_MALE = np.where(CELL_SEX == Sex.MALE.code, 0.5, -0.5)


def week_of(date: dt.date, anchor: dt.date) -> int:
    """0-based index of the 7-day bin containing ``date``, counted from ``anchor``."""
    days = (date - anchor).days
    if days < 0:
        raise ValueError(f"date {date.isoformat()} precedes anchor {anchor.isoformat()}")
    return days // 7


@dataclass(frozen=True)
class TestRecord:
    date: dt.date
    covariates: Covariates
    assay: AssayKind
    result: int

    __test__ = False  # not a pytest class

    def __post_init__(self):
        if self.result not in (0, 1):
            raise ValueError(f"result must be 0 or 1, got {self.result!r}")


@dataclass(frozen=True)
class StudyWindow:
    """Calendar limits for accepted records.

    ``split`` is the first date on which combined N/S serology is valid.
    """

    start: dt.date = dt.date(2020, 5, 1)
    end: dt.date = dt.date(2021, 7, 12)
    split: dt.date = dt.date(2021, 2, 16)

    def check(self, rec: TestRecord) -> None:
        if not self.start <= rec.date <= self.end:
            raise ValueError(
                f"date {rec.date.isoformat()} outside study window "
                f"{self.start.isoformat()}..{self.end.isoformat()}"
            )
        if rec.assay is AssayKind.IGGNS and rec.date < self.split:
            raise ValueError(f"iggns record dated {rec.date.isoformat()} before split date {self.split.isoformat()}")


@dataclass(frozen=True)
class PoststratTable:
    """Population counts for all 60 cells, stored in cell-index order."""

    population: Population
    counts: np.ndarray = field(repr=False)

    def __post_init__(self):
        counts = np.asarray(self.counts)
        if counts.shape != (N_CELLS,):
            raise ValueError(f"poststratification table needs {N_CELLS} counts, got shape {counts.shape}")
        if np.any(counts < 0):
            raise ValueError("negative cell count")
        if counts.sum() <= 0:
            raise ValueError("poststratification table has zero total count")
        counts = counts.copy()
        counts.flags.writeable = False
        object.__setattr__(self, "counts", counts)

    @classmethod
    def from_cells(cls, population: Population, cells: Iterable[tuple[Covariates, float]]):
        """Build from ``(covariates, count)`` pairs; every cell must appear exactly once."""
        counts = np.full(N_CELLS, np.nan)
        for cov, n in cells:
            j = cell_index(cov)
            if not np.isnan(counts[j]):
                raise ValueError(f"duplicate cell {describe_cell(cov)}")
            counts[j] = n
        missing = np.flatnonzero(np.isnan(counts))
        if missing.size:
            names = ", ".join(describe_cell(covariates_of(int(j))) for j in missing)
            raise ValueError(f"missing {missing.size} cell(s): {names}")
        if np.all(counts == np.round(counts)):
            counts = counts.astype(np.int64)
        return cls(population, counts)

    @property
    def total(self):
        return self.counts.sum()

    def cells(self) -> list[tuple[Covariates, float]]:
        return [(covariates_of(j), self.counts[j]) for j in range(N_CELLS)]


def describe_cell(c: Covariates) -> str:
    return f"({c.sex.value},{c.age_group.value},{c.race.value},{c.county.value})"


@dataclass(frozen=True)
class PriorStudy:
    positives: int
    total: int

    def __post_init__(self):
        if self.positives < 0 or self.total < 0:
            raise ValueError("study counts must be non-negative")
        if self.positives > self.total:
            raise ValueError(f"study has more positives ({self.positives}) than tests ({self.total})")


@dataclass(frozen=True)
class MisclassPriorData:
    """Validation studies for the assay.

    Sensitivity studies count positives among known positives; specificity
    studies count negatives among known negatives.
    """

    sensitivity: tuple[PriorStudy, ...] = ()
    specificity: tuple[PriorStudy, ...] = ()

    @classmethod
    def from_pairs(cls, sensitivity: Sequence[Sequence[int]], specificity: Sequence[Sequence[int]]):
        return cls(
            tuple(PriorStudy(int(y), int(n)) for y, n in sensitivity),
            tuple(PriorStudy(int(y), int(n)) for y, n in specificity),
        )

    def totals(self, which: str) -> tuple[int, int]:
        studies = self.sensitivity if which == "sensitivity" else self.specificity
        return sum(s.positives for s in studies), sum(s.total for s in studies)
