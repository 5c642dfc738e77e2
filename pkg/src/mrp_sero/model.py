"""Hierarchical logistic regression with misclassification adjustment.

Two regression structures are supported:

``pcr``
    intercept + male + age + race + county + week + age x sex
``igg``
    intercept + male + age + race + county + week + age x week

Every varying-effect vector is non-centered (``effect = sigma * raw`` with
``raw ~ normal(0, 1)``) and each ``sigma`` has a half-normal hyperprior.  The
observed positive probability is ``pi * delta + (1 - pi) * (1 - gamma)`` where
``pi`` is the true prevalence, ``delta`` the sensitivity and ``gamma`` the
specificity.

Unconstrained parameter layout (``T`` weeks, ``K`` interaction cells)::

    [0]            beta1 (intercept)
    [1]            beta2 (male, coded +/-0.5)
    [2:7]          age raw effects
    [7:10]         race raw effects
    [10:12]        county raw effects
    [12:12+T]      week raw effects
    [12+T:12+T+K]  interaction raw effects
    next 5         log sigma for age, race, county, week, interaction
    last 2         logit delta, logit gamma   (only when misclassification is estimated)

The constrained layout used for posterior draws has the same positions, with
raw effects replaced by ``sigma * raw``, log sigmas by sigmas and logits by
probabilities.
"""
from __future__ import annotations

import enum
import hashlib
import json
from dataclasses import dataclass, field
from typing import Iterable, Sequence, Union

import numpy as np
from scipy.special import expit, gammaln, logit

from . import _kernel
from .domain import (
    CELL_AGE, CELL_COUNTY, CELL_MALE, CELL_RACE, CELL_SEX, N_CELLS,
    AgeGroup, AssayKind, Covariates, MisclassPriorData, Race, County, Sex,
    TestRecord, cell_index, week_of,
)

P_CLAMP = _kernel.P_CLAMP

SIGMA_NAMES = ("age", "race", "county", "time", "interaction")


class ModelKind(enum.Enum):
    PCR = "pcr"  # age x sex interaction
    IGG = "igg"  # age x week interaction


@dataclass(frozen=True)
class Fixed:
    delta: float = 1.0
    gamma: float = 1.0

    def __post_init__(self):
        for name in ("delta", "gamma"):
            v = getattr(self, name)
            if not 0.0 < v <= 1.0:
                raise ValueError(f"fixed {name} must lie in (0, 1], got {v}")


@dataclass(frozen=True)
class Estimated:
    priors: MisclassPriorData = field(default_factory=MisclassPriorData)


@dataclass(frozen=True)
class ModelSpec:
    kind: ModelKind
    n_weeks: int
    misclass: Union[Fixed, Estimated] = field(default_factory=Fixed)
    prior_scale_demo: float = 2.5
    prior_scale_time: float = 5.0
    prior_scale_age_time: float = 1.0
    prior_scale_fixed: float = 2.5

    def __post_init__(self):
        if self.n_weeks < 1:
            raise ValueError("n_weeks must be positive")
        for name in ("prior_scale_demo", "prior_scale_time", "prior_scale_age_time", "prior_scale_fixed"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")

    @property
    def estimated(self) -> bool:
        return isinstance(self.misclass, Estimated)

    @property
    def n_interaction(self) -> int:
        if self.kind is ModelKind.PCR:
            return len(AgeGroup) * len(Sex)
        return len(AgeGroup) * self.n_weeks

    @property
    def dim(self) -> int:
        return 12 + self.n_weeks + self.n_interaction + 5 + (2 if self.estimated else 0)

    @property
    def slices(self) -> dict[str, slice]:
        T, K = self.n_weeks, self.n_interaction
        o_int = 12 + T
        o_ls = o_int + K
        out = {
            "beta1": slice(0, 1),
            "beta2": slice(1, 2),
            "age": slice(2, 7),
            "race": slice(7, 10),
            "county": slice(10, 12),
            "time": slice(12, 12 + T),
            "interaction": slice(o_int, o_ls),
            "sigma": slice(o_ls, o_ls + 5),
        }
        if self.estimated:
            out["delta"] = slice(o_ls + 5, o_ls + 6)
            out["gamma"] = slice(o_ls + 6, o_ls + 7)
        return out

    @property
    def interaction_scale(self) -> float:
        return self.prior_scale_demo if self.kind is ModelKind.PCR else self.prior_scale_age_time

    def interaction_index(self, age, sex, week):
        """Index into the interaction vector; works elementwise on arrays."""
        if self.kind is ModelKind.PCR:
            return np.asarray(age) * len(Sex) + np.asarray(sex)
        return np.asarray(age) * self.n_weeks + np.asarray(week)

    def names(self) -> list[str]:
        """Constrained-scale parameter names in layout order."""
        ages = [a.value for a in AgeGroup]
        names = ["beta1", "beta2"]
        names += [f"age[{a}]" for a in ages]
        names += [f"race[{r.value}]" for r in Race]
        names += [f"county[{c.value}]" for c in County]
        names += [f"time[{w}]" for w in range(self.n_weeks)]
        if self.kind is ModelKind.PCR:
            names += [f"age_sex[{a},{s.value}]" for a in ages for s in Sex]
        else:
            names += [f"age_time[{a},{w}]" for a in ages for w in range(self.n_weeks)]
        names += [f"sigma_{s}" for s in SIGMA_NAMES]
        if self.estimated:
            names += ["delta", "gamma"]
        return names

    def to_dict(self) -> dict:
        d = {
            "kind": self.kind.value,
            "n_weeks": self.n_weeks,
            "prior_scale_demo": self.prior_scale_demo,
            "prior_scale_time": self.prior_scale_time,
            "prior_scale_age_time": self.prior_scale_age_time,
            "prior_scale_fixed": self.prior_scale_fixed,
        }
        if self.estimated:
            pri = self.misclass.priors
            d["misclass"] = {
                "estimated": {
                    "sensitivity": [[s.positives, s.total] for s in pri.sensitivity],
                    "specificity": [[s.positives, s.total] for s in pri.specificity],
                }
            }
        else:
            d["misclass"] = {"fixed": [self.misclass.delta, self.misclass.gamma]}
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        m = d["misclass"]
        if "fixed" in m:
            misclass = Fixed(*m["fixed"])
        else:
            e = m["estimated"]
            misclass = Estimated(MisclassPriorData.from_pairs(e["sensitivity"], e["specificity"]))
        return cls(
            kind=ModelKind(d["kind"]),
            n_weeks=int(d["n_weeks"]),
            misclass=misclass,
            prior_scale_demo=d.get("prior_scale_demo", 2.5),
            prior_scale_time=d.get("prior_scale_time", 5.0),
            prior_scale_age_time=d.get("prior_scale_age_time", 1.0),
            prior_scale_fixed=d.get("prior_scale_fixed", 2.5),
        )

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()


@dataclass(frozen=True)
class ParamVector:
    """One point in the unconstrained parameter space of ``spec``."""

    spec: ModelSpec
    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if v.shape != (self.spec.dim,):
            raise ValueError(f"parameter vector has shape {v.shape}, spec needs ({self.spec.dim},)")
        object.__setattr__(self, "values", v)

    @classmethod
    def zeros(cls, spec: ModelSpec) -> "ParamVector":
        return cls(spec, np.zeros(spec.dim))

    def __getitem__(self, name: str) -> np.ndarray:
        return self.values[self.spec.slices[name]]


def _values(p, spec: ModelSpec) -> np.ndarray:
    x = p.values if isinstance(p, ParamVector) else np.asarray(p, dtype=float)
    if x.shape != (spec.dim,):
        raise ValueError(f"parameter vector has shape {x.shape}, spec needs ({spec.dim},)")
    return x


def constrain(x, spec: ModelSpec) -> np.ndarray:
    """Map unconstrained vectors (last axis) to the constrained layout."""
    x = np.asarray(x, dtype=float)
    sl = spec.slices
    out = x.copy()
    sig = np.exp(x[..., sl["sigma"]])
    out[..., sl["sigma"]] = sig
    for j, name in enumerate(SIGMA_NAMES):
        out[..., sl[name]] = x[..., sl[name]] * sig[..., j : j + 1]
    if spec.estimated:
        out[..., sl["delta"]] = expit(x[..., sl["delta"]])
        out[..., sl["gamma"]] = expit(x[..., sl["gamma"]])
    return out


def unconstrain(c, spec: ModelSpec) -> np.ndarray:
    c = np.asarray(c, dtype=float)
    sl = spec.slices
    out = c.copy()
    sig = c[..., sl["sigma"]]
    out[..., sl["sigma"]] = np.log(sig)
    for j, name in enumerate(SIGMA_NAMES):
        out[..., sl[name]] = c[..., sl[name]] / sig[..., j : j + 1]
    if spec.estimated:
        out[..., sl["delta"]] = logit(c[..., sl["delta"]])
        out[..., sl["gamma"]] = logit(c[..., sl["gamma"]])
    return out


@dataclass(frozen=True)
class Dataset:
    """Test outcomes aggregated to (cell, week) groups for one assay."""

    assay: AssayKind
    n_weeks: int
    cell: np.ndarray
    week: np.ndarray
    n: np.ndarray
    y: np.ndarray

    def __post_init__(self):
        if self.n.size and (self.week.max() >= self.n_weeks or self.week.min() < 0):
            raise ValueError(f"week index outside [0, {self.n_weeks})")
        if np.any(self.y > self.n) or np.any(self.y < 0):
            raise ValueError("positives must lie in [0, n]")

    @classmethod
    def from_rows(cls, rows: Iterable[tuple[Covariates, int, int]], assay: AssayKind,
                  n_weeks: int | None = None) -> "Dataset":
        """Aggregate ``(covariates, week, result)`` rows."""
        rows = list(rows)
        cells = np.array([cell_index(c) for c, _, _ in rows], dtype=np.int64)
        weeks = np.array([w for _, w, _ in rows], dtype=np.int64)
        res = np.array([r for _, _, r in rows], dtype=np.int64)
        if np.any((res != 0) & (res != 1)):
            raise ValueError("results must be 0 or 1")
        if n_weeks is None:
            n_weeks = int(weeks.max()) + 1 if weeks.size else 1
        return cls.from_arrays(cells, weeks, res, assay, n_weeks)

    @classmethod
    def from_arrays(cls, cells, weeks, results, assay: AssayKind, n_weeks: int) -> "Dataset":
        cells = np.asarray(cells, dtype=np.int64)
        weeks = np.asarray(weeks, dtype=np.int64)
        results = np.asarray(results, dtype=np.int64)
        if weeks.size and (weeks.max() >= n_weeks or weeks.min() < 0):
            raise ValueError(f"week index outside [0, {n_weeks})")
        key = weeks * N_CELLS + cells
        uniq, inv = np.unique(key, return_inverse=True)
        n = np.bincount(inv, minlength=uniq.size).astype(float)
        y = np.bincount(inv, weights=results, minlength=uniq.size).astype(float)
        return cls(assay, int(n_weeks), (uniq % N_CELLS).astype(np.int64), (uniq // N_CELLS).astype(np.int64), n, y)

    @classmethod
    def from_records(cls, records: Sequence[TestRecord], anchor, n_weeks: int | None = None,
                     assay: AssayKind | None = None) -> "Dataset":
        kinds = {r.assay for r in records}
        if assay is None:
            if len(kinds) != 1:
                raise ValueError(f"records mix assays {sorted(k.value for k in kinds)}; select one")
            assay = kinds.pop()
        rows = [(r.covariates, week_of(r.date, anchor), r.result) for r in records if r.assay is assay]
        return cls.from_rows(rows, assay, n_weeks)

    @property
    def n_records(self) -> int:
        return int(self.n.sum())

    @property
    def n_positive(self) -> int:
        return int(self.y.sum())


class Posterior:
    """Log posterior and gradient of ``spec`` given ``data``, on the unconstrained scale."""

    def __init__(self, data: Dataset, spec: ModelSpec):
        if data.n_weeks > spec.n_weeks:
            raise ValueError(f"dataset spans {data.n_weeks} weeks but spec has {spec.n_weeks}")
        self.data = data
        self.spec = spec
        self._dim = spec.dim
        c = data.cell
        self._cells = (
            CELL_MALE.astype(float), CELL_AGE.astype(np.int64), CELL_RACE.astype(np.int64),
            CELL_COUNTY.astype(np.int64),
            (CELL_AGE * len(Sex) + CELL_SEX).astype(np.int64),
        )
        self._cell = c.astype(np.int64)
        self._week = data.week.astype(np.int64)
        self._inter = spec.interaction_index(CELL_AGE[c], CELL_SEX[c], data.week).astype(np.int64)
        self._n = data.n.astype(float)
        self._y = data.y.astype(float)
        self._scales = np.array([
            spec.prior_scale_fixed, spec.prior_scale_demo, spec.prior_scale_demo,
            spec.prior_scale_demo, spec.prior_scale_time, spec.interaction_scale,
        ])
        if spec.estimated:
            pri = spec.misclass.priors
            self._sens = pri.totals("sensitivity")
            self._spec = pri.totals("specificity")
            const = sum(_log_binom(s.total, s.positives) for s in pri.sensitivity + pri.specificity)
            self._fixed = (1.0, 1.0)
        else:
            self._sens = self._spec = (0, 0)
            const = 0.0
            self._fixed = (spec.misclass.delta, spec.misclass.gamma)
        self._const = float(const)
        self._args = (
            *self._cells, self._cell, self._week, self._inter,
            self._n, self._y, spec.n_weeks, spec.n_interaction,
            spec.kind is ModelKind.IGG, self._scales,
            spec.estimated, float(self._fixed[0]), float(self._fixed[1]),
            float(self._sens[0]), float(self._sens[1]), float(self._spec[0]), float(self._spec[1]),
            self._const,
        )

    @property
    def dim(self) -> int:
        return self._dim

    def _x(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if x.shape != (self._dim,):
            raise ValueError(f"parameter vector has shape {x.shape}, spec needs ({self._dim},)")
        return x

    def parts(self, x):
        """(loglik, logprior, grad_loglik, grad_logprior)."""
        if isinstance(x, ParamVector):
            x = x.values
        return _kernel.logp_grad(self._x(x), *self._args)

    def __call__(self, x):
        lik, pri, gl, gp = _kernel.logp_grad(self._x(x), *self._args)
        lp = lik + pri
        return (lp if lp == lp else -np.inf), gl + gp

    def log_likelihood(self, x) -> float:
        return self.parts(x)[0]

    def log_prior(self, x) -> float:
        return self.parts(x)[1]

    def constrain(self, x):
        return constrain(x, self.spec)

    def restrict(self, free: Sequence[int], base=None):
        """Log posterior over the coordinates ``free`` with the rest held at ``base``."""
        free = np.asarray(free, dtype=np.int64)
        base = np.zeros(self.dim) if base is None else np.array(base, dtype=float)

        def f(z):
            x = base.copy()
            x[free] = z
            lp, g = self(x)
            return lp, g[free]

        return f


def _log_binom(n: int, k: int) -> float:
    return float(gammaln(n + 1) - gammaln(k + 1) - gammaln(n - k + 1))


def log_likelihood(p, d: Dataset, spec: ModelSpec) -> float:
    if d.n_records == 0:
        raise ValueError("dataset is empty")
    return Posterior(d, spec).log_likelihood(p)


def log_prior(p, spec: ModelSpec) -> float:
    return Posterior(_empty(spec), spec).log_prior(p)


def log_prior_grad(p, spec: ModelSpec) -> np.ndarray:
    return Posterior(_empty(spec), spec).parts(p)[3]


def log_posterior_and_grad(p, d: Dataset, spec: ModelSpec):
    return Posterior(d, spec)(p)


def _empty(spec: ModelSpec) -> Dataset:
    z = np.zeros(0, dtype=np.int64)
    return Dataset(AssayKind.PCR, spec.n_weeks, z, z, np.zeros(0), np.zeros(0))


def true_prevalence(eta):
    return expit(eta)


def observed_prob(pi, delta, gamma):
    """Probability of a positive result given true prevalence and assay accuracy."""
    return pi * delta + (1.0 - pi) * (1.0 - gamma)


def linear_predictor(p, c: Covariates, w: int, spec: ModelSpec) -> float:
    x = _values(p, spec)
    eta = cell_eta(constrain(x, spec)[None, :], spec, w)
    return float(eta[0, cell_index(c)])


def cell_eta(draws: np.ndarray, spec: ModelSpec, week: int) -> np.ndarray:
    """Linear predictor for all 60 cells at ``week``.

    ``draws`` is (n_draws, dim) on the constrained scale; returns (n_draws, 60).
    """
    if not 0 <= week < spec.n_weeks:
        raise ValueError(f"week {week} outside [0, {spec.n_weeks})")
    sl = spec.slices
    d = np.asarray(draws, dtype=float)
    inter = spec.interaction_index(CELL_AGE, CELL_SEX, np.full(N_CELLS, week))
    return (
        d[:, 0:1]
        + d[:, 1:2] * CELL_MALE
        + d[:, sl["age"]][:, CELL_AGE]
        + d[:, sl["race"]][:, CELL_RACE]
        + d[:, sl["county"]][:, CELL_COUNTY]
        + d[:, sl["time"]][:, [week]]
        + d[:, sl["interaction"]][:, inter]
    )


def study_posterior(studies: Sequence) -> callable:
    """Log posterior of an assay probability on the logit scale given validation studies.

    Uniform prior on the probability; binomial coefficients are kept.
    """
    ys = float(sum(s.positives for s in studies))
    ns = float(sum(s.total for s in studies))
    const = sum(_log_binom(s.total, s.positives) for s in studies)

    def f(z):
        z = np.asarray(z, dtype=float)
        t = float(z[0])
        if not np.isfinite(t):
            return -np.inf, np.full(1, np.nan)
        log_p = -np.logaddexp(0.0, -t)
        log_q = -np.logaddexp(0.0, t)
        theta = expit(t)
        lp = ys * log_p + (ns - ys) * log_q + const + log_p + log_q
        g = ys - ns * theta + 1.0 - 2.0 * theta
        return lp, np.array([g])

    return f
