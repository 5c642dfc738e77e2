"""Synthetic ground truth: populations, biased hospital sampling, latent
weekly prevalence and imperfect assays.

The default tables and sampling skews are scenario values echoing the
published community, hospital and PCR-sample demographics of Lake and Porter
counties.  They are synthetic (margins combined under independence), not
census data.
"""
from __future__ import annotations

import datetime as dt
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Mapping, Optional, Sequence

import numpy as np
from scipy import stats
from scipy.special import expit, logit

from . import diagnostics as diag
from .domain import (
    CELL_AGE, CELL_COUNTY, CELL_RACE, CELL_SEX, N_CELLS, AgeGroup, AssayKind,
    County, Covariates, MisclassPriorData, Population, PoststratTable, Race,
    Sex, TestRecord, covariates_of,
)
from .model import Dataset, Estimated, Fixed, ModelKind, ModelSpec, cell_eta, observed_prob
from .pipeline import fit
from .poststrat import poststratify_week
from .sampler import SamplerConfig

log = logging.getLogger(__name__)

MARGIN_CODES = {"sex": (Sex, CELL_SEX), "age": (AgeGroup, CELL_AGE), "race": (Race, CELL_RACE),
                "county": (County, CELL_COUNTY)}

COMMUNITY_MARGINS = {
    "sex": {"female": 51, "male": 49},
    "age": {"a0_17": 24, "a18_34": 21, "a35_64": 40, "a65_74": 9, "a75plus": 6.6},
    "race": {"black": 19, "white": 69, "other": 12},
    "county": {"lake": 74, "porter": 26},
}
COMMUNITY_SIZE = 654890

HOSPITAL_MARGINS = {
    "sex": {"female": 57, "male": 43},
    "age": {"a0_17": 8.7, "a18_34": 12, "a35_64": 30, "a65_74": 20, "a75plus": 29},
    "race": {"black": 19, "white": 65, "other": 16},
    "county": {"lake": 88, "porter": 12},
}
HOSPITAL_SIZE = 35838

PCR_SAMPLE_MARGINS = {
    "sex": {"female": 59, "male": 41},
    "age": {"a0_17": 3, "a18_34": 10, "a35_64": 46, "a65_74": 24, "a75plus": 17},
    "race": {"black": 14, "white": 72, "other": 14},
    "county": {"lake": 84, "porter": 16},
}


def _margin_vector(margin: str, shares: Mapping[str, float]) -> np.ndarray:
    enum_cls, _ = MARGIN_CODES[margin]
    v = np.array([float(shares[l.value]) for l in enum_cls])
    return v / v.sum()


def cell_shares(margins: Mapping[str, Mapping[str, float]]) -> np.ndarray:
    """Per-cell shares implied by independent margins."""
    out = np.ones(N_CELLS)
    for m, (_, codes) in MARGIN_CODES.items():
        out = out * _margin_vector(m, margins[m])[codes]
    return out


def table_from_margins(population: Population, margins, size: int) -> PoststratTable:
    return PoststratTable(population, np.round(cell_shares(margins) * size).astype(np.int64))


def default_community() -> PoststratTable:
    return table_from_margins(Population.COMMUNITY, COMMUNITY_MARGINS, COMMUNITY_SIZE)


def default_hospital() -> PoststratTable:
    return table_from_margins(Population.HOSPITAL, HOSPITAL_MARGINS, HOSPITAL_SIZE)


def default_bias() -> dict[str, dict[str, float]]:
    """Per-level sampling weights turning the hospital mix into the PCR-sample mix."""
    out = {}
    for m in MARGIN_CODES:
        enum_cls, _ = MARGIN_CODES[m]
        samp = _margin_vector(m, PCR_SAMPLE_MARGINS[m])
        hosp = _margin_vector(m, HOSPITAL_MARGINS[m])
        out[m] = {l.value: float(s / h) for l, s, h in zip(enum_cls, samp, hosp)}
    return out


def bias_vector(bias: Mapping[str, Mapping[str, float]]) -> np.ndarray:
    """Multiplicative per-cell sampling weight; unspecified levels weigh 1."""
    w = np.ones(N_CELLS)
    for m, levels in bias.items():
        if m not in MARGIN_CODES:
            raise ValueError(f"unknown bias margin {m!r}")
        enum_cls, codes = MARGIN_CODES[m]
        vec = np.ones(len(enum_cls))
        for label, weight in levels.items():
            lvl = enum_cls.parse(label)
            if not weight > 0:
                raise ValueError(f"bias weight for {m}={label} must be positive")
            vec[lvl.code] = weight
        w = w * vec[codes]
    return w


def scenario_params(kind: ModelKind, n_weeks: int, base_prevalence: float = 0.04,
                    surge: float = 0.0) -> dict[str, np.ndarray]:
    """Default constrained-scale truth.

    ``surge`` adds a bump to the weekly effects peaking two-thirds of the way
    through the window, a crude stand-in for an autumn wave.
    """
    t = np.arange(n_weeks)
    time = 0.15 * np.sin(2 * np.pi * t / max(n_weeks, 2))
    if surge:
        centre = 2 * (n_weeks - 1) / 3
        time = time + surge * np.exp(-0.5 * ((t - centre) / max(n_weeks / 8, 1)) ** 2)
    age = np.array([0.25, 0.2, 0.0, -0.15, -0.3])
    race = np.array([0.2, -0.1, 0.05])
    county = np.array([0.1, -0.1])
    if kind is ModelKind.PCR:
        inter = np.array([0.05, -0.05, 0.1, -0.1, 0.0, 0.0, -0.05, 0.05, 0.1, -0.1])
    else:
        inter = 0.05 * np.sin(np.arange(5 * n_weeks))
    sig = [np.sqrt(np.mean(v ** 2)) + 0.05 for v in (age, race, county, time, inter)]
    return {
        "beta1": np.array([logit(base_prevalence)]),
        "beta2": np.array([0.1]),
        "age": age, "race": race, "county": county, "time": time,
        "interaction": inter, "sigma": np.array(sig),
    }


def prior_draw(spec: ModelSpec, rng: np.random.Generator) -> np.ndarray:
    """One draw from the prior of ``spec`` on the constrained scale.

    Assay probabilities are drawn from their validation-study posteriors
    under uniform priors, which is the prior the model actually imposes.
    """
    sl = spec.slices
    x = np.empty(spec.dim)
    x[0:2] = rng.normal(0.0, spec.prior_scale_fixed, 2)
    scales = [spec.prior_scale_demo] * 3 + [spec.prior_scale_time, spec.interaction_scale]
    sig = np.abs(rng.normal(0.0, scales))
    x[sl["sigma"]] = sig
    for j, name in enumerate(("age", "race", "county", "time", "interaction")):
        s = sl[name]
        x[s] = sig[j] * rng.standard_normal(s.stop - s.start)
    if spec.estimated:
        pri = spec.misclass.priors
        ys, ns = pri.totals("sensitivity")
        yg, ng = pri.totals("specificity")
        x[sl["delta"]] = rng.beta(1 + ys, 1 + ns - ys)
        x[sl["gamma"]] = rng.beta(1 + yg, 1 + ng - yg)
    return x


@dataclass(frozen=True)
class TruthConfig:
    seed: int = 20200501
    n_weeks: int = 10
    tests_per_week: int = 500
    kind: ModelKind = ModelKind.PCR
    assay: AssayKind = AssayKind.PCR
    delta: float = 0.7
    gamma: float = 0.995
    params: Optional[Mapping[str, Sequence[float]]] = None
    draw_from_prior: bool = False
    bias: Mapping[str, Mapping[str, float]] = field(default_factory=default_bias)
    community: Optional[PoststratTable] = None
    hospital: Optional[PoststratTable] = None
    anchor: dt.date = dt.date(2020, 5, 1)

    def __post_init__(self):
        for name in ("delta", "gamma"):
            v = getattr(self, name)
            if not 0.0 < v <= 1.0:
                raise ValueError(f"{name} must lie in (0, 1]")
        if self.n_weeks < 1 or self.tests_per_week < 0:
            raise ValueError("n_weeks must be positive and tests_per_week non-negative")

    @property
    def truth_spec(self) -> ModelSpec:
        return ModelSpec(self.kind, self.n_weeks, Fixed())


@dataclass
class SimOutput:
    records: list[TestRecord]
    community: PoststratTable
    hospital: PoststratTable
    truth: dict[Population, np.ndarray]
    true_params: np.ndarray  # constrained layout of ``spec``
    spec: ModelSpec
    delta: float
    gamma: float
    cells: np.ndarray = field(repr=False)
    weeks: np.ndarray = field(repr=False)
    results: np.ndarray = field(repr=False)
    assay: AssayKind = AssayKind.PCR

    def dataset(self, n_weeks: Optional[int] = None) -> Dataset:
        return Dataset.from_arrays(self.cells, self.weeks, self.results, self.assay,
                                   n_weeks or self.spec.n_weeks)

    def truth_by_name(self) -> dict[str, float]:
        out = dict(zip(self.spec.names(), map(float, self.true_params)))
        out["delta"], out["gamma"] = self.delta, self.gamma
        return out


def _params_vector(spec: ModelSpec, params: Mapping[str, Sequence[float]]) -> np.ndarray:
    sl = spec.slices
    x = np.zeros(spec.dim)
    for name in ("beta1", "beta2", "age", "race", "county", "time", "interaction", "sigma"):
        if name not in params:
            raise ValueError(f"truth parameters missing {name!r}")
        v = np.atleast_1d(np.asarray(params[name], dtype=float))
        s = sl[name]
        if v.size != s.stop - s.start:
            raise ValueError(f"truth {name!r} has {v.size} values, expected {s.stop - s.start}")
        x[s] = v
    if np.any(x[sl["sigma"]] <= 0):
        raise ValueError("true sigmas must be positive")
    return x


def true_series(params: np.ndarray, spec: ModelSpec, table: PoststratTable) -> np.ndarray:
    """Exact weekly population prevalence implied by ``params`` (constrained layout)."""
    return np.array([poststratify_week(params[None, :], table, w, spec)[0] for w in range(spec.n_weeks)])


def simulate_from(params: np.ndarray, spec: ModelSpec, delta: float, gamma: float,
                  cfg: TruthConfig, rng: np.random.Generator) -> SimOutput:
    community = cfg.community or default_community()
    hospital = cfg.hospital or default_hospital()
    weight = np.asarray(hospital.counts, dtype=float) * bias_vector(cfg.bias)
    if not weight.sum() > 0:
        raise ValueError("sampling weights sum to zero")
    prob = weight / weight.sum()
    T, n = spec.n_weeks, cfg.tests_per_week
    cells = rng.choice(N_CELLS, size=T * n, p=prob)
    weeks = np.repeat(np.arange(T), n)
    days = rng.integers(0, 7, size=T * n)
    eta = np.stack([cell_eta(params[None, :], spec, w)[0] for w in range(T)])  # (T, 60)
    p_obs = observed_prob(expit(eta[weeks, cells]), delta, gamma)
    results = (rng.uniform(size=T * n) < p_obs).astype(np.int64)
    covs = [covariates_of(j) for j in range(N_CELLS)]
    records = [
        TestRecord(cfg.anchor + dt.timedelta(days=int(7 * w + d)), covs[c], cfg.assay, int(r))
        for c, w, d, r in zip(cells, weeks, days, results)
    ]
    truth = {t.population: true_series(params, spec, t) for t in (community, hospital)}
    return SimOutput(records, community, hospital, truth, params, spec, delta, gamma,
                     cells.astype(np.int64), weeks.astype(np.int64), results, cfg.assay)


def generate(cfg: TruthConfig) -> SimOutput:
    """Simulate one testing stream; identical configs give identical output."""
    rng = np.random.default_rng(cfg.seed)
    spec = cfg.truth_spec
    if cfg.draw_from_prior:
        params = prior_draw(spec, rng)
    else:
        params = _params_vector(spec, cfg.params or scenario_params(cfg.kind, cfg.n_weeks))
    return simulate_from(params, spec, cfg.delta, cfg.gamma, cfg, rng)


# ---------------------------------------------------------------------------
# replicated studies


def _rep_rng(seed: int, rep: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, rep]))


def thin(values: np.ndarray, n: int) -> np.ndarray:
    """``n`` draws spread evenly over the pooled (chains, draws) array."""
    flat = values.reshape(-1, *values.shape[2:])
    idx = np.linspace(0, flat.shape[0] - 1, n).round().astype(int)
    return flat[idx]


@dataclass
class SBCReport:
    ranks: dict[str, np.ndarray]
    pvalues: dict[str, float]
    n_rank_draws: int
    bins: int
    excluded: int
    used: int

    def uniform(self, alpha: float = 0.01) -> dict[str, bool]:
        return {k: p > alpha for k, p in self.pvalues.items()}


def rank_pvalue(ranks: np.ndarray, n_rank_draws: int, bins: int) -> float:
    """Chi-square p-value for uniformity of ranks in {0, ..., n_rank_draws}."""
    edges = np.linspace(0, n_rank_draws + 1, bins + 1)
    counts, _ = np.histogram(ranks, bins=edges)
    return float(stats.chisquare(counts).pvalue)


def _sbc_one(args):
    rep, seed, spec, fit_spec, cfg, truth_cfg, gamma_override, names, n_rank, max_rhat = args
    rng = _rep_rng(seed, rep)
    x = prior_draw(spec, rng)
    truth_spec = ModelSpec(spec.kind, spec.n_weeks, Fixed())
    base = x[: truth_spec.dim]
    sl = spec.slices
    delta = float(x[sl["delta"]][0]) if spec.estimated else spec.misclass.delta
    gamma = float(x[sl["gamma"]][0]) if spec.estimated else spec.misclass.gamma
    if gamma_override is not None:
        gamma = gamma_override
    sim = simulate_from(base, truth_spec, delta, gamma, truth_cfg, rng)
    draws = fit(sim.dataset(), fit_spec, replace(cfg, seed=int(rng.integers(2**63))))
    d = diag.diagnostics(draws)
    if d.degenerate.any() or d.worst_rhat() > max_rhat:
        return None
    truth = sim.truth_by_name()
    out = {}
    for name in names:
        if name == "pi_avg":
            vals = thin(poststratify_week(draws, sim.community, 0, fit_spec).reshape(draws.n_chains, -1), n_rank)
            out[name] = int(np.sum(vals < sim.truth[Population.COMMUNITY][0]))
        elif name in draws.names:
            vals = thin(draws.column(name), n_rank)
            out[name] = int(np.sum(vals < truth[name]))
    return out


def sbc_run(n_replications: int, spec: ModelSpec, cfg: SamplerConfig, *, tests_per_week: int = 200,
            seed: int = 0, fit_spec: Optional[ModelSpec] = None, gamma_override: Optional[float] = None,
            names: Sequence[str] = ("beta1", "sigma_time", "delta", "gamma", "pi_avg"),
            n_rank_draws: int = 199, bins: int = 20, max_rhat: float = 1.05,
            workers: int = 1) -> SBCReport:
    """Simulation-based calibration of the full simulate -> fit -> poststratify pipeline.

    Each replication draws a truth from the prior of ``spec``, simulates a
    testing stream and fits ``fit_spec`` (defaults to ``spec``; pass a
    misspecified model for a negative control).  ``pi_avg`` is the week-0
    community prevalence.  Replications whose fit has any R-hat above
    ``max_rhat`` are dropped and counted in ``excluded``.
    """
    if n_replications < 1:
        raise ValueError("n_replications must be positive")
    fit_spec = fit_spec or spec
    truth_cfg = TruthConfig(n_weeks=spec.n_weeks, tests_per_week=tests_per_week, kind=spec.kind)
    jobs = [(r, seed, spec, fit_spec, cfg, truth_cfg, gamma_override, tuple(names), n_rank_draws, max_rhat)
            for r in range(n_replications)]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as ex:
            results = list(ex.map(_sbc_one, jobs))
    else:
        results = [_sbc_one(j) for j in jobs]
    kept = [r for r in results if r is not None]
    excluded = len(results) - len(kept)
    if excluded:
        log.info("SBC: %d of %d replications excluded for R-hat > %s", excluded, len(results), max_rhat)
    ranks = {}
    for name in names:
        vals = [r[name] for r in kept if name in r]
        if vals:
            ranks[name] = np.array(vals)
    pvalues = {k: rank_pvalue(v, n_rank_draws, bins) for k, v in ranks.items()}
    return SBCReport(ranks, pvalues, n_rank_draws, bins, excluded, len(kept))


@dataclass
class ReplicationResult:
    truth: np.ndarray  # (T,) community prevalence
    mean: dict[str, np.ndarray]
    lower: dict[str, np.ndarray]
    upper: dict[str, np.ndarray]
    worst_rhat: dict[str, float]
    divergences: dict[str, int]


def _replicate_one(args):
    rep, seed, truth_cfg, fit_specs, cfg, level = args
    out = generate(replace(truth_cfg, seed=int(np.random.SeedSequence([seed, rep]).generate_state(1)[0])))
    data = out.dataset()
    res = ReplicationResult(out.truth[Population.COMMUNITY], {}, {}, {}, {}, {})
    lo_q, hi_q = (1 - level) / 2, 1 - (1 - level) / 2
    for label, spec in fit_specs.items():
        draws = fit(data, spec, replace(cfg, seed=seed * 1000 + rep))
        vals = np.stack([poststratify_week(draws, out.community, w, spec) for w in range(spec.n_weeks)])
        res.mean[label] = vals.mean(axis=1)
        res.lower[label] = np.quantile(vals, lo_q, axis=1)
        res.upper[label] = np.quantile(vals, hi_q, axis=1)
        d = diag.diagnostics(draws)
        res.worst_rhat[label] = d.worst_rhat()
        res.divergences[label] = d.divergences
    return res


def replicate_fits(n_replications: int, truth_cfg: TruthConfig, fit_specs: Mapping[str, ModelSpec],
                   cfg: SamplerConfig, seed: int = 0, level: float = 0.95,
                   workers: int = 1) -> list[ReplicationResult]:
    """Repeatedly simulate from a fixed truth and fit each of ``fit_specs``.

    Returns per-replication community truth plus posterior means and central
    ``level`` intervals for every week, keyed by the labels of ``fit_specs``.
    """
    jobs = [(r, seed, truth_cfg, dict(fit_specs), cfg, level) for r in range(n_replications)]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as ex:
            return list(ex.map(_replicate_one, jobs))
    return [_replicate_one(j) for j in jobs]
