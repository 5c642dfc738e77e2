import dataclasses

import numpy as np
import pytest
from scipy import stats

from mrp_sero import simulate
from mrp_sero.domain import CELL_AGE, N_CELLS, AgeGroup, Population
from mrp_sero.model import Estimated, Fixed, ModelKind, ModelSpec
from mrp_sero.poststrat import poststratify_week
from mrp_sero.sampler import SamplerConfig
from mrp_sero.simulate import TruthConfig, generate


def test_default_tables_echo_margins():
    comm = simulate.default_community()
    counts = np.asarray(comm.counts, float)
    old = counts[CELL_AGE >= AgeGroup.A65_74.code].sum() / counts.sum()
    assert old == pytest.approx((9 + 6.6) / 100.6, abs=2e-3)
    assert comm.total == pytest.approx(simulate.COMMUNITY_SIZE, abs=30)


def test_seed_determinism():
    cfg = TruthConfig(seed=3, n_weeks=3, tests_per_week=100)
    a, b = generate(cfg), generate(cfg)
    assert a.records == b.records
    assert np.array_equal(a.true_params, b.true_params)
    assert not np.array_equal(generate(dataclasses.replace(cfg, seed=4)).results, a.results)


def test_truth_self_consistency():
    out = generate(TruthConfig(seed=1, n_weeks=4, tests_per_week=50))
    for pop, table in ((Population.COMMUNITY, out.community), (Population.HOSPITAL, out.hospital)):
        again = [poststratify_week(out.true_params[None, :], table, w, out.spec)[0] for w in range(4)]
        assert np.array_equal(np.array(again), out.truth[pop])


def test_perfect_assay_zero_prevalence_all_negative():
    params = simulate.scenario_params(ModelKind.PCR, 3)
    params["beta1"] = np.array([-60.0])
    out = generate(TruthConfig(seed=0, n_weeks=3, tests_per_week=300, delta=1.0, gamma=1.0, params=params))
    assert out.results.sum() == 0


def test_unit_bias_reproduces_table_mix():
    out = generate(TruthConfig(seed=9, n_weeks=1, tests_per_week=50_000, bias={}))
    observed = np.bincount(out.cells, minlength=N_CELLS)
    expected = np.asarray(out.hospital.counts, float)
    expected = expected / expected.sum() * observed.sum()
    keep = expected > 5
    chi2 = stats.chisquare(observed[keep], expected[keep] * observed[keep].sum() / expected[keep].sum())
    assert chi2.pvalue > 0.001


def test_default_bias_oversamples_older_patients():
    out = generate(TruthConfig(seed=2, n_weeks=2, tests_per_week=2000))
    old = CELL_AGE >= AgeGroup.A65_74.code
    sample_share = np.mean(old[out.cells])
    comm = np.asarray(out.community.counts, float)
    assert sample_share > comm[old].sum() / comm.sum()


def test_bias_validation():
    with pytest.raises(ValueError, match="positive"):
        simulate.bias_vector({"sex": {"male": 0.0}})
    with pytest.raises(ValueError, match="margin"):
        simulate.bias_vector({"income": {}})
    zero = simulate.default_hospital().counts * 0
    zero[0] = 1
    with pytest.raises(ValueError, match="zero"):
        generate(TruthConfig(n_weeks=1, tests_per_week=1,
                             bias={"sex": {"female": 1e-300}, "county": {"lake": 1e-300}, "race": {"black": 1e-300}},
                             hospital=simulate.PoststratTable(Population.HOSPITAL, zero)))


def test_truth_config_validation():
    with pytest.raises(ValueError):
        TruthConfig(delta=0.0)
    with pytest.raises(ValueError):
        TruthConfig(n_weeks=0)
    with pytest.raises(ValueError, match="missing"):
        generate(TruthConfig(params={"beta1": [0.0]}))


def test_prior_draw_respects_support(pcr_priors):
    spec = ModelSpec(ModelKind.PCR, 4, Estimated(pcr_priors))
    rng = np.random.default_rng(0)
    draws = np.array([simulate.prior_draw(spec, rng) for _ in range(500)])
    assert np.all(draws[:, spec.slices["sigma"]] > 0)
    assert draws[:, spec.slices["delta"]].mean() == pytest.approx(201 / 259, abs=0.005)


def test_thin_and_rank_pvalue():
    v = np.arange(2000.0).reshape(4, 500)
    t = simulate.thin(v, 199)
    assert t.shape == (199,) and t[0] == 0 and t[-1] == 1999
    uniform = np.tile(np.arange(200), 5)
    assert simulate.rank_pvalue(uniform, 199, 20) > 0.99
    assert simulate.rank_pvalue(np.zeros(100, int), 199, 20) < 1e-10


def test_sbc_requires_replications(pcr_priors):
    spec = ModelSpec(ModelKind.PCR, 2, Estimated(pcr_priors))
    with pytest.raises(ValueError):
        simulate.sbc_run(0, spec, SamplerConfig())


def test_sbc_smoke(pcr_priors):
    spec = ModelSpec(ModelKind.PCR, 2, Estimated(pcr_priors))
    rep = simulate.sbc_run(2, spec, SamplerConfig(warmup=150, draws=100), tests_per_week=50, seed=1,
                           n_rank_draws=99, max_rhat=10.0)
    assert rep.used + rep.excluded == 2
    for r in rep.ranks.values():
        assert np.all((r >= 0) & (r <= 99))


def test_replicate_fits_smoke():
    cfg = TruthConfig(n_weeks=2, tests_per_week=100)
    res = simulate.replicate_fits(1, cfg, {"fixed": ModelSpec(ModelKind.PCR, 2, Fixed(0.7, 0.995))},
                                  SamplerConfig(warmup=150, draws=100))
    r = res[0]
    assert r.truth.shape == (2,)
    assert np.all(r.lower["fixed"] <= r.mean["fixed"]) and np.all(r.mean["fixed"] <= r.upper["fixed"])
