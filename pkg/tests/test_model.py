import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from numpy.testing import assert_allclose
from scipy import stats
from scipy.special import expit, log_expit, logit

from mrp_sero.domain import (
    AgeGroup, AssayKind, County, Covariates, MisclassPriorData, PriorStudy, Race, Sex, covariates_of,
)
from mrp_sero.model import (
    Dataset, Estimated, Fixed, ModelKind, ModelSpec, ParamVector, Posterior, constrain,
    linear_predictor, log_likelihood, log_posterior_and_grad, log_prior, log_prior_grad,
    observed_prob, true_prevalence, unconstrain,
)
from mrp_sero.oracle import finite_diff_gradient, relative_error

import reference


def _point(spec, rng, scale=1.0):
    return rng.normal(0.0, scale, spec.dim)


def test_dimension_follows_spec(pcr_priors):
    assert ModelSpec(ModelKind.PCR, 10).dim == 12 + 10 + 10 + 5
    assert ModelSpec(ModelKind.IGG, 10).dim == 12 + 10 + 50 + 5
    assert ModelSpec(ModelKind.PCR, 10, Estimated(pcr_priors)).dim == 12 + 10 + 10 + 5 + 2
    spec = ModelSpec(ModelKind.PCR, 3)
    assert len(spec.names()) == spec.dim
    with pytest.raises(ValueError, match="shape"):
        ParamVector(spec, np.zeros(spec.dim + 1))


def test_spec_validation():
    with pytest.raises(ValueError):
        Fixed(0.0, 1.0)
    with pytest.raises(ValueError):
        Fixed(0.9, 1.01)
    with pytest.raises(ValueError):
        ModelSpec(ModelKind.PCR, 0)
    with pytest.raises(ValueError):
        ModelSpec(ModelKind.PCR, 3, prior_scale_time=0)


def test_spec_dict_round_trip(pcr_priors):
    for spec in (ModelSpec(ModelKind.IGG, 7), ModelSpec(ModelKind.PCR, 3, Estimated(pcr_priors))):
        back = ModelSpec.from_dict(spec.to_dict())
        assert back == spec
        assert back.digest() == spec.digest()
    assert ModelSpec(ModelKind.IGG, 7).digest() != ModelSpec(ModelKind.IGG, 8).digest()


def test_linear_predictor_examples():
    spec = ModelSpec(ModelKind.PCR, 2)
    male = Covariates(Sex.MALE, AgeGroup.A0_17, Race.BLACK, County.LAKE)
    female = Covariates(Sex.FEMALE, AgeGroup.A0_17, Race.BLACK, County.LAKE)
    assert linear_predictor(np.zeros(spec.dim), male, 1, spec) == 0.0
    p = ParamVector.zeros(spec).values.copy()
    p[0], p[1] = 0.3, 0.2
    assert linear_predictor(p, male, 0, spec) == pytest.approx(0.4, abs=1e-15)
    assert linear_predictor(p, female, 0, spec) == pytest.approx(0.2, abs=1e-15)


def test_linear_predictor_matches_reference(any_spec, rng):
    x = _point(any_spec, rng)
    p = reference.unpack(x, any_spec)
    for j in (0, 17, 42, 59):
        for w in range(any_spec.n_weeks):
            assert linear_predictor(x, covariates_of(j), w, any_spec) == pytest.approx(
                reference.eta(p, any_spec, j, w), abs=1e-12)


def test_true_prevalence():
    assert true_prevalence(0.0) == 0.5
    assert true_prevalence(800.0) == 1.0 and true_prevalence(-800.0) == 0.0
    assert true_prevalence(logit(0.14)) == pytest.approx(0.14, abs=1e-12)
    grid = np.linspace(-30, 30, 101)
    assert np.all(np.diff(true_prevalence(grid)) >= 0)


def test_observed_prob_examples():
    assert observed_prob(0.3, 1.0, 1.0) == 0.3
    assert observed_prob(0.0, 0.7, 1.0) == 0.0
    assert observed_prob(0.10, 0.70, 0.995) == pytest.approx(0.0745, abs=1e-15)


@given(st.floats(0, 1), st.floats(0, 1), st.floats(0.5, 1), st.floats(0.5, 1))
def test_observed_prob_affine_and_increasing(a, b, delta, gamma):
    pa, pb = observed_prob(a, delta, gamma), observed_prob(b, delta, gamma)
    mid = observed_prob(0.5 * (a + b), delta, gamma)
    assert mid == pytest.approx(0.5 * (pa + pb), abs=1e-14)
    if delta + gamma > 1 and a < b:
        assert pa <= pb
    assert 0.0 <= pa <= 1.0


def _one_record(result, cell=0, week=0, n_weeks=1):
    return Dataset.from_arrays([cell], [week], [result], AssayKind.PCR, n_weeks)


def test_single_record_loglik():
    spec = ModelSpec(ModelKind.PCR, 1, Fixed(1.0, 1.0))
    assert log_likelihood(np.zeros(spec.dim), _one_record(1), spec) == pytest.approx(np.log(0.5), abs=1e-15)


def test_empty_dataset_rejected():
    spec = ModelSpec(ModelKind.PCR, 1)
    empty = Dataset.from_arrays([], [], [], AssayKind.PCR, 1)
    with pytest.raises(ValueError, match="empty"):
        log_likelihood(np.zeros(spec.dim), empty, spec)


def test_empty_study_contributes_zero():
    data = _one_record(1)
    base = MisclassPriorData.from_pairs([[70, 100]], [[368, 371]])
    with_empty = MisclassPriorData.from_pairs([[70, 100], [0, 0]], [[0, 0], [368, 371]])
    a, b = ModelSpec(ModelKind.PCR, 1, Estimated(base)), ModelSpec(ModelKind.PCR, 1, Estimated(with_empty))
    x = np.random.default_rng(0).normal(size=a.dim)
    assert log_likelihood(x, data, a) == log_likelihood(x, data, b)


def test_specificity_study_binomial_term():
    gamma = 0.9893
    data = _one_record(0)
    est = ModelSpec(ModelKind.PCR, 1, Estimated(MisclassPriorData((), (PriorStudy(368, 371),))))
    delta = 0.8
    fixed = ModelSpec(ModelKind.PCR, 1, Fixed(delta, gamma))
    x = np.zeros(est.dim)
    x[-2], x[-1] = logit(delta), logit(gamma)
    diff = log_likelihood(x, data, est) - log_likelihood(x[:-2], data, fixed)
    assert diff == pytest.approx(stats.binom.logpmf(368, 371, gamma), abs=1e-10)


def test_loglik_matches_per_record_reference(any_spec, small_sim, rng):
    data = small_sim.dataset()
    for _ in range(3):
        x = _point(any_spec, rng)
        got = log_likelihood(x, data, any_spec)
        want = reference.log_likelihood(x, any_spec, small_sim.cells, small_sim.weeks, small_sim.results)
        assert got == pytest.approx(want, rel=1e-11, abs=1e-9)


def test_prior_matches_scipy_reference(any_spec, rng):
    for _ in range(3):
        x = _point(any_spec, rng)
        assert log_prior(x, any_spec) == pytest.approx(reference.log_prior(x, any_spec), rel=1e-12, abs=1e-10)


def test_half_normal_limit_at_zero():
    spec = ModelSpec(ModelKind.PCR, 1)
    x = np.zeros(spec.dim)
    sl = spec.slices["sigma"]
    x[sl] = -40.0  # sigma -> 0+
    # prior on the sigma coordinate minus its Jacobian term log(sigma)
    lp = log_prior(x, spec) - (-40.0 * 5)
    lp_fixed = 2 * stats.norm.logpdf(0, 0, 2.5)
    lp_raw = stats.norm.logpdf(np.zeros(sl.start - 2)).sum()
    want = lp_fixed + lp_raw + 3 * (np.log(2) - np.log(2.5 * np.sqrt(2 * np.pi)))
    want += 2 * (np.log(2) - np.log(5 * np.sqrt(2 * np.pi)))  # time and interaction (scale 2.5 for pcr)
    want += (np.log(2) - np.log(2.5 * np.sqrt(2 * np.pi))) - (np.log(2) - np.log(5 * np.sqrt(2 * np.pi)))
    assert lp == pytest.approx(want, abs=1e-12)


def test_doubling_an_effect_changes_prior_by_three_halves_e_squared():
    spec = ModelSpec(ModelKind.PCR, 2)
    s = 1.7
    x = np.zeros(spec.dim)
    x[spec.slices["sigma"]] = np.log(s)
    e = 0.9
    x[2] = e / s  # one age effect of size e
    before = log_prior(x, spec)
    x[2] = 2 * e / s
    assert log_prior(x, spec) - before == pytest.approx(-3 * e ** 2 / (2 * s ** 2), abs=1e-12)


def test_prior_gradient_matches_finite_differences(any_spec, rng):
    f = lambda z: log_prior(z, any_spec)
    for _ in range(5):
        x = _point(any_spec, rng)
        err = relative_error(log_prior_grad(x, any_spec), finite_diff_gradient(f, x))
        assert err.max() < 1e-6


def test_posterior_gradient_matches_finite_differences(any_spec, small_sim, rng):
    post = Posterior(small_sim.dataset(), any_spec)
    f = lambda z: post(z)[0]
    for _ in range(5):
        x = _point(any_spec, rng)
        err = relative_error(post(x)[1], finite_diff_gradient(f, x))
        assert err.max() < 1e-5


def test_symmetric_two_records_have_zero_intercept_gradient():
    spec = ModelSpec(ModelKind.PCR, 1, Fixed(1.0, 1.0))
    data = Dataset.from_arrays([5, 5], [0, 0], [1, 0], AssayKind.PCR, 1)
    _, g = log_posterior_and_grad(np.zeros(spec.dim), data, spec)
    assert g[0] == pytest.approx(0.0, abs=1e-14)


def test_fixed_perfect_assay_is_plain_logistic(small_sim, rng):
    spec = ModelSpec(ModelKind.PCR, 4, Fixed(1.0, 1.0))
    data = small_sim.dataset()
    for _ in range(5):
        x = _point(spec, rng, 0.5)  # keep |eta| well inside the probability clamp
        p = reference.unpack(x, spec)
        e = reference.eta(p, spec, small_sim.cells, small_sim.weeks)
        y = small_sim.results
        want = np.sum(y * log_expit(e) + (1 - y) * log_expit(-e))
        assert log_likelihood(x, data, spec) == pytest.approx(want, rel=1e-12)


def test_igg_without_interaction_nests_pcr(small_sim, rng):
    pcr, igg = ModelSpec(ModelKind.PCR, 4), ModelSpec(ModelKind.IGG, 4)
    data = small_sim.dataset()
    xp = _point(pcr, rng)
    xp[pcr.slices["interaction"]] = 0.0
    xi = np.zeros(igg.dim)
    for name in ("beta1", "beta2", "age", "race", "county", "time", "sigma"):
        xi[igg.slices[name]] = xp[pcr.slices[name]]
    assert log_likelihood(xi, data, igg) == log_likelihood(xp, data, pcr)


def test_record_permutation_invariance(small_sim, rng):
    spec = ModelSpec(ModelKind.PCR, 4, Fixed(0.7, 0.99))
    perm = rng.permutation(len(small_sim.cells))
    a = Dataset.from_arrays(small_sim.cells, small_sim.weeks, small_sim.results, AssayKind.PCR, 4)
    b = Dataset.from_arrays(small_sim.cells[perm], small_sim.weeks[perm], small_sim.results[perm], AssayKind.PCR, 4)
    x = _point(spec, rng)
    assert log_posterior_and_grad(x, a, spec)[0] == log_posterior_and_grad(x, b, spec)[0]


def test_extreme_predictors_stay_finite():
    spec = ModelSpec(ModelKind.PCR, 1, Fixed(1.0, 1.0))
    x = np.zeros(spec.dim)
    x[0] = -1000.0  # pi underflows; the positive record would have p = 0
    lp, g = log_posterior_and_grad(x, _one_record(1), spec)
    assert np.isfinite(lp) and np.all(np.isfinite(g))
    assert lp < -27  # includes log(1e-12)


def test_non_finite_input_signals_reject(any_spec, small_sim):
    post = Posterior(small_sim.dataset(), any_spec)
    x = np.zeros(any_spec.dim)
    x[3] = np.nan
    lp, _ = post(x)
    assert lp == -np.inf


def test_wrong_dimension_raises(small_sim):
    spec = ModelSpec(ModelKind.PCR, 4)
    with pytest.raises(ValueError, match="shape"):
        log_posterior_and_grad(np.zeros(spec.dim - 1), small_sim.dataset(), spec)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_constrain_round_trip(seed):
    spec = ModelSpec(ModelKind.IGG, 3, Estimated(MisclassPriorData.from_pairs([[1, 2]], [[1, 2]])))
    x = np.random.default_rng(seed).normal(0, 2, (4, spec.dim))
    c = constrain(x, spec)
    assert np.all(c[:, spec.slices["sigma"]] > 0)
    assert np.all((c[:, -2:] > 0) & (c[:, -2:] < 1))
    assert_allclose(unconstrain(c, spec), x, rtol=1e-10, atol=1e-10)


def test_dataset_aggregation(small_sim):
    d = small_sim.dataset()
    assert d.n_records == len(small_sim.records)
    assert d.n_positive == int(small_sim.results.sum())
    assert len(set(zip(d.cell.tolist(), d.week.tolist()))) == len(d.cell)
    with pytest.raises(ValueError, match="week index"):
        Dataset.from_arrays([0], [3], [1], AssayKind.PCR, 3)
