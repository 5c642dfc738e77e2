"""
Checking the sampler against exact answers
==========================================

Three checks that need no real data:

* a conjugate posterior for assay sensitivity, known in closed form;
* a one-parameter logistic posterior, computed on a dense grid;
* a small simulation-based calibration run, where posterior ranks of
  prior-drawn truths should be uniform.
"""

import numpy as np
from scipy.special import expit

from mrp_sero import ingest
from mrp_sero.domain import AssayKind
from mrp_sero.model import Dataset, Estimated, Fixed, ModelKind, ModelSpec, Posterior, study_posterior
from mrp_sero.oracle import Grid1D, beta_moments, conjugate_beta_posterior, grid_posterior_moments
from mrp_sero.sampler import SamplerConfig, run
from mrp_sero.simulate import sbc_run

###############################################################################
# Sensitivity from four validation studies with a uniform prior is
# Beta(1 + positives, 1 + negatives).
studies = ingest.bundled_pcr_priors().sensitivity
a, b = conjugate_beta_posterior(studies)
draws = run(study_posterior(studies), 1, SamplerConfig(seed=1), transform=expit, names=["delta"])
print(f"Beta({a:g}, {b:g}) mean/sd: {beta_moments(a, b)}")
print(f"sampler mean/sd:         ({draws.values.mean():.4f}, {draws.values.std():.4f})")

###############################################################################
# Intercept-only logistic model on 200 records, all other parameters held at
# zero.  The grid refuses to answer if its bounds cut off the posterior.
rng = np.random.default_rng(0)
y = (rng.uniform(size=200) < 0.2).astype(int)
data = Dataset.from_arrays(np.zeros(200, int), np.zeros(200, int), y, AssayKind.PCR, 1)
f = Posterior(data, ModelSpec(ModelKind.PCR, 1, Fixed(1.0, 1.0))).restrict([0])
grid = grid_posterior_moments(f, Grid1D(-8.0, 4.0))
draws = run(f, 1, SamplerConfig(seed=2))
print(f"grid mean/sd:    ({grid.mean[0]:.4f}, {grid.sd[0]:.4f})")
print(f"sampler mean/sd: ({draws.values.mean():.4f}, {draws.values.std():.4f})")

###############################################################################
# Calibration over 20 replications is only a smoke test; the acceptance
# suite runs 100.
spec = ModelSpec(ModelKind.PCR, 4, Estimated(ingest.bundled_pcr_priors()))
report = sbc_run(20, spec, SamplerConfig(warmup=300, draws=300), tests_per_week=200, seed=5)
for name, p in report.pvalues.items():
    print(f"{name:<12} rank p-value {p:.3f}")
