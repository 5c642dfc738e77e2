"""Multilevel regression and poststratification for prevalence tracking from
biased hospital testing streams, with misclassification adjustment."""
from .domain import (
    AgeGroup, AssayKind, County, Covariates, MisclassPriorData, Population,
    PoststratTable, PriorStudy, Race, Sex, StudyWindow, TestRecord, cell_index,
    covariates_of, week_of,
)
from .model import Dataset, Estimated, Fixed, ModelKind, ModelSpec, ParamVector, Posterior
from .sampler import Draws, SamplerConfig, run
from .diagnostics import Diagnostics
from .pipeline import fit
from .poststrat import (
    PrevalenceSeries, SubgroupTable, decompose_immunity, poststratify_week,
    subgroup_estimates, weekly_series,
)

__version__ = "0.1.0"
