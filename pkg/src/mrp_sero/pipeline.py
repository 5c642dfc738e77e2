"""Glue between records, the model and the sampler."""
from __future__ import annotations

import datetime as dt
from dataclasses import dataclass
from typing import Optional, Sequence

from . import sampler
from .domain import AssayKind, TestRecord
from .model import Dataset, ModelKind, ModelSpec, Posterior


def fit(data: Dataset, spec: ModelSpec, cfg: sampler.SamplerConfig) -> sampler.Draws:
    """Sample the posterior of ``spec`` given ``data``; draws are on the constrained scale."""
    if data.n_records == 0:
        raise ValueError("cannot fit an empty dataset")
    post = Posterior(data, spec)
    return sampler.run(post, spec.dim, cfg, transform=post.constrain, names=spec.names())


@dataclass(frozen=True)
class Partition:
    label: str
    assay: AssayKind
    anchor: dt.date
    records: tuple[TestRecord, ...]


def assays_for(kind: ModelKind) -> tuple[AssayKind, ...]:
    return (AssayKind.PCR,) if kind is ModelKind.PCR else (AssayKind.IGGN, AssayKind.IGGNS)


def partition_records(records: Sequence[TestRecord], kind: ModelKind,
                      split: Optional[dt.date] = None, anchor: Optional[dt.date] = None) -> list[Partition]:
    """Select the records a model fits and cut them at ``split``.

    Without a split every record of the model's assay family goes into one
    fit, which must then use a single assay.  With a split, IgG fits use IgG N
    before the split and combined N/S on or after it; PCR fits use PCR on
    both sides.  Each partition's week bins are anchored at ``anchor`` if
    given, otherwise at its first day (the split date for the later part).
    """
    allowed = assays_for(kind)
    recs = [r for r in records if r.assay in allowed]
    if not recs:
        raise ValueError(f"no {'/'.join(a.value for a in allowed)} records for a {kind.value} fit")
    if split is None:
        kinds = {r.assay for r in recs}
        if len(kinds) > 1:
            raise ValueError("records mix iggn and iggns; pass a split date to fit them separately")
        assay = kinds.pop()
        start = anchor or min(r.date for r in recs)
        return [Partition("all", assay, start, tuple(recs))]

    if kind is ModelKind.PCR:
        pre_assay = post_assay = AssayKind.PCR
    else:
        pre_assay, post_assay = AssayKind.IGGN, AssayKind.IGGNS
    pre = tuple(r for r in recs if r.date < split and r.assay is pre_assay)
    post = tuple(r for r in recs if r.date >= split and r.assay is post_assay)
    if not post:
        raise ValueError(f"no {post_assay.value} records on or after {split.isoformat()}")
    parts = []
    if pre:
        parts.append(Partition("pre", pre_assay, anchor or min(r.date for r in pre), pre))
    post_anchor = split if anchor is None or anchor < split else anchor
    parts.append(Partition("post", post_assay, post_anchor, post))
    return parts


def dataset_for(part: Partition) -> Dataset:
    for r in part.records:
        if r.date < part.anchor:
            raise ValueError(f"record dated {r.date.isoformat()} precedes anchor {part.anchor.isoformat()}")
    return Dataset.from_records(part.records, part.anchor, assay=part.assay)
