"""Readers and writers for the on-disk formats.

All files are UTF-8 with LF newlines.  CSV headers are exact:

records       ``date,sex,age_group,race,county,assay,result``
poststrat     ``sex,age_group,race,county,count``
vaccination   ``margin,level,rate``
series        ``population,assay,week,mean,sd,q025,q25,q50,q75,q975``
subgroups     ``population,week,margin,level,total_count,mean,sd,empty,
              vaccination_rate,natural_mean,natural_sd,natural_clamped_fraction``

Misclassification priors are JSON ``{"sensitivity": [[y, n], ...],
"specificity": [[y, n], ...]}``.  Dates are ISO ``YYYY-MM-DD`` and category
labels are the lowercase tokens of :mod:`mrp_sero.domain`.  Floats are written
with 17 significant digits so CSV round-trips are exact.

Posterior draws are stored as a columnar CSV (one row per iteration, with
``chain``, ``draw``, sampler statistics and then one column per parameter)
next to a JSON manifest carrying the model spec, its digest, the sampler
configuration and everything else needed to rebuild the fit's reports.
"""
from __future__ import annotations

import csv
import datetime as dt
import io
import json
import math
from dataclasses import asdict, dataclass, field
from importlib import resources
from pathlib import Path
from typing import Iterable, Optional, Sequence, Union

import numpy as np

from .domain import (
    N_CELLS, AgeGroup, AssayKind, County, Covariates, MisclassPriorData, Population,
    PoststratTable, Race, Sex, StudyWindow, TestRecord, cell_index, covariates_of,
)
from .model import ModelSpec
from .poststrat import QUANTILE_NAMES, PrevalenceSeries, SubgroupRow, SubgroupTable, margin_levels
from .sampler import Draws, SamplerConfig

PathLike = Union[str, Path]

RECORD_HEADER = ["date", "sex", "age_group", "race", "county", "assay", "result"]
POSTSTRAT_HEADER = ["sex", "age_group", "race", "county", "count"]
VACCINATION_HEADER = ["margin", "level", "rate"]
SERIES_HEADER = ["population", "assay", "week", "mean", "sd", *QUANTILE_NAMES]
SUBGROUP_HEADER = [
    "population", "week", "margin", "level", "total_count", "mean", "sd", "empty",
    "vaccination_rate", "natural_mean", "natural_sd", "natural_clamped_fraction",
]
DRAW_STATS = ["chain", "draw", "accept_stat", "divergent", "n_leapfrog"]
MANIFEST_VERSION = 1


class IngestError(ValueError):
    """Parse failure carrying one diagnostic per offending line."""

    def __init__(self, path, diagnostics: Sequence[str]):
        self.path = str(path)
        self.diagnostics = list(diagnostics)
        shown = "\n  ".join(self.diagnostics[:20])
        more = f"\n  ... {len(self.diagnostics) - 20} more" if len(self.diagnostics) > 20 else ""
        super().__init__(f"{self.path}: {len(self.diagnostics)} error(s)\n  {shown}{more}")


def fmt(v) -> str:
    """Exact text form of a number: integers as-is, floats to 17 significant digits."""
    if v is None:
        return ""
    if isinstance(v, (bool, np.bool_)):
        return "1" if v else "0"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    v = float(v)
    if math.isnan(v):
        return "nan"
    return f"{v:.17g}"


def _writer(f):
    return csv.writer(f, lineterminator="\n")


def _open_write(path: PathLike):
    return open(path, "w", encoding="utf-8", newline="")


def _read_rows(path: PathLike, header: Sequence[str]):
    """Yield (line number, row) after checking the header exactly."""
    with open(path, encoding="utf-8", newline="") as f:
        reader = csv.reader(f)
        try:
            first = next(reader)
        except StopIteration:
            raise IngestError(path, ["line 1: empty file, expected header " + ",".join(header)]) from None
        if first != list(header):
            raise IngestError(path, [f"line 1: header {','.join(first)!r} != expected {','.join(header)!r}"])
        for row in reader:
            yield reader.line_num, row


def _parse_date(token: str) -> dt.date:
    try:
        if len(token) != 10:
            raise ValueError
        return dt.date.fromisoformat(token)
    except ValueError:
        raise ValueError(f"malformed date {token!r} (expected YYYY-MM-DD)") from None


def _parse_covariates(sex, age, race, county) -> Covariates:
    return Covariates(Sex.parse(sex), AgeGroup.parse(age), Race.parse(race), County.parse(county))


# ---------------------------------------------------------------------------
# test records


def parse_test_records(path: PathLike, window: Optional[StudyWindow] = None):
    """Parse a records file into ``(records, diagnostics)``; never raises on bad rows."""
    records, diagnostics = [], []
    for line, row in _read_rows(path, RECORD_HEADER):
        if not row:
            diagnostics.append(f"line {line}: blank line")
            continue
        try:
            if len(row) != len(RECORD_HEADER):
                raise ValueError(f"expected {len(RECORD_HEADER)} fields, got {len(row)}")
            date, sex, age, race, county, assay, result = row
            if result not in ("0", "1"):
                raise ValueError(f"result must be 0 or 1, got {result!r}")
            rec = TestRecord(_parse_date(date), _parse_covariates(sex, age, race, county),
                             AssayKind.parse(assay), int(result))
            if window is not None:
                window.check(rec)
        except ValueError as e:
            diagnostics.append(f"line {line}: {e}")
            continue
        records.append(rec)
    return records, diagnostics


def read_test_records(path: PathLike, window: Optional[StudyWindow] = None) -> list[TestRecord]:
    records, diagnostics = parse_test_records(path, window)
    if diagnostics:
        raise IngestError(path, diagnostics)
    return records


def write_test_records(records: Iterable[TestRecord], path: PathLike) -> None:
    with _open_write(path) as f:
        w = _writer(f)
        w.writerow(RECORD_HEADER)
        for r in records:
            c = r.covariates
            w.writerow([r.date.isoformat(), c.sex.value, c.age_group.value, c.race.value,
                        c.county.value, r.assay.value, r.result])


# ---------------------------------------------------------------------------
# poststratification tables


def read_poststrat(path: PathLike, population: Population = Population.COMMUNITY) -> PoststratTable:
    diagnostics = []
    seen: dict[int, int] = {}
    counts = np.zeros(N_CELLS, dtype=np.int64)
    for line, row in _read_rows(path, POSTSTRAT_HEADER):
        try:
            if len(row) != len(POSTSTRAT_HEADER):
                raise ValueError(f"expected {len(POSTSTRAT_HEADER)} fields, got {len(row)}")
            cov = _parse_covariates(*row[:4])
            try:
                n = int(row[4])
            except ValueError:
                raise ValueError(f"count {row[4]!r} is not an integer") from None
            if n < 0:
                raise ValueError(f"negative count {n}")
        except ValueError as e:
            diagnostics.append(f"line {line}: {e}")
            continue
        j = cell_index(cov)
        if j in seen:
            diagnostics.append(f"line {line}: duplicate cell {','.join(row[:4])} (first on line {seen[j]})")
            continue
        seen[j] = line
        counts[j] = n
    if diagnostics:
        raise IngestError(path, diagnostics)
    pairs = [(covariates_of(j), counts[j]) for j in seen]
    try:
        return PoststratTable.from_cells(population, pairs)
    except ValueError as e:
        raise IngestError(path, [str(e)]) from None


def write_poststrat(table: PoststratTable, path: PathLike) -> None:
    with _open_write(path) as f:
        w = _writer(f)
        w.writerow(POSTSTRAT_HEADER)
        for c, n in table.cells():
            w.writerow([c.sex.value, c.age_group.value, c.race.value, c.county.value, fmt(n)])


# ---------------------------------------------------------------------------
# misclassification priors and vaccination rates


def _priors_from_obj(obj, source) -> MisclassPriorData:
    if not isinstance(obj, dict) or set(obj) != {"sensitivity", "specificity"}:
        raise IngestError(source, ['expected an object with keys "sensitivity" and "specificity"'])
    diagnostics = []
    lists = {}
    for key in ("sensitivity", "specificity"):
        pairs = []
        for i, pair in enumerate(obj[key]):
            ok = (isinstance(pair, list) and len(pair) == 2
                  and all(isinstance(v, int) and not isinstance(v, bool) for v in pair))
            if not ok:
                diagnostics.append(f"{key}[{i}]: expected [positives, total] integers, got {pair!r}")
            elif not 0 <= pair[0] <= pair[1]:
                diagnostics.append(f"{key}[{i}]: need 0 <= positives <= total, got {pair!r}")
            else:
                pairs.append(pair)
        lists[key] = pairs
    if diagnostics:
        raise IngestError(source, diagnostics)
    return MisclassPriorData.from_pairs(lists["sensitivity"], lists["specificity"])


def read_misclass_priors(path: PathLike) -> MisclassPriorData:
    with open(path, encoding="utf-8") as f:
        try:
            obj = json.load(f)
        except json.JSONDecodeError as e:
            raise IngestError(path, [f"line {e.lineno}: {e.msg}"]) from None
    return _priors_from_obj(obj, path)


def bundled_pcr_priors() -> MisclassPriorData:
    """Validation studies for the PCR assay shipped with the package."""
    src = resources.files("mrp_sero") / "data" / "pcr_priors.json"
    return _priors_from_obj(json.loads(src.read_text(encoding="utf-8")), "pcr_priors.json")


def write_misclass_priors(priors: MisclassPriorData, path: PathLike) -> None:
    obj = {
        "sensitivity": [[s.positives, s.total] for s in priors.sensitivity],
        "specificity": [[s.positives, s.total] for s in priors.specificity],
    }
    with _open_write(path) as f:
        json.dump(obj, f)
        f.write("\n")


def read_vaccination(path: PathLike) -> dict[tuple[str, str], float]:
    """Per-subgroup vaccination rates keyed by ``(margin, level)``."""
    rates, diagnostics = {}, []
    for line, row in _read_rows(path, VACCINATION_HEADER):
        try:
            if len(row) != 3:
                raise ValueError(f"expected 3 fields, got {len(row)}")
            margin, level, rate = row
            if level not in [lvl for lvl, _ in margin_levels(margin)]:
                raise ValueError(f"unknown level {level!r} for margin {margin!r}")
            r = float(rate)
            if not 0.0 <= r <= 1.0:
                raise ValueError(f"rate {rate} outside [0, 1]")
            if (margin, level) in rates:
                raise ValueError(f"duplicate entry for {margin}={level}")
        except ValueError as e:
            diagnostics.append(f"line {line}: {e}")
            continue
        rates[(margin, level)] = r
    if diagnostics:
        raise IngestError(path, diagnostics)
    return rates


def write_vaccination(rates: dict[tuple[str, str], float], path: PathLike) -> None:
    with _open_write(path) as f:
        w = _writer(f)
        w.writerow(VACCINATION_HEADER)
        for (margin, level), r in rates.items():
            w.writerow([margin, level, fmt(r)])


# ---------------------------------------------------------------------------
# reports


def _fmt_from_path(path: PathLike, format: Optional[str]) -> str:
    f = format or Path(path).suffix.lstrip(".").lower()
    if f not in ("csv", "json"):
        raise ValueError(f"unknown report format {f!r}; use csv or json")
    return f


def _series_rows(series: Sequence[PrevalenceSeries]):
    for s in series:
        for i, w in enumerate(s.weeks):
            yield {
                "population": s.population.value, "assay": s.assay.value, "week": int(w),
                "mean": float(s.mean[i]), "sd": float(s.sd[i]),
                **{q: float(v) for q, v in zip(QUANTILE_NAMES, s.quantiles[i])},
            }


def write_series(series: Union[PrevalenceSeries, Sequence[PrevalenceSeries]], path: PathLike,
                 format: Optional[str] = None) -> None:
    """Write one or more series in long format (one row per population and week)."""
    if isinstance(series, PrevalenceSeries):
        series = [series]
    rows = list(_series_rows(series))
    kind = _fmt_from_path(path, format)
    with _open_write(path) as f:
        if kind == "json":
            json.dump({"columns": SERIES_HEADER, "rows": rows}, f, indent=1)
            f.write("\n")
        else:
            w = _writer(f)
            w.writerow(SERIES_HEADER)
            for r in rows:
                w.writerow([r[k] if k in ("population", "assay") else fmt(r[k]) for k in SERIES_HEADER])


def _group_series(rows: list[dict]) -> list[PrevalenceSeries]:
    out: dict[tuple[str, str], list[dict]] = {}
    for r in rows:
        out.setdefault((r["population"], r["assay"]), []).append(r)
    return [
        PrevalenceSeries(
            population=Population.parse(pop), assay=AssayKind.parse(assay),
            weeks=np.array([r["week"] for r in rs], dtype=np.int64),
            mean=np.array([r["mean"] for r in rs]), sd=np.array([r["sd"] for r in rs]),
            quantiles=np.array([[r[q] for q in QUANTILE_NAMES] for r in rs]).reshape(len(rs), len(QUANTILE_NAMES)),
        )
        for (pop, assay), rs in out.items()
    ]


def read_series(path: PathLike, format: Optional[str] = None) -> list[PrevalenceSeries]:
    kind = _fmt_from_path(path, format)
    if kind == "json":
        with open(path, encoding="utf-8") as f:
            rows = json.load(f)["rows"]
        return _group_series(rows)
    rows, diagnostics = [], []
    for line, row in _read_rows(path, SERIES_HEADER):
        try:
            rows.append({
                "population": row[0], "assay": row[1], "week": int(row[2]),
                **{k: float(v) for k, v in zip(SERIES_HEADER[3:], row[3:], strict=True)},
            })
        except ValueError as e:
            diagnostics.append(f"line {line}: {e}")
    if diagnostics:
        raise IngestError(path, diagnostics)
    return _group_series(rows)


def _subgroup_dict(table: SubgroupTable, r: SubgroupRow) -> dict:
    d = asdict(r)
    d["population"] = table.population.value
    return d


def write_subgroups(table: SubgroupTable, path: PathLike, format: Optional[str] = None) -> None:
    kind = _fmt_from_path(path, format)
    rows = [_subgroup_dict(table, r) for r in table.rows]
    with _open_write(path) as f:
        if kind == "json":
            clean = [{k: (None if isinstance(v, float) and math.isnan(v) else v) for k, v in r.items()} for r in rows]
            json.dump({"population": table.population.value, "columns": SUBGROUP_HEADER, "rows": clean}, f, indent=1)
            f.write("\n")
        else:
            w = _writer(f)
            w.writerow(SUBGROUP_HEADER)
            for r in rows:
                w.writerow([r[k] if k in ("population", "margin", "level") else fmt(r[k]) for k in SUBGROUP_HEADER])


def _opt_float(v) -> Optional[float]:
    if v is None or v == "":
        return None
    return float(v)


def read_subgroups(path: PathLike, format: Optional[str] = None) -> SubgroupTable:
    kind = _fmt_from_path(path, format)
    if kind == "json":
        with open(path, encoding="utf-8") as f:
            obj = json.load(f)
        population = Population.parse(obj["population"])
        raw = obj["rows"]
    else:
        raw, population = [], None
        for _, row in _read_rows(path, SUBGROUP_HEADER):
            d = dict(zip(SUBGROUP_HEADER, row, strict=True))
            population = Population.parse(d["population"])
            raw.append(d)
        if population is None:
            raise IngestError(path, ["no rows"])
    rows = []
    for d in raw:
        mean = _opt_float(d["mean"])
        sd = _opt_float(d["sd"])
        rows.append(SubgroupRow(
            week=int(d["week"]), margin=d["margin"], level=d["level"],
            total_count=float(d["total_count"]),
            mean=float("nan") if mean is None else mean, sd=float("nan") if sd is None else sd,
            empty=bool(int(d["empty"])) if isinstance(d["empty"], str) else bool(d["empty"]),
            vaccination_rate=_opt_float(d["vaccination_rate"]),
            natural_mean=_opt_float(d["natural_mean"]),
            natural_sd=_opt_float(d["natural_sd"]),
            natural_clamped_fraction=_opt_float(d["natural_clamped_fraction"]),
        ))
    return SubgroupTable(population, rows)


# ---------------------------------------------------------------------------
# posterior draws


@dataclass
class FitArtifact:
    """Posterior draws plus what is needed to reproduce reports from them."""

    draws: Draws
    spec: ModelSpec
    config: SamplerConfig
    assay: AssayKind
    anchor: dt.date
    label: str = "all"
    extra: dict = field(default_factory=dict)


def draws_paths(path: PathLike) -> tuple[Path, Path]:
    """(csv, manifest) paths for a draws file given either of them or their stem."""
    p = Path(path)
    if p.suffix in (".csv", ".json"):
        p = p.with_suffix("")
    return p.with_suffix(".csv"), p.with_suffix(".json")


def write_draws(art: FitArtifact, path: PathLike) -> tuple[Path, Path]:
    csv_path, man_path = draws_paths(path)
    d = art.draws
    with _open_write(csv_path) as f:
        w = _writer(f)
        w.writerow(DRAW_STATS + list(d.names))
        for c in range(d.n_chains):
            for i in range(d.n_draws):
                w.writerow([c, i, fmt(d.accept_stat[c, i]), int(d.divergent[c, i]), int(d.n_leapfrog[c, i]),
                            *(fmt(v) for v in d.values[c, i])])
    manifest = {
        "format_version": MANIFEST_VERSION,
        "draws_file": csv_path.name,
        "label": art.label,
        "assay": art.assay.value,
        "anchor": art.anchor.isoformat(),
        "spec": art.spec.to_dict(),
        "spec_digest": art.spec.digest(),
        "sampler": asdict(art.config),
        "seed": art.config.seed,
        "names": list(d.names),
        "chains": d.n_chains,
        "draws": d.n_draws,
        "step_size": [float(v) for v in d.step_size],
        "warmup_divergences": [int(v) for v in d.warmup_divergences],
        **art.extra,
    }
    with _open_write(man_path) as f:
        json.dump(manifest, f, indent=1)
        f.write("\n")
    return csv_path, man_path


def read_draws(path: PathLike) -> FitArtifact:
    csv_path, man_path = draws_paths(path)
    with open(man_path, encoding="utf-8") as f:
        man = json.load(f)
    if man.get("format_version") != MANIFEST_VERSION:
        raise IngestError(man_path, [f"unsupported manifest version {man.get('format_version')!r}"])
    spec = ModelSpec.from_dict(man["spec"])
    if spec.digest() != man["spec_digest"]:
        raise IngestError(man_path, ["spec digest does not match the stored spec"])
    names = man["names"]
    if names != spec.names():
        raise IngestError(man_path, ["parameter names do not match the model spec"])
    csv_path = man_path.parent / man.get("draws_file", csv_path.name)
    chains, n = int(man["chains"]), int(man["draws"])
    with open(csv_path, encoding="utf-8", newline="") as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if header != DRAW_STATS + names:
            raise IngestError(csv_path, ["line 1: draws header does not match manifest"])
        rows = list(reader)
    if len(rows) != chains * n:
        raise IngestError(csv_path, [f"expected {chains * n} rows, found {len(rows)}"])
    arr = np.array(rows, dtype=float).reshape(chains, n, -1)
    draws = Draws(
        values=arr[:, :, len(DRAW_STATS):].copy(),
        names=list(names),
        accept_stat=arr[:, :, 2].copy(),
        divergent=arr[:, :, 3].astype(bool),
        n_leapfrog=arr[:, :, 4].astype(np.int64),
        step_size=np.array(man.get("step_size", []), dtype=float),
        warmup_divergences=np.array(man.get("warmup_divergences", []), dtype=np.int64),
    )
    known = {"format_version", "draws_file", "label", "assay", "anchor", "spec", "spec_digest", "sampler",
             "seed", "names", "chains", "draws", "step_size", "warmup_divergences"}
    return FitArtifact(
        draws=draws, spec=spec, config=SamplerConfig(**man["sampler"]),
        assay=AssayKind.parse(man["assay"]), anchor=dt.date.fromisoformat(man["anchor"]),
        label=man.get("label", "all"), extra={k: v for k, v in man.items() if k not in known},
    )


def dumps_json(obj) -> str:
    buf = io.StringIO()
    json.dump(obj, buf, indent=1, sort_keys=True)
    return buf.getvalue() + "\n"
