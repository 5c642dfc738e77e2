"""Command-line entry point: ``mrp-sero simulate | fit | report | diagnose``.

Exit codes: 0 success, 1 statistical-quality failure (R-hat or divergence
thresholds exceeded; outputs are still written), 2 usage or I/O error.
"""
from __future__ import annotations

import argparse
import datetime as dt
import json
import logging
import os
import secrets
import sys
from dataclasses import replace
from pathlib import Path
from typing import Optional, Sequence

from . import ingest, pipeline
from .diagnostics import diagnostics
from .domain import AssayKind, Population, StudyWindow
from .model import Estimated, Fixed, ModelKind, ModelSpec
from .poststrat import MARGINS, SubgroupTable, subgroup_estimates, weekly_series
from .sampler import SamplerConfig
from .simulate import TruthConfig, default_bias, generate, scenario_params

EXIT_OK, EXIT_QUALITY, EXIT_USAGE = 0, 1, 2

log = logging.getLogger("mrp_sero")


class UsageError(Exception):
    pass


def _date(s: str) -> dt.date:
    try:
        return dt.date.fromisoformat(s)
    except ValueError:
        raise argparse.ArgumentTypeError(f"malformed date {s!r} (expected YYYY-MM-DD)") from None


def _pair(s: str) -> tuple[float, float]:
    try:
        d, g = (float(v) for v in s.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected two comma-separated probabilities, got {s!r}") from None
    return d, g


def _threads(value: Optional[int]) -> int:
    if value is not None:
        return value
    env = os.environ.get("MRP_SERO_THREADS")
    if env is None:
        return 1
    try:
        n = int(env)
    except ValueError:
        raise UsageError(f"MRP_SERO_THREADS must be an integer, got {env!r}") from None
    if n < 1:
        raise UsageError("MRP_SERO_THREADS must be positive")
    return n


# ---------------------------------------------------------------------------
# simulate

CONFIG_KEYS = {
    "n_weeks", "tests_per_week", "model", "assay", "delta", "gamma", "params",
    "draw_from_prior", "bias", "anchor", "base_prevalence", "surge",
}


def truth_config(obj: dict, seed: int) -> TruthConfig:
    unknown = set(obj) - CONFIG_KEYS
    if unknown:
        raise UsageError(f"unknown config key(s): {', '.join(sorted(unknown))}")
    kind = ModelKind(obj.get("model", "pcr"))
    n_weeks = int(obj.get("n_weeks", 10))
    params = obj.get("params")
    if params is None and not obj.get("draw_from_prior", False):
        params = scenario_params(kind, n_weeks, obj.get("base_prevalence", 0.04), obj.get("surge", 0.0))
    default_assay = "pcr" if kind is ModelKind.PCR else "iggns"
    return TruthConfig(
        seed=seed,
        n_weeks=n_weeks,
        tests_per_week=int(obj.get("tests_per_week", 500)),
        kind=kind,
        assay=AssayKind.parse(obj.get("assay", default_assay)),
        delta=float(obj.get("delta", 0.7 if kind is ModelKind.PCR else 1.0)),
        gamma=float(obj.get("gamma", 0.995 if kind is ModelKind.PCR else 1.0)),
        params=params,
        draw_from_prior=bool(obj.get("draw_from_prior", False)),
        bias=obj.get("bias", default_bias()),
        anchor=dt.date.fromisoformat(obj.get("anchor", "2020-05-01" if kind is ModelKind.PCR else "2021-02-16")),
    )


def cmd_simulate(args) -> int:
    obj = {}
    if args.config:
        with open(args.config, encoding="utf-8") as f:
            obj = json.load(f)
        if not isinstance(obj, dict):
            raise UsageError("config must be a JSON object")
    seed = args.seed
    if seed is None:
        seed = secrets.randbits(63)
        print(f"seed: {seed}")
    try:
        cfg = truth_config(obj, seed)
        out = generate(cfg)
    except (KeyError, TypeError) as e:
        raise UsageError(f"bad config: {e}") from None
    d = Path(args.out_dir)
    d.mkdir(parents=True, exist_ok=True)
    ingest.write_test_records(out.records, d / "records.csv")
    ingest.write_poststrat(out.community, d / "poststrat_community.csv")
    ingest.write_poststrat(out.hospital, d / "poststrat_hospital.csv")
    truth = {
        "seed": seed,
        "model": cfg.kind.value,
        "assay": cfg.assay.value,
        "anchor": cfg.anchor.isoformat(),
        "n_weeks": cfg.n_weeks,
        "tests_per_week": cfg.tests_per_week,
        "delta": out.delta,
        "gamma": out.gamma,
        "params": out.truth_by_name(),
        "prevalence": {p.value: [float(v) for v in out.truth[p]] for p in out.truth},
    }
    with open(d / "truth.json", "w", encoding="utf-8", newline="") as f:
        json.dump(truth, f, indent=1)
        f.write("\n")
    print(f"wrote {len(out.records)} records to {d}", file=sys.stderr)
    return EXIT_OK


# ---------------------------------------------------------------------------
# fit


def _poststrat_arg(s: str) -> tuple[Population, Path]:
    """``population=path`` or a bare path whose name says hospital or community."""
    if "=" in s:
        label, path = s.split("=", 1)
        return Population.parse(label), Path(path)
    name = Path(s).name.lower()
    return (Population.HOSPITAL if "hospital" in name else Population.COMMUNITY), Path(s)


def _read_tables(args_list: Sequence[str]):
    tables = []
    for s in args_list or []:
        pop, path = _poststrat_arg(s)
        tables.append(ingest.read_poststrat(path, pop))
    if len({t.population for t in tables}) != len(tables):
        raise UsageError("each population may be given at most once")
    return tables


def _misclass(args, kind: ModelKind):
    if args.priors and args.fixed_misclass:
        raise UsageError("--priors and --fixed-misclass are mutually exclusive")
    if args.fixed_misclass:
        return Fixed(*args.fixed_misclass)
    if args.priors:
        return Estimated(ingest.read_misclass_priors(args.priors))
    if kind is ModelKind.PCR:
        return Estimated(ingest.bundled_pcr_priors())
    return Fixed(1.0, 1.0)


def cmd_fit(args) -> int:
    kind = ModelKind(args.model)
    window = StudyWindow(split=args.split_date) if args.split_date else StudyWindow()
    records = ingest.read_test_records(args.records, window)
    tables = _read_tables(args.poststrat)
    misclass = _misclass(args, kind)
    cfg = SamplerConfig(
        chains=args.chains, warmup=args.warmup, draws=args.draws, seed=args.seed,
        target_accept=args.target_accept, path_length=args.path_length, threads=_threads(args.threads),
    )
    parts = pipeline.partition_records(records, kind, args.split_date, args.anchor_date)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    status = EXIT_OK
    for part in parts:
        data = pipeline.dataset_for(part)
        spec = ModelSpec(kind, data.n_weeks, misclass)
        part_cfg = cfg if len(parts) == 1 else replace(cfg, seed=cfg.seed + parts.index(part))
        draws = pipeline.fit(data, spec, part_cfg)
        diag = diagnostics(draws)
        failures = diag.failures(args.max_rhat, args.max_divergence_frac)
        suffix = "" if len(parts) == 1 else f"_{part.label}"
        art = ingest.FitArtifact(draws, spec, part_cfg, part.assay, part.anchor, part.label,
                                 {"records": data.n_records, "positives": data.n_positive,
                                  "flagged": bool(failures)})
        ingest.write_draws(art, out / f"draws{suffix}")
        report = {"label": part.label, "flagged": bool(failures), "failures": failures,
                  "thresholds": {"max_rhat": args.max_rhat, "max_divergence_frac": args.max_divergence_frac},
                  **diag.to_dict()}
        with open(out / f"diagnostics{suffix}.json", "w", encoding="utf-8", newline="") as f:
            json.dump(report, f, indent=1)
            f.write("\n")
        if tables:
            series = [weekly_series(draws, t, spec, part.assay) for t in tables]
            ingest.write_series(series, out / f"series{suffix}.csv")
        print(f"{part.label}: {data.n_records} records, {data.n_weeks} weeks, worst R-hat "
              f"{diag.worst_rhat():.3f}, {diag.divergences} divergences", file=sys.stderr)
        for msg in failures:
            print(f"{part.label}: FLAGGED {msg}", file=sys.stderr)
        if failures:
            status = EXIT_QUALITY
    return status


# ---------------------------------------------------------------------------
# report


def _weeks(spec: str, n_weeks: int) -> list[int]:
    if spec == "all":
        return list(range(n_weeks))
    if spec == "last":
        return [n_weeks - 1]
    try:
        weeks = [int(v) for v in spec.split(",")]
    except ValueError:
        raise UsageError(f"--weeks must be 'all', 'last' or comma-separated integers, got {spec!r}") from None
    bad = [w for w in weeks if not 0 <= w < n_weeks]
    if bad:
        raise UsageError(f"week(s) {bad} outside fitted range 0..{n_weeks - 1}")
    return weeks


def _margins(spec: str) -> list[str]:
    margins = [m.strip() for m in spec.split(",") if m.strip()]
    allowed = {"overall", *MARGINS}
    bad = [m for m in margins if m not in allowed]
    if bad:
        raise UsageError(f"unknown margin(s) {', '.join(bad)}; choose from {', '.join(sorted(allowed))}")
    return margins


def cmd_report(args) -> int:
    art = ingest.read_draws(args.draws)
    tables = _read_tables(args.poststrat)
    if not tables:
        raise UsageError("report needs at least one --poststrat table")
    vacc = ingest.read_vaccination(args.vaccination) if args.vaccination else None
    weeks = _weeks(args.weeks, art.spec.n_weeks)
    margins = _margins(args.margins)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    stem = ingest.draws_paths(args.draws)[0].stem.replace("draws", "", 1)
    series = [weekly_series(art.draws, t, art.spec, art.assay, weeks) for t in tables]
    ingest.write_series(series, out / f"series{stem}.{args.format}", args.format)
    for t in tables:
        rows = []
        for w in weeks:
            rows += subgroup_estimates(art.draws, t, w, art.spec, margins, vacc).rows
        ingest.write_subgroups(SubgroupTable(t.population, rows), out / f"subgroups{stem}_{t.population.value}.{args.format}", args.format)
    print(f"wrote reports for {len(tables)} table(s), {len(weeks)} week(s) to {out}", file=sys.stderr)
    return EXIT_OK


# ---------------------------------------------------------------------------
# diagnose


def cmd_diagnose(args) -> int:
    art = ingest.read_draws(args.draws)
    d = diagnostics(art.draws)
    print(f"{'parameter':<28} {'rhat':>8} {'ess_bulk':>10}")
    for name, r, e, deg in zip(d.names, d.rhat, d.ess_bulk, d.degenerate):
        if deg:
            print(f"{name:<28} {'degenerate':>19}")
        else:
            print(f"{name:<28} {r:>8.4f} {e:>10.1f}")
    print(f"divergences: {d.divergences} of {d.n_draws} draws")
    failures = d.failures(args.max_rhat, args.max_divergence_frac)
    for msg in failures:
        print(f"FAIL {msg}")
    print("status: " + ("FAIL" if failures else "OK"))
    return EXIT_QUALITY if failures else EXIT_OK


# ---------------------------------------------------------------------------


def _add_thresholds(p):
    p.add_argument("--max-rhat", type=float, default=1.05)
    p.add_argument("--max-divergence-frac", type=float, default=0.01,
                   help="largest tolerated fraction of divergent post-warmup transitions")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mrp-sero", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="write a synthetic testing stream and its ground truth")
    p.add_argument("--config", help="JSON scenario file (keys: " + ", ".join(sorted(CONFIG_KEYS)) + ")")
    p.add_argument("--out-dir", default=".")
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("fit", help="fit the model to test records")
    p.add_argument("--records", required=True)
    p.add_argument("--poststrat", action="append", metavar="[POPULATION=]PATH",
                   help="table for the weekly series written with the fit; repeatable")
    p.add_argument("--priors", help="JSON validation studies; estimates sensitivity and specificity")
    p.add_argument("--fixed-misclass", type=_pair, metavar="DELTA,GAMMA")
    p.add_argument("--model", choices=[k.value for k in ModelKind], default="pcr")
    p.add_argument("--split-date", type=_date)
    p.add_argument("--anchor-date", type=_date)
    p.add_argument("--chains", type=int, default=4)
    p.add_argument("--warmup", type=int, default=1000)
    p.add_argument("--draws", type=int, default=1000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--target-accept", type=float, default=0.8)
    p.add_argument("--path-length", type=float, default=2.0)
    p.add_argument("--threads", type=int, help="parallel chains (default: $MRP_SERO_THREADS or 1)")
    p.add_argument("--out", required=True, help="output directory")
    _add_thresholds(p)
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("report", help="poststratified series and subgroup tables from saved draws")
    p.add_argument("--draws", required=True, help="draws CSV or its JSON manifest")
    p.add_argument("--poststrat", action="append", metavar="[POPULATION=]PATH", required=True)
    p.add_argument("--vaccination", help="CSV of margin,level,rate")
    p.add_argument("--margins", default="overall,sex,race,age")
    p.add_argument("--weeks", default="all", help="'all', 'last' or comma-separated indices")
    p.add_argument("--format", choices=["csv", "json"], default="csv")
    p.add_argument("--out", default=".", help="output directory")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("diagnose", help="R-hat, ESS and divergence summary of saved draws")
    p.add_argument("--draws", required=True)
    _add_thresholds(p)
    p.set_defaults(func=cmd_diagnose)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_USAGE if e.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (UsageError, ValueError, OSError, json.JSONDecodeError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except RuntimeError as e:  # sampler could not start
        print(f"error: {e}", file=sys.stderr)
        return EXIT_QUALITY


if __name__ == "__main__":
    sys.exit(main())
