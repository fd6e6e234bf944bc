"""Command-line interface.

    cacemi estimate  --data trial.csv --outcome continuous --method smc-mic
    cacemi simulate  --scenario cell.json --out data.csv
    cacemi replicate --scenario cells.txt --out results.csv --threads 4
    cacemi summarize results.csv --out tidy.csv

Exit codes: 0 success, 1 usage, 2 data, 3 numerical. Errors are also
printed to stderr as a one-line JSON object.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import math
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .data import BINARY, CONTINUOUS, load_csv, write_csv
from .errors import CaceError, DataError, NumericalError

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERICAL = 0, 1, 2, 3
METHODS = ("wald", "waldor", "tsls", "tsri", "smc-mic", "bayes", "ml-mixture")
TWO_STAGE = ("wald", "waldor", "tsls", "tsri")
THREADS_ENV = "CACEMI_THREADS"

RESULT_COLUMNS = (
    "scenario", "config_hash", "n", "psi0", "outcome_kind", "beta_cz", "beta_c_rule", "missing_y",
    "replications", "seed", "method", "truth", "nrep_effective", "failures", "bias", "rel_bias",
    "mce_low", "mce_high", "coverage", "ci_width", "rmse", "empirical_se", "mean_se", "failed",
)
METRIC_COLUMNS = ("bias", "rel_bias", "mce_low", "mce_high", "coverage", "ci_width", "rmse",
                  "empirical_se", "mean_se", "nrep_effective")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _hash(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True, default=str).encode()).hexdigest()[:12]


def _metadata(seed, config) -> dict:
    return {"version": __version__, "seed": seed, "config_hash": _hash(config)}


def _meta_comment(meta: dict) -> str:
    return f"cacemi {meta['version']} seed={meta['seed']} config_hash={meta['config_hash']}"


def _default_threads() -> int:
    raw = os.environ.get(THREADS_ENV, "1")
    try:
        return max(1, int(raw))
    except ValueError:
        raise UsageError(f"{THREADS_ENV} must be an integer, got {raw!r}") from None


def _split(values) -> list[str]:
    out = []
    for v in values or ():
        out.extend(s for s in v.split(",") if s)
    return out


# --- estimate -------------------------------------------------------------

def _run_method(method, ds, args):
    from . import bayes, smcmic, twostage
    from .mixture import MixtureModelSpec

    aux = tuple(_split(args.aux))
    covs = tuple(_split(args.covariates))
    if method in ("tsri", "waldor") and not ds.binary:
        raise DataError(f"{method} requires binary outcome")
    if method in TWO_STAGE and ds.missing_y.any():
        icfg = smcmic.ImputationConfig(m=args.m, aux_covariates=aux, seed=args.seed)
        est = smcmic.estimate_after_fcs(ds, method, icfg, covariates=covs, n_boot=args.n_boot)
        est.warnings.append("missing outcomes multiply imputed per arm before estimation")
        return est
    if method == "wald":
        return twostage.wald_estimate(ds)
    if method == "waldor":
        return twostage.wald_or(ds)
    if method == "tsls":
        return twostage.tsls(ds, covs, robust=args.robust)
    if method == "tsri":
        return twostage.tsri(ds, covs, n_boot=args.n_boot, seed=args.seed)
    if method == "smc-mic":
        icfg = smcmic.ImputationConfig(m=args.m, iterations=args.iterations, rejection_cap=args.rejection_cap,
                                       aux_covariates=aux, seed=args.seed, n_jobs=args.threads)
        imp = smcmic.smc_mic_run(ds, icfg)
        if args.dump_imputations:
            smcmic.write_imputations(imp, args.dump_imputations)
        return smcmic.pool_analysis(imp, MixtureModelSpec.for_dataset(ds, covs))
    if method == "bayes":
        spec = MixtureModelSpec.for_dataset(ds, aux + tuple(c for c in covs if c not in aux))
        priors = bayes.PriorSpec.for_outcome(ds.outcome_kind, gamma_on_sd=args.gamma_on_sd)
        mcfg = bayes.McmcConfig(chains=args.chains, iterations=args.iter, burn_in=args.burnin, seed=args.seed,
                                n_jobs=args.threads)
        samples = bayes.gibbs_run(ds, spec, priors, mcfg)
        if args.dump_samples:
            bayes.write_samples(samples, args.dump_samples)
        est, diag = bayes.posterior_summary(samples, estimand="log-odds-ratio" if ds.binary
                                            else "risk-or-mean-difference")
        est.extra["rhat"] = diag["rhat"]
        return est
    if method == "ml-mixture":
        return smcmic.ml_mixture_estimate(ds, MixtureModelSpec.for_dataset(ds, covs))
    raise UsageError(f"unknown method {method!r}")


def _json_safe(v):
    if isinstance(v, float) and not math.isfinite(v):
        return None
    if isinstance(v, dict):
        return {k: _json_safe(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_json_safe(x) for x in v]
    if isinstance(v, np.generic):
        return _json_safe(v.item())
    return v


def cmd_estimate(args) -> int:
    methods = _split(args.method)
    for m in methods:
        if m not in METHODS:
            raise UsageError(f"unknown method {m!r}; choose from {', '.join(METHODS)}")
    cmap = {k: v for k, v in (("id", args.id_col), ("z", args.z_col), ("d", args.d_col), ("y", args.y_col))
            if v}
    wanted = _split(args.covariates) + [a for a in _split(args.aux) if a not in _split(args.covariates)]
    ds = load_csv(args.data, args.outcome, cmap, covariates=wanted)
    config = {k: v for k, v in vars(args).items() if k not in ("func", "out", "dump_imputations", "dump_samples")}
    results = []
    for m in methods:
        est = _run_method(m, ds, args)
        d = est.to_dict()
        if "rhat" in est.extra:
            d["rhat"] = est.extra["rhat"]
        results.append(d)
    doc = {**_metadata(args.seed, config), "data": str(args.data), "n": ds.n, "estimates": results}
    text = json.dumps(_json_safe(doc), indent=2) + "\n"
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


# --- scenarios ----------------------------------------------------------------

def _coerce(value: str):
    for conv in (int, float):
        try:
            return conv(value)
        except ValueError:
            pass
    return value


def parse_scenarios(path) -> list[dict]:
    """Read scenario cells from JSON (object or list) or key=value text.

    In the text format every non-blank, non-``#`` line is one cell made of
    whitespace-separated ``key=value`` pairs.
    """
    text = Path(path).read_text()
    stripped = text.lstrip()
    if stripped.startswith("{") or stripped.startswith("["):
        try:
            obj = json.loads(text)
        except json.JSONDecodeError as exc:
            raise DataError(f"{path}: invalid JSON ({exc})") from None
        cells = obj if isinstance(obj, list) else [obj]
        if not all(isinstance(c, dict) for c in cells):
            raise DataError(f"{path}: scenarios must be JSON objects")
        return cells
    cells = []
    for ln, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        cell = {}
        for tok in line.split():
            if "=" not in tok:
                raise DataError(f"{path}:{ln}: expected key=value, got {tok!r}")
            k, v = tok.split("=", 1)
            cell[k.strip()] = _coerce(v.strip())
        cells.append(cell)
    if not cells:
        raise DataError(f"{path}: no scenarios")
    return cells


def _scenario_overrides(args) -> dict:
    keys = {"n": args.n, "psi0": args.psi0, "outcome_kind": args.outcome, "beta_cz": args.beta_cz,
            "beta_c_rule": args.beta_c_rule, "missing_y": args.missing, "seed": args.seed}
    return {k: v for k, v in keys.items() if v is not None}


def cmd_simulate(args) -> int:
    from .simulation import ScenarioConfig, generate_dataset, replication_seed

    cells = parse_scenarios(args.scenario) if args.scenario else [{}]
    if len(cells) != 1:
        raise DataError("simulate takes exactly one scenario")
    cfg = ScenarioConfig.from_dict({**cells[0], **_scenario_overrides(args)})
    data_ss, _ = replication_seed(cfg.seed, args.replication).spawn(2)
    ds, truth = generate_dataset(cfg, np.random.default_rng(data_ss))
    if args.with_class:
        ds = ds.replace(c=truth.c.astype(float))
    meta = {"version": __version__, "seed": cfg.seed, "config_hash": cfg.config_hash()}
    write_csv(ds, args.out, include_class=args.with_class,
              comment=_meta_comment(meta) + f" replication={args.replication} scenario={cfg.label}")
    return EXIT_OK


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, bool):
        return "1" if v else "0"
    if isinstance(v, float):
        return "" if math.isnan(v) else repr(v)
    return str(v)


def result_rows(res) -> list[dict]:
    cfg = res.config
    rows = []
    for method, m in res.methods.items():
        row = {"scenario": cfg.label, "config_hash": cfg.config_hash(), "n": cfg.n, "psi0": cfg.psi0,
               "outcome_kind": cfg.outcome_kind, "beta_cz": cfg.beta_cz, "beta_c_rule": cfg.beta_c_rule,
               "missing_y": cfg.missing_y, "replications": cfg.replications, "seed": cfg.seed,
               "method": method, "truth": res.truth, "nrep_effective": res.nrep_effective[method],
               "failures": res.failures[method], "failed": res.failed}
        md = m.to_dict() if m is not None else {}
        for k in ("bias", "rel_bias", "mce_low", "mce_high", "coverage", "ci_width", "rmse",
                  "empirical_se", "mean_se"):
            row[k] = md.get(k)
        rows.append(row)
    return rows


def cmd_replicate(args) -> int:
    from .simulation import MethodOptions, ScenarioConfig, run_scenario, table1_configs

    reps = 2000 if args.full else args.reps
    if args.table1:
        configs = table1_configs(replications=reps or 500, seed=args.seed if args.seed is not None else 2024)
    elif args.scenario:
        configs = []
        for cell in parse_scenarios(args.scenario):
            cell = {**cell, **_scenario_overrides(args)}
            if reps:
                cell["replications"] = reps
            configs.append(ScenarioConfig.from_dict(cell))
    else:
        raise UsageError("replicate needs --scenario FILE or --table1")
    methods = _split(args.methods) or None
    opts = MethodOptions(m=args.m, iterations=args.iterations, mcmc_iterations=args.iter, burn_in=args.burnin,
                         n_boot=args.n_boot)
    threads = args.threads
    rows = []
    records = []
    for cfg in configs:
        logging.getLogger(__name__).info("running %s (%d replications)", cfg.label, cfg.replications)
        res = run_scenario(cfg, methods, n_jobs=threads, opts=opts)
        rows.extend(result_rows(res))
        for r in res.records:
            records.append({"scenario": cfg.label, "config_hash": cfg.config_hash(), **vars(r)})
    seeds = sorted({c.seed for c in configs})
    meta = _metadata(seeds[0] if len(seeds) == 1 else seeds,
                     {"configs": [c.to_dict() for c in configs], "methods": methods, "opts": vars(opts)})
    _write_rows(args.out, RESULT_COLUMNS, rows, meta)
    if args.records:
        cols = ("scenario", "config_hash", "replication", "method", "point", "se", "ci_low", "ci_high", "error")
        _write_rows(args.records, cols, records, meta)
    return EXIT_OK


def _write_rows(path, columns, rows, meta) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        fh.write(f"# {_meta_comment(meta)}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for r in rows:
            w.writerow([_fmt(r.get(c)) for c in columns])


def _read_rows(path) -> tuple[list[dict], list[str]]:
    with open(path, newline="", encoding="utf-8") as fh:
        lines = fh.readlines()
    comments = [ln[1:].strip() for ln in lines if ln.startswith("#")]
    reader = csv.DictReader(ln for ln in lines if not ln.startswith("#"))
    rows = list(reader)
    if reader.fieldnames is None or "method" not in reader.fieldnames or "scenario" not in reader.fieldnames:
        raise DataError(f"{path}: not a results file (needs scenario and method columns)")
    return rows, comments


def cmd_summarize(args) -> int:
    tidy = []
    sources = []
    for p in args.results:
        rows, comments = _read_rows(p)
        sources.extend(comments)
        for r in rows:
            for metric in METRIC_COLUMNS:
                if metric in r:
                    tidy.append({"scenario": r["scenario"], "method": r["method"], "metric": metric,
                                 "value": r[metric]})
    seeds = sorted({tok[5:] for c in sources for tok in c.split() if tok.startswith("seed=")})
    meta = {"version": __version__, "seed": ",".join(seeds) or "none", "config_hash": _hash(sources)}
    if args.out:
        _write_rows(args.out, ("scenario", "method", "metric", "value"), tidy, meta)
    else:
        by = {}
        for t in tidy:
            by.setdefault((t["scenario"], t["method"]), {})[t["metric"]] = t["value"]
        cols = ("bias", "rel_bias", "coverage", "ci_width", "rmse")
        out = sys.stdout
        out.write(f"{'scenario':<42} {'method':<10} " + " ".join(f"{c:>10}" for c in cols) + "\n")
        for (sc, mth), vals in by.items():
            cells = []
            for c in cols:
                v = vals.get(c, "")
                cells.append(f"{float(v):>10.4f}" if v not in ("", None) else f"{'':>10}")
            out.write(f"{sc:<42} {mth:<10} " + " ".join(cells) + "\n")
    return EXIT_OK


# --- parser --------------------------------------------------------------------

def _add_scenario_flags(p):
    p.add_argument("--scenario", help="scenario file (JSON or key=value lines)")
    p.add_argument("--n", type=int)
    p.add_argument("--psi0", type=float)
    p.add_argument("--outcome", choices=(CONTINUOUS, BINARY))
    p.add_argument("--beta-cz", type=float)
    p.add_argument("--beta-c-rule", choices=("zero", "half"))
    p.add_argument("--missing", choices=("none", "mar20"))
    p.add_argument("--seed", type=int)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="cacemi", description="Complier-average causal effect estimation")
    parser.add_argument("--version", action="version", version=f"cacemi {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("estimate", help="estimate the CACE from a trial CSV")
    p.add_argument("--data", required=True, type=Path)
    p.add_argument("--outcome", required=True, choices=(CONTINUOUS, BINARY))
    p.add_argument("--method", required=True, action="append",
                   help=f"one or more of {', '.join(METHODS)} (repeat or comma-separate)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--covariates", action="append", help="covariates for the analysis model")
    p.add_argument("--aux", action="append", help="auxiliary variables for imputation models")
    p.add_argument("--id-col")
    p.add_argument("--z-col")
    p.add_argument("--d-col")
    p.add_argument("--y-col")
    p.add_argument("--m", type=int, default=10)
    p.add_argument("--iterations", type=int, default=250)
    p.add_argument("--rejection-cap", type=int, default=5000)
    p.add_argument("--n-boot", type=int, default=500)
    p.add_argument("--robust", action="store_true", help="HC1 standard errors for tsls")
    p.add_argument("--chains", type=int, default=2)
    p.add_argument("--iter", type=int, default=10000)
    p.add_argument("--burnin", type=int, default=5000)
    p.add_argument("--gamma-on-sd", action="store_true",
                   help="put the Gamma prior on the residual SD instead of the precision")
    p.add_argument("--threads", type=int, default=None)
    p.add_argument("--dump-imputations", type=Path)
    p.add_argument("--dump-samples", type=Path)
    p.add_argument("--out", type=Path)
    p.set_defaults(func=cmd_estimate)

    p = sub.add_parser("simulate", help="write one simulated dataset")
    _add_scenario_flags(p)
    p.add_argument("--replication", type=int, default=0)
    p.add_argument("--with-class", action="store_true", help="include the true compliance class")
    p.add_argument("--out", required=True, type=Path)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("replicate", help="run simulation scenarios")
    _add_scenario_flags(p)
    p.add_argument("--table1", action="store_true", help="run every cell of the factorial design")
    p.add_argument("--methods", action="append")
    p.add_argument("--reps", type=int)
    p.add_argument("--full", action="store_true", help="2000 replications per scenario")
    p.add_argument("--threads", type=int, default=None)
    p.add_argument("--m", type=int, default=10)
    p.add_argument("--iterations", type=int, default=250)
    p.add_argument("--iter", type=int, default=2000, help="MCMC iterations per chain")
    p.add_argument("--burnin", type=int, default=1000)
    p.add_argument("--n-boot", type=int, default=500)
    p.add_argument("--records", type=Path, help="also write per-replication estimates")
    p.add_argument("--out", required=True, type=Path)
    p.set_defaults(func=cmd_replicate)

    p = sub.add_parser("summarize", help="turn results CSVs into a long table")
    p.add_argument("results", nargs="+", type=Path)
    p.add_argument("--out", type=Path, help="tidy CSV (scenario, method, metric, value); default prints a table")
    p.set_defaults(func=cmd_summarize)
    return parser


def _fail(code: int, exc: BaseException) -> int:
    kind = {EXIT_USAGE: "usage", EXIT_DATA: "data", EXIT_NUMERICAL: "numerical"}[code]
    sys.stderr.write(json.dumps({"error": kind, "type": type(exc).__name__, "message": str(exc)}) + "\n")
    return code


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError("a subcommand is required: estimate, simulate, replicate or summarize")
        logging.basicConfig(level=logging.INFO if args.verbose else logging.ERROR,
                            format="%(levelname)s %(name)s: %(message)s")
        if hasattr(args, "threads") and args.threads is None:
            args.threads = _default_threads()
        if getattr(args, "threads", 1) < 1:
            raise UsageError("--threads must be at least 1")
        return args.func(args)
    except UsageError as exc:
        return _fail(EXIT_USAGE, exc)
    except NumericalError as exc:
        return _fail(EXIT_NUMERICAL, exc)
    except (DataError, CaceError, FileNotFoundError, IsADirectoryError, PermissionError) as exc:
        return _fail(EXIT_DATA, exc)
    except ValueError as exc:
        return _fail(EXIT_DATA, exc)


if __name__ == "__main__":
    sys.exit(main())
