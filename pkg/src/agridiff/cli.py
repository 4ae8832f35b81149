"""Command-line entry point.

Settings resolve in three layers: built-in defaults, then a TOML config file
(``--config``), then flags.  Every subcommand writes ``provenance.json`` (the
resolved configuration, seeds and version) into ``--out`` before any result,
and writes nothing outside that directory.

Config keys (TOML sections and their defaults)::

    [twin]        years = 68, seed = 0
    [model]       hidden = 16, lambda = 0.1
    [training]    nn_learning_rate = 0.01, nn_max_epochs = 80,
                  pbm_learning_rate = 0.05, pbm_max_epochs = 60,
                  hybrid_learning_rate = 0.03, hybrid_max_epochs = 60,
                  patience = 10, min_delta = 0.0
    [experiment]  models = [...all six...], seeds = [0, 1, 2, 3, 4],
                  levels = [1, 2, 3], fewshot = [7, 3, 1],
                  noise_target = "weather", sites = [] (all), jobs = 0 (all CPUs)
    [run]         site = "B", model = "PureDL", year = 1951

Exit status: 0 success, 1 invalid input or failed check, 2 runtime abort.
Set AGRIDIFF_LOG to error, warn, info or debug to control logging.
"""

from __future__ import annotations

import argparse
import copy
import json
import logging
import os
import sys
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

import numpy as np

from . import __version__
from .autodiff import DomainError
from .data import DataFormatError, build_twin, export_csv, ingest_csv, split_years
from .hybrid import DPL_BOUNDS
from .models import MODEL_NAMES, REFERENCE_NAMES, HarnessConfig, build_model, make_batch
from .pbm import CropParams, simulate_season
from .training import NonFiniteError, calibrate_pbm

log = logging.getLogger("agridiff")

DEFAULTS = {
    "twin": {"years": 68, "seed": 0},
    "model": {"hidden": 16, "lambda": 0.1},
    "training": {
        "nn_learning_rate": 0.01,
        "nn_max_epochs": 80,
        "pbm_learning_rate": 0.05,
        "pbm_max_epochs": 60,
        "hybrid_learning_rate": 0.03,
        "hybrid_max_epochs": 60,
        "patience": 10,
        "min_delta": 0.0,
    },
    "experiment": {
        "models": list(MODEL_NAMES),
        "seeds": [0, 1, 2, 3, 4],
        "levels": [1, 2, 3],
        "fewshot": [7, 3, 1],
        "noise_target": "weather",
        "sites": [],
        "jobs": 0,
    },
    "run": {"site": "B", "model": "PureDL", "year": 1951},
}

LOG_LEVELS = {"error": logging.ERROR, "warn": logging.WARNING, "info": logging.INFO, "debug": logging.DEBUG}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    """Usage errors go to stderr with exit status 1."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _int_list(text: str) -> list[int]:
    try:
        return [int(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _seeds(text: str) -> list[int]:
    """``5`` means seeds 0..4; a comma list gives the seeds themselves."""
    values = _int_list(text)
    if "," not in text and len(values) == 1:
        if values[0] < 1:
            raise argparse.ArgumentTypeError("seed count must be >= 1")
        return list(range(values[0]))
    return values


def _models(text: str) -> list[str]:
    names = [t.strip() for t in text.split(",") if t.strip()]
    bad = [n for n in names if n not in MODEL_NAMES + REFERENCE_NAMES]
    if bad:
        raise argparse.ArgumentTypeError(f"unknown model(s) {bad}; choose from {list(MODEL_NAMES)}")
    return names


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="TOML config file (see module help for keys)")
    common.add_argument("--out", default="agridiff-out", help="output directory (default: agridiff-out)")
    common.add_argument("--seed", type=int, help="twin/data seed (twin.seed)")
    common.add_argument("--jobs", type=int, help="worker processes for experiment cells (0 = all CPUs)")
    common.add_argument("--lambda", dest="lambda_", type=float, help="physics penalty weight (model.lambda)")

    parser = _Parser(prog="agridiff", description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("--version", action="version", version=f"agridiff {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    sub.add_parser("gen-data", parents=[common], help="write synthetic twin weather and labels as CSV")

    p = sub.add_parser("simulate", parents=[common], help="run the crop model for one site-year")
    p.add_argument("--weather", help="weather CSV (default: twin weather of --site)")
    p.add_argument("--site", help="twin site id (run.site)")
    p.add_argument("--year", type=int, help="year to simulate (run.year)")

    p = sub.add_parser("calibrate", parents=[common], help="calibrate crop parameters on twin harvests")
    p.add_argument("--site", help="twin site id (run.site)")

    p = sub.add_parser("train", parents=[common], help="train one model and score it")
    p.add_argument("--model", choices=MODEL_NAMES + REFERENCE_NAMES, help="model name (run.model)")
    p.add_argument("--site", help="twin site id (run.site)")

    p = sub.add_parser("experiment", parents=[common], help="run a noise, fewshot or spatial experiment")
    p.add_argument("protocol", choices=("noise", "fewshot", "spatial"))
    p.add_argument("--seeds", type=_seeds, help="seed count N (0..N-1) or comma list")
    p.add_argument("--levels", type=_int_list, help="noise levels, e.g. 1,2,3")
    p.add_argument("--fewshot", type=_int_list, help="training-year counts, e.g. 7,3,1")
    p.add_argument("--noise-target", choices=("weather", "biomass", "both"))
    p.add_argument("--models", type=_models, help="comma list of models")

    p = sub.add_parser("gradcheck", parents=[common], help="compare reverse-mode and finite-difference gradients")
    p.add_argument("--programs", type=int, default=100, help="number of random programs (default 100)")

    p = sub.add_parser("report", parents=[common], help="summarize a report, or rerun it from its provenance")
    p.add_argument("path", help="experiment output directory or report.json")
    p.add_argument("--rerun", action="store_true", help="rerun the experiment into --out")
    return parser


# ---------------------------------------------------------------- config

def _merge(base: dict, override: dict, where: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        if key not in base:
            raise UsageError(f"unknown config key {where}{key}")
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise UsageError(f"config key {where}{key} must be a section")
            out[key] = _merge(base[key], value, f"{where}{key}.")
        else:
            out[key] = value
    return out


def resolve_config(args) -> dict:
    cfg = copy.deepcopy(DEFAULTS)
    if args.config:
        path = Path(args.config)
        if not path.is_file():
            raise FileNotFoundError(f"config file not found: {path}")
        with open(path, "rb") as fh:
            try:
                cfg = _merge(cfg, tomllib.load(fh))
            except tomllib.TOMLDecodeError as exc:
                raise UsageError(f"{path}: {exc}") from None
    flags = {
        ("twin", "seed"): args.seed,
        ("model", "lambda"): args.lambda_,
        ("experiment", "jobs"): args.jobs,
        ("experiment", "seeds"): getattr(args, "seeds", None),
        ("experiment", "levels"): getattr(args, "levels", None),
        ("experiment", "fewshot"): getattr(args, "fewshot", None),
        ("experiment", "noise_target"): getattr(args, "noise_target", None),
        ("experiment", "models"): getattr(args, "models", None),
        ("run", "site"): getattr(args, "site", None),
        ("run", "model"): getattr(args, "model", None),
        ("run", "year"): getattr(args, "year", None),
    }
    for (section, key), value in flags.items():
        if value is not None:
            cfg[section][key] = value
    return cfg


def harness_config(cfg: dict) -> HarnessConfig:
    t = cfg["training"]
    return HarnessConfig(hidden=int(cfg["model"]["hidden"]), lambda_physics=float(cfg["model"]["lambda"]), **t)


def experiment_spec(cfg: dict, protocol: str):
    from .evaluation import ExperimentSpec

    e = cfg["experiment"]
    return ExperimentSpec(
        protocol=protocol,
        models=tuple(e["models"]),
        noise_levels=tuple(e["levels"]),
        fewshot_k=tuple(e["fewshot"]),
        seeds=tuple(e["seeds"]),
        noise_target=e["noise_target"],
        sites=tuple(e["sites"]) or None,
        years=int(cfg["twin"]["years"]),
        harness=harness_config(cfg),
    )


def write_provenance(out: Path, command: list[str], cfg: dict) -> None:
    out.mkdir(parents=True, exist_ok=True)
    header = {"agridiff_version": __version__, "numpy": np.__version__, "command": command, "config": cfg}
    (out / "provenance.json").write_text(json.dumps(header, indent=1, sort_keys=True) + "\n", encoding="utf-8")


# ---------------------------------------------------------------- commands

def _twin(cfg):
    return build_twin(years=int(cfg["twin"]["years"]), seed=int(cfg["twin"]["seed"]))


def cmd_gen_data(args, cfg, out: Path) -> int:
    twin = _twin(cfg)
    rows = ["site_id,year,harvest_biomass,harvest_doy"]
    for site in twin.sites:
        sid = site.site_id
        export_csv(twin.weather[sid], out / f"weather_{sid}.csv")
        for year, h, d in zip(twin.years, twin.harvest[sid], twin.harvest_day[sid]):
            rows.append(f"{sid},{year},{h:.6f},{int(d)}")
    (out / "labels.csv").write_text("\n".join(rows) + "\n", encoding="utf-8")
    print(f"wrote weather and labels for {len(twin.sites)} sites x {len(twin.years)} years to {out}")
    return 0


def cmd_simulate(args, cfg, out: Path) -> int:
    year = int(cfg["run"]["year"])
    if args.weather:
        series = ingest_csv(args.weather)
        params = CropParams()
    else:
        twin = _twin(cfg)
        site = cfg["run"]["site"]
        if site not in twin.weather:
            raise UsageError(f"unknown site {site!r}")
        series, params = twin.weather[site], twin.truth[site]
    if year not in series.years:
        raise UsageError(f"year {year} not in weather ({series.years[0]}..{series.years[-1]})")
    traj = simulate_season(series.arrays([year]), params)
    traj_one = _first(traj)
    (out / "trajectory.csv").write_text(traj_one.to_csv(), encoding="utf-8")
    print(f"harvest biomass {traj.values('w_total')[0, -1]:.3f} g/m2; trajectory in {out / 'trajectory.csv'}")
    return 0


def _first(traj):
    from .pbm import Trajectory

    def pick(obj):
        return type(obj)(*(np.asarray(getattr(obj, f))[0] for f in obj.__dataclass_fields__))

    return Trajectory([pick(s) for s in traj.states], [pick(f) for f in traj.fluxes])


def cmd_calibrate(args, cfg, out: Path) -> int:
    twin = _twin(cfg)
    site = cfg["run"]["site"]
    if site not in twin.weather:
        raise UsageError(f"unknown site {site!r}")
    plan = split_years(twin.years, seed=int(cfg["twin"]["seed"]))
    h = harness_config(cfg)
    opt, stop = h.pbm_opt()
    tr = make_batch(twin, [(site, plan.train_years)])
    te = make_batch(twin, [(site, plan.test_years)])
    res = calibrate_pbm(CropParams(), dict(DPL_BOUNDS), tr.harvest, tr.weather, opt, stop,
                        test_observations=te.harvest, test_weather=te.weather)
    found = {k: float(getattr(res.params, k)) for k in DPL_BOUNDS}
    truth = {k: float(getattr(twin.truth[site], k)) for k in DPL_BOUNDS}
    result = {"site": site, "params": found, "truth": truth, "loss_trace": res.loss_trace,
              "aborted": res.report.aborted, "abort_reason": res.report.abort_reason}
    (out / "calibration.json").write_text(json.dumps(result, indent=1, sort_keys=True) + "\n", encoding="utf-8")
    (out / "curves.csv").write_text(res.report.curves_csv(), encoding="utf-8")
    for k in DPL_BOUNDS:
        print(f"{k:8s} {found[k]:10.4f}   truth {truth[k]:10.4f}")
    return 2 if res.report.aborted else 0


def cmd_train(args, cfg, out: Path) -> int:
    from .evaluation import metrics

    twin = _twin(cfg)
    site = cfg["run"]["site"]
    if site not in twin.weather:
        raise UsageError(f"unknown site {site!r}")
    plan = split_years(twin.years, seed=int(cfg["twin"]["seed"]))
    batches = {
        "train": make_batch(twin, [(site, plan.train_years)]),
        "test": make_batch(twin, [(site, plan.test_years)]),
        "validation": make_batch(twin, [(site, plan.validation_years)]),
    }
    model = build_model(cfg["run"]["model"], harness_config(cfg), int(cfg["twin"]["seed"]))
    model.fit(batches["train"], batches["test"], {})
    scores = {}
    for split, batch in batches.items():
        m = metrics(model.predict(batch), batch.harvest)
        scores[split] = {"r2": m.r_squared, "rmse": m.rmse, "n": m.n}
        print(f"{split:10s} R2 {m.r_squared:8.4f}  RMSE {m.rmse:9.3f}")
    result = {"model": model.name, "site": site, "metrics": scores}
    if model.report is not None:
        result["train_report"] = {k: v for k, v in model.report.to_dict().items() if k != "best_weights"}
        (out / "curves.csv").write_text(model.report.curves_csv(), encoding="utf-8")
    (out / "train.json").write_text(json.dumps(result, indent=1, sort_keys=True) + "\n", encoding="utf-8")
    if model.report is not None and model.report.aborted:
        log.error("training aborted: %s", model.report.abort_reason)
        return 2
    return 0


def _jobs(cfg) -> int:
    j = int(cfg["experiment"]["jobs"])
    return j if j > 0 else (os.cpu_count() or 1)


def cmd_experiment(args, cfg, out: Path) -> int:
    from .evaluation import run_experiment

    spec = experiment_spec(cfg, args.protocol)
    report = run_experiment(spec, jobs=_jobs(cfg))
    report.write(out)
    _print_summary(report.to_dict())
    return 0


def cmd_gradcheck(args, cfg, out: Path) -> int:
    from .checks import run_suite

    results = run_suite(seed=int(cfg["twin"]["seed"]), n_random=args.programs)
    rows = []
    print(f"{'check':48s} {'entries':>7s} {'worst rel':>11s}  result")
    for r in results:
        worst = r.report.worst()
        rel = worst.rel_error if worst else 0.0
        print(f"{r.label:48s} {len(r.report.entries):7d} {rel:11.3e}  {'pass' if r.passed else 'FAIL'}")
        rows.append({"label": r.label, "passed": r.passed, "entries": [e.to_dict() for e in r.report.entries]})
    (out / "gradcheck.json").write_text(json.dumps(rows, indent=1) + "\n", encoding="utf-8")
    failed = sum(not r.passed for r in results)
    print(f"{len(results) - failed}/{len(results)} checks passed")
    return 0 if failed == 0 else 1


def _print_summary(report: dict) -> None:
    print(f"{'model':18s} {'condition':10s} {'metric':6s} {'median':>10s} {'q1':>10s} {'q3':>10s}  n")
    for s in report["summaries"]:
        def f(x):
            return f"{x:10.4f}" if x is not None else f"{'nan':>10s}"
        print(f"{s['model']:18s} {s['condition']:10s} {s['metric']:6s} {f(s['median'])} {f(s['q1'])} {f(s['q3'])}  {s['n']}")
    failed = [c for c in report["cells"] if c["status"] != "ok"]
    if failed:
        print(f"{len(failed)} failed cells")


def cmd_report(args, cfg, out: Path) -> int:
    from .evaluation import ExperimentSpec, run_experiment

    path = Path(args.path)
    report_path = path / "report.json" if path.is_dir() else path
    if not report_path.is_file():
        raise FileNotFoundError(f"report not found: {report_path}")
    stored = json.loads(report_path.read_text(encoding="utf-8"))
    if not args.rerun:
        _print_summary(stored)
        return 0
    spec = ExperimentSpec.from_dict(stored["spec"])
    header = report_path.parent / "provenance.json"
    jobs = _jobs(json.loads(header.read_text())["config"]) if header.is_file() else 1
    report = run_experiment(spec, jobs=jobs if args.jobs is None else _jobs(cfg))
    report.write(out)
    same = report.to_json() + "\n" == report_path.read_text(encoding="utf-8")
    print("rerun report is bit-identical" if same else "rerun report DIFFERS from the original")
    return 0 if same else 1


COMMANDS = {
    "gen-data": cmd_gen_data,
    "simulate": cmd_simulate,
    "calibrate": cmd_calibrate,
    "train": cmd_train,
    "experiment": cmd_experiment,
    "gradcheck": cmd_gradcheck,
    "report": cmd_report,
}


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    level = LOG_LEVELS.get(os.environ.get("AGRIDIFF_LOG", "warn").lower(), logging.WARNING)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = resolve_config(args)
        out = Path(args.out)
        write_provenance(out, argv, cfg)
        return COMMANDS[args.command](args, cfg, out)
    except (NonFiniteError, DomainError, FloatingPointError, RuntimeError) as exc:
        print(f"agridiff {args.command}: aborted: {exc}", file=sys.stderr)
        return 2
    except (UsageError, FileNotFoundError, DataFormatError, ValueError) as exc:
        print(f"agridiff {args.command}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
