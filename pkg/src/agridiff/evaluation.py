"""Metrics and the noise, few-shot and spatial experiment protocols.

An experiment is split into independent jobs, one per (seed, condition).  Each
job builds the twin for its seed, prepares the training, test and validation
batches, fits every requested model and scores harvest biomass per site-year.
Jobs may run in a process pool; the report is assembled in a fixed order so
the JSON output does not depend on scheduling.
"""

from __future__ import annotations

import csv
import json
import logging
import math
import platform
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import __version__
from .data import (
    NoiseSpec,
    TwinDataset,
    build_twin,
    default_sites,
    fewshot_subset,
    inject_biomass_noise,
    inject_noise,
    spatial_folds,
    split_years,
)
from .models import (
    HYBRID_NAMES,
    MODEL_FAMILY,
    MODEL_NAMES,
    REFERENCE_NAMES,
    HarnessConfig,
    SeasonBatch,
    build_model,
    make_batch,
)

log = logging.getLogger(__name__)

__all__ = [
    "Metrics",
    "r_squared",
    "rmse",
    "metrics",
    "boxplot_summary",
    "ExperimentSpec",
    "ExperimentReport",
    "run_experiment",
    "run_noise_experiment",
    "run_fewshot_experiment",
    "run_spatial_experiment",
]

PROTOCOLS = ("noise", "fewshot", "spatial")
NOISE_TARGETS = ("weather", "biomass", "both")
SPLITS = ("train", "test", "validation")


# ---------------------------------------------------------------- metrics

def _pair(predicted, observed) -> tuple[np.ndarray, np.ndarray]:
    p = np.asarray(predicted, dtype=np.float64).ravel()
    o = np.asarray(observed, dtype=np.float64).ravel()
    if p.shape != o.shape:
        raise ValueError(f"length mismatch: {p.size} predicted vs {o.size} observed")
    return p, o


def r_squared(predicted, observed) -> float:
    """Coefficient of determination about the observed mean.

    Constant observations leave it undefined: NaN is returned with a warning.
    """
    p, o = _pair(predicted, observed)
    if o.size < 2:
        raise ValueError("r_squared needs at least two values")
    ss_tot = float(np.sum((o - o.mean()) ** 2))
    if ss_tot == 0.0:
        warnings.warn("r_squared undefined: observations are constant", RuntimeWarning, stacklevel=2)
        return math.nan
    return 1.0 - float(np.sum((o - p) ** 2)) / ss_tot


def rmse(predicted, observed) -> float:
    p, o = _pair(predicted, observed)
    if o.size < 1:
        raise ValueError("rmse needs at least one value")
    return math.sqrt(float(np.mean((p - o) ** 2)))


@dataclass(frozen=True)
class Metrics:
    r_squared: float
    rmse: float
    n: int


def metrics(predicted, observed) -> Metrics:
    p, o = _pair(predicted, observed)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        r2 = r_squared(p, o) if o.size >= 2 else math.nan
    return Metrics(r2, rmse(p, o), int(o.size))


def boxplot_summary(values: Iterable[float]) -> dict[str, float]:
    """Five-number summary; quartiles interpolate linearly between order statistics."""
    v = np.sort(np.asarray(list(values), dtype=np.float64))
    if v.size == 0:
        raise ValueError("need at least one replicate")
    q1, med, q3 = np.quantile(v, [0.25, 0.5, 0.75])
    return {"min": float(v[0]), "q1": float(q1), "median": float(med), "q3": float(q3), "max": float(v[-1])}


# ---------------------------------------------------------------- spec / report

@dataclass(frozen=True)
class ExperimentSpec:
    """What to run.  ``sites`` of None means every twin site."""

    protocol: str
    models: tuple[str, ...] = MODEL_NAMES
    noise_levels: tuple[int, ...] = (1, 2, 3)
    fewshot_k: tuple[int, ...] = (7, 3, 1)
    seeds: tuple[int, ...] = (0, 1, 2, 3, 4)
    noise_target: str = "weather"
    sites: tuple[str, ...] | None = None
    years: int = 68
    base_fraction: float = 0.1
    include_reference: bool = True
    harness: HarnessConfig = field(default_factory=HarnessConfig)

    def __post_init__(self):
        if self.protocol not in PROTOCOLS:
            raise ValueError(f"protocol must be one of {PROTOCOLS}")
        unknown = set(self.models) - set(MODEL_NAMES) - set(REFERENCE_NAMES)
        if unknown or not self.models:
            raise ValueError(f"unknown or empty models: {sorted(unknown)}")
        if not self.seeds:
            raise ValueError("at least one seed is required")
        if len(set(self.seeds)) != len(self.seeds):
            raise ValueError("seeds must be distinct")
        if self.noise_target not in NOISE_TARGETS:
            raise ValueError(f"noise_target must be one of {NOISE_TARGETS}")
        if self.protocol == "noise" and (
            not self.noise_levels or not set(self.noise_levels) <= {0, 1, 2, 3}
        ):
            raise ValueError("noise levels must be a non-empty subset of 0..3")
        if self.protocol == "fewshot" and (not self.fewshot_k or min(self.fewshot_k) < 1):
            raise ValueError("fewshot_k must be non-empty positive year counts")
        if self.protocol == "spatial" and self.sites is not None and len(self.sites) != 3:
            raise ValueError("the spatial protocol needs exactly 3 sites")

    @property
    def roster(self) -> tuple[str, ...]:
        extra = tuple(r for r in REFERENCE_NAMES if self.include_reference and r not in self.models)
        return tuple(self.models) + extra

    def conditions(self) -> list[str]:
        if self.protocol == "noise":
            return [f"level={lv}" for lv in self.noise_levels]
        if self.protocol == "fewshot":
            return [f"k={k}" for k in self.fewshot_k]
        sites = self.sites or tuple(s.site_id for s in default_sites())
        return [f"fold={s}" for s in reversed(sites)]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["harness"] = self.harness.to_dict()
        return _jsonable(d)

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentSpec":
        d = dict(d)
        harness = HarnessConfig(**{k: tuple(v) if isinstance(v, list) else v for k, v in d.pop("harness").items()})
        tupled = {k: tuple(v) if isinstance(v, list) else v for k, v in d.items()}
        return cls(harness=harness, **tupled)


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, float) and not math.isfinite(obj):
        return None
    if isinstance(obj, np.generic):
        return _jsonable(obj.item())
    return obj


def provenance(spec: ExperimentSpec) -> dict:
    return {
        "package": "agridiff",
        "version": __version__,
        "numpy": np.__version__,
        "python": platform.python_version(),
        "seeds": list(spec.seeds),
        "model_family": {m: MODEL_FAMILY[m] for m in spec.roster},
        "family_note": "family labels follow the hybrid taxonomy as chosen by this harness",
        "artifact_defaults": (
            "learning rates, epoch limits, patience, hidden size and lambda are "
            "artifact choices (see spec.harness)"
        ),
    }


@dataclass
class ExperimentReport:
    spec: dict
    provenance: dict
    cells: list[dict]
    summaries: list[dict]
    daily: list[dict]
    scatter: list[dict]

    def to_dict(self) -> dict:
        return _jsonable(
            {
                "spec": self.spec,
                "provenance": self.provenance,
                "cells": self.cells,
                "summaries": self.summaries,
                "daily": self.daily,
            }
        )

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True)

    def values(self, model: str, condition: str, split: str = "validation", metric: str = "r2") -> list[float]:
        return [
            c[metric]
            for c in self.cells
            if c["model"] == model and c["condition"] == condition and c["split"] == split
        ]

    def median(self, model: str, condition: str, split: str = "validation", metric: str = "r2") -> float:
        vals = [v for v in self.values(model, condition, split, metric) if v is not None and math.isfinite(v)]
        return float(np.median(vals)) if vals else math.nan

    def write(self, out_dir) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "report.json").write_text(self.to_json() + "\n", encoding="utf-8")
        if self.spec["protocol"] == "noise":
            with open(out / "fig7_scatter.csv", "w", encoding="utf-8", newline="") as fh:
                w = csv.writer(fh, lineterminator="\n")
                w.writerow(("year", "observed", "predicted", "model", "level"))
                for r in self.scatter:
                    w.writerow((r["year"], repr(r["observed"]), repr(r["predicted"]), r["model"], r["level"]))
        if self.spec["protocol"] == "spatial":
            with open(out / "fig9_box.csv", "w", encoding="utf-8", newline="") as fh:
                w = csv.writer(fh, lineterminator="\n")
                w.writerow(("model", "fold", "split", "rmse"))
                for c in self.cells:
                    w.writerow((c["model"], c["condition"].split("=", 1)[1], c["split"], _csv_num(c["rmse"])))


def _csv_num(x) -> str:
    return "" if x is None or not math.isfinite(x) else repr(x)


# ---------------------------------------------------------------- jobs

@dataclass
class _Prepared:
    train: SeasonBatch
    test: SeasonBatch
    validation: SeasonBatch
    collocation: SeasonBatch | None
    level: int | None = None


def _site_ids(spec: ExperimentSpec, twin: TwinDataset) -> list[str]:
    ids = [s.site_id for s in twin.sites]
    if spec.sites is None:
        return ids
    missing = set(spec.sites) - set(ids)
    if missing:
        raise ValueError(f"unknown sites {sorted(missing)}")
    return [s for s in ids if s in spec.sites]


def _prepare(spec: ExperimentSpec, seed: int, condition: str) -> _Prepared:
    twin = build_twin(years=spec.years, seed=seed)
    plan = split_years(twin.years, seed=seed)
    key, value = condition.split("=", 1)
    sites = _site_ids(spec, twin)
    weather, harvest, daily = dict(twin.weather), dict(twin.harvest), dict(twin.daily)
    level = None
    if key == "level":
        level = int(value)
        noise_seed = seed * 10 + level
        for sid in sites:
            if spec.noise_target in ("weather", "both"):
                weather[sid] = inject_noise(twin.weather[sid], NoiseSpec(level, spec.base_fraction, noise_seed))
            if spec.noise_target in ("biomass", "both"):
                site_seed = noise_seed * 1000 + sites.index(sid)
                daily[sid] = inject_biomass_noise(twin.daily[sid], level, spec.base_fraction, site_seed)
                harvest[sid] = daily[sid][:, -1].copy()
    elif key == "k":
        plan = fewshot_subset(plan, int(value), seed)
    noisy = dict(weather=weather, harvest=harvest, daily=daily)

    if key == "fold":
        held_out = value
        train_sites = [s for s in sites if s != held_out]
        if held_out not in sites or len(train_sites) != 2:
            raise ValueError(f"fold {held_out!r} needs exactly 3 sites")
        train_sel = [(s, plan.train_years) for s in train_sites]
        test_sel = [(s, plan.test_years) for s in train_sites]
        val_sel = [(held_out, plan.validation_years)]
    else:
        train_sel = [(s, plan.train_years) for s in sites]
        test_sel = [(s, plan.test_years) for s in sites]
        val_sel = [(s, plan.validation_years) for s in sites]
    unlabeled = [y for y in plan.calibration_years if y not in plan.train_years]
    colloc_sel = [(s, unlabeled) for s, _ in train_sel] if unlabeled else None
    return _Prepared(
        make_batch(twin, train_sel, **noisy),
        make_batch(twin, test_sel, **noisy),
        make_batch(twin, val_sel),  # always clean
        make_batch(twin, colloc_sel, **noisy) if colloc_sel else None,
        level,
    )


def _run_job(args: tuple[dict, int, str]) -> dict:
    spec_dict, seed, condition = args
    spec = ExperimentSpec.from_dict(spec_dict)
    cells, daily, scatter = [], [], []
    try:
        prep = _prepare(spec, seed, condition)
    except Exception as exc:  # recorded, never dropped
        log.error("preparing %s seed %d failed: %s", condition, seed, exc)
        for model in spec.roster:
            for split in SPLITS:
                cells.append(_cell(model, condition, seed, split, None, f"failed: {exc}"))
        return {"cells": cells, "daily": daily, "scatter": scatter}

    context = {"collocation": prep.collocation}
    for name in spec.roster:
        try:
            model = build_model(name, spec.harness, seed)
            model.fit(prep.train, prep.test, context)
            status = "ok"
            if model.report is not None and model.report.aborted:
                status = f"failed: {model.report.abort_reason}"
            for split in SPLITS:
                batch = getattr(prep, split)
                cells.append(_cell(name, condition, seed, split, metrics(model.predict(batch), batch.harvest), status))
            val_daily = model.predict_daily(prep.validation)
            daily.append(
                {"model": name, "condition": condition, "seed": seed,
                 "rmse": rmse(val_daily, prep.validation.daily), "status": status}
            )
            if prep.level is not None and seed == spec.seeds[0]:
                pred = model.predict(prep.validation)
                for y, o, p in zip(prep.validation.years, prep.validation.harvest, pred):
                    scatter.append({"year": y, "observed": float(o), "predicted": float(p),
                                    "model": name, "level": prep.level})
        except Exception as exc:
            log.error("%s %s seed %d failed: %s", name, condition, seed, exc)
            cells[:] = [c for c in cells if not (c["model"] == name)]
            for split in SPLITS:
                cells.append(_cell(name, condition, seed, split, None, f"failed: {type(exc).__name__}: {exc}"))
            daily.append({"model": name, "condition": condition, "seed": seed, "rmse": None,
                          "status": f"failed: {exc}"})
        log.info("%s %s seed %d done", name, condition, seed)
    return {"cells": cells, "daily": daily, "scatter": scatter}


def _cell(model, condition, seed, split, m: Metrics | None, status) -> dict:
    return {
        "model": model,
        "condition": condition,
        "seed": seed,
        "split": split,
        "r2": None if m is None or not math.isfinite(m.r_squared) else m.r_squared,
        "rmse": None if m is None else m.rmse,
        "status": status,
    }


def _summaries(spec: ExperimentSpec, cells: list[dict]) -> list[dict]:
    out = []
    for model in spec.roster:
        for condition in spec.conditions():
            for metric in ("r2", "rmse"):
                vals = [
                    c[metric]
                    for c in cells
                    if c["model"] == model and c["condition"] == condition
                    and c["split"] == "validation" and c[metric] is not None
                ]
                row = {"model": model, "condition": condition, "split": "validation", "metric": metric,
                       "n": len(vals)}
                if vals:
                    row.update(boxplot_summary(vals))
                else:
                    row.update(dict.fromkeys(("min", "q1", "median", "q3", "max")))
                out.append(row)
    return out


def run_experiment(spec: ExperimentSpec, jobs: int = 1) -> ExperimentReport:
    """Run every (seed, condition) job and assemble the report."""
    spec_dict = spec.to_dict()
    tasks = [(spec_dict, seed, cond) for seed in spec.seeds for cond in spec.conditions()]
    if jobs > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=min(jobs, len(tasks))) as pool:
            results = list(pool.map(_run_job, tasks))
    else:
        results = [_run_job(t) for t in tasks]
    # fixed assembly order: model, condition, seed, split
    order = {m: i for i, m in enumerate(spec.roster)}
    corder = {c: i for i, c in enumerate(spec.conditions())}
    cells = [c for r in results for c in r["cells"]]
    cells.sort(key=lambda c: (order[c["model"]], corder[c["condition"]], spec.seeds.index(c["seed"]),
                              SPLITS.index(c["split"])))
    daily = [d for r in results for d in r["daily"]]
    daily.sort(key=lambda d: (order[d["model"]], corder[d["condition"]], spec.seeds.index(d["seed"])))
    scatter = [s for r in results for s in r["scatter"]]
    scatter.sort(key=lambda s: (s["level"], order[s["model"]]))
    return ExperimentReport(spec_dict, provenance(spec), cells, _summaries(spec, cells), daily, scatter)


def _checked(spec: ExperimentSpec, protocol: str) -> ExperimentSpec:
    if spec.protocol != protocol:
        raise ValueError(f"expected a {protocol} spec, got {spec.protocol}")
    return spec


def run_noise_experiment(spec: ExperimentSpec, jobs: int = 1) -> ExperimentReport:
    return run_experiment(_checked(spec, "noise"), jobs)


def run_fewshot_experiment(spec: ExperimentSpec, jobs: int = 1) -> ExperimentReport:
    return run_experiment(_checked(spec, "fewshot"), jobs)


def run_spatial_experiment(spec: ExperimentSpec, jobs: int = 1) -> ExperimentReport:
    return run_experiment(_checked(spec, "spatial"), jobs)


def best_hybrid_median(report: ExperimentReport, condition: str, metric: str = "r2") -> tuple[str, float]:
    """Hybrid with the best median validation metric (highest R2, lowest RMSE)."""
    models = [m for m in report.spec["models"] if m in HYBRID_NAMES]
    if not models:
        raise ValueError("the report contains no hybrid model")
    scored = [(m, report.median(m, condition, metric=metric)) for m in models]
    scored = [s for s in scored if math.isfinite(s[1])]
    if not scored:
        return models[0], math.nan
    return (max if metric == "r2" else min)(scored, key=lambda s: s[1])
