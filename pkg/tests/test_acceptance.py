"""Acceptance criteria, one test each, run at their stated tolerances.

Every test prints a single ``ACn PASS|FAIL`` line (visible without ``-s``)
before asserting.  AC5-AC7 run the full experiment roster over five seeds
and take most of the suite's time; deselect them with ``-m "not slow"``.
"""

import json
import math
import time

import numpy as np
import pytest

from agridiff.checks import dpl_rue_recovery, rue_calibration_recovery, run_suite
from agridiff.cli import main
from agridiff.data import default_sites, generate_weather
from agridiff.evaluation import (
    ExperimentSpec,
    best_hybrid_median,
    r_squared,
    rmse,
    run_fewshot_experiment,
    run_noise_experiment,
    run_spatial_experiment,
)
from agridiff.hybrid import (
    DPL_BOUNDS,
    HybridKind,
    HybridModel,
    dpl_parameterize,
    embedded_season,
    mass_balance_forward,
    mass_balance_loss,
    mass_balance_network,
    physics_residual_loss,
)
from agridiff.models import HYBRID_NAMES
from agridiff.neural import Layer, MlpWeights
from agridiff.pbm import CropParams, CropState, WeatherArrays, simulate, simulate_season
from agridiff.training import mse_loss

SEEDS = (0, 1, 2, 3, 4)


@pytest.fixture
def verdict(capsys):
    def emit(n: int, ok: bool, detail: str):
        with capsys.disabled():
            print(f"\nAC{n} {'PASS' if ok else 'FAIL'}: {detail}")
        assert ok, detail

    return emit


def test_ac1_gradient_suite(verdict):
    t0 = time.perf_counter()
    results = run_suite(seed=0, n_random=100, tolerance=1e-5)
    elapsed = time.perf_counter() - t0
    failed = [r.label for r in results if not r.passed]
    worst = max(e.rel_error for r in results for e in r.report.entries)
    n_random = sum(r.label.startswith("random program") for r in results)
    ok = not failed and n_random >= 100 and elapsed < 60
    verdict(1, ok, f"{len(results) - len(failed)}/{len(results)} checks "
                   f"({n_random} random programs), worst rel error {worst:.2e}, {elapsed:.1f}s < 60s"
                   + (f"; failed {failed}" if failed else ""))


def test_ac2_neutral_reductions(verdict):
    wx = generate_weather(default_sites()[0], 3, seed=4).arrays()
    p = CropParams()
    gaps = {}

    # EmbeddedNnPbm with a saturated stress logit vs the crop model with fW = 1
    neutral = MlpWeights([Layer(np.zeros((1, 3)), np.array([40.0]), "identity")])
    emb = HybridModel(HybridKind.EmbeddedNnPbm, p, nn=neutral)
    ref = simulate_season(wx, p, stress_fn=lambda s, w, q: 1.0).values("w_total")
    gaps["EmbeddedNnPbm"] = float(np.max(np.abs(embedded_season(emb, wx, p).values("w_total") - ref)))

    # lambda 0: the hybrid losses reduce to plain data MSE
    rng = np.random.default_rng(0)
    mb = HybridModel(HybridKind.MassBalanceDl, nn=mass_balance_network(2, 4, 0), lambda_physics=0.0)
    feats, obs = rng.normal(size=(3, 9, 2)), rng.uniform(size=(3, 9))
    biomass, _, penalty = mass_balance_forward(mb, feats)
    gaps["MassBalanceDl"] = abs(float(mass_balance_loss(mb, biomass, penalty, obs)) - float(mse_loss(biomass, obs)))
    pinn = HybridModel(HybridKind.PhysicsResidualDl, p, lambda_physics=0.0)
    pred = rng.uniform(size=(3, 9))
    gaps["PhysicsResidualDl"] = abs(float(physics_residual_loss(pinn, pred, obs, wx)) - float(mse_loss(pred, obs)))

    # constant dPL network vs the crop model at fixed bound midpoints
    const = MlpWeights([Layer(np.zeros((4, 3)), np.zeros(4), "identity")])
    attrs = np.stack([s.vector() for s in default_sites()])
    theta = dpl_parameterize(const, attrs)
    mid = p.with_values(**{k: 0.5 * (lo + hi) for k, (lo, hi) in DPL_BOUNDS.items()})
    gaps["SurrogateDpl"] = float(np.max(np.abs(
        simulate_season(wx, p.with_values(**theta)).values("w_total") - simulate_season(wx, mid).values("w_total")
    )))
    ok = all(g <= 1e-6 for g in gaps.values())
    verdict(2, ok, "max |hybrid - pure| " + ", ".join(f"{k} {v:.1e}" for k, v in gaps.items()) + " (tol 1e-6)")


def test_ac3_conservation(verdict):
    n = 1000
    rng = np.random.default_rng(2024)
    sites = default_sites()
    per_site = -(-n // len(sites))
    blocks = [generate_weather(s, per_site, seed=77).by_year() for s in sites]
    b = np.concatenate(blocks)[:n]
    wx = WeatherArrays(b[..., 0], b[..., 1], b[..., 2], b[..., 3])
    tt_mature = rng.uniform(1200, 2000, n)
    params = CropParams(
        t_base=rng.uniform(0, 8, n), tt_mature=tt_mature, tt_sen=tt_mature * rng.uniform(0.5, 0.9, n),
        k_ext=rng.uniform(0.3, 0.9, n), rue=rng.uniform(1, 5, n), sla=rng.uniform(0.005, 0.04, n),
        lai_init=rng.uniform(0.01, 0.5, n), s_max=rng.uniform(50, 200, n), p_crit=rng.uniform(0.2, 1.0, n),
        k_et=rng.uniform(0.3, 1.2, n), r_sen=rng.uniform(0.0005, 0.01, n),
    )
    init = CropState.initial(params, soil_water=params.s_max * rng.uniform(0, 1, n))
    traj = simulate(init, wx, params)
    sw = np.concatenate([np.asarray(init.soil_water)[:, None], traj.values("soil_water")], axis=-1)
    flux = {k: np.stack([np.asarray(getattr(f, k)) for f in traj.fluxes], axis=-1)
            for k in ("transpiration", "evaporation", "drainage")}
    resid = np.diff(sw, axis=-1) - b[..., 3] + flux["transpiration"] + flux["evaporation"] + flux["drainage"]
    w = np.concatenate([np.zeros((n, 1)), traj.values("w_total")], axis=-1)
    worst = float(np.max(np.abs(resid)))
    monotone = bool(np.all(np.diff(w, axis=-1) >= 0))
    bounded = bool(np.all((sw >= 0) & (sw <= np.asarray(params.s_max)[:, None] + 1e-9)))
    ok = worst <= 1e-9 and monotone and bounded
    verdict(3, ok, f"{n} seasons x 365 days: worst water-balance residual {worst:.1e} mm (tol 1e-9), "
                   f"biomass monotone {monotone}, soil water in [0, s_max] {bounded}")


def test_ac4_calibration_recovery(verdict):
    t0 = time.perf_counter()
    cal = rue_calibration_recovery(seed=0)
    dpl = dpl_rue_recovery(seed=0)
    elapsed = time.perf_counter() - t0
    ok = cal.rel_error <= 0.01 and dpl.rel_error <= 0.05 and elapsed < 300
    verdict(4, ok, f"{cal.label}: {cal.estimate:.4f} vs {cal.truth:.4f} ({cal.rel_error:.2%} <= 1%); "
                   f"{dpl.label}: {dpl.estimate:.4f} vs {dpl.truth:.4f} ({dpl.rel_error:.2%} <= 5%); "
                   f"{elapsed:.0f}s < 300s")


def _medians(report, condition, metric="r2"):
    return {m: report.median(m, condition, metric=metric) for m in report.spec["models"] + ["UncalibratedPBM"]}


def _fmt(meds):
    return ", ".join(f"{k} {v:.3f}" for k, v in meds.items())


@pytest.mark.slow
def test_ac5_noise_ordering(verdict):
    t0 = time.perf_counter()
    report = run_noise_experiment(ExperimentSpec("noise", noise_levels=(3,), seeds=SEEDS))
    elapsed = time.perf_counter() - t0
    meds = _medians(report, "level=3")
    best, value = best_hybrid_median(report, "level=3")
    ok = value >= meds["PureDL"] and value >= meds["UncalibratedPBM"] and elapsed < 1200
    verdict(5, ok, f"level 3, {len(SEEDS)} seeds, median validation R2: best hybrid {best} {value:.3f} "
                   f">= PureDL {meds['PureDL']:.3f} and >= UncalibratedPBM {meds['UncalibratedPBM']:.3f}; "
                   f"{elapsed:.0f}s < 1200s [{_fmt(meds)}]")


@pytest.mark.slow
def test_ac6_fewshot_ordering(verdict):
    report = run_fewshot_experiment(ExperimentSpec("fewshot", fewshot_k=(1,), seeds=SEEDS))
    meds = _medians(report, "k=1")
    pbm_informed = max(meds["SurrogateDpl"], meds["PhysicsResidualDl"])
    ok = pbm_informed >= meds["PureDL"]
    verdict(6, ok, f"k=1, {len(SEEDS)} seeds, median validation R2: SurrogateDpl {meds['SurrogateDpl']:.3f}, "
                   f"PhysicsResidualDl {meds['PhysicsResidualDl']:.3f} vs PureDL {meds['PureDL']:.3f} [{_fmt(meds)}]")


@pytest.mark.slow
def test_ac7_spatial_ordering(verdict):
    report = run_spatial_experiment(ExperimentSpec("spatial", seeds=SEEDS))
    conds = ExperimentSpec("spatial").conditions()

    def pooled(model):
        vals = [v for c in conds for v in report.values(model, c, metric="rmse") if v is not None]
        return float(np.median(vals)) if len(vals) == len(conds) * len(SEEDS) else math.nan

    meds = {m: pooled(m) for m in report.spec["models"] + ["UncalibratedPBM"]}
    hybrids = {m: meds[m] for m in HYBRID_NAMES if math.isfinite(meds[m])}
    best = min(hybrids, key=hybrids.get)
    ok = hybrids[best] <= meds["PureDL"]
    verdict(7, ok, f"3 folds x {len(SEEDS)} seeds, median held-out RMSE: best hybrid {best} "
                   f"{hybrids[best]:.1f} <= PureDL {meds['PureDL']:.1f} g/m2 "
                   f"[{', '.join(f'{k} {v:.1f}' for k, v in meds.items())}]")


def test_ac8_oracle_metrics(verdict):
    rng = np.random.default_rng(11)
    worst_r2 = worst_rmse = 0.0
    for _ in range(1000):
        n = int(rng.integers(2, 50))
        o = list(rng.normal(size=n) * rng.uniform(0.1, 1000))
        p = [x + e for x, e in zip(o, rng.normal(size=n) * rng.uniform(0.01, 100))]
        mean = sum(o) / n
        ss_res = sum((a - b) ** 2 for a, b in zip(o, p))
        ss_tot = sum((a - mean) ** 2 for a in o)
        r2_ref = 1.0 - ss_res / ss_tot
        rmse_ref = math.sqrt(sum((a - b) ** 2 for a, b in zip(p, o)) / n)
        worst_r2 = max(worst_r2, abs(r_squared(p, o) - r2_ref) / max(1.0, abs(r2_ref)))
        worst_rmse = max(worst_rmse, abs(rmse(p, o) - rmse_ref) / max(1.0, rmse_ref))
    r2_ex = r_squared([1, 2, 3], [1, 2, 4])
    rmse_ex = rmse([1, 2], [0, 0])
    examples = r2_ex == 1.0 - 3.0 / 14.0 and round(r2_ex, 4) == 0.7857 and rmse_ex == math.sqrt(2.5) \
        and round(rmse_ex, 4) == 1.5811
    ok = worst_r2 <= 1e-12 and worst_rmse <= 1e-12 and examples
    verdict(8, ok, f"1000 random vectors: worst R2 gap {worst_r2:.1e}, worst RMSE gap {worst_rmse:.1e} (tol 1e-12); "
                   f"examples R2 {r2_ex:.4f}, RMSE {rmse_ex:.4f}")


def test_ac9_rerun_is_bit_identical(verdict, tmp_path, capsys):
    cfg = tmp_path / "small.toml"
    cfg.write_text(
        "[twin]\nyears = 50\n[model]\nhidden = 4\n"
        "[training]\nnn_max_epochs = 3\npbm_max_epochs = 3\nhybrid_max_epochs = 3\n"
        "[experiment]\nsites = [\"A\", \"C\"]\njobs = 1\n"
    )
    first = tmp_path / "first"
    assert main(["experiment", "noise", "--config", str(cfg), "--seeds", "2", "--levels", "2,3",
                 "--out", str(first)]) == 0
    header = json.loads((first / "provenance.json").read_text())
    second = tmp_path / "second"
    # rerun from the stored report with a different worker count
    code = main(["report", str(first), "--rerun", "--jobs", "2", "--out", str(second)])
    same = (first / "report.json").read_bytes() == (second / "report.json").read_bytes()
    scatter = (first / "fig7_scatter.csv").read_bytes() == (second / "fig7_scatter.csv").read_bytes()
    n_cells = len(json.loads((first / "report.json").read_text())["cells"])
    ok = code == 0 and same and scatter
    verdict(9, ok, f"noise experiment ({n_cells} cells, all {len(header['config']['experiment']['models'])} models) "
                   f"rerun from its stored spec with 2 workers: report.json identical {same}, "
                   f"fig7_scatter.csv identical {scatter}")
