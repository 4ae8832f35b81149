"""Gradient-check suite shared by the command line and the tests.

Four kinds of program are checked against central finite differences:
random compositions of elementary operations, the crop model over a full
year, an LSTM over ten steps, and the training losses of the four hybrids.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import GradCheckReport, grad_check
from .data import build_twin, default_sites, generate_weather
from .hybrid import (
    DPL_BOUNDS,
    HybridKind,
    HybridModel,
    dpl_network,
    dpl_parameterize,
    embedded_season,
    mass_balance_forward,
    mass_balance_loss,
    mass_balance_network,
    physics_residual_loss,
    stress_network,
)
from .neural import LstmSpec, init_weights, lstm_forward
from .pbm import CropParams, CropState, WeatherArrays, simulate, simulate_season
from .training import AdamConfig, EarlyStopConfig, calibrate_pbm, mse_loss, train

__all__ = [
    "CheckResult",
    "random_program",
    "pbm_check",
    "lstm_check",
    "hybrid_checks",
    "run_suite",
    "Recovery",
    "rue_calibration_recovery",
    "dpl_rue_recovery",
]

# unary ops with the input interval that keeps them smooth and defined
_UNARY = {
    "neg": lambda x: ad.mul(x, -1.0),
    "exp": lambda x: ad.exp(ad.mul(x, 0.5)),
    "tanh": ad.tanh,
    "sigmoid": ad.sigmoid,
    "square": lambda x: ad.mul(x, x),
    "ln1p": lambda x: ad.ln(ad.add(ad.mul(x, x), 1.0)),
    "softplus": lambda x: ad.softplus(x, 1.0),
}
_BINARY = {
    "add": ad.add,
    "sub": ad.sub,
    "mul": ad.mul,
    "div": lambda a, b: ad.div(a, ad.add(ad.mul(b, b), 1.0)),
}


@dataclass
class CheckResult:
    label: str
    report: GradCheckReport

    @property
    def passed(self) -> bool:
        return self.report.passed


def random_program(rng: np.random.Generator, max_ops: int = 50, n_inputs: int = 3):
    """A random straight-line program and a point in [-2, 2] (0.1 from the edges).

    Divisors and logarithm arguments are shifted to stay away from zero, so
    every program is smooth on the sampled domain.
    """
    n_ops = int(rng.integers(1, max_ops + 1))
    plan = []
    for _ in range(n_ops):
        if rng.random() < 0.5:
            plan.append(("u", str(rng.choice(list(_UNARY))), int(rng.integers(0, 10**6))))
        else:
            plan.append(("b", str(rng.choice(list(_BINARY))), int(rng.integers(0, 10**6)), int(rng.integers(0, 10**6))))
    point = {f"x{i}": float(rng.uniform(-1.9, 1.9)) for i in range(n_inputs)}

    def program(tape, inputs):
        pool = list(inputs.values())
        for op in plan:
            if op[0] == "u":
                x = pool[op[2] % len(pool)]
                # keep values bounded so chained exps stay in range
                pool.append(ad.tanh(_UNARY[op[1]](x)) if op[1] in ("exp", "square") else _UNARY[op[1]](x))
            else:
                a, b = pool[op[2] % len(pool)], pool[op[3] % len(pool)]
                pool.append(_BINARY[op[1]](a, b))
        out = pool[-1]
        for v in pool[:-1]:
            out = ad.add(out, ad.mul(v, 0.1))
        return out

    return program, point, n_ops


def _season_weather(seed: int, years: int = 1) -> WeatherArrays:
    series = generate_weather(default_sites()[1], years, seed)
    return series.arrays()


def pbm_check(seed: int = 0, tolerance: float = 1e-5) -> CheckResult:
    """Every crop parameter gradient of final biomass plus mean LAI over 365 days."""
    weather = _season_weather(seed)
    w1 = WeatherArrays(*(np.asarray(getattr(weather, f))[0] for f in ("t_min", "t_max", "radiation", "precip")))
    names = CropParams.names()
    point = {k: float(v) for k, v in CropParams().as_dict().items()}

    def program(tape, inputs):
        params = CropParams(**{k: inputs[k] for k in names})
        traj = simulate(CropState.initial(params), w1, params)
        lai = traj.series("lai")
        return ad.add(ad.mul(traj.final.w_total, 1e-3), ad.vmean(lai))

    return CheckResult("pbm: 365-day season, all parameters", grad_check(program, point, tolerance=tolerance))


def lstm_check(seed: int = 0, tolerance: float = 1e-5, steps: int = 10) -> CheckResult:
    rng = np.random.default_rng(seed)
    weights = init_weights(LstmSpec(3, 4), seed)
    x = rng.normal(size=(2, steps, 3))
    y = rng.normal(size=(2, steps))

    def program(tape, inputs):
        out = lstm_forward(weights.with_arrays(inputs), x, mode="per_step")
        return mse_loss(ad.index(out, (Ellipsis, 0)), y)

    return CheckResult(f"lstm: T={steps}, all weights", grad_check(program, weights.arrays(), tolerance=tolerance))


def hybrid_checks(seed: int = 0, tolerance: float = 1e-5) -> list[CheckResult]:
    """Training-loss gradients of each hybrid with respect to every parameter."""
    rng = np.random.default_rng(seed)
    wx = _season_weather(seed, years=2)
    out = []

    # EmbeddedNnPbm: stress MLP and learnable crop parameters, harvest loss
    emb = HybridModel(HybridKind.EmbeddedNnPbm, CropParams(), ("rue", "k_ext"), stress_network(seed, hidden=3))
    emb_obs = np.array([2500.0, 2700.0])

    def emb_loss(tape, inputs):
        traj = embedded_season(emb, wx, emb.crop_params(inputs), emb.network(inputs))
        return mse_loss(ad.mul(traj.final.w_total, 1e-3), emb_obs * 1e-3)

    out.append(CheckResult("hybrid: EmbeddedNnPbm loss", grad_check(emb_loss, emb.parameters(), tolerance=tolerance)))

    # MassBalanceDl: LSTM with two outputs plus the balance penalty
    mb = HybridModel(HybridKind.MassBalanceDl, nn=mass_balance_network(2, 3, seed), lambda_physics=0.5)
    feats = rng.normal(size=(2, 8, 2))
    target = np.cumsum(rng.uniform(0, 0.2, size=(2, 8)), axis=-1)

    def mb_loss(tape, inputs):
        biomass, _, penalty = mass_balance_forward(mb, feats, mb.network(inputs))
        return mass_balance_loss(mb, biomass, penalty, target)

    out.append(CheckResult("hybrid: MassBalanceDl loss", grad_check(mb_loss, mb.parameters(), tolerance=tolerance)))

    # dPL: attributes -> bounded parameters -> crop model
    names = tuple(DPL_BOUNDS)
    net = dpl_network(len(names), seed, hidden=3)
    attrs = np.array([[0.2, 0.8, 0.5], [0.9, 0.1, 0.3]])
    dpl_obs = np.array([3000.0, 2000.0])

    def dpl_loss(tape, inputs):
        theta = dpl_parameterize(net.with_arrays(inputs), attrs, names)
        traj = simulate_season(wx, CropParams().with_values(**theta))
        return mse_loss(ad.mul(traj.final.w_total, 1e-3), dpl_obs * 1e-3)

    out.append(CheckResult("hybrid: SurrogateDpl (dPL) loss", grad_check(dpl_loss, net.arrays(), tolerance=tolerance)))

    # PhysicsResidualDl: data misfit plus growth residual
    pinn = HybridModel(HybridKind.PhysicsResidualDl, CropParams(), nn=init_weights(LstmSpec(4, 3), seed),
                       lambda_physics=0.3)
    short = wx.window(150, 160)
    seq = np.asarray(short.stacked()) / 10.0
    growth = np.abs(rng.normal(0.05, 0.02, size=(2, 10)))
    obs = np.cumsum(growth, axis=-1)

    def pinn_loss(tape, inputs):
        pred = ad.index(lstm_forward(pinn.network(inputs), seq, mode="per_step"), (Ellipsis, 0))
        return physics_residual_loss(pinn, pred, obs, short, growth=growth)

    out.append(CheckResult("hybrid: PhysicsResidualDl loss", grad_check(pinn_loss, pinn.parameters(), tolerance=tolerance)))
    return out


def run_suite(seed: int = 0, n_random: int = 100, tolerance: float = 1e-5) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    results = []
    for i in range(n_random):
        program, point, n_ops = random_program(rng)
        results.append(CheckResult(f"random program {i} ({n_ops} ops)", grad_check(program, point, tolerance=tolerance)))
    results.append(pbm_check(seed, tolerance))
    results.append(lstm_check(seed, tolerance))
    results.extend(hybrid_checks(seed, tolerance))
    return results


# ---------------------------------------------------------------- recovery

@dataclass
class Recovery:
    label: str
    estimate: float
    truth: float

    @property
    def rel_error(self) -> float:
        return abs(self.estimate - self.truth) / abs(self.truth)


def rue_calibration_recovery(seed: int = 0, site_id: str = "B", years: int = 4, start: float = 2.0) -> Recovery:
    """Calibrate rue alone on noiseless twin harvests, other parameters at truth."""
    twin = build_twin(years=years, seed=seed)
    truth = twin.truth[site_id]
    res = calibrate_pbm(truth.with_values(rue=start), {"rue": DPL_BOUNDS["rue"]},
                        twin.harvest[site_id], twin.weather[site_id].arrays())
    return Recovery(f"calibrate_pbm rue, site {site_id}", float(res.params.rue), float(truth.rue))


def dpl_rue_recovery(
    seed: int = 0,
    held_out: str = "B",
    years: int = 12,
    n_train_years: int = 8,
) -> Recovery:
    """Train an attributes -> rue network on two sites, read it off at the third.

    The remaining crop parameters sit at each site's truth so rue is the only
    unknown; the last ``years - n_train_years`` years drive early stopping.
    """
    twin = build_twin(years=years, seed=seed)
    train_ids = [s.site_id for s in twin.sites if s.site_id != held_out]
    names = ("rue",)
    other = ("k_ext", "t_base", "s_max")

    def batch(year_idx):
        n = len(year_idx)
        arrays = [twin.weather[s].arrays([twin.years[i] for i in year_idx]) for s in train_ids]
        wx = WeatherArrays(*(np.concatenate([np.asarray(getattr(a, f)) for a in arrays])
                             for f in ("t_min", "t_max", "radiation", "precip")))
        obs = np.concatenate([twin.harvest[s][year_idx] for s in train_ids])
        attrs = np.concatenate([np.tile(twin.site(s).vector(), (n, 1)) for s in train_ids])
        fixed = {k: np.concatenate([np.full(n, getattr(twin.truth[s], k)) for s in train_ids]) for k in other}
        return wx, obs, attrs, fixed

    net = dpl_network(len(names), seed)

    def loss(values, data):
        wx, obs, attrs, fixed = data
        theta = dpl_parameterize(net.with_arrays(values), attrs, names)
        traj = simulate_season(wx, CropParams().with_values(**fixed, **theta))
        return mse_loss(ad.mul(traj.final.w_total, 1e-3), obs * 1e-3)

    idx = list(range(years))
    report = train(
        loss, batch(idx[:n_train_years]), batch(idx[n_train_years:]),
        AdamConfig(learning_rate=0.05), EarlyStopConfig(patience=15, min_delta=0.0, max_epochs=150),
        seed=seed, params=net.arrays(),
    )
    best = net.with_arrays(report.best_weights)
    estimate = float(np.asarray(dpl_parameterize(best, twin.site(held_out).vector(), names)["rue"]))
    return Recovery(f"dPL rue, held-out site {held_out}", estimate, float(twin.truth[held_out].rue))
