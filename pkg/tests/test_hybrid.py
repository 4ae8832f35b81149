import numpy as np
import pytest

from agridiff import autodiff as ad
from agridiff.autodiff import grad_check
from agridiff.data import build_twin, default_sites, generate_weather
from agridiff.hybrid import (
    DPL_BOUNDS,
    HybridKind,
    HybridModel,
    PbmSampler,
    companion_growth,
    dpl_network,
    dpl_parameterize,
    embedded_forward,
    embedded_season,
    mass_balance_forward,
    mass_balance_loss,
    mass_balance_network,
    mass_balance_penalty,
    physics_residual,
    physics_residual_loss,
    stress_network,
    surrogate_calibrate,
    surrogate_forward,
    train_surrogate,
)
from agridiff.neural import Layer, LstmSpec, MlpWeights
from agridiff.pbm import CropParams, CropState, WeatherArrays, simulate, simulate_season
from agridiff.training import AdamConfig, EarlyStopConfig, mse_loss


def rigged_stress(logit):
    return MlpWeights([Layer(np.zeros((1, 3)), np.array([logit]), "identity")])


def no_stress(state, weather, params):
    return 1.0


@pytest.fixture(scope="module")
def weather():
    return generate_weather(default_sites()[1], 2, seed=5).arrays()


@pytest.fixture(scope="module")
def year(weather):
    return WeatherArrays(*(np.asarray(getattr(weather, f))[0] for f in ("t_min", "t_max", "radiation", "precip")))


def embedded(logit=0.0, **kw):
    return HybridModel(HybridKind.EmbeddedNnPbm, CropParams(), nn=rigged_stress(logit), **kw)


def test_embedded_saturated_logit_equals_unstressed_pbm(year):
    p = CropParams()
    ref = simulate(CropState.initial(p), year, p, stress_fn=no_stress).values("w_total")
    out = embedded_forward(embedded(40.0), CropState.initial(p), year, p).values("w_total")
    np.testing.assert_allclose(out, ref, rtol=0, atol=1e-6)


def test_embedded_logit_twenty_is_nearly_neutral(year):
    # sigmoid(20) = 1 - 2.1e-9; compounded over a season it moves biomass by ~1e-5 g/m2
    p = CropParams()
    ref = simulate(CropState.initial(p), year, p, stress_fn=no_stress).values("w_total")
    out = embedded_forward(embedded(20.0), CropState.initial(p), year, p).values("w_total")
    np.testing.assert_allclose(out, ref, rtol=1e-6, atol=0)


def test_embedded_total_stress_stops_growth(weather):
    traj = embedded_season(embedded(-40.0), weather, CropParams())
    w = traj.values("w_total")
    np.testing.assert_allclose(w, 0.0, atol=1e-12)


def test_embedded_mlp_weight_gradient(year):
    model = HybridModel(HybridKind.EmbeddedNnPbm, CropParams(), nn=stress_network(1, hidden=3))
    w = year.window(100, 200)
    p = CropParams()

    def program(tape, values):
        traj = embedded_forward(model, CropState.initial(p), w, p, model.network(values))
        return ad.mul(traj.final.w_total, 1e-3)

    rep = grad_check(program, model.parameters())
    assert rep.passed, rep.worst()


def test_embedded_rejects_other_kinds(year):
    mb = HybridModel(HybridKind.MassBalanceDl, nn=mass_balance_network(2, 2))
    with pytest.raises(ValueError, match="EmbeddedNnPbm"):
        embedded_forward(mb, CropState.initial(CropParams()), year, CropParams())


def test_mass_balance_penalty_examples():
    growth = np.ones(10)
    t = np.arange(1.0, 11.0)
    assert float(mass_balance_penalty(t, growth)) == 0.0
    assert float(mass_balance_penalty(t + 1.0, growth)) == 1.0


def test_balanced_outputs_have_zero_penalty():
    g = np.random.default_rng(0).uniform(0, 2, size=(3, 12))
    assert float(mass_balance_penalty(np.cumsum(g, axis=-1), g)) == 0.0


def test_mass_balance_lambda_zero_is_plain_mse():
    model = HybridModel(HybridKind.MassBalanceDl, nn=mass_balance_network(2, 3, 0), lambda_physics=0.0)
    feats = np.random.default_rng(1).normal(size=(2, 6, 2))
    obs = np.linspace(0, 1, 12).reshape(2, 6)
    biomass, growth, penalty = mass_balance_forward(model, feats)
    assert float(penalty) > 0
    assert float(mass_balance_loss(model, biomass, penalty, obs)) == float(mse_loss(biomass, obs))
    assert np.all(np.asarray(growth) >= 0)
    weighted = HybridModel(HybridKind.MassBalanceDl, nn=model.nn, lambda_physics=0.5)
    expected = float(mse_loss(biomass, obs)) + 0.5 * float(penalty)
    assert float(mass_balance_loss(weighted, biomass, penalty, obs)) == pytest.approx(expected, rel=1e-15)


def constant_dpl(n_out=4):
    return MlpWeights([Layer(np.zeros((n_out, 3)), np.zeros(n_out), "identity")])


def test_constant_dpl_gives_bound_midpoints():
    for site in default_sites():
        theta = dpl_parameterize(constant_dpl(), site.vector())
        for name, (lo, hi) in DPL_BOUNDS.items():
            assert float(theta[name]) == pytest.approx(0.5 * (lo + hi), rel=1e-15)


def test_constant_dpl_reproduces_fixed_theta_pbm(weather):
    attrs = np.tile(default_sites()[0].vector(), (2, 1))
    theta = dpl_parameterize(constant_dpl(), attrs)
    fixed = CropParams().with_values(**{k: 0.5 * (lo + hi) for k, (lo, hi) in DPL_BOUNDS.items()})
    a = simulate_season(weather, CropParams().with_values(**theta)).values("w_total")
    b = simulate_season(weather, fixed).values("w_total")
    np.testing.assert_allclose(a, b, rtol=0, atol=1e-6)


def test_dpl_is_a_function_of_attributes():
    net = dpl_network(4, seed=3)
    a = default_sites()[1].vector()
    t1, t2 = dpl_parameterize(net, a), dpl_parameterize(net, a.copy())
    assert all(float(t1[k]) == float(t2[k]) for k in DPL_BOUNDS)
    with pytest.raises(ValueError):
        dpl_parameterize(net, np.array([np.nan, 0.0, 0.0]))
    with pytest.raises(ValueError, match="outputs"):
        dpl_parameterize(dpl_network(2), a)


def test_dpl_stays_in_bounds():
    net = dpl_network(4, seed=0)
    attrs = np.random.default_rng(0).normal(scale=50, size=(20, 3))
    theta = dpl_parameterize(net, attrs)
    for name, (lo, hi) in DPL_BOUNDS.items():
        assert np.all((theta[name] >= lo) & (theta[name] <= hi))


def test_dpl_loss_is_permutation_invariant():
    twin = build_twin(years=1, seed=1)
    net = dpl_network(4, seed=2)
    ids = ["A", "B", "C"]

    def summed(order):
        total = 0.0
        for sid in order:
            theta = dpl_parameterize(net, twin.site(sid).vector())
            pred = simulate_season(twin.weather[sid].arrays(), CropParams().with_values(**theta)).final.w_total
            total += float(mse_loss(np.asarray(pred) * 1e-3, twin.harvest[sid] * 1e-3))
        return total

    assert summed(ids) == pytest.approx(summed(ids[::-1]), rel=1e-12)
    assert summed(ids) == pytest.approx(summed(["B", "C", "A"]), rel=1e-12)


def test_physics_residual_zero_on_companion_trajectory(weather):
    p = CropParams()
    model = HybridModel(HybridKind.PhysicsResidualDl, p, lambda_physics=1.0)
    daily = simulate_season(weather, p).values("w_total")
    obs = daily + 3.0
    data = float(mse_loss(daily, obs))
    loss = float(physics_residual_loss(model, daily, obs, weather, p))
    assert abs(loss - data) <= 1e-9
    assert float(physics_residual(daily, companion_growth(weather, p))) <= 1e-9


def test_physics_residual_lambda_zero(weather):
    model = HybridModel(HybridKind.PhysicsResidualDl, CropParams(), lambda_physics=0.0)
    pred = np.full((2, 5), 100.0)
    obs = np.full((2, 5), 90.0)
    assert float(physics_residual_loss(model, pred, obs, weather)) == 100.0


def test_constant_prediction_residual_is_mean_squared_growth(weather):
    p = CropParams()
    growth = companion_growth(weather, p)
    pred = np.full(growth.shape, 42.0)
    # oracle: increments vanish, so r_t = -growth_{t+1}
    expected = np.mean(growth[..., 1:] ** 2)
    assert float(physics_residual(pred, growth)) == pytest.approx(expected, rel=1e-12)
    assert expected > 0


def test_physics_residual_needs_two_steps():
    with pytest.raises(ValueError):
        physics_residual(np.zeros(1), np.zeros(1))


def test_hybrid_model_invariants_and_json():
    with pytest.raises(ValueError, match="unknown"):
        HybridModel(HybridKind.EmbeddedNnPbm, learnable=("nope",))
    with pytest.raises(ValueError, match="bounds"):
        HybridModel(HybridKind.EmbeddedNnPbm, learnable=("sla",))
    with pytest.raises(ValueError):
        HybridModel(HybridKind.MassBalanceDl, lambda_physics=-1.0)
    model = HybridModel("EmbeddedNnPbm", CropParams(rue=2.7), ("rue", "k_ext"), stress_network(0, 4), 0.3)
    assert set(model.fixed_names) | set(model.learnable) == set(CropParams.names())
    assert not set(model.fixed_names) & set(model.learnable)
    assert not model.uses_lambda
    assert HybridModel(HybridKind.PhysicsResidualDl).uses_lambda
    back = HybridModel.from_json(model.to_json())
    assert back.to_json() == model.to_json()
    assert back.theta["rue"] == pytest.approx(2.7)


def test_parameters_round_trip_through_squash():
    model = HybridModel(HybridKind.EmbeddedNnPbm, CropParams(rue=2.7, k_ext=0.5), ("rue", "k_ext"), stress_network(0, 2))
    model.set_parameters(model.parameters())
    assert model.theta["rue"] == pytest.approx(2.7, rel=1e-12)
    assert model.crop_params(model.parameters()).k_ext == pytest.approx(0.5, rel=1e-12)


# ---------------------------------------------------------------- surrogate

SUR_BOUNDS = {"rue": (2.0, 4.0), "k_ext": (0.4, 0.8)}


@pytest.fixture(scope="module")
def sampler():
    return PbmSampler(SUR_BOUNDS, generate_weather(default_sites()[1], 6, seed=2).arrays())


def test_sampler_rejects_degenerate_range(sampler):
    with pytest.raises(ValueError, match="degenerate"):
        PbmSampler({"rue": (3.0, 3.0)}, sampler.weather)


def test_train_surrogate_rejects_zero_samples(sampler):
    with pytest.raises(ValueError):
        train_surrogate(sampler, n_samples=0)


@pytest.fixture(scope="module")
def memorized(sampler):
    return train_surrogate(
        sampler, LstmSpec(6, 8), n_samples=1, seed=0, optimizer=AdamConfig(learning_rate=0.05),
        stop=EarlyStopConfig(patience=200, min_delta=0.0, max_epochs=200),
    )


def test_single_sample_is_memorized(memorized):
    assert memorized.report.stopped_epoch == 200
    initial_rmse = 1000.0 * memorized.report.initial_train_loss ** 0.5
    assert memorized.train_rmse < 0.03 * initial_rmse


def test_surrogate_reproduces_training_point(memorized, sampler):
    theta, wx, labels = sampler.sample(1, np.random.default_rng(0))
    pred = np.asarray(surrogate_forward(memorized, {k: theta[:, j] for j, k in enumerate(memorized.names)}, wx))
    assert abs(pred[0, -1] - labels[0, -1]) <= 3 * memorized.train_rmse + 1e-9


def test_surrogate_calibrate_descends_and_pins(memorized, sampler):
    wx = WeatherArrays(*(np.asarray(x)[:1] for x in (
        sampler.weather.t_min, sampler.weather.t_max, sampler.weather.radiation, sampler.weather.precip)))
    obs = np.asarray(surrogate_forward(memorized, {"rue": np.array([3.2]), "k_ext": np.array([0.55])}, wx))
    init = {"rue": 2.4, "k_ext": 0.7}
    theta, trace = surrogate_calibrate(memorized, obs, wx, init, SUR_BOUNDS,
                                       stop=EarlyStopConfig(patience=5, min_delta=0.0, max_epochs=30))
    assert min(trace) <= trace[0]
    assert all(SUR_BOUNDS[k][0] <= v <= SUR_BOUNDS[k][1] for k, v in theta.items())
    pinned, trace = surrogate_calibrate(memorized, obs, wx, init, {"rue": (2.5, 2.5), "k_ext": (0.6, 0.6)})
    assert pinned == {"rue": 2.5, "k_ext": 0.6}
    assert len(trace) == 1


@pytest.mark.slow
def test_surrogate_emulation_at_desk_scale(sampler):
    sur = train_surrogate(sampler, n_samples=512, seed=0)
    assert sur.val_rmse <= 0.10 * sur.val_std

    # twin: calibrate through the frozen surrogate, check against the crop model
    twin_theta = {"rue": 3.1, "k_ext": 0.55}
    wx = WeatherArrays(*(np.asarray(x)[:3] for x in (
        sampler.weather.t_min, sampler.weather.t_max, sampler.weather.radiation, sampler.weather.precip)))
    obs = simulate_season(wx, CropParams().with_values(**twin_theta)).values("w_total")[:, -1]
    theta, _ = surrogate_calibrate(sur, obs, wx, {"rue": 2.5, "k_ext": 0.7}, SUR_BOUNDS)
    fitted = simulate_season(wx, CropParams().with_values(**theta)).values("w_total")[:, -1]
    assert np.sqrt(np.mean((fitted - obs) ** 2)) <= 2 * sur.val_rmse
