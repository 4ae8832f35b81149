"""The four hybrid crop-model / neural-network architectures.

* ``EmbeddedNnPbm``: the crop model with its water-stress response replaced
  by a small MLP (the network lives inside the simulator).
* ``MassBalanceDl``: an LSTM emitting daily growth and biomass, tied together
  by a cumulative mass-balance penalty.
* ``SurrogateDpl``: parameters predicted from site attributes by an MLP
  (differentiable parameter learning), optionally run through a neural
  surrogate of the crop model instead of the simulator itself.
* ``PhysicsResidualDl``: an LSTM trajectory model penalised by the residual
  of the crop model's growth equation.

Biomass enters neural losses in units of :data:`BIOMASS_SCALE` g/m2.
"""

from __future__ import annotations

import enum
import json
import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Variable
from .neural import (
    LstmSpec,
    LstmWeights,
    MlpSpec,
    MlpWeights,
    checkpoint_dict,
    init_weights,
    lstm_forward,
    mlp_forward,
    weights_from_dict,
)
from .pbm import (
    CropParams,
    CropState,
    WeatherArrays,
    simulate,
    simulate_season,
    SOWING_DOY,
)
from .training import AdamConfig, EarlyStopConfig, mse_loss, squash, train, unsquash

__all__ = [
    "HybridKind",
    "HybridModel",
    "DPL_BOUNDS",
    "BIOMASS_SCALE",
    "FeatureScaler",
    "stress_network",
    "embedded_forward",
    "embedded_season",
    "mass_balance_forward",
    "mass_balance_penalty",
    "mass_balance_loss",
    "dpl_parameterize",
    "PbmSampler",
    "Surrogate",
    "train_surrogate",
    "surrogate_forward",
    "surrogate_calibrate",
    "companion_growth",
    "physics_residual",
    "physics_residual_loss",
]

BIOMASS_SCALE = 1000.0
DPL_BOUNDS: dict[str, tuple[float, float]] = {
    "rue": (1.0, 5.0),
    "k_ext": (0.3, 0.9),
    "t_base": (0.0, 10.0),
    "s_max": (50.0, 200.0),
}
STRESS_FEATURES = 3


class HybridKind(enum.Enum):
    EmbeddedNnPbm = "EmbeddedNnPbm"
    MassBalanceDl = "MassBalanceDl"
    SurrogateDpl = "SurrogateDpl"
    PhysicsResidualDl = "PhysicsResidualDl"


@dataclass
class HybridModel:
    """One hybrid architecture with its crop parameters and network.

    ``learnable`` names the crop parameters that are trained; their current
    values live in ``theta`` and are kept inside ``bounds`` by a scaled
    sigmoid.  Every other field of ``fixed_params`` stays constant.
    """

    kind: HybridKind
    fixed_params: CropParams = field(default_factory=CropParams)
    learnable: tuple[str, ...] = ()
    nn: MlpWeights | LstmWeights | None = None
    lambda_physics: float = 0.1
    bounds: dict[str, tuple[float, float]] = field(default_factory=lambda: dict(DPL_BOUNDS))
    theta: dict[str, float] = field(default_factory=dict)

    def __post_init__(self):
        if not isinstance(self.kind, HybridKind):
            self.kind = HybridKind(self.kind)
        unknown = set(self.learnable) - set(CropParams.names())
        if unknown:
            raise ValueError(f"unknown crop parameters {sorted(unknown)}")
        missing = [n for n in self.learnable if n not in self.bounds]
        if missing:
            raise ValueError(f"no bounds for learnable parameters {missing}")
        if not (self.lambda_physics >= 0 and math.isfinite(self.lambda_physics)):
            raise ValueError("lambda_physics must be a finite value >= 0")
        base = self.fixed_params.values()
        for name in self.learnable:
            self.theta.setdefault(name, float(base[name]))

    @property
    def fixed_names(self) -> tuple[str, ...]:
        return tuple(n for n in CropParams.names() if n not in self.learnable)

    @property
    def uses_lambda(self) -> bool:
        return self.kind in (HybridKind.MassBalanceDl, HybridKind.PhysicsResidualDl)

    # trainable arrays: "nn.<name>" for network weights, "theta.<name>" raw crop parameters
    def parameters(self) -> dict[str, np.ndarray]:
        out = {}
        if self.nn is not None:
            out.update({f"nn.{k}": np.asarray(v, dtype=float) for k, v in self.nn.arrays().items()})
        for name in self.learnable:
            out[f"theta.{name}"] = np.array(unsquash(self.theta[name], *self.bounds[name]))
        return out

    def network(self, values: Mapping[str, object]):
        if self.nn is None:
            return None
        return self.nn.with_arrays({k[3:]: v for k, v in values.items() if k.startswith("nn.")})

    def crop_params(self, values: Mapping[str, object]) -> CropParams:
        updates = {}
        for name in self.learnable:
            lo, hi = self.bounds[name]
            updates[name] = lo if lo == hi else squash(values[f"theta.{name}"], lo, hi)
        return self.fixed_params.with_values(**updates)

    def set_parameters(self, values: Mapping[str, np.ndarray]) -> None:
        if self.nn is not None:
            self.nn = self.network({k: np.asarray(v) for k, v in values.items()})
        params = self.crop_params(values).values()
        for name in self.learnable:
            self.theta[name] = float(params[name])

    def to_dict(self) -> dict:
        fixed = {k: float(v) for k, v in self.fixed_params.values().items() if k not in self.learnable}
        return {
            "kind": self.kind.value,
            "fixed": fixed,
            "learnable": {k: self.theta[k] for k in self.learnable},
            "bounds": {k: list(self.bounds[k]) for k in self.learnable},
            "nn": None if self.nn is None else checkpoint_dict(self.nn),
            "lambda_physics": self.lambda_physics,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    @classmethod
    def from_dict(cls, d: dict) -> "HybridModel":
        fixed = CropParams(**{**d["fixed"], **d["learnable"]})
        return cls(
            HybridKind(d["kind"]),
            fixed,
            tuple(d["learnable"]),
            None if d["nn"] is None else weights_from_dict(d["nn"]),
            d["lambda_physics"],
            {k: tuple(v) for k, v in d["bounds"].items()},
            dict(d["learnable"]),
        )

    @classmethod
    def from_json(cls, text: str) -> "HybridModel":
        return cls.from_dict(json.loads(text))


def _require(model: HybridModel, kind: HybridKind) -> None:
    if model.kind is not kind:
        raise ValueError(f"expected a {kind.value} model, got {model.kind.value}")


# ---------------------------------------------------------------- features

@dataclass(frozen=True)
class FeatureScaler:
    """Per-variable standardization of daily weather, fitted on training data."""

    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, weather: WeatherArrays) -> "FeatureScaler":
        x = weather.stacked().reshape(-1, 4)
        std = x.std(axis=0)
        return cls(x.mean(axis=0), np.where(std > 0, std, 1.0))

    def transform(self, weather: WeatherArrays) -> np.ndarray:
        return (weather.stacked() - self.mean) / self.std

    def to_dict(self) -> dict:
        return {"mean": self.mean.tolist(), "std": self.std.tolist()}


def season_window(weather_year: WeatherArrays, sowing_doy: int = SOWING_DOY) -> WeatherArrays:
    return weather_year.window(sowing_doy - 1, 365)


# ---------------------------------------------------------------- EmbeddedNnPbm

def stress_network(seed: int = 0, hidden: int = 8) -> MlpWeights:
    """Default MLP for the replaced stress response (3 features -> logit)."""
    return init_weights(MlpSpec((STRESS_FEATURES, hidden, 1), ("tanh", "identity")), seed)


def _stress_fn(nn: MlpWeights):
    def stress(state: CropState, weather: WeatherArrays, params: CropParams):
        t_mean = ad.mul(ad.add(weather.t_min, weather.t_max), 0.5)
        feats = ad.stack(
            [ad.div(state.soil_water, params.s_max), ad.mul(t_mean, 1.0 / 30.0), state.dvs],
            axis=-1,
        )
        return ad.sigmoid(ad.index(mlp_forward(nn, feats), (Ellipsis, 0)))

    return stress


def embedded_forward(model: HybridModel, init: CropState, weather, params: CropParams, nn=None):
    """Simulate with the water-stress factor given by sigmoid(MLP(features))."""
    _require(model, HybridKind.EmbeddedNnPbm)
    nn = model.nn if nn is None else nn
    return simulate(init, weather, params, stress_fn=_stress_fn(nn))


def embedded_season(model: HybridModel, weather_year: WeatherArrays, params: CropParams, nn=None):
    _require(model, HybridKind.EmbeddedNnPbm)
    nn = model.nn if nn is None else nn
    return simulate_season(weather_year, params, stress_fn=_stress_fn(nn))


# ---------------------------------------------------------------- MassBalanceDl

def mass_balance_network(input_size: int, hidden: int = 16, seed: int = 0) -> LstmWeights:
    return init_weights(LstmSpec(input_size, hidden, MlpSpec((hidden, 2), ("identity",))), seed)


def mass_balance_forward(model: HybridModel, features, nn=None):
    """Daily (biomass, growth, penalty) from an LSTM over (batch, T, F) features.

    Output channel 0 is softplus-transformed into non-negative growth,
    channel 1 is the biomass estimate.
    """
    _require(model, HybridKind.MassBalanceDl)
    nn = model.nn if nn is None else nn
    out = lstm_forward(nn, features, mode="per_step")
    growth = ad.softplus(ad.index(out, (Ellipsis, 0)))
    biomass = ad.index(out, (Ellipsis, 1))
    return biomass, growth, mass_balance_penalty(biomass, growth)


def mass_balance_penalty(biomass, growth):
    """Mean squared gap between biomass and cumulative growth."""
    gap = ad.sub(biomass, ad.cumsum(growth, axis=-1))
    return ad.vmean(ad.mul(gap, gap))


def mass_balance_loss(model: HybridModel, biomass, penalty, observed):
    data = mse_loss(biomass, observed)
    if model.lambda_physics == 0:
        return data
    return ad.add(data, ad.mul(penalty, model.lambda_physics))


# ---------------------------------------------------------------- dPL

def dpl_network(n_outputs: int, seed: int = 0, hidden: int = 8, n_attributes: int = 3) -> MlpWeights:
    return init_weights(MlpSpec((n_attributes, hidden, n_outputs), ("tanh", "identity")), seed)


def dpl_parameterize(
    nn: MlpWeights,
    attributes,
    names: Sequence[str] = tuple(DPL_BOUNDS),
    bounds: Mapping[str, tuple[float, float]] = DPL_BOUNDS,
) -> dict[str, object]:
    """Map normalized site attributes (..., A) to bounded crop parameters.

    Returns one entry per name with the attributes' batch shape.
    """
    attributes = attributes if isinstance(attributes, Variable) else np.asarray(attributes, float)
    if not np.all(np.isfinite(attributes.array if isinstance(attributes, Variable) else attributes)):
        raise ValueError("site attributes must be finite")
    raw = mlp_forward(nn, attributes)
    if (raw.shape if isinstance(raw, Variable) else np.shape(raw))[-1] != len(names):
        raise ValueError(f"network has the wrong number of outputs for {list(names)}")
    out = {}
    for j, name in enumerate(names):
        lo, hi = bounds[name]
        out[name] = squash(ad.index(raw, (Ellipsis, j)), lo, hi)
    return out


# ---------------------------------------------------------------- surrogate

@dataclass
class PbmSampler:
    """Draws (theta, weather-year) pairs and labels them with the crop model."""

    bounds: dict[str, tuple[float, float]]
    weather: WeatherArrays  # (years, 365)
    base_params: CropParams = field(default_factory=CropParams)

    def __post_init__(self):
        for name, (lo, hi) in self.bounds.items():
            if not hi > lo:
                raise ValueError(f"degenerate sampling range for {name}: ({lo}, {hi})")

    @property
    def names(self) -> tuple[str, ...]:
        return tuple(self.bounds)

    def sample(self, n: int, rng: np.random.Generator):
        lo = np.array([b[0] for b in self.bounds.values()])
        hi = np.array([b[1] for b in self.bounds.values()])
        theta = lo + (hi - lo) * rng.random((n, len(lo)))
        n_years = np.shape(self.weather.t_min)[0]
        years = rng.integers(0, n_years, n)
        wx = WeatherArrays(*(np.asarray(x)[years] for x in (
            self.weather.t_min, self.weather.t_max, self.weather.radiation, self.weather.precip)))
        params = self.base_params.with_values(**{k: theta[:, j] for j, k in enumerate(self.names)})
        labels = simulate_season(wx, params).values("w_total")
        return theta, wx, labels


@dataclass
class Surrogate:
    weights: LstmWeights
    names: tuple[str, ...]
    bounds: dict[str, tuple[float, float]]
    scaler: FeatureScaler
    train_rmse: float = math.nan
    val_rmse: float = math.nan
    val_std: float = math.nan
    report: object = None

    def theta_features(self, theta: Mapping[str, object], shape: tuple):
        """Normalized theta broadcast to (..., T, P)."""
        cols = []
        for name in self.names:
            lo, hi = self.bounds[name]
            cols.append(ad.mul(ad.sub(theta[name], lo), 1.0 / (hi - lo)))
        v = ad.stack(cols, axis=-1)
        if np.ndim(_arr(v)) > 1:
            v = ad.reshape(v, _arr(v).shape[:-1] + (1, len(self.names)))
        return ad.add(v, np.zeros(shape + (len(self.names),)))


def _arr(x):
    return x.array if isinstance(x, Variable) else np.asarray(x)


def surrogate_forward(surrogate: Surrogate, theta: Mapping[str, object], weather_year: WeatherArrays, weights=None):
    """Predicted daily biomass (g/m2) over the season window."""
    weights = surrogate.weights if weights is None else weights
    wx = surrogate.scaler.transform(season_window(weather_year))
    th = surrogate.theta_features(theta, wx.shape[:-1])
    x = ad.concat([wx, th], axis=-1)
    out = lstm_forward(weights, x, mode="per_step")
    return ad.mul(ad.index(out, (Ellipsis, 0)), BIOMASS_SCALE)


def train_surrogate(
    sampler: PbmSampler,
    nn_spec: LstmSpec | None = None,
    n_samples: int = 512,
    seed: int = 0,
    n_validation: int | None = None,
    optimizer: AdamConfig = AdamConfig(learning_rate=0.01),
    stop: EarlyStopConfig = EarlyStopConfig(patience=30, min_delta=0.0, max_epochs=300),
) -> Surrogate:
    """Fit an LSTM emulator of daily biomass given weather and parameters."""
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    rng = np.random.default_rng(seed)
    theta, wx, labels = sampler.sample(n_samples, rng)
    n_val = max(1, n_samples // 4) if n_validation is None else n_validation
    v_theta, v_wx, v_labels = sampler.sample(n_val, rng)
    window = season_window(wx)
    scaler = FeatureScaler.fit(window)
    names = sampler.names
    spec = nn_spec or LstmSpec(4 + len(names), 16)
    weights = init_weights(spec, seed)
    sur = Surrogate(weights, names, dict(sampler.bounds), scaler)

    def as_theta(t):
        return {k: t[:, j] for j, k in enumerate(names)}

    def loss(values, data):
        th, w, y = data
        pred = surrogate_forward(sur, th, w, weights.with_arrays(values))
        return mse_loss(ad.mul(pred, 1.0 / BIOMASS_SCALE), y / BIOMASS_SCALE)

    train_data = (as_theta(theta), wx, labels)
    val_data = (as_theta(v_theta), v_wx, v_labels)
    # with a single sample the emulator is fitted to memorize it
    test_data = train_data if n_samples == 1 else val_data
    report = train(loss, train_data, test_data, optimizer, stop, seed=seed, params=weights.arrays())
    sur.weights = weights.with_arrays(report.best_weights)
    sur.report = report
    sur.train_rmse = float(np.sqrt(np.mean((_arr(surrogate_forward(sur, *train_data[:2])) - labels) ** 2)))
    sur.val_rmse = float(np.sqrt(np.mean((_arr(surrogate_forward(sur, *val_data[:2])) - v_labels) ** 2)))
    sur.val_std = float(v_labels.std())
    return sur


def surrogate_calibrate(
    surrogate: Surrogate,
    observations: np.ndarray,
    weather_year: WeatherArrays,
    theta_init: Mapping[str, float],
    bounds: Mapping[str, tuple[float, float]],
    optimizer: AdamConfig = AdamConfig(learning_rate=0.05),
    stop: EarlyStopConfig = EarlyStopConfig(patience=20, min_delta=0.0, max_epochs=200),
) -> tuple[dict[str, float], list[float]]:
    """Gradient descent on bounded parameters through the frozen surrogate.

    ``observations`` are daily biomass (batch, T) or harvest biomass (batch,).
    Returns the best parameters and the loss trace (initial loss first).
    """
    observations = np.asarray(observations, dtype=np.float64)
    free = {k: b for k, b in bounds.items() if b[1] > b[0]}
    raw0 = {k: np.array(unsquash(theta_init[k], *b)) for k, b in free.items()}

    def theta_of(raw):
        return {k: (lo if hi == lo else squash(raw[k], lo, hi)) for k, (lo, hi) in bounds.items()}

    def loss(raw, data):
        obs, w = data
        pred = surrogate_forward(surrogate, theta_of(raw), w)
        if obs.ndim == np.ndim(_arr(pred)) - 1:
            pred = ad.index(pred, (Ellipsis, -1))
        return mse_loss(ad.mul(pred, 1.0 / BIOMASS_SCALE), obs / BIOMASS_SCALE)

    data = (observations, weather_year)
    if not free:
        value = float(np.asarray(loss({}, data)))
        return {k: float(lo) for k, (lo, _) in bounds.items()}, [value]
    report = train(loss, data, data, optimizer, stop, params=raw0, include_initial=True)
    if report.aborted and report.stopped_epoch == 0:
        raise ad.DomainError(f"surrogate calibration aborted: {report.abort_reason}")
    best = theta_of(report.best_weights)
    return {k: float(np.asarray(_arr(v))) for k, v in best.items()}, (
        [report.initial_test_loss] + report.test_loss_curve
    )


# ---------------------------------------------------------------- PhysicsResidualDl

def companion_growth(weather_year: WeatherArrays, params: CropParams) -> np.ndarray:
    """Daily growth increments (batch, T) of the crop model at fixed parameters."""
    w = simulate_season(weather_year, params).values("w_total")
    return np.diff(w, axis=-1, prepend=0.0)


def physics_residual(predicted, growth: np.ndarray):
    """Mean squared residual of (W[t+1] - W[t]) against the model growth of day t+1."""
    p = predicted.shape if isinstance(predicted, Variable) else np.shape(predicted)
    if p[-1] < 2:
        raise ValueError("the residual needs at least two time steps")
    increments = ad.sub(ad.index(predicted, (Ellipsis, slice(1, None))), ad.index(predicted, (Ellipsis, slice(None, -1))))
    r = ad.sub(increments, growth[..., 1:])
    return ad.vmean(ad.mul(r, r))


def physics_residual_loss(
    model: HybridModel,
    predicted,
    observed,
    weather_year: WeatherArrays,
    params: CropParams | None = None,
    scale: float = 1.0,
    growth: np.ndarray | None = None,
):
    """Data MSE plus ``lambda_physics`` times the growth-equation residual.

    ``predicted`` and ``observed`` are daily biomass over the season window in
    units of ``scale`` g/m2; the companion crop-model pass runs at ``params``
    (default: the model's fixed parameters).
    """
    _require(model, HybridKind.PhysicsResidualDl)
    data = mse_loss(predicted, observed)
    if model.lambda_physics == 0:
        return data
    if growth is None:
        growth = companion_growth(weather_year, params or model.fixed_params)
    return ad.add(data, ad.mul(physics_residual(predicted, growth / scale), model.lambda_physics))
