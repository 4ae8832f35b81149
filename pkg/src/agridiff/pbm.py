"""Daily LINTUL-class crop model written against the autodiff tape.

Processes, in the order they are applied each day: thermal time and
development stage, Lambert-Beer light interception, a bucket water-stress
factor, RUE-driven growth, leaf partitioning and senescence, LAI update and a
single-layer soil water balance.

Every function accepts plain floats/arrays or :class:`~agridiff.autodiff.Variable`
operands.  With no Variable among the inputs the arithmetic runs directly on
numpy, which is the fast path used for evaluation; as soon as a parameter,
state or weather value lives on a tape every step is recorded there.

Weather may be batched: arrays of shape ``(..., T)`` with time on the last
axis simulate many site-years at once.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, fields, replace
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Variable

__all__ = [
    "CropParams",
    "CropState",
    "DailyWeather",
    "WeatherArrays",
    "StepFluxes",
    "Trajectory",
    "thermal_time_increment",
    "light_interception",
    "par_from_radiation",
    "water_stress",
    "reference_et",
    "step",
    "step_with_fluxes",
    "simulate",
    "simulate_season",
    "harvest_index",
    "SOWING_DOY",
    "SMOOTH_BETA",
]

SOWING_DOY = 90
SMOOTH_BETA = 50.0


def _v(x) -> np.ndarray:
    return x.array if isinstance(x, Variable) else np.asarray(x, dtype=np.float64)


@dataclass(frozen=True)
class CropParams:
    """Physical parameters of the crop model.

    Fields may hold floats, arrays (one value per batch member) or Variables.
    """

    t_base: float = 4.0  # degC
    tt_mature: float = 1600.0  # degC day
    tt_sen: float = 1100.0  # degC day
    k_ext: float = 0.6
    rue: float = 3.0  # g / MJ
    sla: float = 0.02  # m2 / g
    lai_init: float = 0.1
    s_max: float = 120.0  # mm
    p_crit: float = 0.5
    k_et: float = 0.8
    r_sen: float = 0.002

    @classmethod
    def names(cls) -> tuple[str, ...]:
        return tuple(f.name for f in fields(cls))

    def as_dict(self) -> dict:
        return {name: getattr(self, name) for name in self.names()}

    def values(self) -> dict[str, np.ndarray]:
        return {name: _v(getattr(self, name)) for name in self.names()}

    def with_values(self, **updates) -> "CropParams":
        return replace(self, **updates)

    def validate(self) -> None:
        v = self.values()
        for name, val in v.items():
            if not np.all(np.isfinite(val)):
                raise ValueError(f"CropParams.{name} must be finite")
        for name in ("k_ext", "rue", "s_max", "k_et", "r_sen", "tt_mature", "tt_sen"):
            if np.any(v[name] <= 0):
                raise ValueError(f"CropParams.{name} must be > 0, got {v[name]}")
        if np.any(v["sla"] < 0):
            raise ValueError(f"CropParams.sla must be >= 0, got {v['sla']}")
        if np.any(v["lai_init"] < 0):
            raise ValueError(f"CropParams.lai_init must be >= 0, got {v['lai_init']}")
        if np.any((v["p_crit"] <= 0) | (v["p_crit"] > 1)):
            raise ValueError(f"CropParams.p_crit must lie in (0, 1], got {v['p_crit']}")
        if np.any(v["tt_sen"] >= v["tt_mature"]):
            raise ValueError("CropParams.tt_sen must be smaller than tt_mature")


@dataclass(frozen=True)
class CropState:
    tt_cum: object
    dvs: object
    w_total: object
    w_leaf: object
    lai: object
    soil_water: object
    emerged: np.ndarray | bool = False

    @classmethod
    def initial(cls, params: CropParams, soil_water=None, shape: tuple = ()) -> "CropState":
        """Sowing-day state: no thermal time, no biomass, full bucket by default."""
        zeros = np.zeros(shape)
        return cls(
            tt_cum=zeros,
            dvs=zeros,
            w_total=zeros,
            w_leaf=zeros,
            lai=ad.add(params.lai_init, zeros),
            soil_water=ad.add(params.s_max if soil_water is None else soil_water, zeros),
            emerged=np.zeros(shape, dtype=bool),
        )

    def values(self) -> dict[str, np.ndarray]:
        return {
            f.name: _v(getattr(self, f.name)) for f in fields(self) if f.name != "emerged"
        }


@dataclass(frozen=True)
class DailyWeather:
    t_min: float
    t_max: float
    radiation: float  # MJ / m2 / day
    precip: float  # mm / day

    def __post_init__(self):
        for name in ("t_min", "t_max", "radiation", "precip"):
            if not np.isfinite(getattr(self, name)):
                raise ValueError(f"DailyWeather.{name} must be finite")
        if self.t_min > self.t_max:
            raise ValueError(f"t_min {self.t_min} exceeds t_max {self.t_max}")
        if self.radiation < 0 or self.precip < 0:
            raise ValueError("radiation and precip must be non-negative")


@dataclass(frozen=True)
class WeatherArrays:
    """Daily forcings with time on the last axis."""

    t_min: object
    t_max: object
    radiation: object
    precip: object

    @classmethod
    def from_days(cls, days: Sequence[DailyWeather]) -> "WeatherArrays":
        arr = np.array([[d.t_min, d.t_max, d.radiation, d.precip] for d in days], dtype=float).reshape(-1, 4)
        return cls(arr[:, 0], arr[:, 1], arr[:, 2], arr[:, 3])

    @property
    def length(self) -> int:
        return _v(self.t_min).shape[-1]

    def day(self, t: int) -> "WeatherArrays":
        return WeatherArrays(*(_day(x, t) for x in (self.t_min, self.t_max, self.radiation, self.precip)))

    def window(self, start: int, stop: int) -> "WeatherArrays":
        return WeatherArrays(
            *(np.asarray(x)[..., start:stop] for x in (self.t_min, self.t_max, self.radiation, self.precip))
        )

    def stacked(self) -> np.ndarray:
        """Shape (..., T, 4) array in field order."""
        return np.stack([_v(self.t_min), _v(self.t_max), _v(self.radiation), _v(self.precip)], axis=-1)


def _day(x, t):
    if isinstance(x, Variable):
        return x[..., t]
    return np.asarray(x)[..., t]


def _pos(x, smooth: bool):
    if smooth:
        return ad.softplus(x, SMOOTH_BETA)
    return ad.max_const(x, 0.0)


def thermal_time_increment(weather, t_base, smooth: bool = False):
    """Daily thermal time above ``t_base`` from the min/max mean temperature."""
    t_mean = ad.mul(ad.add(weather.t_min, weather.t_max), 0.5)
    return _pos(ad.sub(t_mean, t_base), smooth)


def light_interception(lai, k_ext):
    """Fraction of radiation intercepted by the canopy (Lambert-Beer)."""
    return ad.sub(1.0, ad.exp(ad.mul(ad.mul(k_ext, lai), -1.0)))


def par_from_radiation(radiation):
    return ad.mul(radiation, 0.5)


def water_stress(soil_water, params: CropParams):
    """Growth reduction in [0, 1]: linear below ``p_crit * s_max``, 1 above."""
    threshold = ad.mul(params.p_crit, params.s_max)
    return ad.clamp(ad.div(soil_water, threshold), 0.0, 1.0)


def reference_et(weather, smooth: bool = False):
    """Hargreaves-style reference evapotranspiration in mm/day, floored at 0."""
    t_mean = ad.mul(ad.add(weather.t_min, weather.t_max), 0.5)
    et0 = ad.mul(ad.mul(ad.add(t_mean, 17.78), 0.0135), ad.mul(weather.radiation, 1.0 / 2.45))
    return _pos(et0, smooth)


@dataclass(frozen=True)
class StepFluxes:
    thermal_time: object
    f_int: object
    f_water: object
    growth: object
    et0: object
    transpiration: object
    evaporation: object
    drainage: object


StressFn = Callable[[CropState, WeatherArrays, CropParams], object]


def step_with_fluxes(
    state: CropState,
    weather: WeatherArrays,
    params: CropParams,
    *,
    smooth: bool = False,
    stress_fn: StressFn | None = None,
    active=None,
) -> tuple[CropState, StepFluxes]:
    """Advance one day and also return the fluxes of that day.

    ``stress_fn`` replaces the water-stress factor (it multiplies both growth
    and transpiration).  ``active`` is a constant 0/1 mask switching growth
    off, used to stop a crop after harvest.

    Transpiration and soil evaporation are limited by the water present in
    the bucket after rain, so the balance
    ``sw_new - sw_old - precip + T + E + D = 0`` holds on every step.
    """
    # (1) phenology
    dtt = thermal_time_increment(weather, params.t_base, smooth)
    tt = ad.add(state.tt_cum, dtt)
    dvs = ad.div(tt, params.tt_mature)
    # (2) interception, (3) stress
    f_int = light_interception(state.lai, params.k_ext)
    f_w = water_stress(state.soil_water, params) if stress_fn is None else stress_fn(state, weather, params)
    # (4) growth
    growth = ad.mul(ad.mul(ad.mul(params.rue, f_int), par_from_radiation(weather.radiation)), f_w)
    if active is not None:
        growth = ad.mul(growth, np.asarray(active, dtype=np.float64))
    w_total = ad.add(state.w_total, growth)
    # (5) leaf partitioning, fL = max(0, 1 - dvs / dvs_L) with dvs_L = tt_sen / tt_mature
    dvs_leaf = ad.div(params.tt_sen, params.tt_mature)
    f_leaf = ad.max_const(ad.sub(1.0, ad.div(dvs, dvs_leaf)), 0.0)
    w_leaf = ad.add(state.w_leaf, ad.mul(f_leaf, growth))
    # (6) senescence after tt_sen
    senescing = (_v(tt) > _v(params.tt_sen)).astype(np.float64)
    if np.any(senescing):
        loss = ad.mul(ad.mul(ad.mul(params.r_sen, dtt), w_leaf), senescing)
        w_leaf = ad.max_const(ad.sub(w_leaf, loss), 0.0)
    # (7) leaf area: lai_init until leaf mass first appears, sla * w_leaf afterwards
    emerged = np.logical_or(state.emerged, _v(w_leaf) > 0.0)
    lai = ad.where_const(emerged, ad.mul(params.sla, w_leaf), params.lai_init)
    # (8) bucket
    et0 = reference_et(weather, smooth)
    transp = ad.mul(ad.mul(ad.mul(params.k_et, f_int), f_w), et0)
    evap = ad.mul(ad.mul(params.k_et, ad.sub(1.0, f_int)), et0)
    available = ad.add(state.soil_water, weather.precip)
    transp = ad.minimum(transp, available)
    evap = ad.minimum(evap, ad.sub(available, transp))
    after_et = ad.sub(ad.sub(available, transp), evap)
    drainage = _pos(ad.sub(after_et, params.s_max), smooth)
    soil_water = ad.sub(after_et, drainage)

    new_state = CropState(
        tt_cum=tt,
        dvs=dvs,
        w_total=w_total,
        w_leaf=w_leaf,
        lai=lai,
        soil_water=soil_water,
        emerged=emerged,
    )
    fluxes = StepFluxes(dtt, f_int, f_w, growth, et0, transp, evap, drainage)
    return new_state, fluxes


def step(state: CropState, weather, params: CropParams, **kwargs) -> CropState:
    """One explicit-Euler day of the crop model."""
    if isinstance(weather, DailyWeather):
        weather = WeatherArrays(weather.t_min, weather.t_max, weather.radiation, weather.precip)
    params.validate()
    return step_with_fluxes(state, weather, params, **kwargs)[0]


@dataclass
class Trajectory:
    """States after each simulated day (index 0 is the state after day 1)."""

    states: list[CropState]
    fluxes: list[StepFluxes]

    def __len__(self) -> int:
        return len(self.states)

    def __getitem__(self, i) -> CropState:
        return self.states[i]

    def series(self, name: str):
        """Stack one state field over time along a new last axis."""
        return ad.stack([getattr(s, name) for s in self.states], axis=-1)

    def values(self, name: str) -> np.ndarray:
        return np.stack([_v(getattr(s, name)) for s in self.states], axis=-1)

    @property
    def final(self) -> CropState:
        return self.states[-1]

    def to_csv(self, path_or_buffer=None) -> str:
        """Export a single (unbatched) trajectory, six decimals per value."""
        cols = ("tt_cum", "dvs", "lai", "w_total", "w_leaf", "soil_water")
        data = {c: self.values(c) for c in cols}
        if data["w_total"].ndim != 1:
            raise ValueError("CSV export needs an unbatched trajectory")
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(("date_index",) + cols)
        for i in range(len(self)):
            writer.writerow([i] + [f"{data[c][i]:.6f}" for c in cols])
        text = buf.getvalue()
        if path_or_buffer is not None:
            if hasattr(path_or_buffer, "write"):
                path_or_buffer.write(text)
            else:
                with open(path_or_buffer, "w", encoding="utf-8", newline="") as fh:
                    fh.write(text)
        return text


def simulate(
    init: CropState,
    weather,
    params: CropParams,
    *,
    smooth: bool = False,
    stress_fn: StressFn | None = None,
    stop_at_maturity: bool = False,
) -> Trajectory:
    """Fold :func:`step` over the weather sequence.

    With ``stop_at_maturity`` growth is switched off from the day after DVS
    first reaches 1, so the final ``w_total`` is the harvest biomass.
    """
    if not isinstance(weather, WeatherArrays):
        weather = WeatherArrays.from_days(list(weather))
    n = weather.length
    if n < 1:
        raise ValueError("weather sequence is empty")
    params.validate()
    state = init
    states, fluxes = [], []
    for t in range(n):
        active = None
        if stop_at_maturity:
            active = (_v(state.dvs) < 1.0).astype(np.float64)
        state, flux = step_with_fluxes(
            state, weather.day(t), params, smooth=smooth, stress_fn=stress_fn, active=active
        )
        states.append(state)
        fluxes.append(flux)
    return Trajectory(states, fluxes)


def simulate_season(
    weather_year: WeatherArrays,
    params: CropParams,
    *,
    sowing_doy: int = SOWING_DOY,
    smooth: bool = False,
    stress_fn: StressFn | None = None,
) -> Trajectory:
    """One growing season from ``sowing_doy`` to day 365 of 365-day years.

    ``weather_year`` holds full years (last axis 365).  The crop is harvested
    when DVS reaches 1 or at day 365, whichever comes first; the returned
    trajectory is flat after harvest.
    """
    if weather_year.length != 365:
        raise ValueError(f"expected 365 days per year, got {weather_year.length}")
    window = weather_year.window(sowing_doy - 1, 365)
    batch = _v(window.t_min).shape[:-1]
    init = CropState.initial(params, shape=batch)
    return simulate(init, window, params, smooth=smooth, stress_fn=stress_fn, stop_at_maturity=True)


def harvest_index(trajectory: Trajectory) -> np.ndarray:
    """Index of the harvest day (first day with DVS >= 1, else the last day)."""
    dvs = trajectory.values("dvs")
    mature = dvs >= 1.0
    last = dvs.shape[-1] - 1
    return np.where(mature.any(axis=-1), mature.argmax(axis=-1), last)

