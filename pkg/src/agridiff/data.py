"""Weather data for the experiments: synthetic generator, CSV I/O, noise, splits.

The twin dataset (:func:`build_twin`) labels generated weather with the crop
model run at site-specific "true" parameters derived from the site attributes
by a fixed rule, so parameter-recovery experiments have a known answer.
"""

from __future__ import annotations

import csv
import math
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy.signal import lfilter

from .pbm import CropParams, DailyWeather, WeatherArrays, harvest_index, simulate_season, SOWING_DOY

__all__ = [
    "DataFormatError",
    "SiteAttributes",
    "WeatherSeries",
    "NoiseSpec",
    "SplitPlan",
    "default_sites",
    "generate_weather",
    "export_csv",
    "ingest_csv",
    "inject_noise",
    "inject_biomass_noise",
    "split_years",
    "fewshot_subset",
    "spatial_folds",
    "true_params",
    "TwinDataset",
    "build_twin",
    "ATTRIBUTE_RANGES",
    "DAYS_PER_YEAR",
    "CSV_HEADER",
]

DAYS_PER_YEAR = 365
CSV_HEADER = ("site_id", "year", "doy", "t_min", "t_max", "radiation", "precip")
VARIABLES = ("t_min", "t_max", "radiation", "precip")
# attribute -> (low, high) used to normalize attributes for the learned maps
ATTRIBUTE_RANGES = {
    "latitude": (48.0, 54.0),
    "soil_capacity_proxy": (80.0, 160.0),
    "mean_annual_temp": (7.5, 10.5),
}


class DataFormatError(ValueError):
    """Raised for malformed weather files."""


@dataclass(frozen=True)
class SiteAttributes:
    site_id: str
    latitude: float
    soil_capacity_proxy: float
    mean_annual_temp: float

    def __post_init__(self):
        for name in ("latitude", "soil_capacity_proxy", "mean_annual_temp"):
            if not math.isfinite(getattr(self, name)):
                raise ValueError(f"{self.site_id}: {name} must be finite")

    def vector(self) -> np.ndarray:
        """Attributes scaled to [0, 1] over :data:`ATTRIBUTE_RANGES`."""
        return np.array(
            [(getattr(self, k) - lo) / (hi - lo) for k, (lo, hi) in ATTRIBUTE_RANGES.items()]
        )


def default_sites() -> list[SiteAttributes]:
    """Three sites spanning the attribute ranges."""
    return [
        SiteAttributes("A", 48.0, 160.0, 10.5),
        SiteAttributes("B", 51.0, 120.0, 9.0),
        SiteAttributes("C", 54.0, 80.0, 7.5),
    ]


@dataclass(frozen=True)
class WeatherSeries:
    """Daily weather of one site; ``data`` has columns t_min, t_max, radiation, precip."""

    site_id: str
    start_year: int
    data: np.ndarray = field(repr=False)

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float64)
        if data.ndim != 2 or data.shape[1] != 4:
            raise ValueError(f"weather data must have shape (days, 4), got {data.shape}")
        if len(data) == 0 or len(data) % DAYS_PER_YEAR:
            raise ValueError(f"{len(data)} days is not a whole number of 365-day years")
        if not np.all(np.isfinite(data)):
            raise ValueError("weather contains non-finite values")
        bad = np.flatnonzero(data[:, 0] > data[:, 1])
        if bad.size:
            y, d = divmod(int(bad[0]), DAYS_PER_YEAR)
            raise ValueError(f"t_min > t_max on {self.start_year + y} day {d + 1}")
        if np.any(data[:, 2:] < 0):
            raise ValueError("radiation and precip must be non-negative")
        data.setflags(write=False)
        object.__setattr__(self, "data", data)

    @property
    def n_years(self) -> int:
        return len(self.data) // DAYS_PER_YEAR

    @property
    def years(self) -> list[int]:
        return list(range(self.start_year, self.start_year + self.n_years))

    @property
    def days(self) -> list[DailyWeather]:
        return [DailyWeather(*map(float, row)) for row in self.data]

    def __len__(self) -> int:
        return len(self.data)

    def by_year(self, years: Iterable[int] | None = None) -> np.ndarray:
        """(n_years, 365, 4) block for the requested years."""
        blocks = self.data.reshape(self.n_years, DAYS_PER_YEAR, 4)
        if years is None:
            return blocks
        idx = [y - self.start_year for y in years]
        if any(i < 0 or i >= self.n_years for i in idx):
            raise KeyError(f"years outside {self.start_year}..{self.years[-1]}")
        return blocks[idx]

    def arrays(self, years: Iterable[int] | None = None) -> WeatherArrays:
        b = self.by_year(years)
        return WeatherArrays(b[..., 0], b[..., 1], b[..., 2], b[..., 3])

    def equals(self, other: "WeatherSeries") -> bool:
        return (
            self.site_id == other.site_id
            and self.start_year == other.start_year
            and np.array_equal(self.data, other.data)
        )


@dataclass(frozen=True)
class NoiseSpec:
    level: int
    base_fraction: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if self.level not in (0, 1, 2, 3):
            raise ValueError(f"noise level must be 0..3, got {self.level}")
        if self.base_fraction < 0:
            raise ValueError("base_fraction must be non-negative")


@dataclass(frozen=True)
class SplitPlan:
    calibration_years: tuple[int, ...]
    validation_years: tuple[int, ...]
    train_years: tuple[int, ...]
    test_years: tuple[int, ...]

    def __post_init__(self):
        cal, val = set(self.calibration_years), set(self.validation_years)
        train, test = set(self.train_years), set(self.test_years)
        if cal & val:
            raise ValueError(f"calibration and validation overlap: {sorted(cal & val)}")
        if train & test:
            raise ValueError(f"train and test overlap: {sorted(train & test)}")
        if not train <= cal:
            raise ValueError("train years must come from the calibration period")
        if not test <= cal:
            raise ValueError("test years must come from the calibration period")


def _site_seed(site_id: str, seed: int) -> np.random.SeedSequence:
    return np.random.SeedSequence([int(seed) & 0xFFFFFFFF, zlib.crc32(site_id.encode())])


def generate_weather(
    site: SiteAttributes, years: int, seed: int, start_year: int = 1951
) -> WeatherSeries:
    """Seasonal daily weather with an AR(1) temperature anomaly.

    Values are rounded to 6 decimals so that CSV export is lossless.
    """
    if years < 1:
        raise ValueError("years must be >= 1")
    rng = np.random.default_rng(_site_seed(site.site_id, seed))
    n = years * DAYS_PER_YEAR
    doy = np.tile(np.arange(1, DAYS_PER_YEAR + 1), years)
    innovations = rng.normal(0.0, 2.0, n)
    anomaly = lfilter([1.0], [1.0, -0.7], innovations)
    t_mean = site.mean_annual_temp + 10.0 * np.sin(2 * np.pi * (doy - 120) / 365) + anomaly
    half_range = 3.0 + np.abs(rng.normal(0.0, 1.0, n))
    radiation = np.maximum(
        0.0, 8.0 + 12.0 * np.sin(2 * np.pi * (doy - 100) / 365) + rng.normal(0.0, 2.0, n)
    )
    wet = rng.random(n) < 0.3
    precip = np.where(wet, rng.exponential(5.0, n), 0.0)
    data = np.column_stack([t_mean - half_range, t_mean + half_range, radiation, precip])
    return WeatherSeries(site.site_id, start_year, np.round(data, 6))


def _fmt(x: float) -> str:
    s = f"{x:.6f}".rstrip("0").rstrip(".")
    return "0" if s in ("", "-0") else s


def export_csv(series: WeatherSeries, path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(CSV_HEADER)
        for i, row in enumerate(series.data):
            year, doy = divmod(i, DAYS_PER_YEAR)
            writer.writerow([series.site_id, series.start_year + year, doy + 1] + [_fmt(v) for v in row])


def ingest_csv(path) -> WeatherSeries:
    """Read the weather CSV format; leap days (doy 366) are dropped."""
    path = Path(path)
    rows: dict[tuple[int, int], list[float]] = {}
    site_id = None
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(h.strip() for h in header) != CSV_HEADER:
            raise DataFormatError(f"{path}: line 1: expected header {','.join(CSV_HEADER)}")
        for lineno, rec in enumerate(reader, start=2):
            if not rec:
                continue
            if len(rec) != len(CSV_HEADER):
                raise DataFormatError(f"{path}: line {lineno}: expected 7 fields, got {len(rec)}")
            try:
                year, doy = int(rec[1]), int(rec[2])
                vals = [float(v) for v in rec[3:]]
            except ValueError as exc:
                raise DataFormatError(f"{path}: line {lineno}: {exc}") from None
            if site_id is None:
                site_id = rec[0]
            elif rec[0] != site_id:
                raise DataFormatError(f"{path}: line {lineno}: mixed site ids {site_id!r}, {rec[0]!r}")
            if not all(math.isfinite(v) for v in vals):
                raise DataFormatError(f"{path}: line {lineno}: non-finite value")
            if doy == 366:
                continue
            if not 1 <= doy <= 365:
                raise DataFormatError(f"{path}: line {lineno}: doy {doy} outside 1..365")
            if vals[0] > vals[1]:
                raise DataFormatError(f"{path}: line {lineno}: t_min > t_max on {year}-{doy:03d}")
            if vals[2] < 0 or vals[3] < 0:
                raise DataFormatError(f"{path}: line {lineno}: negative radiation or precip")
            if (year, doy) in rows:
                raise DataFormatError(f"{path}: line {lineno}: duplicate day {year}-{doy:03d}")
            rows[(year, doy)] = vals
    if not rows:
        raise DataFormatError(f"{path}: no data rows")
    years = sorted({y for y, _ in rows})
    if years != list(range(years[0], years[-1] + 1)):
        raise DataFormatError(f"{path}: years are not contiguous")
    missing = [(y, d) for y in years for d in range(1, 366) if (y, d) not in rows]
    if missing:
        raise DataFormatError(f"{path}: missing day {missing[0][0]}-{missing[0][1]:03d}")
    data = np.array([rows[(y, d)] for y in years for d in range(1, 366)])
    return WeatherSeries(site_id, years[0], data)


def inject_noise(series: WeatherSeries, spec: NoiseSpec) -> WeatherSeries:
    """Add ``level * base_fraction * sd(v)`` Gaussian noise to every variable."""
    if spec.level == 0:
        return series
    rng = np.random.default_rng(_site_seed(series.site_id, spec.seed).spawn(1)[0])
    data = series.data
    sigma = spec.base_fraction * data.std(axis=0, ddof=1)
    noisy = data + spec.level * sigma * rng.standard_normal(data.shape)
    lo, hi = np.minimum(noisy[:, 0], noisy[:, 1]), np.maximum(noisy[:, 0], noisy[:, 1])
    noisy[:, 0], noisy[:, 1] = lo, hi
    noisy[:, 2:] = np.maximum(noisy[:, 2:], 0.0)
    return WeatherSeries(series.site_id, series.start_year, noisy)


def inject_biomass_noise(values: np.ndarray, level: int, base_fraction: float, seed: int) -> np.ndarray:
    """Same contamination rule applied to biomass observations, floored at 0."""
    values = np.asarray(values, dtype=np.float64)
    if level == 0:
        return values
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xB10]))
    sigma = base_fraction * values.std(ddof=1) if values.size > 1 else 0.0
    return np.maximum(values + level * sigma * rng.standard_normal(values.shape), 0.0)


def split_years(
    years: Sequence[int] | WeatherSeries,
    calibration_count: int = 48,
    train_fraction: float = 0.8,
    seed: int = 0,
) -> SplitPlan:
    """Chronological calibration/validation cut, random train/test inside calibration.

    The number of training years is ``floor(calibration_count * train_fraction)``.
    """
    if isinstance(years, WeatherSeries):
        years = years.years
    years = list(years)
    if not 0.0 < train_fraction < 1.0:
        raise ValueError(f"train_fraction must lie in (0, 1), got {train_fraction}")
    if len(years) <= calibration_count:
        raise ValueError(f"need more than {calibration_count} years, got {len(years)}")
    calibration, validation = years[:calibration_count], years[calibration_count:]
    n_train = math.floor(calibration_count * train_fraction)
    if n_train < 1 or n_train >= calibration_count:
        raise ValueError("train_fraction leaves an empty train or test set")
    rng = np.random.default_rng(seed)
    train = sorted(rng.choice(calibration, size=n_train, replace=False).tolist())
    test = [y for y in calibration if y not in set(train)]
    return SplitPlan(tuple(calibration), tuple(validation), tuple(train), tuple(test))


def fewshot_subset(plan: SplitPlan, k_years: int, seed: int) -> SplitPlan:
    if k_years < 1:
        raise ValueError("k_years must be >= 1")
    if k_years > len(plan.train_years):
        raise ValueError(f"k_years={k_years} exceeds {len(plan.train_years)} training years")
    rng = np.random.default_rng(seed)
    train = sorted(rng.choice(plan.train_years, size=k_years, replace=False).tolist())
    return SplitPlan(plan.calibration_years, plan.validation_years, tuple(train), plan.test_years)


def spatial_folds(
    sites: Sequence[SiteAttributes],
) -> list[tuple[tuple[SiteAttributes, SiteAttributes], SiteAttributes]]:
    """Leave-one-site-out folds: ({A,B}->C), ({A,C}->B), ({B,C}->A)."""
    if len(sites) != 3:
        raise ValueError(f"spatial folds need exactly 3 sites, got {len(sites)}")
    ids = [s.site_id for s in sites]
    if len(set(ids)) != 3:
        raise ValueError(f"duplicate site ids in {ids}")
    folds = []
    for held in reversed(range(3)):
        train = tuple(s for i, s in enumerate(sites) if i != held)
        folds.append((train, sites[held]))
    return folds


# ------------------------------------------------------------------ twin

def true_params(site: SiteAttributes, base: CropParams | None = None) -> CropParams:
    """Ground-truth parameters of a site in the synthetic twin.

    rue rises with soil capacity and temperature, k_ext with latitude,
    t_base with temperature; s_max equals the soil capacity proxy.
    """
    base = base or CropParams()
    u_lat, u_soil, u_temp = np.clip(site.vector(), -0.5, 1.5)
    return base.with_values(
        rue=2.2 + 1.2 * u_soil + 0.6 * u_temp,
        k_ext=0.45 + 0.2 * u_lat,
        t_base=3.0 + 2.0 * u_temp,
        s_max=float(site.soil_capacity_proxy),
    )


@dataclass
class TwinDataset:
    """Weather and crop-model labels for a set of sites.

    ``harvest[site]`` holds one harvest biomass per year and ``daily[site]``
    the daily biomass from sowing to day 365 (flat after harvest).
    """

    sites: list[SiteAttributes]
    weather: dict[str, WeatherSeries]
    truth: dict[str, CropParams]
    harvest: dict[str, np.ndarray]
    daily: dict[str, np.ndarray]
    harvest_day: dict[str, np.ndarray]
    seed: int

    def site(self, site_id: str) -> SiteAttributes:
        return next(s for s in self.sites if s.site_id == site_id)

    @property
    def years(self) -> list[int]:
        return self.weather[self.sites[0].site_id].years


def label_weather(series: WeatherSeries, params: CropParams) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    traj = simulate_season(series.arrays(), params)
    daily = traj.values("w_total")
    return daily[:, -1].copy(), daily, harvest_index(traj) + SOWING_DOY


def build_twin(
    sites: Sequence[SiteAttributes] | None = None,
    years: int = 68,
    seed: int = 0,
    start_year: int = 1951,
) -> TwinDataset:
    sites = list(sites or default_sites())
    weather, truth, harvest, daily, hday = {}, {}, {}, {}, {}
    for site in sites:
        series = generate_weather(site, years, seed, start_year)
        params = true_params(site)
        h, d, day = label_weather(series, params)
        weather[site.site_id], truth[site.site_id] = series, params
        harvest[site.site_id], daily[site.site_id], hday[site.site_id] = h, d, day
    return TwinDataset(sites, weather, truth, harvest, daily, hday, seed)
