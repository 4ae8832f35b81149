"""Losses, Adam, early stopping and the two gradient-descent loops.

Trainable things expose named numpy arrays.  Each epoch binds them to leaves
on a fresh tape, evaluates the loss, runs one reverse sweep and applies one
Adam update.  Test losses are computed on the plain-numpy path (no tape).
"""

from __future__ import annotations

import csv
import io
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Mapping, Protocol

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Variable
from .pbm import CropParams, WeatherArrays, simulate_season

log = logging.getLogger(__name__)

__all__ = [
    "NonFiniteError",
    "AdamConfig",
    "OptimizerState",
    "EarlyStopConfig",
    "TrainReport",
    "mse_loss",
    "adam_init",
    "adam_step",
    "train",
    "squash",
    "unsquash",
    "calibrate_pbm",
    "CalibrationResult",
]


class NonFiniteError(FloatingPointError):
    """A loss or gradient stopped being finite."""


def mse_loss(predicted, observed):
    """Mean squared difference; either side may be a Variable."""
    ps = predicted.shape if isinstance(predicted, Variable) else np.shape(predicted)
    os_ = observed.shape if isinstance(observed, Variable) else np.shape(observed)
    if ps != os_:
        raise ValueError(f"shape mismatch: predicted {ps} vs observed {os_}")
    if int(np.prod(ps)) < 1:
        raise ValueError("mse_loss needs at least one value")
    diff = ad.sub(predicted, observed)
    return ad.vmean(ad.mul(diff, diff))


@dataclass(frozen=True)
class AdamConfig:
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8


@dataclass
class OptimizerState:
    step_count: int
    first_moment: dict[str, np.ndarray]
    second_moment: dict[str, np.ndarray]
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8


def adam_init(params: Mapping[str, np.ndarray], config: AdamConfig = AdamConfig()) -> OptimizerState:
    zeros = {k: np.zeros(np.shape(v)) for k, v in params.items()}
    return OptimizerState(
        0,
        zeros,
        {k: z.copy() for k, z in zeros.items()},
        config.learning_rate,
        config.beta1,
        config.beta2,
        config.epsilon,
    )


def adam_step(
    state: OptimizerState,
    params: Mapping[str, np.ndarray],
    gradients: Mapping[str, np.ndarray],
) -> tuple[dict[str, np.ndarray], OptimizerState]:
    """One bias-corrected Adam update; inputs are left untouched."""
    if set(params) != set(state.first_moment) or set(gradients) != set(params):
        raise ValueError("parameters, gradients and moments are not aligned")
    for name, g in gradients.items():
        if not np.all(np.isfinite(g)):
            raise NonFiniteError(f"non-finite gradient for parameter {name!r}")
    t = state.step_count + 1
    b1, b2 = state.beta1, state.beta2
    new_params, m_new, v_new = {}, {}, {}
    for name, p in params.items():
        g = np.asarray(gradients[name], dtype=np.float64)
        m = b1 * state.first_moment[name] + (1 - b1) * g
        v = b2 * state.second_moment[name] + (1 - b2) * g * g
        m_hat = m / (1 - b1**t)
        v_hat = v / (1 - b2**t)
        new_params[name] = np.asarray(p, dtype=np.float64) - state.learning_rate * m_hat / (
            np.sqrt(v_hat) + state.epsilon
        )
        m_new[name], v_new[name] = m, v
    new_state = OptimizerState(t, m_new, v_new, state.learning_rate, b1, b2, state.epsilon)
    return new_params, new_state


@dataclass(frozen=True)
class EarlyStopConfig:
    patience: int = 20
    min_delta: float = 1e-4
    max_epochs: int = 500

    def __post_init__(self):
        if self.patience < 0:
            raise ValueError("patience must be >= 0")
        if self.max_epochs < 1:
            raise ValueError("max_epochs must be >= 1")


@dataclass
class TrainReport:
    train_loss_curve: list[float] = field(default_factory=list)
    test_loss_curve: list[float] = field(default_factory=list)
    stopped_epoch: int = 0
    best_epoch: int = 0
    best_weights: dict[str, np.ndarray] = field(default_factory=dict, repr=False)
    initial_train_loss: float = math.nan
    initial_test_loss: float = math.nan
    aborted: bool = False
    abort_reason: str | None = None

    @property
    def best_test_loss(self) -> float:
        if self.best_epoch == 0:
            return self.initial_test_loss
        return self.test_loss_curve[self.best_epoch - 1]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["best_weights"] = {k: np.asarray(v).tolist() for k, v in self.best_weights.items()}
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    def curves_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(("epoch", "train_loss", "test_loss"))
        for i, (a, b) in enumerate(zip(self.train_loss_curve, self.test_loss_curve), start=1):
            writer.writerow((i, repr(a), repr(b)))
        return buf.getvalue()


class Trainable(Protocol):
    """What :func:`train` needs from a model."""

    def parameters(self) -> dict[str, np.ndarray]: ...

    def loss(self, params: Mapping[str, object], data) -> object: ...


LossFn = Callable[[Mapping[str, object], object], object]


def train(
    model: Trainable | LossFn,
    train_data,
    test_data,
    optimizer: AdamConfig = AdamConfig(),
    stop: EarlyStopConfig = EarlyStopConfig(),
    seed: int = 0,
    params: Mapping[str, np.ndarray] | None = None,
    include_initial: bool = False,
) -> TrainReport:
    """Full-batch training with early stopping on the test loss.

    ``model`` is either an object with ``parameters()`` and ``loss(params,
    data)`` or a bare loss function (then ``params`` is required).  Epoch e
    evaluates the training loss at the current parameters, updates them, then
    scores the test set.  The best parameters (lowest test loss) end up in
    ``report.best_weights``; with ``include_initial`` the starting point also
    competes as epoch 0.  ``seed`` is recorded only; training itself is
    deterministic.
    """
    if train_data is None or test_data is None:
        raise ValueError("train and test data are required")
    loss_fn = model if callable(model) and not hasattr(model, "loss") else model.loss
    current = {k: np.array(v, dtype=np.float64) for k, v in (params or model.parameters()).items()}
    state = adam_init(current, optimizer)
    report = TrainReport()

    def test_loss(p):
        return float(np.asarray(loss_fn(p, test_data)))

    try:
        report.initial_test_loss = test_loss(current)
    except ad.DomainError as exc:
        report.aborted, report.abort_reason = True, f"initial evaluation failed: {exc}"
        report.best_weights = current
        return report
    best = report.initial_test_loss if include_initial else math.inf
    report.best_weights = {k: v.copy() for k, v in current.items()}
    reference = best
    since_best = 0
    for epoch in range(1, stop.max_epochs + 1):
        try:
            tape = Tape()
            leaves = {k: tape.leaf(v) for k, v in current.items()}
            loss = loss_fn(leaves, train_data)
            value = float(loss.value)
            if not math.isfinite(value):
                raise NonFiniteError("training loss is not finite")
            grads = ad.backward(tape, loss)
            current, state = adam_step(state, current, {k: grads[v] for k, v in leaves.items()})
            tl = test_loss(current)
            if not math.isfinite(tl):
                raise NonFiniteError("test loss is not finite")
        except (ad.DomainError, NonFiniteError) as exc:
            report.aborted, report.abort_reason = True, f"epoch {epoch}: {exc}"
            log.warning("training aborted at epoch %d: %s", epoch, exc)
            break
        if epoch == 1:
            report.initial_train_loss = value
        report.train_loss_curve.append(value)
        report.test_loss_curve.append(tl)
        report.stopped_epoch = epoch
        if tl < best:
            report.best_epoch = epoch
            report.best_weights = {k: v.copy() for k, v in current.items()}
        # patience counts epochs without an improvement of at least min_delta
        if tl < reference - stop.min_delta:
            reference = tl
            since_best = 0
        else:
            since_best += 1
            if since_best > stop.patience:
                break
        best = min(best, tl)
    return report


# ---------------------------------------------------------------- calibration

def squash(raw, low: float, high: float):
    """Map an unconstrained value into [low, high] with a scaled sigmoid."""
    return ad.add(low, ad.mul(high - low, ad.sigmoid(raw)))


def unsquash(value: float, low: float, high: float) -> float:
    if high == low:
        return 0.0
    u = min(max((value - low) / (high - low), 1e-6), 1 - 1e-6)
    return math.log(u / (1 - u))


@dataclass
class CalibrationResult:
    params: CropParams
    loss_trace: list[float]
    report: TrainReport

    @property
    def best_loss(self) -> float:
        return self.report.best_test_loss


def _bounded_params(base: CropParams, bounds, raw: Mapping[str, object]) -> CropParams:
    updates = {}
    for name, (lo, hi) in bounds.items():
        updates[name] = lo if hi == lo else squash(raw[name], lo, hi)
    return base.with_values(**updates)


def calibrate_pbm(
    params_init: CropParams,
    bounds: Mapping[str, tuple[float, float]],
    observations: np.ndarray,
    weather: WeatherArrays,
    optimizer: AdamConfig = AdamConfig(learning_rate=0.05),
    stop: EarlyStopConfig = EarlyStopConfig(patience=20, min_delta=0.0, max_epochs=300),
    test_observations: np.ndarray | None = None,
    test_weather: WeatherArrays | None = None,
) -> CalibrationResult:
    """Fit the bounded parameters to annual harvest biomass.

    ``weather`` holds full years (batch, 365); ``observations`` one harvest
    biomass per year.  Each bounded parameter is ``low + (high - low) *
    sigmoid(raw)``, so results never leave their bounds.  Without a separate
    test set the training loss drives early stopping.
    """
    for name, (lo, hi) in bounds.items():
        if name not in CropParams.names():
            raise ValueError(f"unknown parameter {name!r}")
        if not (math.isfinite(lo) and math.isfinite(hi)) or hi < lo:
            raise ValueError(f"invalid bounds for {name}: ({lo}, {hi})")
    observations = np.asarray(observations, dtype=np.float64)
    if observations.shape != np.shape(weather.t_min)[:-1]:
        raise ValueError(
            f"{observations.shape} observations for weather batch {np.shape(weather.t_min)[:-1]}"
        )
    free = {k: b for k, b in bounds.items() if b[1] > b[0]}
    init_values = params_init.values()
    raw0 = {k: np.array(unsquash(float(init_values[k]), *b)) for k, b in free.items()}

    def loss(raw, data):
        obs, wx = data
        params = _bounded_params(params_init, bounds, raw)
        traj = simulate_season(wx, params)
        return mse_loss(traj.final.w_total, obs)

    train_data = (observations, weather)
    if test_observations is not None:
        test_data = (np.asarray(test_observations, dtype=np.float64), test_weather)
    else:
        test_data = train_data
    if not free:
        params = _bounded_params(params_init, bounds, {})
        value = float(np.asarray(loss({}, test_data)))
        rep = TrainReport(initial_test_loss=value, initial_train_loss=value)
        return CalibrationResult(params, [value], rep)
    report = train(loss, train_data, test_data, optimizer, stop, params=raw0, include_initial=True)
    best = _bounded_params(params_init, bounds, report.best_weights)
    best = best.with_values(**{k: float(np.asarray(getattr(best, k))) for k in bounds})
    trace = [report.initial_test_loss] + report.test_loss_curve
    return CalibrationResult(best, trace, report)
