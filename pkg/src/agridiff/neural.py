"""MLP and LSTM building blocks that record onto the autodiff tape.

Weights are stored as numpy arrays.  To train them, bind each array to a leaf
on a fresh tape (:meth:`MlpWeights.bind` / :meth:`LstmWeights.bind`); the
forward functions are oblivious to whether they see arrays or Variables.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Mapping

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Variable

__all__ = [
    "ACTIVATIONS",
    "MlpSpec",
    "LstmSpec",
    "Layer",
    "MlpWeights",
    "LstmWeights",
    "LstmState",
    "mlp_forward",
    "swish",
    "lstm_cell",
    "lstm_forward",
    "init_weights",
    "save_checkpoint",
    "load_checkpoint",
]

ACTIVATIONS = ("sigmoid", "tanh", "relu", "swish", "identity")


def _shape(x) -> tuple:
    return x.shape if isinstance(x, (Variable, np.ndarray)) else np.shape(x)


@dataclass(frozen=True)
class MlpSpec:
    sizes: tuple[int, ...]
    activations: tuple[str, ...]

    def __post_init__(self):
        if len(self.sizes) < 2:
            raise ValueError("an MLP needs at least input and output sizes")
        if len(self.activations) != len(self.sizes) - 1:
            raise ValueError(
                f"{len(self.sizes) - 1} layers but {len(self.activations)} activations"
            )
        bad = set(self.activations) - set(ACTIVATIONS)
        if bad:
            raise ValueError(f"unknown activation(s) {sorted(bad)}")

    def to_dict(self) -> dict:
        return {"kind": "mlp", "sizes": list(self.sizes), "activations": list(self.activations)}


@dataclass(frozen=True)
class LstmSpec:
    input_size: int
    hidden: int = 16
    head: MlpSpec | None = None

    def head_spec(self) -> MlpSpec:
        return self.head or MlpSpec((self.hidden, 1), ("identity",))

    def to_dict(self) -> dict:
        return {
            "kind": "lstm",
            "input_size": self.input_size,
            "hidden": self.hidden,
            "head": self.head_spec().to_dict(),
        }


@dataclass
class Layer:
    weight: object  # (out, in)
    bias: object  # (out,)
    activation: str


@dataclass
class MlpWeights:
    layers: list[Layer]
    swish_beta: object = 1.0

    def __post_init__(self):
        for i, layer in enumerate(self.layers):
            if layer.activation not in ACTIVATIONS:
                raise ValueError(f"layer {i}: unknown activation {layer.activation!r}")
            w, b = _shape(layer.weight), _shape(layer.bias)
            if len(w) != 2 or b != (w[0],):
                raise ValueError(f"layer {i}: weight {w} and bias {b} do not match")
            if i and _shape(self.layers[i - 1].weight)[0] != w[1]:
                raise ValueError(
                    f"layer {i} expects {w[1]} inputs but layer {i - 1} "
                    f"produces {_shape(self.layers[i - 1].weight)[0]}"
                )

    @property
    def spec(self) -> MlpSpec:
        sizes = [_shape(self.layers[0].weight)[1]] + [_shape(l.weight)[0] for l in self.layers]
        return MlpSpec(tuple(sizes), tuple(l.activation for l in self.layers))

    @property
    def uses_swish(self) -> bool:
        return any(l.activation == "swish" for l in self.layers)

    def arrays(self, prefix: str = "") -> dict[str, object]:
        out = {}
        for i, layer in enumerate(self.layers):
            out[f"{prefix}layer{i}.weight"] = layer.weight
            out[f"{prefix}layer{i}.bias"] = layer.bias
        if self.uses_swish:
            out[f"{prefix}swish_beta"] = self.swish_beta
        return out

    def with_arrays(self, values: Mapping[str, object], prefix: str = "") -> "MlpWeights":
        layers = [
            Layer(values[f"{prefix}layer{i}.weight"], values[f"{prefix}layer{i}.bias"], l.activation)
            for i, l in enumerate(self.layers)
        ]
        beta = values.get(f"{prefix}swish_beta", self.swish_beta)
        return MlpWeights(layers, beta)

    def bind(self, tape: Tape) -> tuple["MlpWeights", dict[str, Variable]]:
        leaves = {k: tape.leaf(v) for k, v in self.arrays().items()}
        return self.with_arrays(leaves), leaves


@dataclass
class LstmWeights:
    w_f: object
    w_i: object
    w_c: object
    w_o: object
    b_f: object
    b_i: object
    b_c: object
    b_o: object
    head: MlpWeights

    GATES = ("w_f", "w_i", "w_c", "w_o", "b_f", "b_i", "b_c", "b_o")

    def __post_init__(self):
        shapes = {_shape(getattr(self, k)) for k in ("w_f", "w_i", "w_c", "w_o")}
        if len(shapes) != 1:
            raise ValueError(f"gate matrices differ in shape: {sorted(shapes)}")
        (shape,) = shapes
        if len(shape) != 2 or shape[1] <= shape[0]:
            raise ValueError(f"gate matrix shape {shape} is not hidden x (hidden + input)")
        for k in ("b_f", "b_i", "b_c", "b_o"):
            if _shape(getattr(self, k)) != (shape[0],):
                raise ValueError(f"{k} has shape {_shape(getattr(self, k))}, expected ({shape[0]},)")
        if self.head.spec.sizes[0] != shape[0]:
            raise ValueError("head input size must equal the hidden size")

    @property
    def hidden(self) -> int:
        return _shape(self.w_f)[0]

    @property
    def input_size(self) -> int:
        return _shape(self.w_f)[1] - self.hidden

    @property
    def spec(self) -> LstmSpec:
        return LstmSpec(self.input_size, self.hidden, self.head.spec)

    def arrays(self) -> dict[str, object]:
        out = {k: getattr(self, k) for k in self.GATES}
        out.update(self.head.arrays(prefix="head."))
        return out

    def with_arrays(self, values: Mapping[str, object]) -> "LstmWeights":
        return LstmWeights(
            *(values[k] for k in self.GATES), head=self.head.with_arrays(values, prefix="head.")
        )

    def bind(self, tape: Tape) -> tuple["LstmWeights", dict[str, Variable]]:
        leaves = {k: tape.leaf(v) for k, v in self.arrays().items()}
        return self.with_arrays(leaves), leaves


@dataclass
class LstmState:
    h: object
    c: object

    @classmethod
    def zeros(cls, hidden: int, batch: tuple = ()) -> "LstmState":
        z = np.zeros(batch + (hidden,))
        return cls(z, z.copy())


def swish(x, beta):
    """x * sigmoid(beta * x)."""
    return ad.mul(x, ad.sigmoid(ad.mul(beta, x)))


def _activate(x, name: str, beta):
    if name == "identity":
        return x
    if name == "swish":
        return swish(x, beta)
    return getattr(ad, name)(x)


def mlp_forward(weights: MlpWeights, x):
    """Affine-then-activation layers; x has shape (..., n_in)."""
    n_in = _shape(weights.layers[0].weight)[1]
    if _shape(x)[-1:] != (n_in,):
        raise ValueError(f"input shape {_shape(x)} does not match first layer input ({n_in},)")
    for layer in weights.layers:
        x = _activate(ad.linear(x, layer.weight, layer.bias), layer.activation, weights.swish_beta)
    return x


def lstm_cell(weights: LstmWeights, state: LstmState, x_t) -> LstmState:
    """One LSTM step on the concatenated [h_{t-1}, x_t] vector."""
    if _shape(x_t)[-1] != weights.input_size:
        raise ValueError(
            f"input of size {_shape(x_t)[-1]} given to a cell expecting {weights.input_size}"
        )
    h_prev = state.h
    if _shape(h_prev)[:-1] != _shape(x_t)[:-1]:
        h_prev = ad.add(h_prev, np.zeros(_shape(x_t)[:-1] + (weights.hidden,)))
    z = ad.concat([h_prev, x_t], axis=-1)
    f = ad.sigmoid(ad.linear(z, weights.w_f, weights.b_f))
    i = ad.sigmoid(ad.linear(z, weights.w_i, weights.b_i))
    c_tilde = ad.tanh(ad.linear(z, weights.w_c, weights.b_c))
    c = ad.add(ad.mul(f, state.c), ad.mul(i, c_tilde))
    o = ad.sigmoid(ad.linear(z, weights.w_o, weights.b_o))
    h = ad.mul(o, ad.tanh(c))
    return LstmState(h, c)


def lstm_forward(weights: LstmWeights, sequence, mode: str = "last"):
    """Run the cell over a (..., T, input) sequence from a zero state.

    ``mode="last"`` applies the head to the final hidden state; ``"per_step"``
    applies it to every hidden state and returns shape (..., T, out).
    """
    if mode not in ("last", "per_step"):
        raise ValueError(f"unknown mode {mode!r}")
    shape = _shape(sequence)
    if len(shape) < 2 or shape[-2] < 1:
        raise ValueError("sequence must have at least one time step")
    batch = shape[:-2]
    state = LstmState.zeros(weights.hidden, batch)
    hs = []
    for t in range(shape[-2]):
        x_t = sequence[..., t, :]
        state = lstm_cell(weights, state, x_t)
        hs.append(state.h)
    if mode == "last":
        return mlp_forward(weights.head, state.h)
    return mlp_forward(weights.head, ad.stack(hs, axis=-2))


def _glorot(rng: np.random.Generator, fan_out: int, fan_in: int) -> np.ndarray:
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=(fan_out, fan_in))


def _init_mlp(spec: MlpSpec, rng: np.random.Generator) -> MlpWeights:
    layers = [
        Layer(_glorot(rng, n_out, n_in), np.zeros(n_out), act)
        for n_in, n_out, act in zip(spec.sizes[:-1], spec.sizes[1:], spec.activations)
    ]
    return MlpWeights(layers, 1.0)


def init_weights(spec: MlpSpec | LstmSpec, seed: int):
    """Glorot-uniform weights, zero biases, forget-gate bias 1."""
    rng = np.random.default_rng(seed)
    if isinstance(spec, MlpSpec):
        return _init_mlp(spec, rng)
    n = spec.hidden + spec.input_size
    gates = {k: _glorot(rng, spec.hidden, n) for k in ("w_f", "w_i", "w_c", "w_o")}
    return LstmWeights(
        **gates,
        b_f=np.ones(spec.hidden),
        b_i=np.zeros(spec.hidden),
        b_c=np.zeros(spec.hidden),
        b_o=np.zeros(spec.hidden),
        head=_init_mlp(spec.head_spec(), rng),
    )


def _spec_from_dict(d: dict):
    if d["kind"] == "mlp":
        return MlpSpec(tuple(d["sizes"]), tuple(d["activations"]))
    return LstmSpec(d["input_size"], d["hidden"], _spec_from_dict(d["head"]))


def checkpoint_dict(weights, seed: int | None = None) -> dict:
    arrays = {
        k: np.asarray(v, dtype=float).ravel().tolist() for k, v in weights.arrays().items()
    }
    return {"spec": weights.spec.to_dict(), "seed": seed, "weights": arrays}


def weights_from_dict(d: dict):
    template = init_weights(_spec_from_dict(d["spec"]), 0)
    shapes = {k: np.shape(v) for k, v in template.arrays().items()}
    values = {k: np.asarray(d["weights"][k], dtype=float).reshape(shapes[k]) for k in shapes}
    return template.with_arrays(values)


def save_checkpoint(weights, path, seed: int | None = None) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(checkpoint_dict(weights, seed), fh)


def load_checkpoint(path):
    with open(path, encoding="utf-8") as fh:
        return weights_from_dict(json.load(fh))
