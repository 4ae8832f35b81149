import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from agridiff import autodiff as ad
from agridiff.autodiff import Tape, backward, grad_check
from agridiff.neural import (
    Layer,
    LstmSpec,
    LstmState,
    LstmWeights,
    MlpSpec,
    MlpWeights,
    init_weights,
    load_checkpoint,
    lstm_cell,
    lstm_forward,
    mlp_forward,
    save_checkpoint,
    swish,
)


def zero_lstm(hidden=2, n_in=3, bias=(0.0, 0.0, 0.0, 0.0)):
    w = np.zeros((hidden, hidden + n_in))
    head = MlpWeights([Layer(np.zeros((1, hidden)), np.zeros(1), "identity")])
    bf, bi, bc, bo = (np.full(hidden, b) for b in bias)
    return LstmWeights(w, w.copy(), w.copy(), w.copy(), bf, bi, bc, bo, head)


def test_identity_layer_passes_input_through():
    net = MlpWeights([Layer(np.eye(3), np.zeros(3), "identity")])
    x = np.array([0.5, -2.0, 7.0])
    np.testing.assert_array_equal(mlp_forward(net, x), x)


def test_zero_sigmoid_layer_gives_half():
    net = MlpWeights([Layer(np.zeros((2, 4)), np.zeros(2), "sigmoid")])
    np.testing.assert_array_equal(mlp_forward(net, np.array([1.0, -3.0, 9.0, 0.2])), [0.5, 0.5])


def test_relu_layer_example():
    net = MlpWeights([Layer(np.array([[2.0]]), np.array([1.0]), "relu")])
    assert float(mlp_forward(net, np.array([-3.0]))[0]) == 0.0


def test_mlp_shape_mismatch_names_both_shapes():
    net = init_weights(MlpSpec((3, 2), ("tanh",)), 0)
    with pytest.raises(ValueError, match=r"\(4,\).*\(3,\)"):
        mlp_forward(net, np.zeros(4))


def test_mlp_layers_must_chain():
    with pytest.raises(ValueError):
        MlpWeights([Layer(np.zeros((2, 3)), np.zeros(2), "tanh"), Layer(np.zeros((1, 4)), np.zeros(1), "identity")])
    with pytest.raises(ValueError):
        MlpSpec((3, 2), ("gelu",))


def test_swish_examples():
    assert float(swish(0.0, 3.7)) == 0.0
    for x in (-2.0, 0.3, 5.0):
        assert float(swish(x, 0.0)) == 0.5 * x
    assert float(swish(1.0, 1.0)) == pytest.approx(0.73106, abs=5e-6)
    assert float(swish(1.0, 1.0)) == pytest.approx(1 / (1 + math.exp(-1)), rel=1e-15)


def test_swish_beta_is_trainable():
    net = init_weights(MlpSpec((2, 3, 1), ("swish", "identity")), 4)
    assert "swish_beta" in net.arrays()
    x = np.array([0.4, -1.2])

    def program(tape, v):
        return ad.vsum(mlp_forward(net.with_arrays(v), x))

    rep = grad_check(program, net.arrays())
    assert rep.passed
    assert any(e.input_name == "swish_beta" and e.analytic != 0 for e in rep.entries)


def test_zero_cell_from_zero_state():
    s = lstm_cell(zero_lstm(), LstmState.zeros(2), np.array([1.0, 2.0, 3.0]))
    np.testing.assert_array_equal(s.c, 0.0)
    np.testing.assert_array_equal(s.h, 0.0)


def test_zero_cell_with_c_two():
    s = lstm_cell(zero_lstm(), LstmState(np.zeros(2), np.full(2, 2.0)), np.zeros(3))
    np.testing.assert_allclose(s.c, 1.0, rtol=0, atol=0)
    # oracle: h = 0.5 * tanh(1)
    np.testing.assert_allclose(s.h, 0.5 * math.tanh(1.0), rtol=1e-15)
    assert float(s.h[0]) == pytest.approx(0.38080, abs=5e-6)


def test_forget_dominant_cell_preserves_state():
    w = zero_lstm(bias=(40.0, -40.0, 0.0, 0.0))
    c = np.array([0.7, -1.3])
    s = lstm_cell(w, LstmState(np.zeros(2), c), np.array([5.0, -2.0, 1.0]))
    np.testing.assert_allclose(s.c, c, atol=1e-6)


def test_cell_dimension_mismatch():
    with pytest.raises(ValueError):
        lstm_cell(zero_lstm(), LstmState.zeros(2), np.zeros(4))


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10_000), scale=st.floats(0.1, 20.0))
def test_gates_and_hidden_bounds(seed, scale):
    rng = np.random.default_rng(seed)
    w = init_weights(LstmSpec(3, 4), seed)
    x = rng.normal(scale=scale, size=(6, 3))
    state = LstmState.zeros(4)
    for t in range(6):
        state = lstm_cell(w, state, x[t])
        assert np.all(np.abs(state.h) < 1.0)


def test_forward_single_step_equals_cell_plus_head():
    w = init_weights(LstmSpec(3, 5), 1)
    x = np.array([[0.2, -0.4, 1.1]])
    expected = mlp_forward(w.head, lstm_cell(w, LstmState.zeros(5), x[0]).h)
    np.testing.assert_array_equal(lstm_forward(w, x, "last"), expected)


def test_zero_network_outputs_zero():
    out = lstm_forward(zero_lstm(), np.random.default_rng(0).normal(size=(7, 3)), "per_step")
    assert out.shape == (7, 1)
    np.testing.assert_array_equal(out, 0.0)


def test_forward_rejects_empty_and_bad_mode():
    w = init_weights(LstmSpec(3, 2), 0)
    with pytest.raises(ValueError):
        lstm_forward(w, np.zeros((0, 3)))
    with pytest.raises(ValueError):
        lstm_forward(w, np.zeros((2, 3)), mode="mean")


def test_batched_forward_matches_loop():
    w = init_weights(LstmSpec(2, 3), 2)
    seqs = np.random.default_rng(1).normal(size=(4, 5, 2))
    batched = lstm_forward(w, seqs, "per_step")
    for b in range(4):
        np.testing.assert_allclose(batched[b], lstm_forward(w, seqs[b], "per_step"), rtol=1e-14)


def test_lstm_weight_gradients_t10():
    rng = np.random.default_rng(3)
    w = init_weights(LstmSpec(3, 4), 3)
    seq = rng.normal(size=(10, 3))

    def program(tape, v):
        return ad.vsum(lstm_forward(w.with_arrays(v), seq, "last"))

    rep = grad_check(program, w.arrays(), tolerance=1e-5)
    assert rep.passed, rep.worst()
    assert any(e.input_name.startswith("w_f[") for e in rep.entries)


def test_init_is_deterministic_and_bounded():
    spec = LstmSpec(3, 6)
    a, b = init_weights(spec, 9), init_weights(spec, 9)
    for k, v in a.arrays().items():
        np.testing.assert_array_equal(v, b.arrays()[k])
    bound = math.sqrt(6 / (6 + 9))
    assert np.max(np.abs(a.w_f)) <= bound
    np.testing.assert_array_equal(a.b_f, 1.0)
    np.testing.assert_array_equal(a.b_i, 0.0)


def test_glorot_bound_three_by_three():
    spec = MlpSpec((3, 3), ("identity",))
    draws = np.concatenate([init_weights(spec, s).layers[0].weight.ravel() for s in range(112)])
    assert draws.size >= 1000
    assert np.max(np.abs(draws)) <= 1.0
    assert np.max(np.abs(draws)) > 0.95


def test_checkpoint_round_trip(tmp_path):
    w = init_weights(LstmSpec(2, 3, MlpSpec((3, 4, 1), ("swish", "identity"))), 5)
    save_checkpoint(w, tmp_path / "w.json", seed=5)
    back = load_checkpoint(tmp_path / "w.json")
    for k, v in w.arrays().items():
        np.testing.assert_array_equal(np.asarray(v), np.asarray(back.arrays()[k]))


def test_bind_records_leaves():
    w = init_weights(MlpSpec((2, 1), ("tanh",)), 0)
    tape = Tape()
    bound, leaves = w.bind(tape)
    out = ad.vsum(mlp_forward(bound, np.array([1.0, 2.0])))
    g = backward(tape, out)
    assert g[leaves["layer0.weight"]].shape == (1, 2)
