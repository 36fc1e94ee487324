import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from flair.activations import ActivationSpec, Kind, default_spec
from flair.tensorgraph import (Adam, AdamState, ContractError, DimensionError, Tape, TrainingDivergence,
                               adam_step, backward, forward)


def numeric_grad(f, p, h=1e-5):
    g = np.zeros_like(p)
    for idx in np.ndindex(p.shape):
        old = p[idx]
        p[idx] = old + h
        up = f()
        p[idx] = old - h
        down = f()
        p[idx] = old
        g[idx] = (up - down) / (2 * h)
    return g


def rel_err(a, b):
    return np.abs(a - b).max() / max(np.abs(a).max(), np.abs(b).max(), 1e-12)


# -- forward ------------------------------------------------------------------

def test_identity_matmul():
    t = Tape()
    x = t.input(2)
    w = t.param(np.array([[1.0, 2.0], [3.0, 4.0]]))
    t.matmul(x, w)
    assert np.array_equal(forward(t, [np.eye(2)]), [[1, 2], [3, 4]])


def test_zero_weight_affine():
    t = Tape()
    x = t.input(3)
    w = t.param(np.zeros((3, 1)))
    b = t.param(np.array([[0.5]]))
    t.add_bias(t.matmul(x, w), b)
    out = forward(t, [np.random.default_rng(0).normal(size=(7, 3))])
    assert np.array_equal(out, np.full((7, 1), 0.5))


def test_three_node_chain_at_zero():
    b = np.array([[0.3, -1.2, 2.0]])
    t = Tape()
    x = t.input(1)
    w = t.param(np.array([[0.7, 0.1, -4.0]]))
    t.sin(t.add_bias(t.matmul(x, w), t.param(b)))
    assert np.allclose(forward(t, [np.zeros((1, 1))]), np.sin(b), atol=0, rtol=1e-15)


def test_dimension_error_names_node():
    t = Tape()
    x = t.input(2, name="coords")
    w = t.param(np.zeros((3, 4)), name="W1")
    t.matmul(x, w, name="layer1")
    with pytest.raises(DimensionError, match="layer1"):
        forward(t, [np.zeros((5, 2))])
    with pytest.raises(DimensionError, match="coords"):
        forward(t, [np.zeros((5, 3))])


def test_inputs_by_name_and_missing():
    t = Tape()
    a = t.input(1, name="a")
    b = t.input(1, name="b")
    t.add(a, b)
    assert forward(t, {"a": [[1.0]], "b": [[2.0]]})[0, 0] == 3.0
    with pytest.raises(ContractError):
        forward(t, {"a": [[1.0]]})


def test_unrecorded_forward_leaves_tape_untouched():
    t = Tape()
    x = t.input(1)
    t.square(x)
    assert t.record is None
    forward(t, [[[2.0]]], record=False)
    assert t.record is None


def test_determinism_bitwise():
    rng = np.random.default_rng(3)
    x = rng.uniform(-2, 2, (50, 2))

    def run():
        r = np.random.default_rng(11)
        t = Tape()
        xi = t.input(2)
        h = t.activation(t.matmul(xi, t.param(r.normal(size=(2, 8)))), ActivationSpec())
        t.matmul(h, t.param(r.normal(size=(8, 1))))
        return forward(t, [x])

    assert run().tobytes() == run().tobytes()


# -- backward -----------------------------------------------------------------

def test_square_gradient():
    t = Tape()
    w = t.param(np.array([[3.0]]))
    loss = t.sum(t.square(w))
    t.forward([])
    assert backward(t, loss)[w][0, 0] == 6.0


def test_mse_at_minimum_has_zero_gradient():
    t = Tape()
    x = t.input(2)
    w = t.param(np.array([[1.0], [2.0]]))
    pred = t.matmul(x, w)
    y = t.input(1)
    loss = t.mse(pred, y)
    xs = np.random.default_rng(0).normal(size=(6, 2))
    t.forward([xs, xs @ np.array([[1.0], [2.0]])])
    assert np.all(backward(t, loss)[w] == 0)


def test_non_scalar_loss_rejected():
    t = Tape()
    x = t.input(2)
    t.forward([np.ones((3, 2))])
    with pytest.raises(ContractError):
        backward(t, x)


def test_backward_before_forward():
    t = Tape()
    w = t.param(np.ones((1, 1)))
    loss = t.sum(w)
    with pytest.raises(ContractError):
        backward(t, loss)


def test_unused_param_gets_zero():
    t = Tape()
    w = t.param(np.ones((2, 2)))
    unused = t.param(np.ones((3, 1)))
    loss = t.sum(w)
    t.forward([])
    g = backward(t, loss)
    assert np.all(g[unused] == 0) and g[unused].shape == (3, 1)


def _two_layer(rng, spec, theta=None, loss="mse"):
    t = Tape()
    x = t.input(2)
    y = t.input(1)
    W1 = t.param(rng.uniform(-2, 2, (2, 5)))
    b1 = t.param(rng.uniform(-2, 2, (1, 5)))
    th = t.param(np.array([theta])) if theta is not None else None
    h = t.activation(t.add_bias(t.matmul(x, W1), b1), spec, th)
    W2 = t.param(rng.uniform(-2, 2, (5, 1)))
    out = t.matmul(h, W2)
    loss_id = t.mse(out, y) if loss == "mse" else t.bce_logits(out, y)
    return t, loss_id


@pytest.mark.parametrize("kind", [k for k in Kind])
def test_two_layer_gradcheck(kind):
    rng = np.random.default_rng(list(Kind).index(kind))
    spec = default_spec(kind, omega0=1.5) if kind in (Kind.SINE, Kind.FINER, Kind.GAUSSIAN) else default_spec(kind)
    theta = (1.3, 1.7, 0.6) if spec.band_limited else None
    t, loss = _two_layer(rng, spec, theta)
    xs = rng.uniform(-2, 2, (9, 2))
    ys = rng.uniform(-2, 2, (9, 1))
    t.forward([xs, ys])
    grads = backward(t, loss)
    for pid in t.params:
        p = t.param_value(pid)
        num = numeric_grad(lambda: float(t.forward([xs, ys], record=False)[0, 0]), p)
        assert rel_err(grads[pid], num) < 1e-5, (kind, t.nodes[pid].name)


def test_bce_gradcheck():
    rng = np.random.default_rng(5)
    t, loss = _two_layer(rng, ActivationSpec(), (1.0, 2.0, 1.0), loss="bce")
    xs = rng.uniform(-2, 2, (9, 2))
    ys = rng.integers(0, 2, (9, 1)).astype(float)
    t.forward([xs, ys])
    grads = backward(t, loss)
    for pid in t.params:
        num = numeric_grad(lambda: float(t.forward([xs, ys], record=False)[0, 0]), t.param_value(pid))
        assert rel_err(grads[pid], num) < 1e-5


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_elementwise_ops_gradcheck(seed):
    rng = np.random.default_rng(seed)
    t = Tape()
    a = t.param(rng.uniform(-2, 2, (3, 4)))
    b = t.param(rng.uniform(-2, 2, (3, 4)))
    bias = t.param(rng.uniform(-2, 2, (1, 4)))
    h = t.mul(t.sin(a), t.add(b, t.scale(a, 0.7)))
    h = t.square(t.add_bias(h, bias))
    loss = t.sum(h)
    t.forward([])
    grads = backward(t, loss)
    for pid in (a, b, bias):
        num = numeric_grad(lambda: float(t.forward([], record=False)[0, 0]), t.param_value(pid))
        assert rel_err(grads[pid], num) < 1e-5


def test_linearity_of_adjoints():
    rng = np.random.default_rng(1)
    W = rng.normal(size=(3, 2))

    def grads(which):
        t = Tape()
        x = t.input(3)
        w = t.param(W)
        h = t.activation(t.matmul(x, w), ActivationSpec())
        l1 = t.sum(t.square(h))
        l2 = t.sum(t.sin(h))
        loss = {"1": l1, "2": l2, "both": t.add(l1, l2)}[which]
        t.forward([np.ones((4, 3))])
        return backward(t, loss)[w]

    assert np.allclose(grads("both"), grads("1") + grads("2"), rtol=1e-13, atol=1e-14)


# -- Adam ---------------------------------------------------------------------

def test_adam_first_step():
    theta = np.zeros((1, 1))
    opt = Adam([theta], lr=5e-4)
    opt.step([np.full((1, 1), 2.0)])
    assert theta[0, 0] == pytest.approx(-5e-4, rel=1e-6)
    assert opt.state.step_count == 1


def test_adam_zero_gradient_keeps_params():
    theta = np.array([[0.3, -1.0]])
    opt = Adam([theta])
    for _ in range(5):
        opt.step([np.zeros((1, 2))])
    assert np.array_equal(theta, [[0.3, -1.0]])
    assert opt.state.step_count == 5


def test_adam_equal_gradients_equal_updates():
    a = np.zeros((2, 2))
    b = np.zeros((2, 2))
    opt = Adam([a, b])
    g = np.random.default_rng(0).normal(size=(2, 2))
    for _ in range(3):
        opt.step([g, g.copy()])
    assert np.array_equal(a, b)


def test_adam_step_function_and_divergence():
    p = np.ones((1, 2))
    state = AdamState([np.zeros((1, 2))], [np.zeros((1, 2))])
    adam_step(state, [p], [np.ones((1, 2))])
    assert state.step_count == 1
    before = p.copy()
    with pytest.raises(TrainingDivergence) as info:
        adam_step(state, [p], [np.array([[np.nan, 0.0]])])
    assert info.value.iteration == 2
    assert np.array_equal(p, before) and state.step_count == 1


def test_adam_shape_mismatch():
    opt = Adam([np.zeros((2, 2))])
    with pytest.raises(DimensionError):
        opt.step([np.zeros((2, 3))])
