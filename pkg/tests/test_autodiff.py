import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

import oracles
from poisonprobe.architecture import ArchitectureSpec, Conv, Dense, Dropout, MaxPool, SoftmaxHead
from poisonprobe.autodiff import (NonFiniteError, ShapeError, axpy_step, escape_direction, forward,
                                  input_loss_and_grad, loss_gradients, run_forward, softmax_xent)
from poisonprobe.models import ModelHandle, build_model


def _dense(weights, biases, input_shape=(1, 2, 1)):
    classes = len(biases)
    spec = ArchitectureSpec(input_shape, (SoftmaxHead(classes),))
    flat = np.concatenate([np.asarray(weights, dtype=float).ravel(), np.asarray(biases, dtype=float)])
    return ModelHandle(spec, flat)


def test_zero_parameters_give_zero_logits():
    spec = ArchitectureSpec((3, 3, 1), (Dense(4), SoftmaxHead(3)))
    model = ModelHandle(spec, np.zeros(spec.param_count))
    x = np.random.default_rng(0).random((3, 3, 1))
    assert np.array_equal(forward(model, x), np.zeros(3))


def test_identity_dense():
    model = _dense(np.eye(2), [0.0, 0.0])
    np.testing.assert_array_equal(forward(model, np.array([[[1.0], [2.0]]])), [1.0, 2.0])


def test_forward_matches_interpreter(tiny_spec):
    rng = np.random.default_rng(5)
    for seed in range(5):
        model = build_model(tiny_spec, seed)
        x = rng.random(tiny_spec.input_shape)
        np.testing.assert_allclose(forward(model, x), oracles.interpret(tiny_spec, model.params, x),
                                   rtol=1e-12, atol=1e-12)


def test_forward_batch_equals_rows(tiny_spec):
    model = build_model(tiny_spec, 2)
    xs = np.random.default_rng(1).random((4,) + tiny_spec.input_shape)
    batch = forward(model, xs)
    for i in range(4):
        np.testing.assert_allclose(batch[i], forward(model, xs[i]), rtol=1e-13)


def test_forward_is_pure_and_bit_stable(tiny_spec):
    model = build_model(tiny_spec, 0)
    x = np.random.default_rng(2).random(tiny_spec.input_shape)
    before = x.copy()
    a, b = forward(model, x), forward(model, x)
    assert a.tobytes() == b.tobytes()
    assert np.array_equal(x, before)


def test_shape_mismatch_rejected(tiny_spec):
    model = build_model(tiny_spec, 0)
    with pytest.raises(ShapeError):
        forward(model, np.zeros((5, 6, 2)))


def test_non_finite_input_rejected(tiny_spec):
    model = build_model(tiny_spec, 0)
    x = np.zeros(tiny_spec.input_shape)
    x[0, 0, 0] = np.nan
    with pytest.raises(NonFiniteError):
        forward(model, x)


def test_saturated_label_has_flat_input_gradient():
    model = _dense([[50.0, -50.0], [50.0, -50.0]], [0.0, 0.0])
    g = loss_gradients(model, np.array([[[1.0], [1.0]]]), 0, which="input")
    assert np.abs(g.wrt_input).max() <= 1e-6


def test_label_out_of_range(tiny_spec):
    model = build_model(tiny_spec, 0)
    with pytest.raises(ValueError):
        loss_gradients(model, np.zeros(tiny_spec.input_shape), 4)


def test_which_selects_outputs(tiny_spec):
    model = build_model(tiny_spec, 0)
    x = np.full(tiny_spec.input_shape, 0.5)
    assert loss_gradients(model, x, 1, which="input").wrt_params is None
    assert loss_gradients(model, x, 1, which="params").wrt_input is None
    both = loss_gradients(model, x, 1)
    assert both.wrt_input.shape == x.shape
    assert both.wrt_params.shape == model.params.shape


def test_gradient_of_summed_losses_is_sum(tiny_spec):
    models = [build_model(tiny_spec, s) for s in range(3)]
    x = np.random.default_rng(3).random(tiny_spec.input_shape)
    total = sum(loss_gradients(m, x, 2, which="input").wrt_input for m in models)
    # the summed objective, differentiated through one stacked batch per model
    stacked = sum(input_loss_and_grad(m, x[None], 2)[1][0] for m in models)
    np.testing.assert_allclose(total, stacked, rtol=1e-12, atol=1e-15)


def test_batched_gradient_is_gradient_of_sum(tiny_spec):
    model = build_model(tiny_spec, 4)
    xs = np.random.default_rng(4).random((3,) + tiny_spec.input_shape)
    g = loss_gradients(model, xs, [0, 1, 2], which="params")
    parts = sum(loss_gradients(model, xs[i], i, which="params").wrt_params for i in range(3))
    np.testing.assert_allclose(g.wrt_params, parts, rtol=1e-10, atol=1e-14)


ALL_LAYERS = [
    ArchitectureSpec((5, 5, 1), (Dense(4), SoftmaxHead(3))),
    ArchitectureSpec((6, 6, 2), (Conv(3, 3, 3), SoftmaxHead(3))),
    ArchitectureSpec((7, 7, 1), (Conv(2, 2, 2), MaxPool(2, 2), Dense(4), SoftmaxHead(3))),
    ArchitectureSpec((6, 6, 1), (Conv(3, 3, 2), Dropout(0.5), Dense(3), Dense(3), SoftmaxHead(4))),
]


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2**31 - 1), which=st.sampled_from(["input", "params"]),
       arch=st.integers(0, len(ALL_LAYERS) - 1))
def test_gradient_matches_finite_difference(seed, which, arch):
    spec = ALL_LAYERS[arch]
    rng = np.random.default_rng(seed)
    model = build_model(spec, seed)
    x = rng.random(spec.input_shape)
    label = int(rng.integers(spec.classes))
    g = loss_gradients(model, x, label, which=which)
    analytic = g.wrt_input.ravel() if which == "input" else g.wrt_params
    for k, numeric in oracles.smooth_coordinates(spec, model.params, x, label, which, 8, rng):
        assert oracles.fd_agrees(analytic[k], numeric), (k, analytic[k], numeric)


def test_pool_gradient_goes_to_first_maximum():
    spec = ArchitectureSpec((2, 2, 1), (MaxPool(2, 2), SoftmaxHead(2)))
    model = ModelHandle(spec, np.array([1.0, -1.0, 0.0, 0.0]))
    x = np.full((2, 2, 1), 0.7)
    g = loss_gradients(model, x, 0, which="input").wrt_input
    assert g[0, 0, 0] != 0 and np.count_nonzero(g) == 1


def test_dropout_only_with_rng():
    spec = ArchitectureSpec((3, 3, 1), (Dense(8), Dropout(0.5), SoftmaxHead(2)))
    model = build_model(spec, 0)
    x = np.full((1, 3, 3, 1), 0.5)
    plain, _ = run_forward(spec, model.weights, x)
    again, _ = run_forward(spec, model.weights, x)
    noisy, _ = run_forward(spec, model.weights, x, rng=np.random.default_rng(0))
    assert np.array_equal(plain, again)
    assert not np.array_equal(plain, noisy)


def test_softmax_xent_survives_huge_logits():
    loss, grad = softmax_xent(np.array([[1000.0, 0.0, -1000.0]]), np.array([2]))
    assert np.isfinite(loss).all() and abs(loss[0] - 2000.0) < 1e-9
    assert np.isfinite(grad).all()


def test_escape_direction_is_rescaled_gradient():
    logits = np.array([[2.0, 0.5, -1.0], [0.0, 3.0, 1.0]])
    labels = np.array([0, 2])
    _, g = softmax_xent(logits, labels)
    e = escape_direction(logits, labels)
    p = np.exp(logits) / np.exp(logits).sum(axis=1, keepdims=True)
    scale = 1.0 - p[np.arange(2), labels]
    np.testing.assert_allclose(e * scale[:, None], g, rtol=1e-12, atol=1e-15)


def test_escape_direction_keeps_size_when_saturated():
    e = escape_direction(np.array([[800.0, 0.0, 0.0]]), np.array([0]))
    assert e[0, 0] == -1.0
    np.testing.assert_allclose(e[0, 1:], [0.5, 0.5])


def test_axpy_examples():
    np.testing.assert_array_equal(axpy_step([1.0, 1.0], [1.0, -1.0], 0.5), [0.5, 1.5])
    x = np.array([0.3, -2.0])
    assert np.array_equal(axpy_step(x, [5.0, 7.0], 0.0), x)
    with pytest.raises(ShapeError):
        axpy_step([1.0], [1.0, 2.0], 0.1)


@given(st.lists(st.floats(-10, 10), min_size=1, max_size=8), st.floats(-3, 3))
def test_axpy_inverse_step(values, rate):
    x = np.array(values)
    g = np.arange(len(values), dtype=float) - 2.5
    back = axpy_step(axpy_step(x, g, rate), g, -rate)
    np.testing.assert_allclose(back, x, atol=1e-12)


def test_axpy_does_not_mutate():
    x = np.array([1.0, 2.0])
    g = np.array([1.0, 1.0])
    out = axpy_step(x, g, 0.1)
    assert out is not x and np.array_equal(x, [1.0, 2.0])
