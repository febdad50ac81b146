import math

import numpy as np
import pytest

from roiproj import nn
from roiproj import tensor as T
from roiproj.errors import ConfigurationError, InputError, StateError, TrainingError
from roiproj.gradcheck import check_tensors

from oracles import conv2d_oracle


def test_identity_conv_passes_input_through(rng):
    x = T.Tensor(rng.standard_normal((1, 3, 5, 5)).astype(np.float32))
    w = np.zeros((3, 3, 1, 1), dtype=np.float32)
    for c in range(3):
        w[c, c, 0, 0] = 1.0
    out = T.conv2d(x, T.Tensor(w), T.Tensor(np.zeros(3, dtype=np.float32)), 1, 0)
    np.testing.assert_array_equal(out.data, x.data)


def test_max_pool_window():
    x = T.Tensor(np.array([[[[1.0, 2.0], [3.0, 4.0]]]]))
    out = T.max_pool2d(x, (2, 2), 2)
    assert out.data.reshape(-1).tolist() == [4.0]


def test_conv_matches_nested_loop_oracle(rng):
    x = rng.standard_normal((2, 3, 8, 8))
    w = rng.standard_normal((4, 3, 3, 3))
    b = rng.standard_normal(4)
    out = T.conv2d(
        T.Tensor(x, dtype=np.float64), T.Tensor(w, dtype=np.float64),
        T.Tensor(b, dtype=np.float64), 1, 1,
    )
    assert out.shape == (2, 4, 8, 8)
    np.testing.assert_allclose(out.data, conv2d_oracle(x, w, b, 1, 1), rtol=1e-12)


def test_softmax_ce_uniform_and_saturated():
    loss = T.softmax_cross_entropy(T.Tensor([0.0, 0.0]), 0)
    assert loss.item() == pytest.approx(math.log(2), rel=1e-6)
    loss = T.softmax_cross_entropy(T.Tensor([1000.0, 0.0]), 0)
    assert np.isfinite(loss.item())
    assert loss.item() == pytest.approx(0.0, abs=1e-6)


def test_softmax_ce_gradient_is_softmax_minus_onehot():
    logits = T.Tensor(np.array([1.0, 2.0, 0.5]), requires_grad=True)
    loss = T.softmax_cross_entropy(logits, 1)
    loss.backward()
    p = T.softmax(logits.data.astype(np.float64))
    p[1] -= 1.0
    np.testing.assert_allclose(logits.grad, p, rtol=1e-5)


def test_softmax_ce_finite_difference(rng):
    logits = T.Tensor(rng.standard_normal(6), requires_grad=True, dtype=np.float64)
    labels = 2
    report = check_tensors(
        lambda: T.softmax_cross_entropy(logits, labels), {"logits": logits}, h=1e-3
    )
    assert report["logits"] < 1e-4


def test_softmax_ce_label_out_of_range():
    with pytest.raises(InputError):
        T.softmax_cross_entropy(T.Tensor([0.0, 0.0]), 2)


def test_sigmoid_ce_values_and_errors():
    loss = T.sigmoid_cross_entropy(T.Tensor([0.0, 0.0]), np.array([1.0, 0.0]))
    assert loss.item() == pytest.approx(math.log(2), rel=1e-6)
    loss = T.sigmoid_cross_entropy(T.Tensor([20.0, -20.0]), np.array([1.0, 0.0]))
    assert loss.item() == pytest.approx(0.0, abs=1e-6)
    with pytest.raises(InputError):
        T.sigmoid_cross_entropy(T.Tensor([0.0]), np.array([0.5]))


def test_sigmoid_ce_finite_difference(rng):
    logits = T.Tensor(rng.standard_normal((2, 3)), requires_grad=True, dtype=np.float64)
    targets = np.array([[1.0, 0.0, 1.0], [0.0, 0.0, 1.0]])
    report = check_tensors(
        lambda: T.sigmoid_cross_entropy(logits, targets), {"logits": logits}, h=1e-3
    )
    assert report["logits"] < 1e-4


def test_backward_sum_gives_ones(rng):
    x = T.Tensor(rng.standard_normal((3, 4)), requires_grad=True)
    T.tsum(x).backward()
    np.testing.assert_array_equal(x.grad, np.ones((3, 4), dtype=np.float32))


def test_backward_unused_parameter_keeps_zero_grad(rng):
    x = T.Tensor(rng.standard_normal(4), requires_grad=True)
    unused = T.Tensor(rng.standard_normal(4), requires_grad=True)
    T.tsum(T.relu(x)).backward()
    np.testing.assert_array_equal(unused.grad, np.zeros(4, dtype=np.float32))


def test_backward_without_forward_raises_state_error():
    plain = T.Tensor([1.0])
    with pytest.raises(StateError):
        plain.backward()
    with T.no_grad():
        silent = T.relu(T.Tensor([1.0], requires_grad=True))
    with pytest.raises(StateError):
        silent.backward()


def test_backward_needs_scalar(rng):
    x = T.Tensor(rng.standard_normal(3), requires_grad=True)
    with pytest.raises(InputError):
        T.relu(x).backward()


def test_max_pool_tie_routes_to_first_in_scan_order():
    x = T.Tensor(np.ones((1, 1, 2, 2), dtype=np.float32), requires_grad=True)
    out = T.max_pool2d(x, (2, 2), 2)
    T.tsum(out).backward()
    np.testing.assert_array_equal(x.grad.reshape(-1), [1.0, 0.0, 0.0, 0.0])


def test_sgd_step_and_momentum():
    p = T.parameter(np.array([1.0], dtype=np.float32))
    opt = nn.SGD({"p": p}, lr=0.1, momentum=0.0)
    p.grad[:] = 1.0
    opt.step()
    assert p.data[0] == pytest.approx(0.9)
    p.grad[:] = 0.0
    opt.step()
    assert p.data[0] == pytest.approx(0.9)  # zero gradient leaves parameters alone


def test_sgd_quadratic_bowl_contracts():
    p = T.parameter(np.array([1.0], dtype=np.float32))
    opt = nn.SGD({"p": p}, lr=0.1, momentum=0.0)
    for _ in range(100):
        p.zero_grad()
        p.grad[:] = 2.0 * p.data  # d/dp of p^2
        opt.step()
    assert abs(float(p.data[0])) < 1e-8  # (1 - 2*lr)^100


def test_sgd_rejects_non_finite_gradient():
    p = T.parameter(np.array([1.0], dtype=np.float32))
    opt = nn.SGD({"p": p}, lr=0.1)
    p.grad[:] = np.nan
    with pytest.raises(TrainingError, match="iteration 7"):
        opt.step(iteration=7)


def test_layer_shape_algebra_raises_configuration_error():
    spec = nn.LayerSpec("conv", name="c9", kernel=5, stride=2, in_channels=1, out_channels=1)
    assert nn.output_hw(spec, (13, 13)) == (5, 5)
    with pytest.raises(ConfigurationError, match="c9"):
        nn.output_hw(spec, (3, 3))


def test_forward_layer_names_layer_on_channel_mismatch(rng):
    spec = nn.LayerSpec("conv", name="shared.c2", kernel=3, padding=1,
                        in_channels=8, out_channels=4)
    params = nn.init_layer_params(spec, np.random.default_rng(0))
    x = T.Tensor(rng.standard_normal((1, 3, 6, 6)).astype(np.float32))
    with pytest.raises(ConfigurationError, match="shared.c2"):
        nn.forward_layer(x, spec, params)


def test_avg_pool_global():
    x = T.Tensor(np.arange(16, dtype=np.float32).reshape(1, 1, 4, 4), requires_grad=True)
    out = T.avg_pool2d(x, (4, 4), 1)
    assert out.data.reshape(-1)[0] == pytest.approx(7.5)
    T.tsum(out).backward()
    np.testing.assert_allclose(x.grad, np.full((1, 1, 4, 4), 1 / 16, dtype=np.float32))
