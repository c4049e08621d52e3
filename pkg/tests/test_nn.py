import math

import numpy as np
import pytest

from cpv import checks
from cpv.nn import (
    Adam,
    conv2d,
    grad_check,
    linear,
    mean,
    parameter,
    relu,
    softmax_cross_entropy,
)


# --- forward correctness ----------------------------------------------------


def test_conv2d_single_tap_identity():
    # 1x1 spatial input: only the kernel center overlaps the (padded) pixel
    x = parameter(np.array([[[[3.5]]]]))
    w = parameter(np.zeros((1, 1, 3, 3)))
    w.data[0, 0, 1, 1] = 1.0
    b = parameter(np.zeros(1))
    out = conv2d(x, w, b)
    assert out.data.shape == (1, 1, 1, 1)
    assert out.data[0, 0, 0, 0] == 3.5


def test_conv2d_zero_weights_and_zero_upstream():
    rng = np.random.default_rng(0)
    x = parameter(rng.standard_normal((2, 3, 9, 8)))
    w = parameter(np.zeros((4, 3, 3, 3)))
    b = parameter(np.zeros(4))
    out = conv2d(x, w, b)
    assert np.all(out.data == 0)
    # zero upstream gradient contributes nothing to any input gradient
    loss = mean(checks._mul_const(out, np.zeros_like(out.data)))
    loss.backward()
    assert np.all(w.grad == 0) and np.all(b.grad == 0) and np.all(x.grad == 0)


def test_conv2d_output_spatial_size():
    # floor((n + 2*1 - 3)/2) + 1 per dimension
    x = parameter(np.zeros((1, 3, 33, 30)))
    w = parameter(np.zeros((16, 3, 3, 3)))
    b = parameter(np.zeros(16))
    assert conv2d(x, w, b).data.shape == (1, 16, 17, 15)
    x2 = parameter(np.zeros((1, 16, 17, 15)))
    w2 = parameter(np.zeros((32, 16, 3, 3)))
    assert conv2d(x2, w2, parameter(np.zeros(32))).data.shape == (1, 32, 9, 8)


def test_conv2d_channel_mismatch_rejected():
    with pytest.raises(ValueError):
        conv2d(parameter(np.zeros((1, 4, 8, 8))), parameter(np.zeros((2, 3, 3, 3))),
               parameter(np.zeros(2)))


def test_linear_identity_and_bias():
    x = parameter(np.arange(6, dtype=float).reshape(2, 3))
    w = parameter(np.eye(3))
    b = parameter(np.zeros(3))
    assert np.array_equal(linear(x, w, b).data, x.data)
    zero_in = parameter(np.zeros((4, 3)))
    bias = parameter(np.array([1.0, -2.0, 3.0]))
    out = linear(zero_in, w, bias)
    assert np.array_equal(out.data, np.tile(bias.data, (4, 1)))


def test_softmax_ce_uniform_logits():
    logits = parameter(np.zeros((7, 6)))
    labels = np.arange(7) % 6
    loss = softmax_cross_entropy(logits, labels)
    assert loss.data == pytest.approx(math.log(6), abs=1e-12)


def test_softmax_ce_confident_logit():
    logits = parameter(np.zeros((1, 6)))
    logits.data[0, 2] = 50.0  # dominant true-class logit drives the loss to 0
    loss = softmax_cross_entropy(logits, [2])
    assert float(loss.data) < 1e-20


def test_softmax_ce_label_out_of_range():
    with pytest.raises(ValueError):
        softmax_cross_entropy(parameter(np.zeros((2, 6))), [0, 6])


# --- finite-difference gates --------------------------------------------------


def test_conv2d_gradients():
    assert checks.check_conv2d(n_coords=60) <= 1e-4


def test_linear_gradients():
    assert checks.check_linear(n_coords=40) <= 1e-4


def test_relu_mlp_gradients():
    assert checks.check_relu_mlp(n_coords=40) <= 1e-4


def test_softmax_ce_gradients():
    assert checks.check_softmax_ce(n_coords=24) <= 1e-4


def test_grad_check_linear_function_machine_precision():
    c = np.array([2.0, -3.0, 0.5])
    p = parameter(np.array([1.0, 4.0, -2.0]))

    def f():
        return mean(checks._mul_const(p, c * p.data.size))

    assert grad_check(f, [p], n_coords=3) < 1e-9


def test_grad_check_skips_relu_kink():
    # pre-activation within eps of 0: the only coordinate is excluded, so the
    # check reports no error rather than a spurious failure
    p = parameter(np.array([[1e-7]]))

    def f():
        return mean(relu(p))

    assert grad_check(f, [p], eps=1e-5, n_coords=1) == 0.0


# --- adam ---------------------------------------------------------------------


def test_adam_zero_gradient_keeps_params():
    p = parameter(np.array([1.0, -2.0], dtype=np.float32))
    opt = Adam([p], lr=0.1)
    p.grad = np.zeros_like(p.data)
    before = p.data.copy()
    opt.step()
    assert np.array_equal(p.data, before)


def test_adam_two_hand_computed_steps():
    # alpha=0.001, beta1=0.9, beta2=0.999, eps=1e-8, constant gradient 1
    p = parameter(np.array([0.0]))
    opt = Adam([p], lr=0.001, beta1=0.9, beta2=0.999, eps=1e-8)
    p.grad = np.array([1.0])
    opt.step()
    m1, v1 = 0.1, 0.001
    x1 = -0.001 * (m1 / 0.1) / (math.sqrt(v1 / 0.001) + 1e-8)
    assert p.data[0] == pytest.approx(x1, rel=1e-12)
    p.grad = np.array([1.0])
    opt.step()
    m2 = 0.9 * m1 + 0.1
    v2 = 0.999 * v1 + 0.001
    x2 = x1 - 0.001 * (m2 / (1 - 0.9**2)) / (math.sqrt(v2 / (1 - 0.999**2)) + 1e-8)
    assert p.data[0] == pytest.approx(x2, rel=1e-12)


def test_adam_step_magnitude_bounded():
    p = parameter(np.array([0.0]))
    opt = Adam([p], lr=0.01)
    prev = p.data[0]
    for _ in range(50):
        p.grad = np.array([3.7])  # constant gradient: |step| approaches lr
        opt.step()
        assert abs(p.data[0] - prev) <= 0.01 * (1 + 1e-6)
        prev = p.data[0]


# --- precision agreement -------------------------------------------------------


def test_float32_float64_forward_agreement():
    from cpv.model import CPVModel, obs_to_input

    rng = np.random.default_rng(4)
    model32 = CPVModel("cpv", dim=32, seed=1, dtype=np.float32)
    model64 = model32.astype(np.float64)
    obs = rng.integers(0, 256, size=(3, 33, 30, 3)).astype(np.uint8)
    v32 = model32.embed(obs_to_input(obs, np.float32), obs_to_input(obs, np.float32)).data
    v64 = model64.embed(obs_to_input(obs, np.float64), obs_to_input(obs, np.float64)).data
    rel = np.abs(v32 - v64) / np.maximum(np.abs(v64), 1e-6)
    assert rel.max() < 1e-4
