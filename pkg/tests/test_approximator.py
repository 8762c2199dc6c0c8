import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from routegame.approximator import (MLPParams, QEncoder, forward, forward_batch,
                                    gradient_check, init_params, sgd_step)
from routegame.game import Observation


def zero_params(sizes):
    return MLPParams([np.zeros((o, i)) for i, o in zip(sizes, sizes[1:])],
                     [np.zeros(o) for o in sizes[1:]], tuple(sizes))


def test_zero_network_outputs_zero():
    params = zero_params((4, 8, 1))
    rng = np.random.default_rng(0)
    for _ in range(5):
        assert forward(params, rng.normal(size=4)) == 0.0


def test_forward_deterministic():
    rng = np.random.default_rng(1)
    params = init_params((6, 16, 16, 1), rng)
    x = rng.normal(size=6)
    assert forward(params, x) == forward(params, x)


def test_single_linear_layer_is_a_dot_product():
    w = np.array([[2.0, -1.0, 0.5]])
    b = np.array([0.25])
    params = MLPParams([w], [b], (3, 1))
    x = np.array([1.0, 2.0, 4.0])
    assert forward(params, x) == pytest.approx(2.0 - 2.0 + 2.0 + 0.25)


def test_sgd_zero_gradient_leaves_params():
    rng = np.random.default_rng(2)
    params = init_params((3, 8, 1), rng)
    x = rng.normal(size=(4, 3))
    targets = forward_batch(params, x)
    before = params.flat().copy()
    loss = sgd_step(params, x, targets, 0.1)
    assert loss == 0.0
    assert np.array_equal(params.flat(), before)


def test_sgd_hand_gradient_scalar_linear():
    # y = w*x, w = 0; one sample (x=1, t=1); d/dw (t - wx)^2 = -2x(t - wx)
    params = MLPParams([np.zeros((1, 1))], [np.zeros(1)], (1, 1))
    loss = sgd_step(params, np.array([[1.0]]), np.array([1.0]), 0.5)
    assert loss == 1.0
    assert params.weights[0][0, 0] == pytest.approx(1.0)
    assert params.biases[0][0] == pytest.approx(1.0)  # bias gets the same grad


def test_sgd_loss_nonincreasing_on_fixed_batch():
    rng = np.random.default_rng(3)
    params = init_params((5, 32, 32, 1), rng)
    x = rng.normal(size=(16, 5))
    targets = rng.normal(size=16) * 10
    losses = [sgd_step(params, x, targets, 1e-2) for _ in range(60)]
    assert all(b <= a + 1e-9 for a, b in zip(losses, losses[1:]))


def test_sgd_rejects_empty_batch_and_bad_lr():
    params = zero_params((2, 1))
    with pytest.raises(ValueError):
        sgd_step(params, np.empty((0, 2)), np.empty(0), 0.1)
    with pytest.raises(ValueError):
        sgd_step(params, np.zeros((1, 2)), np.zeros(1), 0.0)


def test_gradient_check_correct_backprop():
    rng = np.random.default_rng(4)
    params = init_params((6, 12, 12, 1), rng)
    x = rng.normal(size=6)
    assert gradient_check(params, x, target=3.0) < 1e-4


def test_gradient_check_detects_sign_flip():
    rng = np.random.default_rng(5)
    params = init_params((3, 4, 1), rng)
    x = rng.normal(size=3)

    real_backward = gradient_check.__globals__["_backward"]

    def flipped(params_, x_, d):
        gw, gb = real_backward(params_, x_, d)
        gw[0] = gw[0].copy()
        gw[0][0, 0] = -gw[0][0, 0]
        return gw, gb

    gradient_check.__globals__["_backward"] = flipped
    try:
        err = gradient_check(params, x, target=1.0)
    finally:
        gradient_check.__globals__["_backward"] = real_backward
    assert err == pytest.approx(2.0, rel=1e-3)


def test_gradient_check_all_zero_case():
    params = zero_params((3, 4, 1))
    assert gradient_check(params, np.zeros(3), target=0.0) == 0.0


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2 ** 31 - 1),
       st.sampled_from([(4, 8, 1), (3, 16, 8, 1), (5, 64, 64, 1)]))
def test_gradient_check_property(seed, sizes):
    rng = np.random.default_rng(seed)
    params = init_params(sizes, rng)
    x = rng.normal(size=sizes[0])
    target = float(rng.normal() * 10)
    assert gradient_check(params, x, target) < 1e-4


def test_encoder_layout(braess_two):
    net, demand, _ = braess_two
    enc = QEncoder(net, horizon=200, flow_scale=2.0)
    assert enc.width == 5 + 1 + 2 + 1
    x = enc.encode(Observation(0, 100), action=2, mean_action=1.0)
    node_block = x[:5]
    assert node_block.sum() == 1.0
    assert x[5] == pytest.approx(0.5)          # t / T
    action_block = x[6:8]
    assert action_block.tolist() == [0.0, 1.0]  # second action slot at node 0
    assert x[-1] == pytest.approx(0.5)          # abar / scale
    assert np.isfinite(x).all()
