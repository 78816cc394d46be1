import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dynrf.errors import DomainError
from dynrf.losses import (
    BCE_EPS, BCE_WEIGHT, HUBER_DELTA, bce_grad, bce_mask_loss, huber_grad, huber_loss, total_loss,
    total_loss_grads,
)
from dynrf.optim import Adam, LR_END, LR_START, learning_rate


def test_defaults():
    assert HUBER_DELTA == 0.01 and BCE_WEIGHT == 1e-3 and BCE_EPS == 1e-6
    assert LR_START == 1e-2 and LR_END == 5e-3


def test_huber_branches():
    assert huber_loss([0.3, 0.2, 0.1], [0.3, 0.2, 0.1]) == 0.0
    assert abs(huber_loss([0.51, 0.5, 0.5], [0.5, 0.5, 0.5]) - 0.5e-4 / 3) < 1e-12
    assert abs(huber_loss([0.52, 0.5, 0.5], [0.5, 0.5, 0.5]) - 5e-5) < 1e-12
    assert abs(huber_loss([0.0, 0.0, 0.0], [0.0, 0.0, 0.02]) - 5e-5) < 1e-12


def test_huber_rejects_bad_delta():
    with pytest.raises(DomainError):
        huber_loss([0, 0, 0], [1, 1, 1], 0.0)


def test_bce_values():
    assert bce_mask_loss(1 - 1e-6, 1) == pytest.approx(0.0, abs=2e-6)
    assert abs(bce_mask_loss(0.5, 1) - math.log(2)) < 1e-12
    assert abs(bce_mask_loss(0.5, 0) - math.log(2)) < 1e-12
    # clamping keeps the loss finite
    assert math.isfinite(bce_mask_loss(0.0, 1)) and math.isfinite(bce_mask_loss(1.0, 0))
    assert abs(bce_mask_loss(0.0, 1) + math.log(1e-6)) < 1e-12


def test_total_loss_scaling():
    color = np.full((5, 3), 0.4)
    loss, pho, bce = total_loss(color, color, np.full(5, 0.5), np.ones(5))
    assert pho == 0.0
    assert abs(loss - 1e-3 * math.log(2)) < 1e-12
    assert total_loss(color, color, np.ones(5) - 1e-9, np.ones(5))[0] < 1e-8
    with pytest.raises(DomainError):
        total_loss(np.zeros((0, 3)), np.zeros((0, 3)), np.zeros(0), np.zeros(0))


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2 ** 31), st.integers(1, 40))
def test_total_loss_two_pass(seed, n):
    rng = np.random.default_rng(seed)
    pred, gt = rng.random((n, 3)), rng.random((n, 3))
    acc, mask = rng.random(n), (rng.random(n) < 0.5).astype(float)
    loss, _, _ = total_loss(pred, gt, acc, mask)
    pho = sum(huber_loss(pred[i], gt[i]) for i in range(n)) / n
    bce = sum(bce_mask_loss(acc[i], mask[i]) for i in range(n)) / n
    assert abs(loss - (pho + 1e-3 * bce)) < 1e-12
    assert loss >= 0


def test_loss_gradients(rng):
    n = 30
    pred, gt = rng.random((n, 3)), rng.random((n, 3))
    pred[:5] = gt[:5] + rng.uniform(-0.005, 0.005, (5, 3))  # quadratic branch
    acc, mask = rng.uniform(0.05, 0.95, n), (rng.random(n) < 0.5).astype(float)
    g_color, g_acc = total_loss_grads(pred, gt, acc, mask)
    eps = 1e-7
    for idx in [(0, 0), (2, 1), (10, 2), (20, 0)]:
        p2 = pred.copy(); p2[idx] += eps
        m2 = pred.copy(); m2[idx] -= eps
        num = (total_loss(p2, gt, acc, mask)[0] - total_loss(m2, gt, acc, mask)[0]) / (2 * eps)
        assert num == pytest.approx(g_color[idx], rel=1e-5)
    for i in (1, 7, 29):
        a2 = acc.copy(); a2[i] += eps
        b2 = acc.copy(); b2[i] -= eps
        num = (total_loss(pred, gt, a2, mask)[0] - total_loss(pred, gt, b2, mask)[0]) / (2 * eps)
        assert num == pytest.approx(g_acc[i], rel=1e-5)


def test_pointwise_grads_zero_at_optimum():
    assert np.all(huber_grad([0.2, 0.3, 0.4], [0.2, 0.3, 0.4]) == 0)
    assert bce_grad(0.0, 0) == 0.0 and bce_grad(1.0, 1) == 0.0


def test_learning_rate_endpoints():
    assert abs(learning_rate(0, 5000) - 1e-2) < 1e-9
    assert abs(learning_rate(4999, 5000) - 5e-3) < 1e-9
    lrs = [learning_rate(i, 100) for i in range(100)]
    assert all(b < a for a, b in zip(lrs, lrs[1:]))
    ratios = np.array(lrs[1:]) / np.array(lrs[:-1])
    np.testing.assert_allclose(ratios, ratios[0], rtol=1e-12)
    assert learning_rate(0, 1) == 1e-2


def test_adam_zero_grads_keep_params():
    p = np.array([1.0, -2.0, 3.0])
    g = np.zeros(3)
    opt = Adam([(p, g)])
    g[:] = [1.0, 1.0, 1.0]
    opt.step(0.1)
    before, m_before, v_before = p.copy(), opt.m[0].copy(), opt.v[0].copy()
    g[:] = 0
    opt.step(0.1)
    np.testing.assert_array_equal(opt.m[0], 0.9 * m_before)
    np.testing.assert_array_equal(opt.v[0], 0.99 * v_before)
    # params still move on stale momentum, but a fresh optimizer with zero grads does not
    q = np.array([1.0, 2.0])
    fresh = Adam([(q, np.zeros(2))])
    fresh.step(0.1)
    np.testing.assert_array_equal(q, [1.0, 2.0])
    assert not np.array_equal(p, before)


@pytest.mark.parametrize("g0", [3.0, -0.02, 1e-6])
def test_adam_first_step(g0):
    p = np.array([0.0])
    opt = Adam([(p, np.array([g0]))])
    opt.step(0.01)
    assert p[0] == pytest.approx(-0.01 * math.copysign(1, g0), rel=1e-8)
    assert abs(p[0]) <= 0.01


def test_adam_quadratic_bowl():
    x = np.array([1.5])
    g = np.zeros(1)
    opt = Adam([(x, g)])
    losses = []
    for _ in range(100):
        losses.append(float(x[0] ** 2))
        g[:] = 2 * x
        opt.step(LR_START)
    assert all(b < a for a, b in zip(losses[5:], losses[6:]))
    assert losses[-1] < losses[0]


def test_adam_skips_nonfinite():
    p = np.array([1.0, 1.0, 1.0])
    g = np.array([np.nan, np.inf, 0.5])
    opt = Adam([(p, g)])
    assert opt.step(0.01) == 2
    assert p[0] == 1.0 and p[1] == 1.0 and p[2] < 1.0
    assert opt.m[0][0] == 0 and opt.v[0][1] == 0
