import math

import numpy as np
import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st

from blinedet.errors import ConfigurationError, InvalidWeightError, ShapeError
from blinedet.losses import (
    DELTA,
    LossConfig,
    bce_grad,
    bce_loss,
    dice_grad,
    dice_loss,
    focal_grad,
    focal_loss,
    seg_grad,
    seg_loss,
    torch_bce,
    torch_dice,
    torch_focal,
    torch_seg,
    weighted_batch_loss,
)


def test_defaults():
    c = LossConfig()
    assert (c.alpha, c.gamma, c.beta, c.eps) == (2 / 3, 2, 50, 1)
    with pytest.raises(ConfigurationError):
        LossConfig(alpha=1.5)


def test_bce_values():
    assert bce_loss(1, 0.5) == pytest.approx(math.log(2))
    assert bce_loss(1, 1.0) == pytest.approx(0, abs=1e-6)
    assert bce_loss(0, 0.9, 0.2) == pytest.approx(0.460517, abs=1e-6)
    with pytest.raises(InvalidWeightError):
        bce_loss(1, 0.5, 0.0)


def test_focal_values():
    assert focal_loss([1.0], [0.5]) == pytest.approx(50 * 0.25 * math.log(2), abs=1e-6)
    assert focal_loss([1.0], [0.5]) == pytest.approx(8.664340, abs=1e-6)
    assert focal_loss(np.zeros((4, 4)), np.full((4, 4), DELTA)) == pytest.approx(0, abs=1e-9)
    with pytest.raises(ShapeError):
        focal_loss(np.zeros(3), np.zeros(4))


def test_focal_reduces_to_bce():
    rng = np.random.default_rng(0)
    y = (rng.random((8, 8)) > 0.7).astype(float)
    p = rng.random((8, 8))
    assert focal_loss(y, p, 1.0, LossConfig(gamma=0, beta=1)) == pytest.approx(bce_loss(y, p), abs=1e-9)


def test_dice_values():
    z = np.zeros((5, 5))
    assert dice_loss(z, z) == 0.0
    y = np.zeros((5, 5))
    y[:2, :3] = 1
    assert dice_loss(y, y.copy()) == 0.0
    y10 = np.zeros(20)
    y10[:10] = 1
    assert dice_loss(y10, np.zeros(20)) == pytest.approx(1 - 1 / 11, abs=1e-6)
    assert dice_loss(y10, np.zeros(20)) == pytest.approx(0.909091, abs=1e-6)


def test_seg_mixture():
    y10 = np.zeros(20)
    y10[:10] = 1
    p = np.zeros(20)
    y = np.random.default_rng(1).random((6, 6)) > 0.5
    q = np.random.default_rng(2).random((6, 6))
    assert seg_loss(y, q, cfg=LossConfig(alpha=1)) == pytest.approx(dice_loss(y, q))
    assert seg_loss(y, q, cfg=LossConfig(alpha=0)) == pytest.approx(focal_loss(y, q))
    expected = (2 / 3) * 0.909091 + (1 / 3) * focal_loss(y10, p)
    assert seg_loss(y10, p) == pytest.approx(expected, abs=1e-6)


def _fd(f, p, h=1e-5):
    g = np.zeros_like(p)
    for idx in np.ndindex(p.shape):
        a, b = p.copy(), p.copy()
        a[idx] += h
        b[idx] -= h
        g[idx] = (f(a) - f(b)) / (2 * h)
    return g


@pytest.mark.parametrize("gamma", [0.0, 2.0])
def test_gradients_match_finite_differences(gamma):
    rng = np.random.default_rng(3)
    y = (rng.random((8, 8)) > 0.6).astype(float)
    p = rng.uniform(0.05, 0.95, (8, 8))
    cfg = LossConfig(gamma=gamma)
    cases = [
        (lambda q: bce_loss(y, q, 0.7), bce_grad(y, p, 0.7)),
        (lambda q: focal_loss(y, q, 0.7, cfg), focal_grad(y, p, 0.7, cfg)),
        (lambda q: dice_loss(y, q, 0.7), dice_grad(y, p, 0.7)),
        (lambda q: seg_loss(y, q, 0.7, cfg), seg_grad(y, p, 0.7, cfg)),
    ]
    for f, analytic in cases:
        numeric = _fd(f, p)
        rel = np.abs(analytic - numeric).max() / max(np.abs(numeric).max(), 1e-12)
        assert rel < 1e-4


def test_torch_matches_numpy():
    rng = np.random.default_rng(4)
    y = (rng.random((3, 8, 8)) > 0.6).astype(np.float64)
    p = rng.uniform(0.01, 0.99, (3, 8, 8))
    ty, tp = torch.from_numpy(y), torch.from_numpy(p)
    for i in range(3):
        assert torch_bce(ty, tp)[i].item() == pytest.approx(bce_loss(y[i], p[i]), rel=1e-9)
        assert torch_focal(ty, tp)[i].item() == pytest.approx(focal_loss(y[i], p[i]), rel=1e-9)
        assert torch_dice(ty, tp)[i].item() == pytest.approx(dice_loss(y[i], p[i]), rel=1e-9)
        assert torch_seg(ty, tp)[i].item() == pytest.approx(seg_loss(y[i], p[i]), rel=1e-9)


def test_torch_autograd_matches_closed_form():
    rng = np.random.default_rng(5)
    y = (rng.random((1, 8, 8)) > 0.6).astype(np.float64)
    p = torch.tensor(rng.uniform(0.05, 0.95, (1, 8, 8)), requires_grad=True)
    torch_seg(torch.from_numpy(y), p).sum().backward()
    np.testing.assert_allclose(p.grad.numpy()[0], seg_grad(y[0], p.detach().numpy()[0]), rtol=1e-8)


def test_weighted_batch_loss():
    per = torch.tensor([1.0, 3.0])
    assert weighted_batch_loss(per, torch.tensor([1.0, 3.0])).item() == pytest.approx(2.5)
    with pytest.raises(InvalidWeightError):
        weighted_batch_loss(per, torch.tensor([1.0, 0.0]))


@given(st.floats(1e-4, 1 - 1e-3), st.floats(1e-5, 1e-3))
def test_monotone_in_prediction_for_positive(p, dp):
    q = min(p + dp, 1 - 1e-4)
    for f in (lambda v: bce_loss(1, v), lambda v: focal_loss([1.0], [v]),
              lambda v: dice_loss([1.0], [v]), lambda v: seg_loss([1.0], [v])):
        assert f(q) < f(p)


@given(st.floats(0.01, 10.0))
def test_weight_homogeneity(w):
    rng = np.random.default_rng(6)
    y = (rng.random((4, 4)) > 0.5).astype(float)
    p = rng.random((4, 4))
    for f in (bce_loss, focal_loss, dice_loss, seg_loss):
        assert f(y, p, w) == pytest.approx(w * f(y, p, 1.0), rel=1e-9)
