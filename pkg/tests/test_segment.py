import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from bridgeseg.exceptions import ArgumentError
from bridgeseg.segment import (DegenerateUncertaintyWarning, PredictionBundle, SegNet,
                               mc_predict, seg_forward, slice_uncertainty, weighted_ce)


def net(**kw):
    torch.manual_seed(kw.pop("seed", 0))
    kw.setdefault("base_channels", 4)
    kw.setdefault("depth", 2)
    return SegNet(**kw)


def test_weighted_ce_examples():
    y = np.zeros((10, 10), np.uint8)
    assert weighted_ce(np.full((10, 10), 0.5), y) == pytest.approx(math.log(2), abs=1e-12)
    y[3, 4] = 1
    expected = (30 * math.log(2) + 99 * math.log(2)) / 100
    assert weighted_ce(np.full((10, 10), 0.5), y) == pytest.approx(expected, abs=1e-12)
    assert expected == pytest.approx(0.8942, abs=1e-4)
    perfect = weighted_ce(y.astype(float), y)
    assert 0 <= perfect <= -math.log(1 - 1e-7) * 30
    with pytest.raises(ArgumentError):
        weighted_ce(np.full((3, 3), 0.5), np.zeros((3, 4)))


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_weighted_ce_fg1_is_plain_bce(seed):
    rng = np.random.default_rng(seed)
    p = torch.as_tensor(rng.uniform(0.01, 0.99, (6, 6)))
    y = torch.as_tensor((rng.random((6, 6)) < 0.3).astype(float))
    plain = -(y * torch.log(p) + (1 - y) * torch.log1p(-p)).mean()
    assert weighted_ce(p, y, fg_weight=1.0).item() == plain.item()
    assert weighted_ce(p, y).item() >= 0


def ce_grad_worst(n_instances=20, h=1e-6):
    worst = 0.0
    for k in range(n_instances):
        rng = np.random.default_rng(k)
        logits = torch.as_tensor(rng.normal(0, 2, (8, 8)), dtype=torch.float64).requires_grad_()
        y = torch.as_tensor((rng.random((8, 8)) < 0.2).astype(float))
        weighted_ce(torch.sigmoid(logits), y).backward()
        analytic = logits.grad.numpy().ravel()
        base = logits.detach().numpy().ravel()
        for i in range(base.size):
            up, down = base.copy(), base.copy()
            up[i] += h
            down[i] -= h
            f = lambda v: weighted_ce(torch.sigmoid(torch.as_tensor(v.reshape(8, 8))), y).item()
            numeric = (f(up) - f(down)) / (2 * h)
            a = analytic[i]
            worst = max(worst, abs(a - numeric) / max(abs(a), abs(numeric), 1e-12))
    return worst


def test_weighted_ce_gradient_finite_differences():
    assert ce_grad_worst(3) < 1e-4


def test_seg_forward_contract(rng):
    m = net()
    x = rng.uniform(-1, 1, (16, 16))
    p = seg_forward(x, m)
    assert p.shape == (16, 16) and p.min() >= 0 and p.max() <= 1
    assert np.array_equal(p, seg_forward(x, m))
    assert np.array_equal(seg_forward(x, m, True, seed=4), seg_forward(x, m, True, seed=4))
    with pytest.raises(ArgumentError, match="divisible by"):
        seg_forward(rng.uniform(-1, 1, (18, 16)), m)


def test_degenerate_r2aunet_equals_unet(rng):
    plain = net(arch="UNET", seed=1)
    degenerate = net(arch="R2AUNET", recurrence_steps=1, residual=False, attention=False)
    degenerate.load_state_dict(plain.state_dict())
    x = torch.as_tensor(rng.uniform(-1, 1, (1, 1, 16, 16)), dtype=torch.float32)
    plain.eval(), degenerate.eval()
    assert torch.equal(plain(x), degenerate(x))
    assert plain.config()["recurrence_steps"] == 1 and not plain.config()["attention"]


def test_attention_one_equals_ungated(rng):
    gated = net(attention=True, seed=2)
    ungated = net(attention=False)
    missing = ungated.load_state_dict(gated.state_dict(), strict=False)
    assert not missing.missing_keys
    x = torch.as_tensor(rng.uniform(-1, 1, (1, 1, 16, 16)), dtype=torch.float32)
    gated.eval(), ungated.eval()
    gated(x)
    for gate in gated.gates:
        c = gate.last_coefficients
        assert c.min() >= 0 and c.max() <= 1
        gate.fixed_coefficient = 1.0
    assert torch.equal(gated(x), ungated(x))


def test_dropout_is_last_before_final_conv():
    m = net()
    assert isinstance(m.dropout, torch.nn.Dropout) and m.final.kernel_size == (1, 1)
    feats = torch.randn(1, m.final.in_channels, 8, 8)
    m.eval()
    assert torch.equal(m.head(feats), m.final(feats))


def test_mc_predict_contract(rng):
    m = net()
    x = rng.uniform(-1, 1, (16, 16))
    assert np.all(mc_predict(x, m, passes=1).variance == 0)
    assert np.all(mc_predict(x, m, passes=10, dropout_rate=0.0).variance == 0)
    b = mc_predict(x, m, passes=10, dropout_rate=0.5, seed=3, keep_samples=True)
    again = mc_predict(x, m, passes=10, dropout_rate=0.5, seed=3)
    assert np.array_equal(b.mean_prob, again.mean_prob)
    s = b.samples
    assert s.shape == (10, 16, 16)
    assert np.allclose(b.mean_prob, s.sum(0) / 10, atol=1e-15)
    assert np.allclose(b.variance, ((s - s.sum(0) / 10) ** 2).sum(0) / 10, atol=1e-15)
    assert b.variance.max() <= 0.25 and b.variance.min() >= 0
    assert b.variance.max() > 0
    assert np.array_equal(b.mask, (b.mean_prob > 0.5).astype(np.uint8))
    assert m.dropout.p == 0.5 and m.training  # state restored
    with pytest.raises(ArgumentError):
        mc_predict(x, m, passes=0)


def _bundle(var, mask):
    var = np.asarray(var, dtype=float)
    return PredictionBundle(np.zeros_like(var), var, np.asarray(mask, np.uint8), passes=10)


def test_slice_uncertainty_examples():
    mask = np.zeros((4, 4))
    mask[1:3, 1:3] = 1
    assert slice_uncertainty(_bundle(np.zeros((4, 4)), mask)) == 0.0
    assert slice_uncertainty(_bundle(np.full((4, 4), 0.07), mask)) == pytest.approx(0.07)
    v = np.random.default_rng(0).uniform(0, 0.1, (4, 4))
    assert slice_uncertainty(_bundle(2 * v, mask)) == pytest.approx(
        2 * slice_uncertainty(_bundle(v, mask)))
    ref = np.zeros((4, 4))
    ref[0, 0] = 1
    assert slice_uncertainty(_bundle(v, mask), ref) == pytest.approx(
        v[(mask + ref) > 0].mean())
    with pytest.warns(DegenerateUncertaintyWarning):
        assert slice_uncertainty(_bundle(v, np.zeros((4, 4)))) == 0.0


def test_bad_configs():
    with pytest.raises(ArgumentError):
        SegNet(arch="VNET")
    with pytest.raises(ArgumentError):
        SegNet(fg_weight=0)
    with pytest.raises(ArgumentError):
        SegNet(dropout_rate=1.0)
