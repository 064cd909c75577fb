import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

import bridgeseg.bridge as B
from bridgeseg.bridge import (PatchDiscriminator, ResnetGenerator, SBLossWeights,
                              discriminator_forward, generator_forward, make_schedule,
                              sample_bridge, translate, unsb_loss)
from bridgeseg.exceptions import ArgumentError, NumericError
from bridgeseg.phantom import Domain, ImageSlice


def small_nets(seed=0, dtype=torch.float32):
    torch.manual_seed(seed)
    g = ResnetGenerator(base_channels=4, n_res_blocks=1, temb_dim=16, nce_dim=8).to(dtype)
    d = PatchDiscriminator(base_channels=4, n_layers=2, temb_dim=16).to(dtype)
    return g, d


def test_schedule_examples():
    assert make_schedule(5).times == (0.0, 0.2, 0.4, 0.6, 0.8, 1.0)
    assert make_schedule(1).times == (0.0, 1.0)
    s = make_schedule(7, tau=0.5)
    assert s.times[0] == 0 and s.times[-1] == 1 and s.N == 7
    assert all(b > a for a, b in zip(s.times, s.times[1:]))
    for bad in (dict(N=0), dict(tau=0.0), dict(times=(0, 0.5, 0.4, 1)), dict(times=(0.1, 1))):
        with pytest.raises(ArgumentError):
            make_schedule(**bad)


def test_bridge_endpoints_exact(rng):
    x0, x1 = rng.normal(size=(8, 8)), rng.normal(size=(8, 8))
    assert np.array_equal(sample_bridge(x0, x1, 0.0, 0.01, seed=3), x0)
    assert np.array_equal(sample_bridge(x0, x1, 1.0, 0.01, seed=3), x1)
    with pytest.raises(ArgumentError):
        sample_bridge(x0, x1[:4], 0.5, 0.01)
    with pytest.raises(ArgumentError):
        sample_bridge(x0, x1, 1.5, 0.01)


def test_bridge_mean_and_determinism(rng):
    x0, x1 = rng.normal(size=(4, 4)), rng.normal(size=(4, 4))
    a = sample_bridge(x0, x1, 0.3, 0.01, seed=5)
    assert np.array_equal(a, sample_bridge(x0, x1, 0.3, 0.01, seed=5))
    draws = np.stack([sample_bridge(x0, x1, 0.3, 0.01, seed=s) for s in range(2000)])
    assert np.allclose(draws.mean(0), 0.7 * x0 + 0.3 * x1, atol=0.01)


def test_bridge_variance_monte_carlo():
    z = np.zeros((4, 4))
    draws = np.stack([sample_bridge(z, z, 0.5, 0.04, seed=s) for s in range(10_000)])
    var = draws.var(axis=0)
    assert np.all(np.abs(var / 0.01 - 1) < 0.10)


def test_generator_shape_bounds_and_time():
    g, _ = small_nets()
    for shape in [(16, 16), (20, 12), (17, 23)]:
        x = np.random.default_rng(0).uniform(-1, 1, shape)
        out = generator_forward(x, 0.4, g)
        assert out.shape == shape
        assert np.all(np.abs(out) <= 1) and np.all(np.isfinite(out))
    x = np.random.default_rng(1).uniform(-1, 1, (16, 16))
    assert np.max(np.abs(generator_forward(x, 0.0, g) - generator_forward(x, 0.8, g))) > 0
    with pytest.raises(NumericError):
        generator_forward(np.full((8, 8), np.nan), 0.2, g)


def test_discriminator_forward():
    _, d = small_nets()
    rng = np.random.default_rng(0)
    a, b = rng.uniform(-1, 1, (32, 32)), rng.uniform(-1, 1, (32, 32))
    sa, sb = discriminator_forward(a, 0.2, d), discriminator_forward(b, 0.2, d)
    assert sa.shape == (32 // d.downsample_factor, 32 // d.downsample_factor)
    assert np.all(np.isfinite(sa)) and not np.array_equal(sa, sb)
    with pytest.raises(NumericError):
        discriminator_forward(np.full((32, 32), np.inf), 0.2, d)


def _batch(seed=0, size=16, dtype=torch.float32):
    g = torch.Generator().manual_seed(seed)
    x0 = torch.rand((1, 1, size, size), generator=g, dtype=dtype) * 2 - 1
    x1 = torch.rand((1, 1, size, size), generator=g, dtype=dtype) * 2 - 1
    return {"x0": x0, "x1": x1, "seed": seed}


def test_loss_components_and_lambda_linearity():
    g, d = small_nets()
    d.eval()
    sched = make_schedule(5)
    for t_index in range(sched.N):
        batch = _batch(t_index)
        base = unsb_loss(batch, g, d, sched, SBLossWeights(0, 0), t_index, nce_patches=16)
        assert base.total.item() == base.adv.item()
        for c in ("adv", "sb", "reg"):
            assert getattr(base, c).item() >= 0 and base.total.dtype == torch.float64
        for ls in (0.0, 1.0, 2.0):
            for lr in (0.0, 1.0, 2.0):
                t = unsb_loss(batch, g, d, sched, SBLossWeights(ls, lr), t_index, nce_patches=16)
                f = t.as_floats()
                assert (f["adv"], f["sb"], f["reg"]) == tuple(base.as_floats()[k]
                                                             for k in ("adv", "sb", "reg"))
                assert f["total"] == f["adv"] + ls * f["sb"] + lr * f["reg"]
        one = unsb_loss(batch, g, d, sched, SBLossWeights(1, 0), t_index, nce_patches=16)
        two = unsb_loss(batch, g, d, sched, SBLossWeights(2, 0), t_index, nce_patches=16)
        assert two.total.item() - base.total.item() == 2 * (one.total.item() - base.total.item())


def test_loss_rejects_bad_t_index():
    g, d = small_nets()
    with pytest.raises(ArgumentError):
        unsb_loss(_batch(), g, d, make_schedule(5), SBLossWeights(), 5)


def test_non_finite_component_is_named(monkeypatch):
    g, d = small_nets()
    monkeypatch.setattr(B, "patch_nce", lambda *a, **k: torch.tensor(float("inf")))
    with pytest.raises(NumericError) as info:
        unsb_loss(_batch(), g, d, make_schedule(5), SBLossWeights(), 1)
    assert info.value.component == "reg"


def _fd_check(seed, size, n_params=6, h=1e-6):
    g, d = small_nets(seed, torch.float64)
    d.eval()  # freezes the spectral-norm power iteration
    sched = make_schedule(5)
    batch = _batch(seed, size, torch.float64)
    t_index = seed % sched.N
    # chain states are held fixed: the loss treats them as constants
    gen = torch.Generator().manual_seed(seed)
    batch["x_t"] = B.simulate_chain(batch["x0"], g, sched, t_index, gen)
    batch["x1_t"] = B.simulate_chain(batch["x1"], g, sched, t_index, gen)
    w = SBLossWeights()

    def loss():
        return unsb_loss(batch, g, d, sched, w, t_index, nce_patches=16).total

    g.zero_grad()
    loss().backward()
    params = [p for p in g.parameters() if p.grad is not None]
    pick = np.random.default_rng(seed)
    worst = 0.0
    checked = 0
    while checked < n_params:
        p = params[pick.integers(len(params))]
        flat, grad = p.data.view(-1), p.grad.view(-1)
        i = int(pick.integers(flat.numel()))
        analytic = float(grad[i])
        if abs(analytic) < 1e-5:
            continue
        old = float(flat[i])
        with torch.no_grad():
            flat[i] = old + h
            up = float(loss())
            flat[i] = old - h
            down = float(loss())
            flat[i] = old
        numeric = (up - down) / (2 * h)
        worst = max(worst, abs(analytic - numeric) / max(abs(analytic), abs(numeric)))
        checked += 1
    return worst


def unsb_grad_worst(n_instances=20):
    sizes = [8, 12, 16]
    return max(_fd_check(k, sizes[k % 3]) for k in range(n_instances))


def test_unsb_loss_gradient_matches_finite_differences():
    assert unsb_grad_worst(4) < 1e-3


def test_translate_single_step_and_determinism(rng):
    g, _ = small_nets()
    x = rng.uniform(-1, 1, (16, 16)).astype(np.float32)
    one = translate(x, g, make_schedule(1), seed=0).pixels
    assert np.array_equal(one, generator_forward(x, 0.0, g))
    src = ImageSlice(x, Domain.MRI, "s", 2)
    a = translate(src, g, make_schedule(5), seed=9)
    b = translate(src, g, make_schedule(5), seed=9)
    assert a.domain == Domain.SYNTH_CT and a.key == ("s", 2)
    assert np.array_equal(a.pixels, b.pixels)
    assert np.all(np.abs(a.pixels) <= 1)
    with pytest.raises(ArgumentError):
        translate(x, g, {"N": 5})


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_translate_bounded_for_any_input(seed):
    g, _ = small_nets()
    x = np.random.default_rng(seed).uniform(-1, 1, (8, 8))
    out = translate(x, g, make_schedule(5), seed=seed).pixels
    assert np.all(np.abs(out) <= 1)


def test_one_step_decreases_generator_objective():
    g, d = small_nets(3)
    d.eval()
    sched = make_schedule(5)
    batch = _batch(3)
    batch["x_t"] = batch["x0"]
    opt = torch.optim.Adam(g.parameters(), lr=2e-4, betas=(0.5, 0.999))
    before = unsb_loss(batch, g, d, sched, SBLossWeights(), 0, nce_patches=16).total
    opt.zero_grad()
    before.backward()
    opt.step()
    after = unsb_loss(batch, g, d, sched, SBLossWeights(), 0, nce_patches=16).total
    assert after.item() < before.item()
