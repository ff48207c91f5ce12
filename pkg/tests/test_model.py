import math

import numpy as np
import pytest
import torch
import torch.nn.functional as F
from hypothesis import given
from hypothesis import strategies as st

from homosynth.model import (
    CCNet,
    ColorReconstructor,
    ModelConfig,
    ResidualEstimator,
    ShapeError,
    align_features,
    color_histogram,
    local_correlation,
    model_summary,
)

TINY = ModelConfig(base_channels=8, inner_iterations=2, search_radius=2, histogram_bins=16,
                   estimator_channels=8, color_hidden=16)


def brute_correlation(f_src, f_tar, r):
    B, C, h, w = f_src.shape
    d = 2 * r + 1
    out = np.zeros((B, d * d, h, w))
    a, b = f_src.numpy(), f_tar.numpy()
    for u in range(-r, r + 1):
        for v in range(-r, r + 1):
            for m in range(h):
                for n in range(w):
                    if 0 <= m + u < h and 0 <= n + v < w:
                        out[:, (u + r) * d + (v + r), m, n] = (a[:, :, m + u, n + v] * b[:, :, m, n]).sum(1)
    return out / math.sqrt(C)


def receptive_mask(seed_mask):
    """Positions of F3 that can depend on the nonzero pixels of ``seed_mask``."""

    def conv3(m, stride=1):
        return F.max_pool2d(m, 3, stride=stride, padding=1)

    def res(m, stride=1, projected=False):
        main = conv3(conv3(m, stride))
        skip = m[..., ::stride, ::stride] if stride > 1 or projected else m
        return torch.maximum(main, skip)

    m1 = res(conv3(seed_mask))
    m2 = res(torch.maximum(res(m1, 2), F.max_pool2d(m1, 2)), projected=True)
    m3 = res(torch.maximum(res(m2, 2), F.max_pool2d(m2, 2)), projected=True)
    return m3[0, 0] > 0


# -- config / shapes ---------------------------------------------------------

def test_config_validation():
    assert ModelConfig().channels == (64, 96, 128)
    for bad in (dict(inner_iterations=0), dict(search_radius=-1), dict(base_channels=4),
                dict(histogram_bins=4), dict(norm="batch")):
        with pytest.raises(ValueError):
            ModelConfig(**bad)


@pytest.mark.parametrize("size", [64, 128])
def test_pyramid_shapes(size):
    torch.manual_seed(0)
    net = CCNet(ModelConfig(base_channels=8), image_size=size)
    pyr = net.extract_pyramid(torch.rand(2, 3, size, size))
    assert [tuple(f.shape) for f in pyr] == [(2, 8, size, size), (2, 12, size // 2, size // 2),
                                             (2, 16, size // 4, size // 4)]
    for f, (c, i) in zip(pyr, net.decouple_color(pyr)):
        assert c.shape == i.shape == f.shape


def test_sizes_not_divisible_by_four():
    net = CCNet(TINY, image_size=32)
    with pytest.raises(ShapeError):
        net.extract_pyramid(torch.rand(1, 3, 30, 30))
    with pytest.raises(ShapeError):
        CCNet(TINY, image_size=30)


def test_forward_is_deterministic():
    torch.manual_seed(0)
    net = CCNet(TINY, image_size=32).eval()
    x = torch.rand(2, 3, 32, 32)
    a = net.extract_pyramid(x)
    b = net.extract_pyramid(x.clone())
    assert all(torch.equal(p, q) for p, q in zip(a, b))
    da, db = net.decouple_color(a), net.decouple_color(b)
    assert all(torch.equal(p[0], q[0]) and torch.equal(p[1], q[1]) for p, q in zip(da, db))


def test_receptive_field_of_coarsest_level():
    torch.manual_seed(0)
    net = CCNet(ModelConfig(base_channels=8, norm="none"), image_size=64).double()
    x = torch.rand(1, 3, 64, 64, dtype=torch.float64)
    y = x.clone()
    y[0, :, 5, 40] += 1.0
    with torch.no_grad():
        changed = (net.extract_pyramid(x)[2] - net.extract_pyramid(y)[2]).abs().amax(dim=(0, 1)) > 0
    seed = torch.zeros(1, 1, 64, 64, dtype=torch.float64)
    seed[0, 0, 5, 40] = 1.0
    allowed = receptive_mask(seed)
    assert changed.any()
    assert not (changed & ~allowed).any()


# -- colour ------------------------------------------------------------------

def test_histogram_constant_images():
    h0 = color_histogram(torch.zeros(3, 8, 8), 16).view(3, 16)
    h1 = color_histogram(torch.ones(3, 8, 8), 16).view(3, 16)
    assert torch.equal(h0, F.one_hot(torch.zeros(3, dtype=torch.long), 16).float())
    assert torch.equal(h1, F.one_hot(torch.full((3,), 15), 16).float())


def test_histogram_two_tone_counting():
    img = torch.full((3, 8, 8), 0.1)
    img[:, :, 4:] = 0.9
    h = color_histogram(img, 10).view(3, 10)
    expected = torch.zeros(3, 10)
    expected[:, 1] = 0.5
    expected[:, 9] = 0.5
    assert torch.allclose(h, expected)


@given(st.integers(0, 10_000), st.sampled_from([8, 16, 64]))
def test_histogram_matches_numpy(seed, bins):
    img = np.random.default_rng(seed).random((3, 12, 10))
    h = color_histogram(torch.from_numpy(img), bins).view(3, bins).numpy()
    for c in range(3):
        ref, _ = np.histogram(img[c], bins=bins, range=(0.0, 1.0))
        assert np.allclose(h[c], ref / img[c].size)
    assert np.isclose(h.sum(), 3.0)


def test_color_reconstructor_contract():
    net = ColorReconstructor(12, 16, hidden=8)
    for size in (4, 9):
        out = net(torch.randn(5, 12, size, size))
        assert out.shape == (5, 48)
        assert torch.allclose(out.view(5, 3, 16).sum(-1), torch.ones(5, 3), atol=1e-5)


# -- correlation -------------------------------------------------------------

def test_correlation_zero_radius_unit_vectors():
    C = 8
    f = torch.zeros(1, C, 4, 4)
    f[:, 3] = 1.0
    out = local_correlation(f, f, 0)
    assert out.shape == (1, 1, 4, 4)
    assert torch.allclose(out, torch.full_like(out, 1 / math.sqrt(C)))


def test_correlation_orthogonal_maps():
    a = torch.zeros(1, 4, 6, 6)
    b = torch.zeros(1, 4, 6, 6)
    a[:, 0] = 1.0
    b[:, 1] = 2.0
    assert torch.equal(local_correlation(a, b, 2), torch.zeros(1, 25, 6, 6))


def test_correlation_matches_brute_force():
    g = torch.Generator().manual_seed(0)
    a = torch.randn(2, 8, 8, 8, generator=g)
    b = torch.randn(2, 8, 8, 8, generator=g)
    assert np.abs(local_correlation(a, b, 3).numpy() - brute_correlation(a, b, 3)).max() < 1e-5


def test_correlation_channel_layout():
    # A source shifted by one row down is matched at u = +1.
    g = torch.Generator().manual_seed(1)
    tar = torch.randn(1, 256, 10, 10, generator=g)
    src = torch.zeros_like(tar)
    src[:, :, 1:] = tar[:, :, :-1]
    vol = local_correlation(src, tar, 1)
    best = vol[0, :, 2:-2, 2:-2].argmax(dim=0)
    assert (best == (1 + 1) * 3 + (0 + 1)).all()


def test_correlation_gradcheck():
    g = torch.Generator().manual_seed(2)
    a = torch.randn(1, 3, 5, 6, dtype=torch.float64, generator=g, requires_grad=True)
    b = torch.randn(1, 3, 5, 6, dtype=torch.float64, generator=g, requires_grad=True)
    assert torch.autograd.gradcheck(lambda x, y: local_correlation(x, y, 2), (a, b))


def test_correlation_shape_mismatch():
    with pytest.raises(ShapeError):
        local_correlation(torch.zeros(1, 2, 4, 4), torch.zeros(1, 2, 4, 5), 1)


# -- residual estimator -------------------------------------------------------

@pytest.mark.parametrize("size", [4, 8, 16, 33])
def test_residual_shape_and_zero_init(size):
    est = ResidualEstimator(9, size, width=8)
    out = est(torch.randn(3, 9, size, size))
    assert out.shape == (3, 4, 2) and torch.equal(out, torch.zeros(3, 4, 2))
    assert torch.equal(est(torch.zeros(1, 9, size, size)), torch.zeros(1, 4, 2))


def test_residual_gradient_matches_finite_differences():
    torch.manual_seed(0)
    est = ResidualEstimator(9, 8, width=8).double()
    torch.nn.init.normal_(est.fc.weight, std=0.5)
    vol = torch.randn(1, 9, 8, 8, dtype=torch.float64, requires_grad=True)
    w = torch.randn(1, 4, 2, dtype=torch.float64)
    (grad,) = torch.autograd.grad((est(vol) * w).sum(), vol)
    eps = 1e-6
    g = torch.Generator().manual_seed(3)
    for k in torch.randint(0, vol.numel(), (20,), generator=g).tolist():
        d = torch.zeros(vol.numel(), dtype=torch.float64)
        d[k] = eps
        d = d.view_as(vol)
        with torch.no_grad():
            fd = ((est(vol + d) * w).sum() - (est(vol - d) * w).sum()).item() / (2 * eps)
        analytic = grad.reshape(-1)[k].item()
        assert abs(fd - analytic) <= 1e-3 * max(abs(fd), abs(analytic)) + 1e-10


def test_predict_residual_scales_with_level():
    torch.manual_seed(0)
    net = CCNet(TINY, image_size=32)
    for est in net.estimators:
        torch.nn.init.constant_(est.fc.bias, 1.0)
    assert torch.equal(net.predict_residual(3, torch.zeros(1, 25, 8, 8)), torch.full((1, 4, 2), 4.0))
    assert torch.equal(net.predict_residual(1, torch.zeros(1, 25, 32, 32)), torch.ones(1, 4, 2))


# -- estimation loop -----------------------------------------------------------

def test_zero_initialised_trace():
    torch.manual_seed(0)
    net = CCNet(TINY, image_size=32)
    out = net(torch.rand(2, 3, 32, 32), torch.rand(2, 3, 32, 32))
    assert len(out.trace) == 3 * TINY.inner_iterations == 6
    assert all(torch.equal(o, torch.zeros(2, 4, 2)) for o in out.trace)
    assert out.final is out.trace[-1]


def test_trace_consistency():
    torch.manual_seed(0)
    net = CCNet(ModelConfig(base_channels=8, inner_iterations=3, search_radius=1, estimator_channels=8),
                image_size=32)
    for est in net.estimators:
        torch.nn.init.normal_(est.fc.weight, std=0.05)
    out = net(torch.rand(2, 3, 32, 32), torch.rand(2, 3, 32, 32), return_features=True)
    assert len(out.trace) == 9
    prev = torch.zeros(2, 4, 2)
    for entry, res in zip(out.trace, out.residuals):
        assert torch.allclose(entry - prev, res, atol=1e-6)
        prev = entry
    assert not torch.equal(out.final, torch.zeros(2, 4, 2))
    assert set(out.decoupled) == {"src", "tar"} and len(out.decoupled["src"]) == 3


def test_shape_mismatch_between_images():
    net = CCNet(TINY, image_size=32)
    with pytest.raises(ShapeError):
        net(torch.rand(1, 3, 32, 32), torch.rand(1, 3, 16, 16))


def test_align_features_zero_offsets_identity():
    f = torch.randn(2, 4, 8, 8)
    assert (align_features(f, torch.zeros(2, 4, 2)) - f).abs().max() <= 1e-6 * f.abs().max()


def test_model_summary():
    s = model_summary(CCNet(TINY, image_size=32))
    assert s["image_size"] == 32 and s["parameters"] > 0 and s["config"]["base_channels"] == 8
