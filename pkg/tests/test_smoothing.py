import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from homosynth.smoothing import gradient_count, l0_smooth


def circulant_forward_difference(n):
    D = -np.eye(n)
    D[np.arange(n), (np.arange(n) + 1) % n] = 1.0
    return D


def dense_l0(img, weight, kappa=2.0, max_iters=20, beta_max=1e5):
    """Same alternating scheme with explicit difference matrices and a dense solve."""
    c, h, w = img.shape
    Dx = np.kron(np.eye(h), circulant_forward_difference(w))
    Dy = np.kron(circulant_forward_difference(h), np.eye(w))
    I = img.reshape(c, -1)
    S = I.copy()
    beta = 2.0 * weight
    for _ in range(max_iters):
        if beta > beta_max:
            break
        gx = S @ Dx.T
        gy = S @ Dy.T
        small = (gx ** 2 + gy ** 2).sum(axis=0) < weight / beta
        gx[:, small] = 0.0
        gy[:, small] = 0.0
        A = np.eye(h * w) + beta * (Dx.T @ Dx + Dy.T @ Dy)
        S = np.linalg.solve(A, (I + beta * (gx @ Dx + gy @ Dy)).T).T
        beta *= kappa
    return S.reshape(c, h, w)


def step_edge(rng, size=32, noise=0.05):
    img = np.zeros((3, size, size))
    img[:, :, size // 2:] = 0.8
    img += rng.normal(scale=noise, size=img.shape)
    return img


def test_zero_weight_is_identity(rng):
    img = rng.random((3, 9, 11))
    out = l0_smooth(img, 0.0)
    assert np.array_equal(out, img) and out is not img


@given(st.floats(0.0, 1.0), st.floats(1e-5, 1.0))
def test_constant_image_unchanged(value, weight):
    img = np.full((3, 8, 8), value)
    assert np.allclose(l0_smooth(img, weight), img, atol=1e-10)


def test_matches_dense_oracle(rng):
    img = rng.random((3, 8, 10))
    for weight in (1e-3, 2e-2):
        assert np.allclose(l0_smooth(img, weight), dense_l0(img, weight), atol=1e-9)


def test_noisy_step_edge_loses_gradients(rng):
    img = step_edge(rng)
    assert gradient_count(l0_smooth(img, 1e-3)) < gradient_count(img)


def test_gradient_count_non_increasing_in_weight(rng):
    img = step_edge(rng)
    counts = [gradient_count(l0_smooth(img, w)) for w in (0.0, 1e-4, 1e-3, 1e-2, 1e-1)]
    assert all(a >= b for a, b in zip(counts, counts[1:])), counts


def test_edge_survives_smoothing(rng):
    out = l0_smooth(step_edge(rng), 1e-3)
    left, right = out[:, :, :12].mean(), out[:, :, 20:].mean()
    assert right - left > 0.6


def test_two_dimensional_input(rng):
    img = rng.random((8, 8))
    assert l0_smooth(img, 1e-2).shape == (8, 8)


def test_negative_weight_rejected():
    with pytest.raises(ValueError):
        l0_smooth(np.zeros((1, 4, 4)), -1.0)
