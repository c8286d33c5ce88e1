import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from conftest import central_diff, random_grid, rel_err, spread_alphas
from litevoxel.losses import (ConfigError, LossWeights, charbonnier, gamma_schedule, lf_loss,
                              lf_weights, sobel_map, ssim, ssim_loss,
                              transmittance_concentration_loss, total_loss, tv_loss)
from litevoxel.voxel_grid import VoxelGrid, logit

LUMA = (0.299, 0.587, 0.114)


def away_from(x, rng, lo=0.05, hi=0.4):
    """Target whose residual against ``x`` stays clear of the Charbonnier knee."""
    return x + rng.choice([-1.0, 1.0], x.shape) * rng.uniform(lo, hi, x.shape)


def percentile_linear(values, p):
    v = sorted(values)
    pos = p / 100.0 * (len(v) - 1)
    lo = int(np.floor(pos))
    hi = min(lo + 1, len(v) - 1)
    return v[lo] + (v[hi] - v[lo]) * (pos - lo)


def sobel_oracle(img):
    H, W = img.shape[:2]
    lum = [[sum(LUMA[c] * img[y, x, c] for c in range(3)) for x in range(W)] for y in range(H)]

    def at(y, x):
        return lum[min(max(y, 0), H - 1)][min(max(x, 0), W - 1)]

    kx = [[-1, 0, 1], [-2, 0, 2], [-1, 0, 1]]
    mag = np.zeros((H, W))
    for y in range(H):
        for x in range(W):
            gx = sum(kx[i][j] * at(y + i - 1, x + j - 1) for i in range(3) for j in range(3))
            gy = sum(kx[j][i] * at(y + i - 1, x + j - 1) for i in range(3) for j in range(3))
            mag[y, x] = np.sqrt(gx * gx + gy * gy)
    scale = percentile_linear(mag.ravel().tolist(), 99.0)
    return np.zeros((H, W)) if scale <= 0 else np.clip(mag / scale, 0, 1)


def ssim_oracle(x, y, size=11, sigma=1.5):
    r = np.arange(size) - (size - 1) / 2
    g = np.exp(-(r[:, None] ** 2 + r[None, :] ** 2) / (2 * sigma ** 2))
    g /= g.sum()
    c1, c2 = 0.01 ** 2, 0.03 ** 2
    H, W, C = x.shape
    vals = []
    for c in range(C):
        for i in range(H - size + 1):
            for j in range(W - size + 1):
                a, b = x[i:i + size, j:j + size, c], y[i:i + size, j:j + size, c]
                ma, mb = (g * a).sum(), (g * b).sum()
                va = (g * (a - ma) ** 2).sum()
                vb = (g * (b - mb) ** 2).sum()
                cov = (g * (a - ma) * (b - mb)).sum()
                vals.append((2 * ma * mb + c1) * (2 * cov + c2)
                            / ((ma ** 2 + mb ** 2 + c1) * (va + vb + c2)))
    return float(np.mean(vals))


def test_sobel_constant_is_zero():
    np.testing.assert_array_equal(sobel_map(np.full((6, 7, 3), 0.4)), 0.0)


def test_sobel_vertical_step():
    img = np.zeros((8, 8, 3))
    img[:, 4:] = 1.0
    s = sobel_map(img)
    np.testing.assert_allclose(s[:, 3:5], 1.0)
    np.testing.assert_allclose(s[:, :2], 0.0, atol=1e-12)
    np.testing.assert_allclose(s[:, 6:], 0.0, atol=1e-12)


@pytest.mark.parametrize("seed", range(3))
def test_sobel_matches_convolution_oracle(seed):
    img = np.random.default_rng(seed).random((9, 11, 3))
    np.testing.assert_allclose(sobel_map(img), sobel_oracle(img), atol=1e-9)


def test_sobel_too_small():
    with pytest.raises(ValueError):
        sobel_map(np.zeros((2, 5, 3)))


@settings(max_examples=30, deadline=None)
@given(arrays(np.float64, (6, 6, 3), elements=st.floats(0, 1)), st.floats(-2, 2))
def test_sobel_shift_invariant(img, c):
    np.testing.assert_allclose(sobel_map(img + c), sobel_map(img), atol=1e-9)


def test_gamma_schedule_examples():
    T = 1000
    assert gamma_schedule(0.2 * T, T) == 0.0
    assert gamma_schedule(0.45 * T, T) == pytest.approx(0.3)
    assert gamma_schedule(0.9 * T, T) == pytest.approx(0.6)
    assert gamma_schedule(0.6 * T, T) == pytest.approx(0.6)
    with pytest.raises(ConfigError):
        gamma_schedule(1, T, t0=500, t1=500)
    with pytest.raises(ConfigError):
        gamma_schedule(1, T, t0=500, t1=400)


def test_lf_weights_examples():
    s = np.random.default_rng(0).random((5, 5))
    np.testing.assert_array_equal(lf_weights(s, 0.0), 1.0)
    np.testing.assert_allclose(lf_weights(np.full((3, 3), 0.37), 0.8), 1.0)
    w = lf_weights(np.array([0.0, 1.0]), 1.0, 1e-3)
    np.testing.assert_allclose(w, [1.001 / 0.501, 0.001 / 0.501], rtol=1e-12)


@settings(max_examples=60)
@given(arrays(np.float64, (4, 5), elements=st.floats(0, 1)), st.floats(0, 3),
       st.floats(1e-4, 1e-1))
def test_lf_weights_mean_one_and_monotone(s, gamma, eps):
    w = lf_weights(s, gamma, eps)
    assert abs(w.mean() - 1.0) < 1e-9
    assert np.all(w > 0)
    order = np.argsort(s.ravel(), kind="stable")
    assert np.all(np.diff(w.ravel()[order]) <= 1e-12)


def test_lf_loss_examples(rng):
    a = rng.random((6, 6, 3))
    val, grad = lf_loss(a, a, np.ones((6, 6)))
    assert val == 0.0
    np.testing.assert_array_equal(grad, 0.0)
    with pytest.raises(ValueError):
        lf_loss(a, a[:5], np.ones((6, 6)))


@pytest.mark.parametrize("seed", range(3))
def test_lf_loss_gradient(seed):
    rng = np.random.default_rng(seed)
    x = rng.random((8, 8, 3))
    y = away_from(x, rng)
    w = lf_weights(rng.random((8, 8)), 0.6)
    _, grad = lf_loss(x, y, w)
    fd = central_diff(lambda: lf_loss(x, y, w)[0], x)
    assert np.all(rel_err(grad, fd) < 1e-4)


def test_charbonnier_is_l1_like():
    r = np.array([[0.5, -0.5, 0.0]])
    np.testing.assert_allclose(charbonnier(r), [1.0 - 2e-3 + 2 * (np.sqrt(0.25 + 1e-6) - 0.5)],
                               atol=1e-12)


def test_ssim_identical_and_negative():
    yy, xx = np.mgrid[:16, :16]
    pattern = 0.5 + 0.2 * np.sin(xx / 2.0)[..., None] * np.cos(yy / 3.0)[..., None]
    img = np.repeat(pattern, 3, axis=2)
    assert ssim_loss(img, img)[0] == pytest.approx(0.0, abs=1e-12)
    assert ssim_loss(1.0 - img, img)[0] > 0.5
    with pytest.raises(ValueError):
        ssim_loss(np.zeros((10, 12, 3)), np.zeros((10, 12, 3)))


@pytest.mark.parametrize("seed", range(3))
def test_ssim_matches_window_oracle(seed):
    rng = np.random.default_rng(seed)
    x, y = rng.random((14, 13, 3)), rng.random((14, 13, 3))
    assert ssim(x, y) == pytest.approx(ssim_oracle(x, y), abs=1e-6)


@pytest.mark.parametrize("seed", range(2))
def test_ssim_gradient(seed):
    rng = np.random.default_rng(seed)
    x, y = rng.random((12, 12, 3)), rng.random((12, 12, 3))
    _, grad = ssim_loss(x, y)
    fd = central_diff(lambda: ssim_loss(x, y)[0], x)
    mask = np.abs(grad) > 1e-8
    assert np.all(rel_err(grad[mask], fd[mask]) < 1e-4)


def test_transmittance_concentration(rng):
    assert transmittance_concentration_loss(np.zeros((3, 3)))[0] == 0.0
    assert transmittance_concentration_loss(np.full((3, 3), 0.5))[0] == pytest.approx(0.25)
    T = rng.random((5, 4))
    val, grad = transmittance_concentration_loss(T)
    assert val == pytest.approx(float(np.mean([t * (1 - t) for t in T.ravel()])), abs=1e-15)
    fd = central_diff(lambda: transmittance_concentration_loss(T)[0], T)
    np.testing.assert_allclose(grad, fd, rtol=1e-6)


def grid_alphas(alphas):
    g = VoxelGrid(((-1,) * 3, (1,) * 3), 3)
    keys = [[2, i, 0, 0] for i in range(len(alphas))]
    params = np.zeros((len(alphas), 4))
    params[:, 3] = logit(np.clip(alphas, 1e-15, 1 - 1e-15))
    g.add_voxels(keys, params)
    return g


def test_tv_examples():
    assert tv_loss(grid_alphas([0.3, 0.3, 0.3]))[0] <= 1e-4
    assert tv_loss(grid_alphas([0.0, 1.0]))[0] == pytest.approx(1.0, abs=1e-6)
    assert tv_loss(grid_alphas([0.4]))[0] == 0.0


@pytest.mark.parametrize("seed", range(3))
def test_tv_matches_all_pairs_oracle(seed):
    rng = np.random.default_rng(seed)
    g = spread_alphas(random_grid(rng, max_voxels=60, level=2), rng)
    keys, a = g.key_list(), g.alphas()
    terms = []
    for p in range(len(keys)):
        for q in range(p + 1, len(keys)):
            if keys[p][0] == keys[q][0] and np.abs(np.subtract(keys[p][1:], keys[q][1:])).sum() == 1:
                terms.append(np.sqrt((a[p] - a[q]) ** 2 + 1e-8))
    want = float(np.mean(terms)) if terms else 0.0
    val, grad = tv_loss(g)
    assert val == pytest.approx(want, abs=1e-12)

    def f():
        return tv_loss(g)[0]

    fd = central_diff(f, g.params)
    np.testing.assert_array_equal(grad[:, :3], 0.0)
    mask = np.abs(grad) > 1e-8
    assert np.all(rel_err(grad[mask], fd[mask]) < 1e-4)


def test_total_loss_recomposition(rng):
    g = random_grid(rng, max_voxels=30)
    img, gt = rng.random((12, 12, 3)), rng.random((12, 12, 3))
    T = rng.random((12, 12))
    w = LossWeights(0.3, 0.05, 2e-3)
    br, grads = total_loss(img, T, gt, g, 0.4, w)
    lf = lf_loss(img, gt, lf_weights(sobel_map(gt), 0.4))[0]
    s = ssim_loss(img, gt)[0]
    tc = transmittance_concentration_loss(T)[0]
    tv = tv_loss(g)[0]
    assert (br.lf, br.ssim, br.t_conc, br.tv) == (lf, s, tc, tv)
    assert br.total == pytest.approx(lf + 0.3 * s + 0.05 * tc + 2e-3 * tv, abs=1e-12)

    zero = LossWeights(0.0, 0.0, 0.0)
    br0, g0 = total_loss(img, T, gt, g, 0.4, zero)
    assert br0.total == br0.lf
    np.testing.assert_array_equal(g0.d_trans, 0.0)
    np.testing.assert_array_equal(g0.d_params, 0.0)


def test_total_loss_zero_at_fit():
    g = grid_alphas([0.6, 0.6])
    img = np.random.default_rng(1).random((12, 12, 3))
    T = np.zeros((12, 12))
    T[:6] = 1.0
    br, _ = total_loss(img, T, img, g, 0.6)
    assert br.total == pytest.approx(0.0, abs=1e-4)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2 ** 32 - 1))
def test_gamma_zero_reduces_to_plain_charbonnier(seed):
    rng = np.random.default_rng(seed)
    x, y = rng.random((7, 9, 3)), rng.random((7, 9, 3))
    val, _ = lf_loss(x, y, lf_weights(sobel_map(y), 0.0))
    plain = np.mean([sum(np.sqrt((x[i, j, c] - y[i, j, c]) ** 2 + 1e-6) - 1e-3 for c in range(3))
                     for i in range(7) for j in range(9)])
    assert abs(val - plain) <= 1e-12
