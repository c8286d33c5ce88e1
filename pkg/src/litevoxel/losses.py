"""Photometric and regularization losses with analytic gradients.

Every loss returns ``(value, gradient)``; gradients are with respect to the
rendered image, the final transmittance map, or the grid parameters.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .voxel_grid import VoxelGrid, face_neighbor_pairs

LUMA = np.array([0.299, 0.587, 0.114])
SOBEL_X = np.array([[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]])
SOBEL_PERCENTILE = 99.0
# percentile scales below this are rounding noise on a flat image
SOBEL_FLOOR = 1e-9
CHARBONNIER_DELTA = 1e-3
TV_SMOOTH = 1e-8
SSIM_WIN = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2


class ConfigError(ValueError):
    pass


def sobel_map(image: np.ndarray) -> np.ndarray:
    """Percentile-normalized Sobel magnitude of the image luminance, in [0, 1].

    Borders are replicate-padded; magnitudes are divided by their 99th
    percentile and clipped.  A flat image (scale at most ``SOBEL_FLOOR``)
    maps to all zeros.
    """
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 3 or image.shape[0] < 3 or image.shape[1] < 3:
        raise ValueError("sobel_map needs an H x W x 3 image with H, W >= 3")
    lum = image @ LUMA
    p = np.pad(lum, 1, mode="edge")
    H, W = lum.shape
    gx = np.zeros((H, W))
    gy = np.zeros((H, W))
    for dy in range(3):
        for dx in range(3):
            win = p[dy:dy + H, dx:dx + W]
            gx += SOBEL_X[dy, dx] * win
            gy += SOBEL_X.T[dy, dx] * win
    mag = np.hypot(gx, gy)
    scale = np.percentile(mag, SOBEL_PERCENTILE)
    if scale <= SOBEL_FLOOR:
        return np.zeros((H, W))
    return np.clip(mag / scale, 0.0, 1.0)


def gamma_schedule(t: float, T: float, t0: float | None = None, t1: float | None = None,
                   gamma_max: float = 0.6) -> float:
    """Piecewise-linear LF emphasis: 0 before t0, ramp on [t0, t1), flat after."""
    t0 = 0.3 * T if t0 is None else t0
    t1 = 0.6 * T if t1 is None else t1
    if not t1 > t0:
        raise ConfigError(f"gamma ramp needs t1 > t0, got t0={t0}, t1={t1}")
    if t0 < 0 or t1 > T:
        raise ConfigError("gamma ramp must satisfy 0 <= t0 < t1 <= T")
    if t < t0:
        return 0.0
    if t < t1:
        return gamma_max * (t - t0) / (t1 - t0)
    return float(gamma_max)


def lf_weights(s: np.ndarray, gamma: float, eps: float = 1e-3) -> np.ndarray:
    """Mean-normalized inverse-Sobel weights ``(eps + 1 - s)**gamma / mean``."""
    if gamma < 0:
        raise ValueError("gamma must be >= 0")
    if eps <= 0:
        raise ValueError("eps must be > 0")
    w = (eps + 1.0 - np.asarray(s, dtype=np.float64)) ** gamma
    return w / w.mean()


def charbonnier(r: np.ndarray, delta: float = CHARBONNIER_DELTA) -> np.ndarray:
    """Per-pixel robust penalty summed over the last (channel) axis."""
    return (np.sqrt(r * r + delta * delta) - delta).sum(-1)


def lf_loss(render: np.ndarray, gt: np.ndarray, weights: np.ndarray,
            delta: float = CHARBONNIER_DELTA):
    """Weighted mean Charbonnier loss and its gradient w.r.t. ``render``."""
    render = np.asarray(render, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if render.shape != gt.shape or weights.shape != render.shape[:-1]:
        raise ValueError("render, ground truth and weights must have matching shapes")
    r = render - gt
    root = np.sqrt(r * r + delta * delta)
    n = weights.size
    value = float((weights * (root - delta).sum(-1)).sum() / n)
    grad = weights[..., None] * (r / root) / n
    return value, grad


# -- SSIM ---------------------------------------------------------------------


def gaussian_kernel(size: int = SSIM_WIN, sigma: float = SSIM_SIGMA) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(x * x) / (2.0 * sigma * sigma))
    return g / g.sum()


def _filter_valid(x: np.ndarray, g: np.ndarray) -> np.ndarray:
    """Separable 'valid' correlation over the first two axes."""
    n = len(g)
    H, W = x.shape[:2]
    rows = sum(g[k] * x[k:H - n + 1 + k] for k in range(n))
    return sum(g[k] * rows[:, k:W - n + 1 + k] for k in range(n))


def _filter_adjoint(y: np.ndarray, g: np.ndarray) -> np.ndarray:
    """Adjoint of ``_filter_valid``: a full-size correlation of padded input."""
    n = len(g)
    pad = [(n - 1, n - 1), (n - 1, n - 1)] + [(0, 0)] * (y.ndim - 2)
    return _filter_valid(np.pad(y, pad), g[::-1])


def ssim_loss(render: np.ndarray, gt: np.ndarray):
    """``1 - mean SSIM`` over all valid 11x11 windows and channels.

    Uses a Gaussian window (sigma 1.5) and constants for unit-range images.
    Returns the value and the gradient w.r.t. ``render``.
    """
    x = np.asarray(render, dtype=np.float64)
    y = np.asarray(gt, dtype=np.float64)
    if x.shape != y.shape:
        raise ValueError("render and ground truth shapes differ")
    if x.shape[0] < SSIM_WIN or x.shape[1] < SSIM_WIN:
        raise ValueError(f"SSIM needs images of at least {SSIM_WIN}x{SSIM_WIN}")
    g = gaussian_kernel()
    mx, my = _filter_valid(x, g), _filter_valid(y, g)
    exx, eyy, exy = _filter_valid(x * x, g), _filter_valid(y * y, g), _filter_valid(x * y, g)
    a1 = 2 * mx * my + SSIM_C1
    a2 = 2 * (exy - mx * my) + SSIM_C2
    b1 = mx * mx + my * my + SSIM_C1
    b2 = (exx - mx * mx) + (eyy - my * my) + SSIM_C2
    den = b1 * b2
    s = a1 * a2 / den
    value = float(1.0 - s.mean())

    dl_ds = -1.0 / s.size
    d_mx = dl_ds * ((2 * my * a2 - 2 * my * a1) - s * (2 * mx * b2 - 2 * mx * b1)) / den
    d_exy = dl_ds * 2 * a1 / den
    d_exx = dl_ds * -s / b2
    grad = (_filter_adjoint(d_mx, g) + 2 * x * _filter_adjoint(d_exx, g)
            + y * _filter_adjoint(d_exy, g))
    return value, grad


def ssim(render: np.ndarray, gt: np.ndarray) -> float:
    return 1.0 - ssim_loss(render, gt)[0]


# -- transmittance and TV ------------------------------------------------------


def transmittance_concentration_loss(T: np.ndarray):
    """``mean(T (1 - T))``: zero when every ray ends fully clear or fully opaque."""
    T = np.asarray(T, dtype=np.float64)
    return float((T * (1.0 - T)).mean()), (1.0 - 2.0 * T) / T.size


def tv_loss(grid: VoxelGrid):
    """Smoothed mean |alpha_u - alpha_v| over same-level face neighbors.

    Returns the value and its (N, 4) gradient (opacity column only).
    """
    grad = np.zeros((len(grid), 4))
    pairs = face_neighbor_pairs(grid)
    if len(pairs) == 0:
        return 0.0, grad
    alpha = grid.alphas()
    diff = alpha[pairs[:, 0]] - alpha[pairs[:, 1]]
    root = np.sqrt(diff * diff + TV_SMOOTH)
    value = float(root.mean())
    g = diff / root / len(pairs)
    d_alpha = (np.bincount(pairs[:, 0], g, minlength=len(grid))
               - np.bincount(pairs[:, 1], g, minlength=len(grid)))
    grad[:, 3] = d_alpha * alpha * (1.0 - alpha)
    return value, grad


# -- assembly -----------------------------------------------------------------


@dataclass
class LossWeights:
    ssim: float = 0.2
    t_conc: float = 0.01
    tv: float = 1e-4


@dataclass
class LossBreakdown:
    total: float
    lf: float
    ssim: float
    t_conc: float
    tv: float
    weights: LossWeights = field(default_factory=LossWeights)
    gamma: float = 0.0


@dataclass
class LossGradients:
    d_image: np.ndarray
    d_trans: np.ndarray
    d_params: np.ndarray  # direct grid-parameter terms (TV)


def total_loss(image: np.ndarray, trans: np.ndarray, gt: np.ndarray, grid: VoxelGrid,
               gamma: float, weights: LossWeights | None = None,
               sobel: np.ndarray | None = None, eps: float = 1e-3):
    """Assemble LF + SSIM + transmittance-concentration + TV.

    ``sobel`` is the ground-truth Sobel map; computed when omitted.  Terms
    whose weight is zero are skipped entirely (reported as 0).
    Returns ``(LossBreakdown, LossGradients)``.
    """
    weights = weights or LossWeights()
    if sobel is None:
        sobel = sobel_map(gt)
    lf, d_img = lf_loss(image, gt, lf_weights(sobel, gamma, eps))
    d_trans = np.zeros(trans.shape)
    d_params = np.zeros((len(grid), 4))
    s_val = tc_val = tv_val = 0.0
    if weights.ssim:
        s_val, g = ssim_loss(image, gt)
        d_img = d_img + weights.ssim * g
    if weights.t_conc:
        tc_val, g = transmittance_concentration_loss(trans)
        d_trans = d_trans + weights.t_conc * g
    if weights.tv:
        tv_val, g = tv_loss(grid)
        d_params = d_params + weights.tv * g
    total = lf + weights.ssim * s_val + weights.t_conc * tc_val + weights.tv * tv_val
    return (LossBreakdown(total, lf, s_val, tc_val, tv_val, weights, gamma),
            LossGradients(d_img, d_trans, d_params))
