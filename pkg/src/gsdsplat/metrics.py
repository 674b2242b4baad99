"""Image quality metrics: PSNR and luma SSIM (with its gradient for training)."""
from __future__ import annotations

import math

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ._validation import ValidationError, check_same_shape

LUMA = np.array([0.299, 0.587, 0.114])
SSIM_WIN = 11
SSIM_SIGMA = 1.5
C1 = (0.01 * 1.0) ** 2
C2 = (0.03 * 1.0) ** 2
PSNR_CAP = 100.0


def psnr(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    check_same_shape(a, b)
    mse = float(np.mean((a - b) ** 2))
    if mse < 1e-10:
        return PSNR_CAP
    return 10.0 * math.log10(1.0 / mse)


def _window():
    r = SSIM_WIN // 2
    x = np.arange(-r, r + 1, dtype=np.float64)
    k = np.exp(-(x * x) / (2 * SSIM_SIGMA ** 2))
    return k / k.sum()


_K = _window()


def _filt(x):
    """Separable Gaussian filter over valid windows."""
    tmp = sliding_window_view(x, SSIM_WIN, axis=0) @ _K
    return sliding_window_view(tmp, SSIM_WIN, axis=1) @ _K


def _filt_T(g, shape):
    """Adjoint of :func:`_filt`."""
    H, W = shape
    tmp = np.zeros((g.shape[0], W))
    for j in range(SSIM_WIN):
        tmp[:, j:j + g.shape[1]] += _K[j] * g
    out = np.zeros((H, W))
    for i in range(SSIM_WIN):
        out[i:i + tmp.shape[0], :] += _K[i] * tmp
    return out


def to_gray(img):
    img = np.asarray(img, dtype=np.float64)
    return img @ LUMA if img.ndim == 3 else img


def _ssim_parts(x, y):
    if x.shape[0] < SSIM_WIN or x.shape[1] < SSIM_WIN:
        raise ValidationError(f"image {x.shape[:2]} smaller than the {SSIM_WIN}x{SSIM_WIN} SSIM window")
    mx, my = _filt(x), _filt(y)
    sxx = _filt(x * x) - mx * mx
    syy = _filt(y * y) - my * my
    sxy = _filt(x * y) - mx * my
    A1 = 2 * mx * my + C1
    A2 = 2 * sxy + C2
    B1 = mx * mx + my * my + C1
    B2 = sxx + syy + C2
    return mx, my, A1, A2, B1, B2


def ssim(a, b):
    """Mean SSIM of the luma channels over all valid 11x11 Gaussian windows."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    check_same_shape(a, b)
    _, _, A1, A2, B1, B2 = _ssim_parts(to_gray(a), to_gray(b))
    return float(np.mean((A1 * A2) / (B1 * B2)))


def ssim_and_grad(a, b):
    """SSIM(a, b) and its gradient with respect to ``a``."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    check_same_shape(a, b)
    x, y = to_gray(a), to_gray(b)
    mx, my, A1, A2, B1, B2 = _ssim_parts(x, y)
    S = (A1 * A2) / (B1 * B2)
    n = S.size
    # d S / d (mx, E[x^2], E[xy]) with the window statistics as inputs
    dS_dA1 = A2 / (B1 * B2)
    dS_dA2 = A1 / (B1 * B2)
    dS_dB1 = -S / B1
    dS_dB2 = -S / B2
    g_mx = dS_dA1 * 2 * my + dS_dA2 * (-2 * my) + dS_dB1 * 2 * mx + dS_dB2 * (-2 * mx)
    g_exx = dS_dB2
    g_exy = dS_dA2 * 2
    shape = x.shape
    gx = (_filt_T(g_mx, shape) + 2 * x * _filt_T(g_exx, shape) + y * _filt_T(g_exy, shape)) / n
    grad = gx[..., None] * LUMA if a.ndim == 3 else gx
    return float(S.mean()), grad
