"""Training losses with their gradients w.r.t. the rendered image.

Each loss returns ``(value, grad)`` where ``grad`` has the shape of the first
argument.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import InvalidInputError

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01**2
SSIM_C2 = 0.03**2
MASK_EPS = 1e-6


@dataclass
class LossWeights:
    """Weights of the D-SSIM, silhouette and depth terms; L1 gets ``1 - ssim``."""

    ssim: float = 0.2
    mask: float = 0.1
    depth: float = 0.05

    def __post_init__(self):
        if min(self.ssim, self.mask, self.depth) < 0 or self.ssim > 1:
            raise InvalidInputError("loss weights must be non-negative with ssim <= 1")


def l1_loss(img, ref):
    img = np.asarray(img, dtype=np.float64)
    diff = img - np.asarray(ref, dtype=np.float64)
    return float(np.abs(diff).mean()), np.sign(diff) / diff.size


def _gauss_kernel(size=SSIM_WINDOW, sigma=SSIM_SIGMA):
    x = np.arange(size) - (size - 1) / 2
    k = np.exp(-(x**2) / (2 * sigma**2))
    return k / k.sum()


_KERNEL = _gauss_kernel()


def _blur(x):
    """Separable Gaussian filter over the first two axes, 'valid' region only."""
    x = sliding_window_view(x, SSIM_WINDOW, axis=0) @ _KERNEL
    return sliding_window_view(x, SSIM_WINDOW, axis=1) @ _KERNEL


def _blur_adjoint(y):
    pad = SSIM_WINDOW - 1
    widths = [(pad, pad), (pad, pad)] + [(0, 0)] * (y.ndim - 2)
    return _blur(np.pad(y, widths))


def _as_hwc(img):
    img = np.asarray(img, dtype=np.float64)
    return img[..., None] if img.ndim == 2 else img


def ssim_map(img, ref):
    """Per-window, per-channel SSIM over the valid region."""
    x, y = _as_hwc(img), _as_hwc(ref)
    if x.shape != y.shape:
        raise InvalidInputError(f"image shapes differ: {x.shape} vs {y.shape}")
    if x.shape[0] < SSIM_WINDOW or x.shape[1] < SSIM_WINDOW:
        raise InvalidInputError(f"images must be at least {SSIM_WINDOW}x{SSIM_WINDOW} for SSIM")
    mx, my = _blur(x), _blur(y)
    vx = _blur(x * x) - mx * mx
    vy = _blur(y * y) - my * my
    cxy = _blur(x * y) - mx * my
    num = (2 * mx * my + SSIM_C1) * (2 * cxy + SSIM_C2)
    den = (mx * mx + my * my + SSIM_C1) * (vx + vy + SSIM_C2)
    return num / den


def ssim(img, ref) -> float:
    """Mean SSIM (11x11 Gaussian window, sigma 1.5, unit dynamic range)."""
    return float(ssim_map(img, ref).mean())


def dssim_loss(img, ref):
    """``1 - SSIM`` and its gradient w.r.t. ``img``."""
    shape = np.shape(img)
    x, y = _as_hwc(img), _as_hwc(ref)
    if x.shape != y.shape:
        raise InvalidInputError(f"image shapes differ: {x.shape} vs {y.shape}")
    if x.shape[0] < SSIM_WINDOW or x.shape[1] < SSIM_WINDOW:
        raise InvalidInputError(f"images must be at least {SSIM_WINDOW}x{SSIM_WINDOW} for SSIM")
    mx, my = _blur(x), _blur(y)
    vx = _blur(x * x) - mx * mx
    vy = _blur(y * y) - my * my
    cxy = _blur(x * y) - mx * my
    a1 = 2 * mx * my + SSIM_C1
    a2 = 2 * cxy + SSIM_C2
    b1 = mx * mx + my * my + SSIM_C1
    b2 = vx + vy + SSIM_C2
    s = (a1 * a2) / (b1 * b2)
    scale = -1.0 / s.size
    # partials of s w.r.t. the window statistics mx, vx, cxy
    d_mx = scale * (2 * my * a2 / (b1 * b2) - 2 * mx * s / b1)
    d_cxy = scale * 2 * a1 / (b1 * b2)
    d_vx = scale * -s / b2
    # mx = blur(x); vx = blur(x^2) - mx^2; cxy = blur(xy) - mx my
    g_mx = d_mx - 2 * mx * d_vx - my * d_cxy
    grad = _blur_adjoint(g_mx) + 2 * x * _blur_adjoint(d_vx) + y * _blur_adjoint(d_cxy)
    return float(1.0 - s.mean()), grad.reshape(shape)


def mask_loss(alpha, mask):
    """Binary cross-entropy between rendered alpha and a {0, 1} silhouette."""
    alpha = np.asarray(alpha, dtype=np.float64)
    mask = np.asarray(mask, dtype=np.float64)
    if alpha.shape != mask.shape:
        raise InvalidInputError(f"alpha {alpha.shape} and mask {mask.shape} differ in shape")
    m = np.clip(alpha, MASK_EPS, 1 - MASK_EPS)
    loss = -(mask * np.log(m) + (1 - mask) * np.log1p(-m))
    grad = (-(mask / m) + (1 - mask) / (1 - m)) / alpha.size
    grad[(alpha < MASK_EPS) | (alpha > 1 - MASK_EPS)] = 0.0
    return float(loss.mean()), grad


def align_depth(prior, depth, valid):
    """Least-squares scale and shift ``(a, b)`` minimising ``|a prior + b - depth|^2`` on ``valid``."""
    p = prior[valid]
    A = np.stack([p, np.ones_like(p)], -1)
    (a, b), *_ = np.linalg.lstsq(A, depth[valid], rcond=None)
    return float(a), float(b)


def depth_loss(depth, prior, valid=None, align: bool = True):
    """Mean squared error between rendered accumulated depth and a depth prior.

    With ``align`` the prior is first mapped through the best per-image scale
    and shift; those are held fixed in the gradient (which is exact at the
    least-squares optimum).
    """
    depth = np.asarray(depth, dtype=np.float64)
    prior = np.asarray(prior, dtype=np.float64)
    if depth.shape != prior.shape:
        raise InvalidInputError(f"depth {depth.shape} and prior {prior.shape} differ in shape")
    valid = np.ones(depth.shape, dtype=bool) if valid is None else np.asarray(valid, dtype=bool)
    n = int(valid.sum())
    if n == 0:
        raise InvalidInputError("depth loss needs at least one valid pixel")
    target = prior
    if align:
        a, b = align_depth(prior, depth, valid)
        target = a * prior + b
    diff = np.where(valid, depth - target, 0.0)
    return float((diff**2).sum() / n), 2.0 * diff / n


def total_loss(parts: dict, weights: LossWeights, grads: dict | None = None):
    """Weighted sum of loss parts ``l1``, ``dssim``, ``mask`` and ``depth``.

    Missing parts count as zero. If ``grads`` maps part names to gradients,
    the weighted gradients are returned too, keyed the same way (parts
    differentiate different images, so they are not summed here).
    """
    coef = {"l1": 1 - weights.ssim, "dssim": weights.ssim, "mask": weights.mask, "depth": weights.depth}
    unknown = set(parts) - set(coef)
    if unknown:
        raise InvalidInputError(f"unknown loss parts: {sorted(unknown)}")
    value = sum(coef[k] * float(v) for k, v in parts.items())
    if grads is None:
        return value
    return value, {k: coef[k] * np.asarray(g, dtype=np.float64) for k, g in grads.items()}
