"""Training losses (pixel MSE, perceptual, weighted mix) and image quality metrics."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .model import FeatureExtractor
from .tensor_core import ShapeError


@dataclass
class LossConfig:
    alpha: float = 0.8

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha must lie in [0, 1], got {self.alpha}")


@dataclass
class SsimParams:
    c1: float = 0.01 ** 2
    c2: float = 0.03 ** 2
    window: str = "gaussian"  # or "global"
    size: int = 11
    sigma: float = 1.5

    def __post_init__(self):
        if self.c1 <= 0 or self.c2 <= 0:
            raise ValueError("SSIM stabilising constants must be positive")
        if self.window not in ("gaussian", "global"):
            raise ValueError(f"unknown SSIM window {self.window!r}")


def _same_shape(a, b, what):
    if a.shape != b.shape:
        raise ShapeError(f"{what}: shapes {a.shape} and {b.shape} differ")


def mse_loss(y_true, y_pred, return_grad=False):
    """Mean squared error over every element (batch included).

    With ``return_grad`` also returns d(loss)/d(y_pred).
    """
    _same_shape(y_true, y_pred, "mse_loss")
    diff = y_pred - y_true
    loss = float(np.mean(diff * diff, dtype=np.float64))
    if return_grad:
        return loss, (2.0 / diff.size) * diff
    return loss


def perceptual_loss(y_true, y_pred, extractor: FeatureExtractor, return_grad=False):
    """Sum over extractor layers of the per-layer mean squared feature difference."""
    _same_shape(y_true, y_pred, "perceptual_loss")
    ft, _ = extractor.forward(y_true)
    fp, cache = extractor.forward(y_pred)
    loss = 0.0
    dlayers = []
    for a, b in zip(ft.layers, fp.layers):
        diff = b - a
        loss += float(np.mean(diff * diff, dtype=np.float64))
        dlayers.append((2.0 / diff.size) * diff)
    if return_grad:
        return loss, extractor.backward(dlayers, cache).astype(y_pred.dtype, copy=False)
    return loss


def combined_loss(y_true, y_pred, cfg: LossConfig, extractor: FeatureExtractor, return_grad=False):
    """``(1 - alpha) * MSE + alpha * perceptual``.

    A term with zero weight is not evaluated at all.
    """
    a = cfg.alpha
    loss, grad = 0.0, np.zeros_like(y_pred)
    if a < 1.0:
        m, gm = mse_loss(y_true, y_pred, return_grad=True)
        loss += (1.0 - a) * m
        grad += (1.0 - a) * gm
    if a > 0.0:
        p, gp = perceptual_loss(y_true, y_pred, extractor, return_grad=True)
        loss += a * p
        grad += a * gp
    return (loss, grad) if return_grad else loss


def psnr_paper(reference, estimate):
    """Norm-ratio PSNR: ``-10 log10(||reference - estimate||^2 / ||reference||^2)``.

    Returns ``inf`` for identical inputs. Raises ``ValueError`` when the
    reference is all zeros.
    """
    _same_shape(reference, estimate, "psnr_paper")
    reference = np.asarray(reference, dtype=np.float64)
    estimate = np.asarray(estimate, dtype=np.float64)
    power = float(np.sum(reference * reference))
    if power == 0.0:
        raise ValueError("psnr_paper is undefined for an all-zero reference image")
    err = float(np.sum((reference - estimate) ** 2))
    if err == 0.0:
        return float("inf")
    return -10.0 * np.log10(err / power)


def psnr_standard(reference, estimate, peak=1.0):
    """Peak PSNR ``10 log10(peak^2 / MSE)``; ``inf`` when MSE is zero."""
    _same_shape(reference, estimate, "psnr_standard")
    err = float(np.mean((np.asarray(reference, dtype=np.float64) - np.asarray(estimate, dtype=np.float64)) ** 2))
    if err == 0.0:
        return float("inf")
    return 10.0 * np.log10(peak * peak / err)


def gaussian_window(size=11, sigma=1.5):
    r = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    g = np.exp(-(r * r) / (2.0 * sigma * sigma))
    return g / g.sum()


def _filter_valid(img, g):
    # separable 'valid' correlation with a normalised 1-D kernel
    rows = sliding_window_view(img, g.size, axis=0) @ g
    return sliding_window_view(rows, g.size, axis=1) @ g


def _as_image(x):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 4:
        if x.shape[0] != 1 or x.shape[3] != 1:
            raise ShapeError(f"ssim takes one single-channel image per call, got shape {x.shape}")
        x = x[0, :, :, 0]
    elif x.ndim == 3:
        x = x[:, :, 0] if x.shape[2] == 1 else x
    if x.ndim != 2:
        raise ShapeError(f"ssim takes one single-channel image per call, got shape {x.shape}")
    return x


def ssim(x, y, p: SsimParams | None = None):
    """Structural similarity of two images.

    ``window="global"`` evaluates the index once from whole-image
    moments; ``window="gaussian"`` averages it over every valid
    Gaussian-weighted window (images smaller than the window fall back to
    global).
    """
    p = p or SsimParams()
    _same_shape(np.asarray(x), np.asarray(y), "ssim")
    x, y = _as_image(x), _as_image(y)
    if p.window == "global" or min(x.shape) < p.size:
        mx, my = x.mean(), y.mean()
        vx = np.mean(x * x) - mx * mx
        vy = np.mean(y * y) - my * my
        cxy = np.mean(x * y) - mx * my
    else:
        g = gaussian_window(p.size, p.sigma)
        mx, my = _filter_valid(x, g), _filter_valid(y, g)
        vx = _filter_valid(x * x, g) - mx * mx
        vy = _filter_valid(y * y, g) - my * my
        cxy = _filter_valid(x * y, g) - mx * my
    num = (2 * mx * my + p.c1) * (2 * cxy + p.c2)
    den = (mx * mx + my * my + p.c1) * (vx + vy + p.c2)
    return float(np.mean(num / den))
