"""Image losses: MSE, windowed SSIM (value + gradient), PSNR, combined loss."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InvalidArgument

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01**2
SSIM_C2 = 0.03**2
PSNR_CAP_DB = 100.0


@dataclass
class LossValue:
    total: float
    mse: float
    ssim: float
    dL_dimage: np.ndarray | None


def _gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    x = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    k = np.exp(-(x**2) / (2.0 * sigma**2))
    return k / k.sum()


_WIN = _gaussian_window()


def _corr_valid(img: np.ndarray, k: np.ndarray = _WIN) -> np.ndarray:
    """Separable valid-mode correlation of a 2D image with an odd 1D kernel."""
    n = k.shape[0]
    h, w = img.shape
    tmp = np.zeros((h, w - n + 1), dtype=np.float64)
    for i in range(n):
        tmp += k[i] * img[:, i : i + w - n + 1]
    out = np.zeros((h - n + 1, w - n + 1), dtype=np.float64)
    for j in range(n):
        out += k[j] * tmp[j : j + h - n + 1, :]
    return out


def _corr_valid_t(field: np.ndarray, h: int, w: int, k: np.ndarray = _WIN) -> np.ndarray:
    """Adjoint of _corr_valid: scatter window values back onto pixels."""
    n = k.shape[0]
    tmp = np.zeros((h, w - n + 1), dtype=np.float64)
    for j in range(n):
        tmp[j : j + h - n + 1, :] += k[j] * field
    out = np.zeros((h, w), dtype=np.float64)
    for i in range(n):
        out[:, i : i + w - n + 1] += k[i] * tmp
    return out


def _check_pair(pred: np.ndarray, gt: np.ndarray):
    if pred.shape != gt.shape:
        raise InvalidArgument(f"image shapes differ: {pred.shape} vs {gt.shape}")
    if pred.ndim != 3 or pred.shape[2] != 3:
        raise InvalidArgument(f"expected (H, W, 3) images, got {pred.shape}")


def mse(pred: np.ndarray, gt: np.ndarray):
    """Mean squared error over all pixels and channels, with its gradient."""
    _check_pair(pred, gt)
    diff = pred.astype(np.float64) - gt.astype(np.float64)
    value = float(np.mean(diff**2))
    grad = 2.0 * diff / diff.size
    return value, grad


def ssim(pred: np.ndarray, gt: np.ndarray):
    """Mean structural similarity with an 11x11 Gaussian window (sigma 1.5).

    Computed per channel over all fully-contained windows, then averaged;
    returns (value, gradient of the mean w.r.t. pred).
    """
    _check_pair(pred, gt)
    h, w = pred.shape[:2]
    if min(h, w) < SSIM_WINDOW:
        raise InvalidArgument(
            f"image {h}x{w} smaller than SSIM window {SSIM_WINDOW}"
        )
    pred = pred.astype(np.float64)
    gt = gt.astype(np.float64)
    n_win = (h - SSIM_WINDOW + 1) * (w - SSIM_WINDOW + 1)
    total = 0.0
    grad = np.zeros_like(pred)
    for c in range(3):
        x = pred[:, :, c]
        y = gt[:, :, c]
        mu_x = _corr_valid(x)
        mu_y = _corr_valid(y)
        var_x = _corr_valid(x * x) - mu_x**2
        var_y = _corr_valid(y * y) - mu_y**2
        cov = _corr_valid(x * y) - mu_x * mu_y
        a1 = 2.0 * mu_x * mu_y + SSIM_C1
        a2 = 2.0 * cov + SSIM_C2
        b1 = mu_x**2 + mu_y**2 + SSIM_C1
        b2 = var_x + var_y + SSIM_C2
        denom = b1 * b2
        s = (a1 * a2) / denom
        total += float(s.sum())
        # d mean(S)/dx for x-dependent terms of each window
        f1 = 2.0 * mu_y * a2 / denom
        f2 = 2.0 * a1 / denom
        f3 = 2.0 * s * mu_x / b1
        f4 = 2.0 * s / b2
        gx = (
            _corr_valid_t(f1, h, w)
            + y * _corr_valid_t(f2, h, w)
            - _corr_valid_t(f2 * mu_y, h, w)
            - _corr_valid_t(f3, h, w)
            - x * _corr_valid_t(f4, h, w)
            + _corr_valid_t(f4 * mu_x, h, w)
        )
        grad[:, :, c] = gx
    value = total / (n_win * 3)
    return value, grad / (n_win * 3)


def psnr(pred: np.ndarray, gt: np.ndarray) -> float:
    """Peak signal-to-noise ratio in dB on [0,1] data, capped at 100."""
    _check_pair(pred, gt)
    m = float(np.mean((pred.astype(np.float64) - gt.astype(np.float64)) ** 2))
    if m <= 0.0:
        return PSNR_CAP_DB
    return min(10.0 * np.log10(1.0 / m), PSNR_CAP_DB)


def combined_loss(preds, gts, beta: float = 0.8):
    """Per-view beta*MSE + (1-beta)*(1-SSIM) and the mean over views.

    Per-view gradients are scaled by 1/N_c so they differentiate the
    aggregate. Returns (per_view: list[LossValue], aggregate: LossValue).
    """
    if len(preds) == 0:
        raise InvalidArgument("combined_loss needs at least one view")
    if len(preds) != len(gts):
        raise InvalidArgument("prediction and ground-truth view counts differ")
    if not 0.0 <= beta <= 1.0:
        raise InvalidArgument("beta must lie in [0,1]")
    n_c = len(preds)
    per_view = []
    for p, g in zip(preds, gts):
        m, dm = mse(p, g)
        s, ds = ssim(p, g)
        total = beta * m + (1.0 - beta) * (1.0 - s)
        grad = (beta * dm - (1.0 - beta) * ds) / n_c
        per_view.append(LossValue(total=total, mse=m, ssim=s, dL_dimage=grad))
    aggregate = LossValue(
        total=float(np.mean([v.total for v in per_view])),
        mse=float(np.mean([v.mse for v in per_view])),
        ssim=float(np.mean([v.ssim for v in per_view])),
        dL_dimage=None,
    )
    return per_view, aggregate
