"""Training losses: photometric (L1 + D-SSIM), opacity entropy with optional
sky supervision, neighborhood consistency over human Gaussians, and temporal
pose smoothness. Every term returns its analytic gradient.
"""

from __future__ import annotations

import numpy as np
from scipy.signal import fftconvolve
from scipy.spatial import cKDTree

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2
_EPS = 1e-6


def _ssim_kernel():
    r = np.arange(SSIM_WINDOW) - (SSIM_WINDOW - 1) / 2.0
    g = np.exp(-(r ** 2) / (2 * SSIM_SIGMA ** 2))
    g /= g.sum()
    return np.outer(g, g)


_KERNEL = _ssim_kernel()


def _conv_valid(img, k):
    return fftconvolve(img, k, mode="valid")


def _conv_full(img, k):
    return fftconvolve(img, k, mode="full")


def ssim(render: np.ndarray, gt: np.ndarray, with_grad: bool = False):
    """Mean SSIM over valid 11x11 windows (Gaussian weighting, sigma 1.5).

    Returns mssim or (mssim, d_mssim/d_render).
    """
    x = np.asarray(render, dtype=np.float64)
    y = np.asarray(gt, dtype=np.float64)
    if x.ndim == 2:
        x = x[:, :, None]
        y = y[:, :, None]
    H, W, C = x.shape
    if H < SSIM_WINDOW or W < SSIM_WINDOW:
        raise ValueError("image smaller than the SSIM window")
    k = _KERNEL
    vals = []
    grad = np.zeros_like(x) if with_grad else None
    n_valid = (H - SSIM_WINDOW + 1) * (W - SSIM_WINDOW + 1) * C
    for c in range(C):
        xc, yc = x[:, :, c], y[:, :, c]
        mx = _conv_valid(xc, k)
        my = _conv_valid(yc, k)
        sxx = _conv_valid(xc * xc, k) - mx * mx
        syy = _conv_valid(yc * yc, k) - my * my
        sxy = _conv_valid(xc * yc, k) - mx * my
        A1 = 2 * mx * my + SSIM_C1
        A2 = 2 * sxy + SSIM_C2
        B1 = mx * mx + my * my + SSIM_C1
        B2 = sxx + syy + SSIM_C2
        S = (A1 * A2) / (B1 * B2)
        vals.append(S.mean())
        if with_grad:
            gS = np.full(S.shape, 1.0 / n_valid)
            d_mx = gS * (2 * my * A2 / (B1 * B2) - S * 2 * mx / B1)
            d_sxx = gS * (-S / B2)
            d_sxy = gS * (2 * A1 / (B1 * B2))
            grad[:, :, c] = (
                _conv_full(d_mx - 2 * mx * d_sxx - my * d_sxy, k)
                + 2 * xc * _conv_full(d_sxx, k)
                + yc * _conv_full(d_sxy, k)
            )
    mssim = float(np.mean(vals))
    if with_grad:
        if render.ndim == 2:
            grad = grad[:, :, 0]
        return mssim, grad
    return mssim


def photometric_loss(render: np.ndarray, gt: np.ndarray, with_grad: bool = False):
    """Returns (L1, L_ssim) where L_ssim = 1 - SSIM (the dissimilarity form).

    With gradients: (L1, L_ssim, dL1/drender, dLssim/drender).
    """
    x = np.asarray(render, dtype=np.float64)
    y = np.asarray(gt, dtype=np.float64)
    diff = x - y
    l1 = float(np.mean(np.abs(diff)))
    if with_grad:
        g_l1 = np.sign(diff) / diff.size
        mssim, g_s = ssim(x, y, with_grad=True)
        return l1, 1.0 - mssim, g_l1, -g_s
    return l1, 1.0 - ssim(x, y)


def opacity_loss(o_all: np.ndarray, sky_mask: np.ndarray | None = None,
                 with_grad: bool = False):
    """Per-pixel mean of -o*log(o), plus -log(1-o) over sky pixels.

    Opacities are clamped to [1e-6, 1-1e-6] before the logs; clamped pixels
    carry no gradient.
    """
    o_raw = np.asarray(o_all, dtype=np.float64)
    o = np.clip(o_raw, _EPS, 1.0 - _EPS)
    n = o.size
    loss = float(np.sum(-o * np.log(o)) / n)
    grad = None
    if with_grad:
        grad = (-np.log(o) - 1.0) / n
    if sky_mask is not None:
        m = np.asarray(sky_mask, dtype=bool)
        loss += float(np.sum(-np.log(1.0 - o[m])) / n)
        if with_grad:
            sky_grad = np.zeros_like(o)
            sky_grad[m] = 1.0 / (1.0 - o[m]) / n
            grad = grad + sky_grad
    if with_grad:
        inside = (o_raw > _EPS) & (o_raw < 1.0 - _EPS)
        grad = np.where(inside, grad, 0.0)
        return loss, grad
    return loss


def build_knn(points: np.ndarray, k: int = 8) -> np.ndarray:
    """Indices of the k nearest neighbors (self excluded) per point."""
    pts = np.asarray(points, dtype=np.float64)
    n = pts.shape[0]
    k_eff = min(k, n - 1)
    if k_eff <= 0:
        return np.zeros((n, 0), dtype=np.int64)
    tree = cKDTree(pts)
    _, idx = tree.query(pts, k=k_eff + 1)
    return np.asarray(idx[:, 1:], dtype=np.int64)


def knn_regularizer(attrs: dict[str, np.ndarray], knn_idx: np.ndarray,
                    with_grad: bool = False):
    """Mean over Gaussians of the per-dimension std of each attribute over
    its (fixed, canonical-space) neighbor set, summed across dimensions.
    """
    n, k = knn_idx.shape
    if n == 0 or k == 0:
        return (0.0, {name: np.zeros_like(a) for name, a in attrs.items()}) \
            if with_grad else 0.0
    total = 0.0
    grads = {}
    for name, arr in attrs.items():
        a = np.asarray(arr, dtype=np.float64).reshape(n, -1)
        gathered = a[knn_idx]                      # n x k x d
        mean = gathered.mean(axis=1, keepdims=True)
        var = ((gathered - mean) ** 2).mean(axis=1)
        std = np.sqrt(var)                         # n x d
        total += float(std.sum() / n)
        if with_grad:
            # d std_nd / d a_jd = (a_jd - mean_nd) / (k * std_nd), j in N(n)
            safe = np.where(std > 1e-9, std, 1.0)
            coef = np.where(std[:, None, :] > 1e-9,
                            (gathered - mean) / (k * safe[:, None, :]), 0.0) / n
            g = np.zeros_like(a)
            np.add.at(g, knn_idx.reshape(-1),
                      coef.reshape(n * k, -1))
            grads[name] = g.reshape(np.asarray(arr).shape)
    if with_grad:
        return total, grads
    return total


def smoothness_loss(theta_track: np.ndarray, valid: np.ndarray | None = None,
                    with_grad: bool = False):
    """Second-difference penalty on pose parameters over time.

    theta_track: T x n_b x 4. For each interior frame t the residual is
    (theta_t - theta_{t-1}) + (theta_t - theta_{t+1}); the loss is the sum of
    its Euclidean norms over frames where t-1, t, t+1 are all valid.
    """
    th = np.asarray(theta_track, dtype=np.float64)
    T = th.shape[0]
    if valid is None:
        valid = np.ones(T, dtype=bool)
    loss = 0.0
    grad = np.zeros_like(th) if with_grad else None
    for t in range(1, T - 1):
        if not (valid[t - 1] and valid[t] and valid[t + 1]):
            continue
        v = 2.0 * th[t] - th[t - 1] - th[t + 1]
        norm = np.linalg.norm(v)
        loss += norm
        if with_grad and norm > 1e-12:
            unit = v / norm
            grad[t] += 2.0 * unit
            grad[t - 1] -= unit
            grad[t + 1] -= unit
    if with_grad:
        return float(loss), grad
    return float(loss)


def psnr(render: np.ndarray, gt: np.ndarray, cap: float = 99.0) -> float:
    """PSNR on the 8-bit scale; identical images report the cap."""
    a = np.asarray(render)
    b = np.asarray(gt)
    if a.dtype != np.uint8:
        a = np.clip(np.rint(np.asarray(a, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)
    if b.dtype != np.uint8:
        b = np.clip(np.rint(np.asarray(b, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)
    mse = np.mean((a.astype(np.float64) - b.astype(np.float64)) ** 2)
    if mse <= 0:
        return cap
    return min(cap, 20.0 * np.log10(255.0 / np.sqrt(mse)))
