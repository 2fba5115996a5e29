"""Real spherical harmonics up to degree 3 for view-dependent Gaussian color.

Rendered color is ``max(0, sum_i basis_i(dir) * coeff_i + 0.5)``; the 0.5
offset centers zero coefficients on mid-gray.
"""

from __future__ import annotations

import numpy as np

C0 = 0.28209479177387814
C1 = 0.4886025119029199
C2 = (1.0925484305920792, -1.0925484305920792, 0.31539156525252005,
      -1.0925484305920792, 0.5462742152960396)
C3 = (-0.5900435899266435, 2.890611442640554, -0.4570457994644658,
      0.3731763325901154, -0.4570457994644658, 1.445305721320277,
      -0.5900435899266435)


def n_coeffs(degree: int) -> int:
    return (degree + 1) ** 2


def basis(dirs: np.ndarray, degree: int) -> np.ndarray:
    """SH basis values, shape (n, (degree+1)^2), for unit directions."""
    d = np.asarray(dirs, dtype=np.float64)
    x, y, z = d[:, 0], d[:, 1], d[:, 2]
    out = [np.full(x.shape, C0)]
    if degree >= 1:
        out += [-C1 * y, C1 * z, -C1 * x]
    if degree >= 2:
        xx, yy, zz = x * x, y * y, z * z
        out += [
            C2[0] * x * y,
            C2[1] * y * z,
            C2[2] * (2 * zz - xx - yy),
            C2[3] * x * z,
            C2[4] * (xx - yy),
        ]
    if degree >= 3:
        xx, yy, zz = x * x, y * y, z * z
        out += [
            C3[0] * y * (3 * xx - yy),
            C3[1] * x * y * z,
            C3[2] * y * (4 * zz - xx - yy),
            C3[3] * z * (2 * zz - 3 * xx - 3 * yy),
            C3[4] * x * (4 * zz - xx - yy),
            C3[5] * z * (xx - yy),
            C3[6] * x * (xx - 3 * yy),
        ]
    return np.stack(out, axis=1)


def basis_jacobian(dirs: np.ndarray, degree: int) -> np.ndarray:
    """d basis / d dir, shape (n, (degree+1)^2, 3)."""
    d = np.asarray(dirs, dtype=np.float64)
    x, y, z = d[:, 0], d[:, 1], d[:, 2]
    zero = np.zeros_like(x)
    rows = [[zero, zero, zero]]
    if degree >= 1:
        one = np.ones_like(x)
        rows += [
            [zero, -C1 * one, zero],
            [zero, zero, C1 * one],
            [-C1 * one, zero, zero],
        ]
    if degree >= 2:
        rows += [
            [C2[0] * y, C2[0] * x, zero],
            [zero, C2[1] * z, C2[1] * y],
            [-2 * C2[2] * x, -2 * C2[2] * y, 4 * C2[2] * z],
            [C2[3] * z, zero, C2[3] * x],
            [2 * C2[4] * x, -2 * C2[4] * y, zero],
        ]
    if degree >= 3:
        rows += [
            [C3[0] * 6 * x * y, C3[0] * (3 * x * x - 3 * y * y), zero],
            [C3[1] * y * z, C3[1] * x * z, C3[1] * x * y],
            [-2 * C3[2] * x * y, C3[2] * (4 * z * z - x * x - 3 * y * y), 8 * C3[2] * y * z],
            [-6 * C3[3] * x * z, -6 * C3[3] * y * z, C3[3] * (6 * z * z - 3 * x * x - 3 * y * y)],
            [C3[4] * (4 * z * z - 3 * x * x - y * y), -2 * C3[4] * x * y, 8 * C3[4] * x * z],
            [2 * C3[5] * x * z, -2 * C3[5] * y * z, C3[5] * (x * x - y * y)],
            [C3[6] * (3 * x * x - 3 * y * y), -6 * C3[6] * x * y, zero],
        ]
    return np.stack([np.stack(r, axis=-1) for r in rows], axis=1)


def sh_eval(coeffs: np.ndarray, dirs: np.ndarray, degree: int):
    """Evaluate per-Gaussian color. Returns (rgb, clamp_mask).

    coeffs: (n, n_coeffs_max, 3); dirs: (n, 3) unit vectors.
    clamp_mask marks channels clipped at zero (their gradient is zero).
    """
    m = n_coeffs(degree)
    B = basis(dirs, degree)
    rgb = np.einsum("nm,nmc->nc", B, coeffs[:, :m, :]) + 0.5
    clamp = rgb < 0.0
    return np.maximum(rgb, 0.0), clamp


def sh_eval_vjp(coeffs, dirs, degree, d_rgb, clamp_mask):
    """Backward of sh_eval. Returns (d_coeffs, d_dirs)."""
    m = n_coeffs(degree)
    g = np.where(clamp_mask, 0.0, d_rgb)
    B = basis(dirs, degree)
    d_coeffs = np.zeros_like(coeffs)
    d_coeffs[:, :m, :] = B[:, :, None] * g[:, None, :]
    if degree == 0:
        return d_coeffs, np.zeros_like(dirs)
    J = basis_jacobian(dirs, degree)
    per_basis = np.einsum("nmc,nc->nm", coeffs[:, :m, :], g)
    d_dirs = np.einsum("nmd,nm->nd", J, per_basis)
    return d_coeffs, d_dirs
