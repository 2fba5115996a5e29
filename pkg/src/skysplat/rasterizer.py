"""Differentiable Gaussian rasterizer (forward and backward), CPU-vectorized.

Forward semantics per pixel, over Gaussians sorted front-to-back by camera
depth: alpha = min(0.99, opacity * exp(power)) from the EWA-projected 2D
covariance (0.3 px low-pass added); contributions are culled where the
Mahalanobis distance exceeds 3 or alpha < 1/255; blending stops once
transmittance would drop below 1e-4. Pixels are sampled at integer
coordinates.

With ``cull=False`` every Gaussian blends over every pixel with no alpha
floor or early stop; that path is exactly differentiable and is what the
finite-difference gradient suite exercises (the cull approximation is
separately bounded against it).

Instead of a per-tile loop, pairs (Gaussian, pixel) are sorted by pixel with
depth rank as the tie-break, and transmittance comes from a segmented prefix
sum of log(1 - alpha) per pixel. This reproduces the sequential blend exactly
while keeping every stage a flat numpy pass.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import quatmath as qm
from . import sh as shlib
from .camera import CameraPose
from .gaussians import sigmoid

ALPHA_CLAMP = 0.99
ALPHA_MIN = 1.0 / 255.0
T_STOP = 1e-4
BLUR = 0.3
ZNEAR = 1e-6


@dataclass
class RenderTape:
    """Forward-pass intermediates required by the backward pass."""

    cam: CameraPose
    width: int
    height: int
    sh_degree: int
    cull: bool
    n_total: int
    order: np.ndarray          # sorted-gaussian -> original index
    # Per sorted Gaussian:
    t_cam: np.ndarray          # camera-frame positions
    xp: np.ndarray             # fov-clamped tx, ty used by the EWA Jacobian
    clamped_xy: np.ndarray     # bool (n,2), where the fov clamp was active
    J: np.ndarray              # n x 2 x 3 EWA Jacobians
    M: np.ndarray              # n x 3 x 3 rotation*scale factors
    conic: np.ndarray          # n x 3 packed inverse 2D covariance (a, b, c)
    mean2d: np.ndarray
    color: np.ndarray
    sh_clamp: np.ndarray
    dirs: np.ndarray
    opacity: np.ndarray
    radius: np.ndarray
    # Pair arrays, sorted by (pixel, depth rank):
    pix: np.ndarray
    rank: np.ndarray
    alpha: np.ndarray
    t_before: np.ndarray
    contrib: np.ndarray
    seg_start: np.ndarray      # first pair index of each pixel segment
    t_term: np.ndarray         # per-pixel terminal transmittance (flat)

    def replay_image(self) -> np.ndarray:
        """Re-blend the stored pairs; must reproduce the forward image."""
        img = _blend_image(self.pix, self.rank, self.alpha, self.t_before,
                           self.contrib, self.color, self.width * self.height)
        return img.reshape(self.height, self.width, 3)


@dataclass
class RenderResult:
    image: np.ndarray      # H x W x 3, black behind fully transparent pixels
    opacity: np.ndarray    # H x W, equals 1 - terminal transmittance
    tape: RenderTape


def _blend_image(pix, rank, alpha, t_before, contrib, color, n_pix):
    w = alpha * t_before * contrib
    img = np.empty((n_pix, 3))
    for ch in range(3):
        img[:, ch] = np.bincount(pix, weights=w * color[rank, ch], minlength=n_pix)
    return img


def _segment_bases(values, seg_start, seg_len):
    """For a cumsum array, the inclusive total just before each segment."""
    base = np.where(seg_start > 0, values[np.maximum(seg_start - 1, 0)], 0.0)
    base[seg_start == 0] = 0.0
    return np.repeat(base, seg_len)


def rasterize(scene, cam: CameraPose, width: int, height: int,
              sh_degree: int = 3, cull: bool = True) -> RenderResult:
    """Render a Gaussian collection; returns image, opacity map, and tape."""
    means = np.asarray(scene.means, dtype=np.float64)
    n_total = means.shape[0]
    empty_tape = None
    if n_total == 0:
        return _empty_result(cam, width, height, sh_degree, cull, 0)

    t_all = means @ cam.R.T + cam.T
    z_all = t_all[:, 2]
    fx, fy = cam.K[0, 0], cam.K[1, 1]
    cx, cy = cam.K[0, 2], cam.K[1, 2]
    tan_fovx = width / (2.0 * fx)
    tan_fovy = height / (2.0 * fy)

    infront = z_all > ZNEAR
    if not np.any(infront):
        return _empty_result(cam, width, height, sh_degree, cull, n_total)

    # Projected means and EWA-projected covariances for the visible subset.
    idx0 = np.nonzero(infront)[0]
    t = t_all[idx0]
    z = t[:, 2]
    mean2d = np.stack([fx * t[:, 0] / z + cx, fy * t[:, 1] / z + cy], axis=1)

    u = qm.normalize(np.asarray(scene.rotations, dtype=np.float64)[idx0])
    Rq = qm.to_matrix(u)
    S = np.exp(np.asarray(scene.log_scales, dtype=np.float64)[idx0])
    M = Rq * S[:, None, :]
    sigma3 = M @ np.swapaxes(M, 1, 2)

    ratio_x = t[:, 0] / z
    ratio_y = t[:, 1] / z
    lim_x, lim_y = 1.3 * tan_fovx, 1.3 * tan_fovy
    clamped_x = np.abs(ratio_x) > lim_x
    clamped_y = np.abs(ratio_y) > lim_y
    xp = np.stack([np.clip(ratio_x, -lim_x, lim_x) * z,
                   np.clip(ratio_y, -lim_y, lim_y) * z], axis=1)

    J = np.zeros((t.shape[0], 2, 3))
    J[:, 0, 0] = fx / z
    J[:, 0, 2] = -fx * xp[:, 0] / z**2
    J[:, 1, 1] = fy / z
    J[:, 1, 2] = -fy * xp[:, 1] / z**2

    W3 = np.einsum("ij,njk,lk->nil", cam.R, sigma3, cam.R)
    cov2 = np.einsum("nij,njk,nlk->nil", J, W3, J)
    cov2[:, 0, 0] += BLUR
    cov2[:, 1, 1] += BLUR
    a2, b2, c2 = cov2[:, 0, 0], cov2[:, 0, 1], cov2[:, 1, 1]
    det = a2 * c2 - b2 * b2
    ok = det > 1e-12
    det = np.where(ok, det, 1.0)
    conic = np.stack([c2 / det, -b2 / det, a2 / det], axis=1)

    mid = 0.5 * (a2 + c2)
    lam1 = mid + np.sqrt(np.maximum(0.1, mid * mid - det))
    radius = np.ceil(3.0 * np.sqrt(lam1))

    dirs_raw = means[idx0] - cam.center
    dirs = dirs_raw / np.linalg.norm(dirs_raw, axis=1, keepdims=True)
    sh_coeffs = np.asarray(scene.sh, dtype=np.float64)[idx0]
    color, sh_clamp = shlib.sh_eval(sh_coeffs, dirs, sh_degree)
    opacity = sigmoid(np.asarray(scene.opacity_logits, dtype=np.float64)[idx0])

    # Global front-to-back order.
    depth_order = np.argsort(z, kind="stable")

    if cull:
        # Largest Mahalanobis radius that can still contribute: the 3-sigma
        # bound or the alpha >= 1/255 level set, whichever is smaller. The
        # per-axis extents of that ellipse give an exact bounding box.
        with np.errstate(divide="ignore", invalid="ignore"):
            q_max = np.minimum(9.0, 2.0 * np.log(255.0 * opacity))
        q_max = np.maximum(q_max, 0.0)
        rx = np.sqrt(q_max * np.maximum(a2, 0.0))
        ry = np.sqrt(q_max * np.maximum(c2, 0.0))
        x0 = np.floor(mean2d[:, 0] - rx)
        x1 = np.ceil(mean2d[:, 0] + rx)
        y0 = np.floor(mean2d[:, 1] - ry)
        y1 = np.ceil(mean2d[:, 1] + ry)
        visible = (ok & (opacity * 255.0 > 1.0)
                   & (x1 >= 0) & (x0 <= width - 1) & (y1 >= 0) & (y0 <= height - 1))
    else:
        x0 = np.full(z.shape, 0.0)
        x1 = np.full(z.shape, float(width - 1))
        y0 = np.full(z.shape, 0.0)
        y1 = np.full(z.shape, float(height - 1))
        visible = ok

    keep_sorted = depth_order[visible[depth_order]]
    order = idx0[keep_sorted]  # sorted-gaussian -> original index

    # Reindex per-gaussian arrays into sorted order.
    def srt(arr):
        return arr[keep_sorted]

    t, z, mean2d, conic, radius = srt(t), srt(z), srt(mean2d), srt(conic), srt(radius)
    xp, J, M = srt(xp), srt(J), srt(M)
    clamped_xy = np.stack([srt(clamped_x), srt(clamped_y)], axis=1)
    color, sh_clamp, dirs, opacity = srt(color), srt(sh_clamp), srt(dirs), srt(opacity)

    bx0 = np.clip(srt(x0), 0, width - 1).astype(np.int64)
    bx1 = np.clip(srt(x1), 0, width - 1).astype(np.int64)
    by0 = np.clip(srt(y0), 0, height - 1).astype(np.int64)
    by1 = np.clip(srt(y1), 0, height - 1).astype(np.int64)

    widths = bx1 - bx0 + 1
    heights = by1 - by0 + 1
    areas = widths * heights
    total = int(areas.sum())
    if total == 0:
        return _empty_result(cam, width, height, sh_degree, cull, n_total)

    rank = np.repeat(np.arange(len(order)), areas)
    starts = np.concatenate([[0], np.cumsum(areas)[:-1]])
    local = np.arange(total) - np.repeat(starts, areas)
    w_rep = np.repeat(widths, areas)
    px = np.repeat(bx0, areas) + local % w_rep
    py = np.repeat(by0, areas) + local // w_rep

    dx = mean2d[rank, 0] - px
    dy = mean2d[rank, 1] - py
    ca, cb, cc = conic[rank, 0], conic[rank, 1], conic[rank, 2]
    power = -0.5 * (ca * dx * dx + cc * dy * dy) - cb * dx * dy
    alpha = np.minimum(ALPHA_CLAMP, opacity[rank] * np.exp(power))

    if cull:
        q_srt = srt(q_max)
        keep = (power <= 0.0) & (-2.0 * power <= q_srt[rank])
        rank, px, py, alpha = rank[keep], px[keep], py[keep], alpha[keep]
    if rank.size == 0:
        return _empty_result(cam, width, height, sh_degree, cull, n_total)

    # Pairs arrive rank-major, so a stable sort on the pixel key alone yields
    # (pixel, depth-rank) order.
    pix = (py * width + px).astype(np.int32)
    perm = np.argsort(pix, kind="stable")
    pix, rank, alpha = pix[perm], rank[perm], alpha[perm]

    new_seg = np.empty(pix.shape, dtype=bool)
    new_seg[0] = True
    new_seg[1:] = pix[1:] != pix[:-1]
    seg_start = np.nonzero(new_seg)[0]
    seg_len = np.diff(np.append(seg_start, pix.size))

    log1m = np.log1p(-alpha)
    csum = np.cumsum(log1m)
    logT_incl = csum - _segment_bases(csum, seg_start, seg_len)
    t_before = np.exp(logT_incl - log1m)
    t_incl = np.exp(logT_incl)

    if cull:
        contrib = (t_incl >= T_STOP).astype(np.float64)
    else:
        contrib = np.ones_like(alpha)

    n_pix = width * height
    img = _blend_image(pix, rank, alpha, t_before, contrib, color, n_pix)

    # Terminal transmittance: within a segment transmittance is monotone
    # decreasing and the contribution mask is a prefix, so the last
    # contributing pair carries the final value.
    t_term = np.ones(n_pix)
    ccs = np.cumsum(contrib)
    seg_end = seg_start + seg_len - 1
    base = np.where(seg_start > 0, ccs[np.maximum(seg_start - 1, 0)], 0.0)
    base[seg_start == 0] = 0.0
    contrib_counts = np.rint(ccs[seg_end] - base).astype(np.int64)
    has = contrib_counts > 0
    last_idx = seg_start[has] + contrib_counts[has] - 1
    t_term[pix[seg_start[has]]] = t_incl[last_idx]

    tape = RenderTape(
        cam=cam, width=width, height=height, sh_degree=sh_degree, cull=cull,
        n_total=n_total, order=order, t_cam=t, xp=xp, clamped_xy=clamped_xy,
        J=J, M=M, conic=conic, mean2d=mean2d, color=color, sh_clamp=sh_clamp,
        dirs=dirs, opacity=opacity, radius=radius, pix=pix, rank=rank,
        alpha=alpha, t_before=t_before, contrib=contrib, seg_start=seg_start,
        t_term=t_term,
    )
    return RenderResult(
        image=img.reshape(height, width, 3),
        opacity=(1.0 - t_term).reshape(height, width),
        tape=tape,
    )


def _empty_result(cam, width, height, sh_degree, cull, n_total):
    tape = RenderTape(
        cam=cam, width=width, height=height, sh_degree=sh_degree, cull=cull,
        n_total=n_total, order=np.zeros(0, dtype=np.int64),
        t_cam=np.zeros((0, 3)), xp=np.zeros((0, 2)),
        clamped_xy=np.zeros((0, 2), dtype=bool), J=np.zeros((0, 2, 3)),
        M=np.zeros((0, 3, 3)), conic=np.zeros((0, 3)), mean2d=np.zeros((0, 2)),
        color=np.zeros((0, 3)), sh_clamp=np.zeros((0, 3), dtype=bool),
        dirs=np.zeros((0, 3)), opacity=np.zeros(0), radius=np.zeros(0),
        pix=np.zeros(0, dtype=np.int64), rank=np.zeros(0, dtype=np.int64),
        alpha=np.zeros(0), t_before=np.zeros(0), contrib=np.zeros(0),
        seg_start=np.zeros(0, dtype=np.int64), t_term=np.ones(width * height),
    )
    return RenderResult(
        image=np.zeros((height, width, 3)),
        opacity=np.zeros((height, width)),
        tape=tape,
    )


def rasterize_backward(tape: RenderTape, d_image: np.ndarray,
                       d_opacity: np.ndarray | None = None,
                       scene=None) -> dict:
    """Analytic adjoint of ``rasterize``.

    Returns gradients w.r.t. every Gaussian attribute (means, rotations,
    log-scales, opacity logits, SH coefficients) plus densification
    statistics (per-Gaussian accumulated |view-space positional gradient| in
    half-image units and contribution counts).

    ``scene`` must be the collection that was rendered; it supplies the raw
    rotation parameters for the normalization backward.
    """
    n_total = tape.n_total
    grads = {
        "means": np.zeros((n_total, 3)),
        "rotations": np.zeros((n_total, 4)),
        "log_scales": np.zeros((n_total, 3)),
        "opacity_logits": np.zeros(n_total),
        "sh": np.zeros((n_total, 16, 3)),
    }
    stats = {
        "abs_grad2d": np.zeros(n_total),
        "touched": np.zeros(n_total, dtype=np.int64),
        "radius": np.zeros(n_total),
    }
    n_sorted = len(tape.order)
    if n_sorted == 0 or tape.pix.size == 0:
        return {**grads, **stats}

    cam, W, H = tape.cam, tape.width, tape.height
    fx, fy = cam.K[0, 0], cam.K[1, 1]
    pix, rank = tape.pix, tape.rank
    alpha, t_before, contrib = tape.alpha, tape.t_before, tape.contrib
    color = tape.color
    seg_start = tape.seg_start
    seg_len = np.diff(np.append(seg_start, pix.size))

    g_rgb = d_image.reshape(-1, 3)[pix]

    # Suffix sums of later contributions within each pixel segment.
    contrib_rgb = (alpha * t_before * contrib)[:, None] * color[rank]
    csum = np.cumsum(contrib_rgb, axis=0)
    base = np.where(seg_start[:, None] > 0, csum[np.maximum(seg_start - 1, 0)], 0.0)
    base[seg_start == 0] = 0.0
    seg_end = seg_start + seg_len - 1
    totals = csum[seg_end] - base
    suffix = np.repeat(totals, seg_len, axis=0) - (csum - np.repeat(base, seg_len, axis=0))

    one_minus = 1.0 - alpha
    d_alpha = np.einsum(
        "kc,kc->k", g_rgb, color[rank] * t_before[:, None] - suffix / one_minus[:, None]
    )
    if d_opacity is not None:
        g_o = d_opacity.reshape(-1)[pix]
        d_alpha += g_o * tape.t_term[pix] / one_minus
    d_alpha *= contrib

    # alpha = min(0.99, o * exp(power)); gradients vanish where clamped.
    unclamped = alpha < ALPHA_CLAMP
    opac = tape.opacity
    G_pair = alpha / opac[rank]
    d_opac_sorted = np.bincount(rank, weights=d_alpha * G_pair * unclamped,
                                minlength=n_sorted)
    d_power = d_alpha * alpha * unclamped

    px = pix % W
    py = pix // W
    dx = tape.mean2d[rank, 0] - px
    dy = tape.mean2d[rank, 1] - py
    ca, cb, cc = tape.conic[rank, 0], tape.conic[rank, 1], tape.conic[rank, 2]
    gmx = d_power * (-(ca * dx + cb * dy))
    gmy = d_power * (-(cb * dx + cc * dy))
    d_mean2d = np.stack([
        np.bincount(rank, weights=gmx, minlength=n_sorted),
        np.bincount(rank, weights=gmy, minlength=n_sorted),
    ], axis=1)
    # AbsGS-style statistic: per-view sum of |pixel gradients|, expressed in
    # half-image units so thresholds match the usual convention.
    abs2d = np.stack([
        np.bincount(rank, weights=np.abs(gmx), minlength=n_sorted) * (W / 2.0),
        np.bincount(rank, weights=np.abs(gmy), minlength=n_sorted) * (H / 2.0),
    ], axis=1)
    d_conic = np.stack([
        np.bincount(rank, weights=d_power * (-0.5 * dx * dx), minlength=n_sorted),
        np.bincount(rank, weights=d_power * (-dx * dy), minlength=n_sorted),
        np.bincount(rank, weights=d_power * (-0.5 * dy * dy), minlength=n_sorted),
    ], axis=1)

    d_color = np.stack([
        np.bincount(rank, weights=g_rgb[:, ch] * alpha * t_before * contrib,
                    minlength=n_sorted)
        for ch in range(3)
    ], axis=1)

    # conic = inv(cov2): d_cov2 = -conic @ d_conic_mat @ conic.
    conic_mat = np.zeros((n_sorted, 2, 2))
    conic_mat[:, 0, 0] = tape.conic[:, 0]
    conic_mat[:, 0, 1] = conic_mat[:, 1, 0] = tape.conic[:, 1]
    conic_mat[:, 1, 1] = tape.conic[:, 2]
    d_conic_mat = np.zeros((n_sorted, 2, 2))
    d_conic_mat[:, 0, 0] = d_conic[:, 0]
    d_conic_mat[:, 0, 1] = d_conic_mat[:, 1, 0] = 0.5 * d_conic[:, 1]
    d_conic_mat[:, 1, 1] = d_conic[:, 2]
    d_cov2 = -np.einsum("nij,njk,nkl->nil", conic_mat, d_conic_mat, conic_mat)

    # cov2 = J W3 J^T (+ blur), W3 = V sigma3 V^T, sigma3 = M M^T.
    V = cam.R
    sigma3 = tape.M @ np.swapaxes(tape.M, 1, 2)
    W3 = np.einsum("ij,njk,lk->nil", V, sigma3, V)
    JW3 = np.einsum("nij,njk->nik", tape.J, W3)
    d_J = 2.0 * np.einsum("nij,njk->nik", d_cov2, JW3)
    d_W3 = np.einsum("nji,njk,nkl->nil", tape.J, d_cov2, tape.J)
    d_sigma3 = np.einsum("ji,njk,kl->nil", V, d_W3, V)
    d_M = 2.0 * np.einsum("nij,njk->nik", d_sigma3, tape.M)

    S = np.linalg.norm(tape.M, axis=1)  # column norms = exp(log_scales)
    Rq = tape.M / S[:, None, :]
    d_Rq = d_M * S[:, None, :]
    d_S = np.einsum("nij,nij->nj", d_M, Rq)
    d_log_scales_sorted = d_S * S

    raw_q = np.asarray(scene.rotations, dtype=np.float64)[tape.order]
    dq_unit = qm.to_matrix_vjp(qm.normalize(raw_q), d_Rq)
    d_rot_sorted = qm.normalize_vjp(raw_q, dq_unit)

    # EWA Jacobian entries back to the camera-frame point.
    z = tape.t_cam[:, 2]
    xpx, xpy = tape.xp[:, 0], tape.xp[:, 1]
    d_xp_x = d_J[:, 0, 2] * (-fx / z**2)
    d_xp_y = d_J[:, 1, 2] * (-fy / z**2)
    d_z = (d_J[:, 0, 0] * (-fx / z**2) + d_J[:, 0, 2] * (2.0 * fx * xpx / z**3)
           + d_J[:, 1, 1] * (-fy / z**2) + d_J[:, 1, 2] * (2.0 * fy * xpy / z**3))
    cl_x, cl_y = tape.clamped_xy[:, 0], tape.clamped_xy[:, 1]
    d_tx = np.where(cl_x, 0.0, d_xp_x)
    d_ty = np.where(cl_y, 0.0, d_xp_y)
    d_z = d_z + np.where(cl_x, d_xp_x * xpx / z, 0.0) + np.where(cl_y, d_xp_y * xpy / z, 0.0)

    # Projection of the mean.
    tx, ty = tape.t_cam[:, 0], tape.t_cam[:, 1]
    d_tx += d_mean2d[:, 0] * fx / z
    d_ty += d_mean2d[:, 1] * fy / z
    d_z += d_mean2d[:, 0] * (-fx * tx / z**2) + d_mean2d[:, 1] * (-fy * ty / z**2)
    d_t = np.stack([d_tx, d_ty, d_z], axis=1)

    # Color path: SH coefficients and view directions.
    sh_coeffs = np.asarray(scene.sh, dtype=np.float64)[tape.order]
    d_sh_sorted, d_dirs = shlib.sh_eval_vjp(sh_coeffs, tape.dirs, tape.sh_degree,
                                            d_color, tape.sh_clamp)
    # dirs = (p - c)/|p - c| and p - c = V^T t; tangent-project then scale.
    r_len = np.linalg.norm(tape.t_cam, axis=1, keepdims=True)
    d_means_dir = (d_dirs - tape.dirs * np.sum(tape.dirs * d_dirs, axis=1, keepdims=True)) / r_len

    d_means_sorted = d_t @ V + d_means_dir

    o = tape.opacity
    d_logit_sorted = d_opac_sorted * o * (1.0 - o)

    # Each original index appears at most once in the sorted order.
    order = tape.order
    grads["means"][order] = d_means_sorted
    grads["rotations"][order] = d_rot_sorted
    grads["log_scales"][order] = d_log_scales_sorted
    grads["opacity_logits"][order] = d_logit_sorted
    grads["sh"][order] = d_sh_sorted

    stats["abs_grad2d"][order] = np.linalg.norm(abs2d, axis=1)
    stats["touched"][order] = np.bincount(rank, weights=contrib,
                                          minlength=n_sorted).astype(np.int64)
    stats["radius"][order] = tape.radius
    return {**grads, **stats}
