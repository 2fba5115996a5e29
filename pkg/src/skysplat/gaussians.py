"""Gaussian scene representation: attribute storage, initialization from
geometry, and skinning-driven deformation of human Gaussian sets.

Attribute activations: scales are stored as logs, opacities as logits,
skinning weights as logits softmaxed per Gaussian. Human sets keep their
means/rotations in the canonical rest pose; ``deform_human`` produces the
posed copy consumed by the rasterizer and a cache for the backward pass.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from . import quatmath as qm
from .body import BodyTemplate, _fk_full, fk_backward
from .sh import C0, n_coeffs
from .tensor_io import read_tensor, write_tensor

SH_MAX_COEFFS = n_coeffs(3)


def sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def logit(p):
    return np.log(p / (1.0 - p))


def softmax(x, axis=-1):
    e = np.exp(x - np.max(x, axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


@dataclass
class GaussianSet:
    means: np.ndarray            # n x 3 (canonical rest pose for human sets)
    rotations: np.ndarray        # n x 4 quaternions
    log_scales: np.ndarray       # n x 3
    opacity_logits: np.ndarray   # n
    sh: np.ndarray               # n x 16 x 3
    tag: str = "background"      # "background" or "human:<k>"
    skin_logits: np.ndarray | None = None  # n x n_b, human sets only
    beta: np.ndarray | None = None         # shape coefficients baked at init

    def __post_init__(self):
        self.means = np.asarray(self.means, dtype=np.float64).reshape(-1, 3)
        n = self.means.shape[0]
        self.rotations = np.asarray(self.rotations, dtype=np.float64).reshape(n, 4)
        self.log_scales = np.asarray(self.log_scales, dtype=np.float64).reshape(n, 3)
        self.opacity_logits = np.asarray(self.opacity_logits, dtype=np.float64).reshape(n)
        self.sh = np.asarray(self.sh, dtype=np.float64).reshape(n, SH_MAX_COEFFS, 3)

    def __len__(self):
        return self.means.shape[0]

    @property
    def is_human(self):
        return self.tag.startswith("human")

    def scales(self):
        return np.exp(self.log_scales)

    def opacities(self):
        return sigmoid(self.opacity_logits)

    def skin_weights(self):
        return softmax(self.skin_logits, axis=1)

    def copy(self) -> "GaussianSet":
        return GaussianSet(
            self.means.copy(), self.rotations.copy(), self.log_scales.copy(),
            self.opacity_logits.copy(), self.sh.copy(), self.tag,
            None if self.skin_logits is None else self.skin_logits.copy(),
            None if self.beta is None else self.beta.copy(),
        )

    def save(self, out_dir):
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        write_tensor(out / "means.t", self.means.astype(np.float32))
        write_tensor(out / "rotations.t", self.rotations.astype(np.float32))
        write_tensor(out / "log_scales.t", self.log_scales.astype(np.float32))
        write_tensor(out / "opacity_logits.t", self.opacity_logits.astype(np.float32))
        write_tensor(out / "sh.t", self.sh.astype(np.float32))
        if self.skin_logits is not None:
            write_tensor(out / "skin_logits.t", self.skin_logits.astype(np.float32))
        meta = {"tag": self.tag}
        if self.beta is not None:
            meta["beta"] = self.beta.tolist()
        (out / "meta.json").write_text(json.dumps(meta))

    @classmethod
    def load(cls, in_dir) -> "GaussianSet":
        src = Path(in_dir)
        meta = json.loads((src / "meta.json").read_text())
        skin = None
        if (src / "skin_logits.t").exists():
            skin = read_tensor(src / "skin_logits.t").astype(np.float64)
        beta = np.asarray(meta["beta"]) if "beta" in meta else None
        return cls(
            read_tensor(src / "means.t").astype(np.float64),
            read_tensor(src / "rotations.t").astype(np.float64),
            read_tensor(src / "log_scales.t").astype(np.float64),
            read_tensor(src / "opacity_logits.t").astype(np.float64),
            read_tensor(src / "sh.t").astype(np.float64),
            meta["tag"], skin, beta,
        )


def rgb_to_sh0(rgb: np.ndarray) -> np.ndarray:
    return (np.asarray(rgb, dtype=np.float64) - 0.5) / C0


def init_background(points: np.ndarray, colors: np.ndarray,
                    opacity: float = 0.1) -> GaussianSet:
    """Seed static Gaussians on (already filtered/strided) world points.

    Colors are per-point RGB in [0,1]; isotropic scale comes from the mean
    distance to the 3 nearest neighbors.
    """
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    n = points.shape[0]
    if n == 0:
        raise ValueError("cannot initialize background from zero points")
    if n >= 4:
        tree = cKDTree(points)
        dist, _ = tree.query(points, k=4)
        nn = dist[:, 1:].mean(axis=1)
        nn = np.maximum(nn, 1e-8)
    else:
        nn = np.full(n, 0.1)
    sh = np.zeros((n, SH_MAX_COEFFS, 3))
    sh[:, 0, :] = rgb_to_sh0(colors)
    return GaussianSet(
        means=points,
        rotations=np.tile(qm.IDENTITY, (n, 1)),
        log_scales=np.log(nn)[:, None].repeat(3, axis=1),
        opacity_logits=np.full(n, logit(opacity)),
        sh=sh,
        tag="background",
    )


def filter_background_points(point_maps, confidences, human_masks=None,
                             conf_percentile=40.0, altitude_mode="low",
                             stride=4):
    """Select seed points/pixels for the background set.

    High-altitude scenes keep every (strided) point; low-altitude scenes drop
    low-confidence points and everything under a human mask.
    Returns (points, pixel_colors_source_indices) as flat index arrays per frame.
    """
    keep_masks = []
    if altitude_mode == "high":
        for conf in confidences:
            keep_masks.append(np.ones_like(conf, dtype=bool))
    else:
        flat = np.concatenate([c.reshape(-1) for c in confidences])
        thresh = np.percentile(flat, conf_percentile)
        for i, conf in enumerate(confidences):
            keep = conf >= thresh
            if human_masks is not None and human_masks[i] is not None:
                keep &= ~human_masks[i]
            keep_masks.append(keep)
    pts, sel = [], []
    for i, (pm, keep) in enumerate(zip(point_maps, keep_masks)):
        sub = np.zeros_like(keep)
        sub[::stride, ::stride] = True
        m = keep & sub
        pts.append(pm[m])
        sel.append((i, m))
    return np.concatenate(pts, axis=0), sel


def init_human(tpl: BodyTemplate, beta_mean=None, person_id: int = 0,
               opacity: float = 0.9) -> GaussianSet:
    """One Gaussian per template vertex in the rest pose (skinning attached)."""
    verts = tpl.shaped_vertices(beta_mean)
    n = verts.shape[0]
    # Scale from mean incident edge length; vertices outside any face fall
    # back to the global mean.
    edges = np.concatenate([tpl.faces[:, [0, 1]], tpl.faces[:, [1, 2]],
                            tpl.faces[:, [2, 0]]], axis=0)
    elen = np.linalg.norm(verts[edges[:, 0]] - verts[edges[:, 1]], axis=1)
    acc = np.zeros(n)
    cnt = np.zeros(n)
    np.add.at(acc, edges[:, 0], elen)
    np.add.at(acc, edges[:, 1], elen)
    np.add.at(cnt, edges[:, 0], 1)
    np.add.at(cnt, edges[:, 1], 1)
    mean_edge = elen.mean() if elen.size else 0.05
    scale = np.where(cnt > 0, acc / np.maximum(cnt, 1), mean_edge)
    scale = np.maximum(scale, 1e-6) * 0.5
    skin_logits = np.log(np.clip(tpl.weights, 1e-8, None))
    return GaussianSet(
        means=verts.copy(),
        rotations=np.tile(qm.IDENTITY, (n, 1)),
        log_scales=np.log(scale)[:, None].repeat(3, axis=1),
        opacity_logits=np.full(n, logit(opacity)),
        sh=np.zeros((n, SH_MAX_COEFFS, 3)),
        tag=f"human:{person_id}",
        skin_logits=skin_logits,
        beta=None if beta_mean is None else np.asarray(beta_mean, dtype=np.float64),
    )


# ---------------------------------------------------------------------------
# Polar decomposition with exact backward (blended LBS rotations are not
# orthonormal; the polar factor is the closest rotation).
# ---------------------------------------------------------------------------

def polar_rotation(M: np.ndarray):
    """Closest rotation to each 3x3 matrix. Returns (P, cache)."""
    U, s, Vt = np.linalg.svd(M)
    det = np.linalg.det(U @ Vt)
    # Flip the last singular direction where the product would be a reflection.
    flip = det < 0
    U = U.copy()
    s = s.copy()
    U[flip, :, 2] *= -1.0
    s[flip, 2] *= -1.0
    P = U @ Vt
    return P, {"U": U, "s": s, "Vt": Vt, "P": P}


def polar_rotation_vjp(cache, dP: np.ndarray) -> np.ndarray:
    """Backward of polar_rotation: dL/dM given dL/dP."""
    P, s, Vt = cache["P"], cache["s"], cache["Vt"]
    V = np.swapaxes(Vt, -1, -2)
    X = np.einsum("nji,njk->nik", P, dP)  # P^T dP
    B = 0.5 * (X - np.swapaxes(X, -1, -2))
    Bt = np.einsum("nji,njk,nkl->nil", V, B, V)
    denom = s[:, :, None] + s[:, None, :]
    denom = np.where(np.abs(denom) < 1e-12, 1e-12, denom)
    Ct = Bt / denom
    C = np.einsum("nij,njk,nlk->nil", V, Ct, V)
    return 2.0 * np.einsum("nij,njk->nik", P, C)


def deform_human(g_h: GaussianSet, tpl: BodyTemplate, theta, psi,
                 with_cache: bool = False):
    """Pose a canonical human Gaussian set by blended joint transforms.

    Every Gaussian gets the weight-blended rigid transform of the skinning
    joints; its rotation is left-multiplied by the polar factor of the
    blended rotation. Scales, colors and opacities are untouched.
    """
    theta = np.asarray(theta, dtype=np.float64).reshape(-1, 4)
    psi = np.asarray(psi, dtype=np.float64).reshape(3)
    B_rot, B_trans, fk_cache = _fk_full(tpl, theta, g_h.beta)
    w = g_h.skin_weights()
    R_A = np.einsum("nk,kij->nij", w, B_rot)
    T_A = w @ B_trans
    posed_means = np.einsum("nij,nj->ni", R_A, g_h.means) + T_A + psi
    P, polar_cache = polar_rotation(R_A)
    q_canon = qm.normalize(g_h.rotations)
    q_P = qm.from_matrix(P)
    posed_rot = qm.multiply(q_P, q_canon)
    posed = GaussianSet(
        means=posed_means,
        rotations=posed_rot,
        log_scales=g_h.log_scales,
        opacity_logits=g_h.opacity_logits,
        sh=g_h.sh,
        tag=g_h.tag,
        skin_logits=g_h.skin_logits,
        beta=g_h.beta,
    )
    if not with_cache:
        return posed
    cache = {
        "w": w, "B_rot": B_rot, "B_trans": B_trans, "fk_cache": fk_cache,
        "R_A": R_A, "polar": polar_cache, "q_P": q_P, "q_canon": q_canon,
        "tpl": tpl, "g_h": g_h,
    }
    return posed, cache


def deform_human_vjp(cache, d_means, d_rotations):
    """Backward of deform_human.

    Takes gradients w.r.t. the posed means/rotations, returns a dict with
    gradients for the canonical means/rotations, skinning logits, pose
    quaternions and root translation.
    """
    g_h: GaussianSet = cache["g_h"]
    tpl: BodyTemplate = cache["tpl"]
    w, B_rot, B_trans = cache["w"], cache["B_rot"], cache["B_trans"]
    R_A = cache["R_A"]
    mu = g_h.means

    d_means = np.asarray(d_means, dtype=np.float64)
    d_psi = d_means.sum(axis=0)
    d_mu = np.einsum("nji,nj->ni", R_A, d_means)
    dR_A = np.einsum("ni,nj->nij", d_means, mu)
    dT_A = d_means

    # Rotation path: posed = q_P * q_canon (bilinear in both factors).
    d_rotations = np.asarray(d_rotations, dtype=np.float64)
    dq_P = np.einsum("nij,ni->nj", qm.right_matrix(cache["q_canon"]), d_rotations)
    dq_canon = np.einsum("nij,ni->nj", qm.left_matrix(cache["q_P"]), d_rotations)
    d_rot_canon = qm.normalize_vjp(g_h.rotations, dq_canon)
    dP = qm.from_matrix_vjp(cache["polar"]["P"], dq_P)
    dR_A += polar_rotation_vjp(cache["polar"], dP)

    # Blend weights and joint transforms.
    dw = np.einsum("nij,kij->nk", dR_A, B_rot) + dT_A @ B_trans.T
    dB_rot = np.einsum("nk,nij->kij", w, dR_A)
    dB_trans = w.T @ dT_A
    # Softmax backward for the skinning logits.
    d_skin = w * (dw - np.sum(dw * w, axis=1, keepdims=True))

    d_theta = fk_backward(tpl, cache["fk_cache"], dB_rot, dB_trans)
    return {
        "means": d_mu,
        "rotations": d_rot_canon,
        "skin_logits": d_skin,
        "theta": d_theta,
        "psi": d_psi,
    }


@dataclass
class ComposedScene:
    """Concatenated attribute arrays plus per-source segment bookkeeping."""

    means: np.ndarray
    rotations: np.ndarray
    log_scales: np.ndarray
    opacity_logits: np.ndarray
    sh: np.ndarray
    segments: list = field(default_factory=list)  # (tag, start, stop)

    def __len__(self):
        return self.means.shape[0]

    def slice_grad(self, grads: dict, tag: str) -> dict:
        for seg_tag, start, stop in self.segments:
            if seg_tag == tag:
                return {k: v[start:stop] for k, v in grads.items()}
        raise KeyError(tag)


def compose(*sets: GaussianSet) -> ComposedScene:
    """Merge Gaussian sets into one render payload, preserving tags."""
    sets = [s for s in sets if s is not None and len(s) > 0]
    if not sets:
        return ComposedScene(
            np.zeros((0, 3)), np.zeros((0, 4)), np.zeros((0, 3)),
            np.zeros(0), np.zeros((0, SH_MAX_COEFFS, 3)), [],
        )
    segments = []
    start = 0
    for s in sets:
        segments.append((s.tag, start, start + len(s)))
        start += len(s)
    return ComposedScene(
        np.concatenate([s.means for s in sets]),
        np.concatenate([s.rotations for s in sets]),
        np.concatenate([s.log_scales for s in sets]),
        np.concatenate([s.opacity_logits for s in sets]),
        np.concatenate([s.sh for s in sets]),
        segments,
    )
