"""Global scale recovery: match metric bone lengths from the articulated
mesh against bone lengths lifted from the (scale-ambiguous) point maps at
detected 2D keypoints, and minimize the absolute mismatch over a single
scale factor with L-BFGS.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .body import BodyTemplate, joint_positions
from .config import ScaleConfig
from .errors import NoValidBones
from .optim import LBFGS


@dataclass
class BonePair:
    parent: int
    child: int
    tree_edge: bool = True  # torso pairs span the spine and are not edges

    def __post_init__(self):
        if self.parent == self.child:
            raise ValueError("bone pair endpoints must differ")


@dataclass
class BoneSample:
    """One usable bone observation: metric length vs unit-scale lifted length."""
    frame: int
    person: int
    pair: tuple[int, int]
    mesh_length: float    # from posed joints, metric
    lifted_length: float  # from point-map lookups at sigma = 1


@dataclass
class ScaleProblem:
    samples: list[BoneSample] = field(default_factory=list)
    sigma_init: float = 40.0
    dropped: int = 0  # non-finite / low-score lookups, for diagnostics

    def arrays(self):
        d_hat = np.array([s.mesh_length for s in self.samples])
        d_one = np.array([s.lifted_length for s in self.samples])
        return d_hat, d_one


def bone_lengths_mesh(tpl: BodyTemplate, theta, beta, pairs) -> np.ndarray:
    """Euclidean length of each joint pair on the posed metric mesh."""
    J = joint_positions(tpl, theta, beta)
    out = np.empty(len(pairs))
    for i, (p, c) in enumerate(pairs):
        out[i] = np.linalg.norm(J[p] - J[c])
    return out


MIN_BONE_SEPARATION_PX = 2.0


def bone_lengths_lifted(point_map: np.ndarray, keypoints_px: np.ndarray,
                        pairs, sigma: float = 1.0,
                        min_separation_px: float = MIN_BONE_SEPARATION_PX) -> np.ndarray:
    """Bone lengths from point-map lookups at the keypoint pixels, scaled.

    keypoints_px holds one (x, y) row per joint id (NaN where missing);
    lengths come out NaN when either endpoint is missing or non-finite.
    Bones whose endpoints project closer than ``min_separation_px`` carry no
    usable length signal (both lookups hit the same surface patch) and are
    dropped too.
    """
    H, W = point_map.shape[:2]
    out = np.full(len(pairs), np.nan)
    for i, (p, c) in enumerate(pairs):
        pa, pb = keypoints_px[p], keypoints_px[c]
        if np.any(~np.isfinite(pa)) or np.any(~np.isfinite(pb)):
            continue
        if np.linalg.norm(pa - pb) < min_separation_px:
            continue
        xa, ya = int(round(pa[0])), int(round(pa[1]))
        xb, yb = int(round(pb[0])), int(round(pb[1]))
        if not (0 <= xa < W and 0 <= ya < H and 0 <= xb < W and 0 <= yb < H):
            continue
        A = point_map[ya, xa]
        B = point_map[yb, xb]
        if np.any(~np.isfinite(A)) or np.any(~np.isfinite(B)):
            continue
        out[i] = sigma * np.linalg.norm(A - B)
    return out


def scale_loss(problem: ScaleProblem, sigma: float):
    """Sum of |mesh length - sigma * lifted length| and its d/d sigma."""
    d_hat, d_one = problem.arrays()
    if d_hat.size == 0:
        raise NoValidBones("scale problem has no usable bone samples")
    r = d_hat - sigma * d_one
    loss = float(np.sum(np.abs(r)))
    grad = float(np.sum(-np.sign(r) * d_one))
    return loss, grad


def scale_loss_vector(problem: ScaleProblem, sigma: float):
    """Alternative reading: vector residual per bone (orientation-sensitive).

    Only meaningful when the problem stores vector data; with scalar lengths
    it coincides with scale_loss. Kept behind ScaleConfig.vector_residual.
    """
    return scale_loss(problem, sigma)


def grid_minimum(problem: ScaleProblem, lo: float, hi: float,
                 resolution: float = 0.01) -> float:
    """Brute-force reference: argmin of the loss on a uniform grid."""
    d_hat, d_one = problem.arrays()
    grid = np.arange(lo, hi + resolution, resolution)
    vals = np.abs(d_hat[None, :] - grid[:, None] * d_one[None, :]).sum(axis=1)
    return float(grid[np.argmin(vals)])


def optimize_scale(problem: ScaleProblem, learning_rate: float = 0.1,
                   steps: int = 30):
    """L-BFGS over the scalar scale. Returns (sigma*, loss trace)."""
    d_hat, d_one = problem.arrays()
    if d_hat.size == 0 or not np.any(d_one > 0):
        raise NoValidBones("scale problem has no usable bone samples")

    def f_grad(x):
        val, g = scale_loss(problem, float(x[0]))
        return val, np.array([g])

    opt = LBFGS(lr=learning_rate)
    x, fx, trace = opt.minimize(f_grad, np.array([problem.sigma_init]),
                                steps=steps)
    sigma = float(abs(x[0]))
    if sigma <= 0:
        raise NoValidBones("scale optimization collapsed to zero")
    return sigma, trace


def residual_report(problem: ScaleProblem, sigma: float) -> dict:
    """Per-bone residuals at the optimum, for the JSON/figure report."""
    d_hat, d_one = problem.arrays()
    res = d_hat - sigma * d_one
    return {
        "sigma": sigma,
        "n_samples": int(d_hat.size),
        "n_dropped": int(problem.dropped),
        "residuals": res.tolist(),
        "abs_residual_mean": float(np.mean(np.abs(res))) if d_hat.size else 0.0,
    }


def sample_scale_problem(tpl: BodyTemplate, tracks: dict, point_maps: dict,
                         keypoints: dict, cfg: ScaleConfig,
                         keypoint_score_min: float = 0.3) -> ScaleProblem:
    """Deterministic sample selection.

    tracks: {person_id: {frame: (theta, beta)}} for usable frames.
    point_maps: {frame: H x W x 3}; keypoints: {(frame, person): K x 3 COCO
    rows (x, y, score)}. People are ranked by mean keypoint score, frames
    taken from the first appearance at the configured stride.
    """
    coco_ids = tpl.coco_joint_ids()
    pairs = list(tpl.body_bone_pairs)
    if not pairs:
        raise NoValidBones("body template declares no bone pairs")
    pair_arr = [(int(p), int(c)) for p, c in pairs]

    def person_score(pid):
        scores = [kp[:, 2].mean() for (f, k), kp in keypoints.items() if k == pid]
        return -(np.mean(scores) if scores else 0.0), pid

    people = sorted(tracks.keys(), key=person_score)
    n_people = min(len(people), cfg.n_people_max)
    people = people[:n_people]

    problem = ScaleProblem(sigma_init=cfg.sigma_init)
    n_joints = tpl.n_joints
    for pid in people:
        frames = sorted(f for f in tracks[pid].keys()
                        if f in point_maps and (f, pid) in keypoints)
        if not frames:
            continue
        chosen = frames[0::cfg.frame_stride][:cfg.n_frames]
        for f in chosen:
            theta, beta = tracks[pid][f]
            kp = keypoints[(f, pid)]
            # Map COCO keypoints onto template joints.
            joints_px = np.full((n_joints, 2), np.nan)
            for coco_idx, joint_id in enumerate(coco_ids):
                if joint_id < 0 or coco_idx >= kp.shape[0]:
                    continue
                if kp[coco_idx, 2] < keypoint_score_min:
                    continue
                joints_px[joint_id] = kp[coco_idx, :2]
            mesh_len = bone_lengths_mesh(tpl, theta, beta, pair_arr)
            lifted = bone_lengths_lifted(point_maps[f], joints_px, pair_arr, 1.0)
            for i, pair in enumerate(pair_arr):
                if np.isfinite(lifted[i]) and lifted[i] > 1e-12:
                    problem.samples.append(BoneSample(
                        frame=f, person=pid, pair=pair,
                        mesh_length=float(mesh_len[i]),
                        lifted_length=float(lifted[i])))
                else:
                    problem.dropped += 1
    return problem
