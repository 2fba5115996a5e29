"""Deterministic synthetic scenes with full ground truth.

A textured ground plane and capsule-rig humans on scripted walks are frozen
as ground-truth Gaussians and rendered by the package's own rasterizer into
fixture images. Point maps are the true per-pixel geometry divided by the
requested scale factor (emulating the scale ambiguity of monocular
reconstruction); manifest cameras carry the correspondingly divided
translations. Confidence is low on human pixels, keypoints are projected
joints with optional noise and occlusion-based scores, masks are exact
mesh-visibility silhouettes.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from . import quatmath as qm
from .background import BackgroundMesh, render_depth
from .body import (BodyTemplate, joint_positions, lbs_vertices,
                   make_humanoid_rig, save_template)
from .camera import CameraPose, project_many
from .config import COCO_KEYPOINT_NAMES, SceneConfig
from .gaussians import GaussianSet, compose, deform_human, init_human, logit, rgb_to_sh0
from .rasterizer import rasterize
from .tensor_io import write_tensor


def _look_at(center: np.ndarray, target: np.ndarray) -> CameraPose | tuple:
    fwd = target - center
    fwd = fwd / np.linalg.norm(fwd)
    right = np.cross(fwd, np.array([0.0, 0.0, 1.0]))
    nr = np.linalg.norm(right)
    if nr < 1e-9:
        right = np.array([1.0, 0.0, 0.0])
    else:
        right = right / nr
    down = np.cross(fwd, right)
    R = np.stack([right, down, fwd], axis=0)
    T = -R @ center
    return R, T


def _ground_texture(rng: np.random.Generator, cells: int = 40,
                    span: float = 30.0):
    grid = rng.uniform(0.15, 0.85, size=(cells, cells, 3))

    def sample(xy):
        u = (xy[:, 0] / span + 0.5) * (cells - 1)
        v = (xy[:, 1] / span + 0.5) * (cells - 1)
        u = np.clip(u, 0, cells - 1 - 1e-9)
        v = np.clip(v, 0, cells - 1 - 1e-9)
        iu, iv = u.astype(int), v.astype(int)
        fu, fv = (u - iu)[:, None], (v - iv)[:, None]
        c = (grid[iu, iv] * (1 - fu) * (1 - fv)
             + grid[iu + 1, iv] * fu * (1 - fv)
             + grid[iu, iv + 1] * (1 - fu) * fv
             + grid[iu + 1, iv + 1] * fu * fv)
        return c

    return sample


_PART_OF_JOINT = {
    0: "pants", 1: "pants", 2: "pants", 3: "shirt", 4: "pants", 5: "pants",
    6: "shirt", 7: "shoes", 8: "shoes", 9: "shirt", 10: "shoes", 11: "shoes",
    12: "skin", 13: "shirt", 14: "shirt", 15: "skin", 16: "shirt",
    17: "shirt", 18: "skin", 19: "skin", 20: "skin", 21: "skin",
    22: "skin", 23: "skin",
}


def _human_colors(tpl: BodyTemplate, rng: np.random.Generator) -> np.ndarray:
    palette = {
        "skin": np.array([0.78, 0.62, 0.52]),
        "shirt": rng.uniform(0.2, 0.95, 3),
        "pants": rng.uniform(0.1, 0.6, 3),
        "shoes": np.array([0.15, 0.15, 0.18]),
    }
    dominant = np.argmax(tpl.weights, axis=1)
    colors = np.stack([palette[_PART_OF_JOINT[int(j)]] for j in dominant])
    return np.clip(colors + rng.normal(0, 0.02, colors.shape), 0.02, 0.98)


def _walk_pose(tpl: BodyTemplate, phase: float, heading: float,
               gait: float = 0.45) -> np.ndarray:
    """Scripted walk cycle: root yaw to the heading, sinusoidal limb swing."""
    theta = np.tile(qm.IDENTITY, (tpl.n_joints, 1))

    def axis_angle(axis, ang):
        axis = np.asarray(axis, dtype=np.float64)
        axis = axis / np.linalg.norm(axis)
        return np.concatenate([[np.cos(ang / 2)], np.sin(ang / 2) * axis])

    theta[0] = axis_angle([0, 0, 1], heading)
    swing = gait * np.sin(phase)
    theta[1] = axis_angle([0, 1, 0], swing)        # left hip
    theta[2] = axis_angle([0, 1, 0], -swing)       # right hip
    theta[4] = axis_angle([0, 1, 0], 1.1 * gait * max(0.0, -np.sin(phase)))
    theta[5] = axis_angle([0, 1, 0], 1.1 * gait * max(0.0, np.sin(phase)))
    # Arms hang slightly abducted (clear of the thighs) and swing
    # opposite the legs.
    theta[16] = qm.multiply(axis_angle([0, 1, 0], -0.3 * np.sin(phase)),
                            axis_angle([1, 0, 0], -1.1))
    theta[17] = qm.multiply(axis_angle([0, 1, 0], 0.3 * np.sin(phase)),
                            axis_angle([1, 0, 0], 1.1))
    theta[18] = axis_angle([0, 1, 0], -0.25)       # slight elbow bend
    theta[19] = axis_angle([0, 1, 0], -0.25)
    return theta


def _human_mesh_depth(tpl, theta, psi, cam, width, height):
    verts = lbs_vertices(tpl, theta, None, psi)
    mesh = BackgroundMesh(verts, tpl.faces)
    return render_depth(mesh, cam, width, height)


def generate_scene(out_dir, seed: int = 0, n_frames: int = 48,
                   n_people: int = 3, true_scale: float = 40.0,
                   altitude: float = 20.0, noise: float = 0.01,
                   width: int = 96, height: int = 64,
                   orbit_radius: float = 30.0, focal: float = 420.0,
                   config: dict | None = None,
                   render_images: bool = True,
                   gait_amplitude: float = 0.45) -> Path:
    """Write a complete synthetic scene; returns the manifest path."""
    out = Path(out_dir)
    for sub in ("images", "point_maps", "confidence", "masks", "keypoints"):
        (out / sub).mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)

    tpl = make_humanoid_rig()
    save_template(tpl, out / "template")

    K = np.array([[focal, 0.0, width / 2.0 - 0.5],
                  [0.0, focal, height / 2.0 - 0.5],
                  [0.0, 0.0, 1.0]])

    # Ground-truth Gaussians: textured ground plane (only materialized when
    # images are rendered; geometry-only fixtures skip it).
    gsd = altitude / focal
    spacing = 1.4 * gsd
    half = 0.62 * max(width, height) * gsd + orbit_radius * 0.35
    bg_gt = None
    if render_images:
        ticks = np.arange(-half, half + spacing, spacing)
        gx, gy = np.meshgrid(ticks, ticks)
        ground_xy = np.stack([gx.ravel(), gy.ravel()], axis=1)
        texture = _ground_texture(rng, span=2.2 * half)
        g_colors = texture(ground_xy)
        n_g = ground_xy.shape[0]
        bg_gt = GaussianSet(
            means=np.concatenate([ground_xy, np.zeros((n_g, 1))], axis=1),
            rotations=np.tile(qm.IDENTITY, (n_g, 1)),
            log_scales=np.full((n_g, 3), np.log(0.65 * spacing)),
            opacity_logits=np.full(n_g, logit(0.97)),
            sh=np.concatenate([rgb_to_sh0(g_colors)[:, None, :],
                               np.zeros((n_g, 15, 3))], axis=1),
            tag="background",
        )
    else:
        rng.uniform(0.15, 0.85, size=(40, 40, 3))  # keep the draw order stable

    # Ground-truth humans: colored template Gaussians on scripted walks.
    people = []
    for k in range(n_people):
        g_h = init_human(tpl, person_id=k, opacity=0.985)
        g_h.sh[:, 0, :] = rgb_to_sh0(_human_colors(tpl, rng))
        g_h.log_scales += np.log(1.35)
        start = rng.uniform(-2.0, 2.0, 2)
        heading = rng.uniform(0, 2 * np.pi)
        speed = rng.uniform(0.02, 0.045)
        people.append({"set": g_h, "start": start, "heading": heading,
                       "speed": speed, "phase0": rng.uniform(0, 2 * np.pi)})

    frames_meta = []
    cameras = {}
    tracks_meta = [{"person_id": k, "frames": []} for k in range(n_people)]
    gt_roots = np.zeros((n_people, n_frames, 3))
    gt_thetas = np.zeros((n_people, n_frames, tpl.n_joints, 4))
    gt_cam_T = []

    coco_ids = tpl.coco_joint_ids()

    for t in range(n_frames):
        ang = 2.0 * np.pi * (0.07 + 0.25 * t / max(n_frames - 1, 1))
        center = np.array([orbit_radius * np.cos(ang),
                           orbit_radius * np.sin(ang), altitude])
        R, T = _look_at(center, np.array([0.0, 0.0, 0.0]))
        cam_metric = CameraPose(K, R, T)
        gt_cam_T.append(T.tolist())
        cameras[str(t)] = {"K": K.tolist(), "R": R.tolist(),
                           "T": (T / true_scale).tolist()}

        posed_sets = []
        person_depths = []
        for k, person in enumerate(people):
            dirv = np.array([np.cos(person["heading"]),
                             np.sin(person["heading"])])
            xy = person["start"] + person["speed"] * t * dirv
            psi = np.array([xy[0], xy[1],
                            1.0 + 0.015 * np.sin(person["phase0"] + 0.55 * t)])
            theta = _walk_pose(tpl, person["phase0"] + 0.55 * t,
                               person["heading"], gait_amplitude)
            gt_roots[k, t] = psi
            gt_thetas[k, t] = theta
            posed_sets.append(deform_human(person["set"], tpl, theta, psi))
            person_depths.append(
                _human_mesh_depth(tpl, theta, psi, cam_metric, width, height))

        if render_images:
            res = rasterize(compose(bg_gt, *posed_sets), cam_metric, width,
                            height, sh_degree=0)
            img_u8 = np.clip(np.rint(res.image * 255.0), 0, 255).astype(np.uint8)
        else:
            img_u8 = np.zeros((height, width, 3), dtype=np.uint8)
        write_tensor(out / "images" / f"f{t:04d}.t", img_u8)

        # True geometry depth: analytic ground plane + human meshes.
        ys, xs = np.mgrid[0:height, 0:width]
        rays = np.stack([xs.ravel(), ys.ravel(), np.ones(xs.size)], axis=1)
        dirs = (np.linalg.inv(K) @ rays.T).T @ R  # world-space directions
        down = dirs[:, 2] < -1e-12
        with np.errstate(divide="ignore"):
            t_ground = np.where(down, -center[2] / dirs[:, 2], np.inf)
        # Camera depth of the hit equals the ray parameter (K^-1 rays have
        # unit camera z).
        depth = t_ground.reshape(height, width)
        for pd in person_depths:
            depth = np.minimum(depth, pd)
        hit = np.isfinite(depth)
        z = np.where(hit, depth, altitude).reshape(-1)
        cam_pts = (np.linalg.inv(K) @ (rays * z[:, None]).T).T
        world_pts = cam_pts @ R - (R.T @ T)
        point_map = (world_pts / true_scale).astype(np.float32)
        write_tensor(out / "point_maps" / f"f{t:04d}.t",
                     point_map.reshape(height, width, 3))

        human_any = np.zeros((height, width), dtype=bool)
        for pd in person_depths:
            human_any |= np.isfinite(pd) & (pd <= depth + 1e-9)
        conf = rng.uniform(0.55, 1.0, size=(height, width)).astype(np.float32)
        conf[human_any] = rng.uniform(0.01, 0.15, size=int(human_any.sum()))
        write_tensor(out / "confidence" / f"f{t:04d}.t", conf)

        frames_meta.append({
            "image": f"images/f{t:04d}.t",
            "point_map": f"point_maps/f{t:04d}.t",
            "confidence": f"confidence/f{t:04d}.t",
            "camera_id": str(t),
        })

        for k, person in enumerate(people):
            pd = person_depths[k]
            vis = np.isfinite(pd) & (pd <= depth + 1e-9)
            present = bool(vis.sum() >= 4)
            entry = {"frame": t, "present": present}
            if present:
                mask = (vis.astype(np.uint8)) * 255
                write_tensor(out / "masks" / f"f{t:04d}_p{k}.t", mask)
                # Detection box: projected posed-vertex extent (a perfect
                # detector), padded half a pixel and clipped to the image.
                verts_k = lbs_vertices(tpl, gt_thetas[k, t], None,
                                       gt_roots[k, t])
                vpx, vz = project_many(verts_k, cam_metric)
                vpx = vpx[vz > 0]
                bbox = [float(np.clip(vpx[:, 0].min() - 0.5, 0, width - 1)),
                        float(np.clip(vpx[:, 1].min() - 0.5, 0, height - 1)),
                        float(np.clip(vpx[:, 0].max() + 0.5, 0, width - 1)),
                        float(np.clip(vpx[:, 1].max() + 0.5, 0, height - 1))]
                J = joint_positions(tpl, gt_thetas[k, t], None, gt_roots[k, t])
                px, zj = project_many(J, cam_metric)
                kp = np.zeros((len(COCO_KEYPOINT_NAMES), 3), dtype=np.float32)
                bbox_h = max(bbox[3] - bbox[1], 1.0)
                for coco_idx, joint_id in enumerate(coco_ids):
                    if joint_id < 0:
                        continue
                    u, v = px[joint_id]
                    u += rng.normal(0, noise * bbox_h)
                    v += rng.normal(0, noise * bbox_h)
                    score = 0.95
                    ui, vi = int(round(u)), int(round(v))
                    if not (0 <= ui < width and 0 <= vi < height):
                        score = 0.0
                    else:
                        # Joints whose pixel shows an unrelated surface
                        # (occlusion, silhouette miss) get a low score. The
                        # tolerance tracks the ground sample distance so
                        # coarse renders keep usable keypoints.
                        gsd = zj[joint_id] / focal
                        surf = world_pts[vi * width + ui]
                        tol = max(0.075, 1.2 * gsd)
                        if np.linalg.norm(surf - J[joint_id]) > tol:
                            score = 0.1
                    kp[coco_idx] = (u, v, score)
                write_tensor(out / "keypoints" / f"f{t:04d}_p{k}.t", kp)
                # Provisional root: camera-frame pelvis position (what a
                # crop-based mesh regressor would deliver).
                pelvis_world = tpl.rest_joints()[0] + gt_roots[k, t]
                root_cam = R @ pelvis_world + T
                entry.update({
                    "bbox": bbox,
                    "mask": f"masks/f{t:04d}_p{k}.t",
                    "keypoints": f"keypoints/f{t:04d}_p{k}.t",
                    "theta": gt_thetas[k, t].tolist(),
                    "beta": [0.0] * 10,
                    "root": root_cam.tolist(),
                })
            tracks_meta[k]["frames"].append(entry)

    cfg = SceneConfig()
    cfg.background.conf_percentile = 40.0
    cfg.background.grid_depth = 6
    cfg.init.bg_stride = 6
    cfg_dict = cfg.to_dict()
    if config:
        for section, values in config.items():
            cfg_dict.setdefault(section, {}).update(values)

    manifest = {
        "height": height,
        "width": width,
        "cameras": cameras,
        "frames": frames_meta,
        "tracks": tracks_meta,
        "body_template": "template",
        "config": cfg_dict,
        "ground_truth": "ground_truth.json",
    }
    (out / "manifest.json").write_text(json.dumps(manifest, sort_keys=True, indent=1))

    gt = {
        "seed": seed,
        "true_scale": true_scale,
        "altitude": altitude,
        "noise": noise,
        "camera_T_metric": gt_cam_T,
        "roots": gt_roots.tolist(),
        "thetas": gt_thetas.reshape(n_people, n_frames, tpl.n_joints * 4).tolist(),
    }
    (out / "ground_truth.json").write_text(json.dumps(gt, sort_keys=True))
    return out / "manifest.json"


def corrupt_track(manifest_path, frame: int, person: int, mode: str = "blowup"):
    """Corrupt one track frame in place.

    blowup: doubles the mesh via the uniform-scale shape component.
    drop:   removes the body parameters (detection stays).
    none:   no-op.
    """
    path = Path(manifest_path)
    data = json.loads(path.read_text())
    if mode == "none":
        path.write_text(json.dumps(data, sort_keys=True, indent=1))
        return path
    for track in data["tracks"]:
        if track["person_id"] != person:
            continue
        for entry in track["frames"]:
            if entry["frame"] != frame or not entry.get("present"):
                continue
            if mode == "blowup":
                beta = entry.get("beta", [0.0] * 10)
                beta[0] = beta[0] + 1.0
                entry["beta"] = beta
            elif mode == "drop":
                entry["present"] = False
                entry.pop("theta", None)
                entry.pop("beta", None)
                entry.pop("root", None)
            else:
                raise ValueError(f"unknown corruption mode '{mode}'")
    path.write_text(json.dumps(data, sort_keys=True, indent=1))
    return path
