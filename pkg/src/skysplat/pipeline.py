"""Stage drivers that connect manifest data to the algorithm modules and
persist each stage's artifacts under a working directory.

Stage outputs are content-addressed: each stage writes a ``<stage>.hash``
file with its config hash, and reruns with an unchanged hash are no-ops.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import quatmath as qm
from .background import (BackgroundMesh, estimate_normals, percentile_filter,
                         poisson_reconstruct, render_depth)
from .body import BodyParams, BodyTemplate, load_template
from .camera import CameraPose, scale_pose
from .config import SceneConfig
from .errors import NoValidBones
from .placement import place_all
from .refine import FrameStatus, TrackFrame, projected_bbox, refine_tracks
from .scale import (ScaleProblem, grid_minimum, optimize_scale,
                    residual_report, sample_scale_problem)
from .tensor_io import SceneManifest, load_manifest, read_tensor


@dataclass
class SceneData:
    """Manifest contents loaded into memory."""

    manifest: SceneManifest
    cams: dict[int, CameraPose]
    images: list[np.ndarray]        # float64 in [0,1]
    point_maps: list[np.ndarray]
    confidences: list[np.ndarray]
    sky_masks: list
    tpl: BodyTemplate | None
    cfg: SceneConfig
    _mask_cache: dict = field(default_factory=dict)

    @property
    def n_frames(self):
        return self.manifest.n_frames

    @property
    def size(self):
        return self.manifest.width, self.manifest.height

    def human_mask(self, frame: int, person: int):
        key = (frame, person)
        if key not in self._mask_cache:
            entry = self._entry(frame, person)
            if entry is None or entry.mask_path is None:
                self._mask_cache[key] = None
            else:
                m = read_tensor(self.manifest.resolve(entry.mask_path))
                self._mask_cache[key] = m > 0
        return self._mask_cache[key]

    def human_mask_union(self, frame: int):
        H, W = self.images[frame].shape[:2]
        out = np.zeros((H, W), dtype=bool)
        for track in self.manifest.tracks:
            m = self.human_mask(frame, track.person_id)
            if m is not None:
                out |= m
        return out

    def keypoints(self, frame: int, person: int):
        entry = self._entry(frame, person)
        if entry is None or entry.keypoints_path is None:
            return None
        return read_tensor(self.manifest.resolve(entry.keypoints_path)).astype(np.float64)

    def _entry(self, frame: int, person: int):
        for track in self.manifest.tracks:
            if track.person_id == person:
                return track.entries.get(frame)
        return None


def load_scene(manifest_path) -> SceneData:
    manifest = load_manifest(manifest_path)
    cams = {}
    for t, frame in enumerate(manifest.frames):
        cams[t] = CameraPose.from_dict(manifest.cameras[frame["camera_id"]])
    images, pmaps, confs, skies = [], [], [], []
    for frame in manifest.frames:
        img = read_tensor(manifest.resolve(frame["image"]))
        images.append(np.asarray(img, dtype=np.float64) / 255.0)
        pmaps.append(read_tensor(manifest.resolve(frame["point_map"])).astype(np.float64))
        confs.append(read_tensor(manifest.resolve(frame["confidence"])).astype(np.float64))
        if frame.get("sky_mask"):
            skies.append(read_tensor(manifest.resolve(frame["sky_mask"])) > 0)
        else:
            skies.append(None)
    tpl = None
    if manifest.body_template:
        tpl = load_template(manifest.resolve(manifest.body_template))
    return SceneData(manifest=manifest, cams=cams, images=images,
                     point_maps=pmaps, confidences=confs, sky_masks=skies,
                     tpl=tpl, cfg=manifest.config)


def stage_is_fresh(workdir: Path, stage: str, cfg_hash: str) -> bool:
    f = Path(workdir) / f"{stage}.hash"
    return f.exists() and f.read_text().strip() == cfg_hash


def mark_stage(workdir: Path, stage: str, cfg_hash: str):
    Path(workdir).mkdir(parents=True, exist_ok=True)
    (Path(workdir) / f"{stage}.hash").write_text(cfg_hash)


# ---------------------------------------------------------------------------
# Refinement
# ---------------------------------------------------------------------------

def build_track_frames(scene: SceneData) -> dict[int, dict[int, TrackFrame]]:
    """Manifest tracks -> TrackFrame grid with projected boxes.

    The manifest root is the provisional camera-frame pelvis position, so
    projection happens in camera coordinates: identity extrinsics, the root
    rotation composed with the frame's world-to-camera rotation.
    """
    W, H = scene.size
    out: dict[int, dict[int, TrackFrame]] = {}
    for track in scene.manifest.tracks:
        frames = {}
        for t, entry in track.entries.items():
            tf = TrackFrame(person_id=track.person_id, frame=t,
                            bbox_detected=entry.bbox,
                            mask_path=entry.mask_path)
            if entry.present and entry.theta is not None:
                cam = scene.cams[t]
                theta_cam = entry.theta.copy()
                theta_cam[0] = qm.multiply(qm.from_matrix(cam.R), entry.theta[0])
                pelvis_rest = (scene.tpl.rest_joints(entry.beta)[0]
                               if scene.tpl is not None else np.zeros(3))
                root_cam = (entry.root if entry.root is not None
                            else np.array([0.0, 0.0, 10.0]))
                params_cam = BodyParams(theta_cam, entry.beta,
                                        root_cam - pelvis_rest)
                proj_cam = CameraPose(cam.K, np.eye(3), np.zeros(3))
                try:
                    tf.bbox_projected = projected_bbox(scene.tpl, params_cam,
                                                       proj_cam, W, H)
                except Exception:
                    tf.bbox_projected = None
                tf.params = BodyParams(entry.theta, entry.beta,
                                       entry.root if entry.root is not None
                                       else np.zeros(3))
                tf.status = FrameStatus.VALID
            frames[t] = tf
        out[track.person_id] = frames
    return out


def stage_refine(scene: SceneData, workdir) -> dict[int, dict[int, TrackFrame]]:
    workdir = Path(workdir)
    frames = build_track_frames(scene)
    masks = {pid: {t: scene.human_mask(t, pid) for t in track}
             for pid, track in frames.items()}
    refined = refine_tracks(frames, masks,
                            box_ratio_limit=scene.cfg.refine.box_ratio_limit,
                            dilation_px=scene.cfg.refine.mask_dilation_px)
    save_refined(refined, workdir / "refined_tracks.json")
    return refined


def save_refined(refined, path):
    data = {}
    for pid, track in refined.items():
        rows = {}
        for t, tf in track.items():
            row = {"status": tf.status.value}
            if tf.bbox_detected is not None:
                row["bbox"] = list(tf.bbox_detected)
            if tf.bbox_projected is not None:
                row["bbox_projected"] = list(tf.bbox_projected)
            if tf.params is not None and tf.status in (FrameStatus.VALID,
                                                       FrameStatus.INTERPOLATED):
                row["theta"] = tf.params.theta.tolist()
                row["beta"] = tf.params.beta.tolist()
                row["root"] = tf.params.psi.tolist()
            rows[str(t)] = row
        data[str(pid)] = rows
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(json.dumps(data, sort_keys=True))


def load_refined(path, masks_lookup=None) -> dict[int, dict[int, TrackFrame]]:
    data = json.loads(Path(path).read_text())
    out = {}
    for pid_s, rows in data.items():
        pid = int(pid_s)
        track = {}
        for t_s, row in rows.items():
            t = int(t_s)
            tf = TrackFrame(person_id=pid, frame=t,
                            bbox_detected=tuple(row["bbox"]) if "bbox" in row else None,
                            bbox_projected=tuple(row["bbox_projected"]) if "bbox_projected" in row else None,
                            status=FrameStatus(row["status"]))
            if "theta" in row:
                tf.params = BodyParams(np.asarray(row["theta"]),
                                       np.asarray(row["beta"]),
                                       np.asarray(row["root"]))
            track[t] = tf
        out[pid] = track
    return out


# ---------------------------------------------------------------------------
# Background reconstruction
# ---------------------------------------------------------------------------

def stage_recon(scene: SceneData, workdir) -> BackgroundMesh:
    workdir = Path(workdir)
    cfg = scene.cfg.background
    stride = cfg.mesh_stride
    pmaps = [pm[::stride, ::stride] for pm in scene.point_maps]
    confs = [cf[::stride, ::stride] for cf in scene.confidences]
    points, _ = percentile_filter(pmaps, confs, cfg.conf_percentile)
    points = points.reshape(-1, 3)
    centers = np.stack([scene.cams[t].center for t in range(scene.n_frames)])
    k = min(cfg.normal_k, points.shape[0] - 1)
    normals = estimate_normals(points, k, centers)
    mesh = poisson_reconstruct(points, normals, grid_depth=cfg.grid_depth,
                               cg_tol=cfg.cg_tol, cg_max_iter=cfg.cg_max_iter)
    mesh.save(workdir / "mesh")
    return mesh


# ---------------------------------------------------------------------------
# Scale alignment
# ---------------------------------------------------------------------------

def stage_scale(scene: SceneData, refined, workdir) -> dict:
    workdir = Path(workdir)
    cfg = scene.cfg.scale
    tracks = {}
    keypoints = {}
    for pid, track in refined.items():
        usable = {}
        for t, tf in track.items():
            if tf.status not in (FrameStatus.VALID, FrameStatus.INTERPOLATED):
                continue
            kp = scene.keypoints(t, pid)
            if kp is None:
                continue
            usable[t] = (tf.params.theta, tf.params.beta)
            keypoints[(t, pid)] = kp
        if usable:
            tracks[pid] = usable
    point_maps = {t: scene.point_maps[t] for t in range(scene.n_frames)}
    problem = sample_scale_problem(scene.tpl, tracks, point_maps, keypoints,
                                   cfg, scene.cfg.refine.keypoint_score_min)
    if not problem.samples:
        raise NoValidBones("no usable bone samples in the scene")
    sigma, trace = optimize_scale(problem, cfg.learning_rate, cfg.steps)
    report = residual_report(problem, sigma)
    report["trace"] = trace
    report["grid_minimum"] = grid_minimum(problem, sigma / 4.0, sigma * 4.0)
    (workdir / "scale.json").write_text(json.dumps(report, sort_keys=True))
    return report


# ---------------------------------------------------------------------------
# Placement
# ---------------------------------------------------------------------------

def stage_place(scene: SceneData, refined, mesh: BackgroundMesh,
                sigma: float, workdir) -> dict:
    workdir = Path(workdir)
    W, H = scene.size
    depth_maps = {t: render_depth(mesh, scene.cams[t], W, H)
                  for t in range(scene.n_frames)}
    centers = np.stack([scene.cams[t].center for t in range(scene.n_frames)])
    up = mesh.dominant_up_axis(toward=centers.mean(axis=0))
    offset = (scene.tpl.pelvis_offset if scene.tpl is not None
              else scene.cfg.placement.pelvis_offset)
    roots = place_all(refined, depth_maps, scene.cams, sigma, up,
                      pelvis_offset=offset,
                      search_radius=scene.cfg.placement.depth_search_radius)
    data = {"up_axis": up.tolist(), "sigma": sigma,
            "roots": {str(pid): {str(t): r.tolist() for t, r in rr.items()}
                      for pid, rr in roots.items()}}
    (workdir / "placement.json").write_text(json.dumps(data, sort_keys=True))
    return data


def load_placement(path) -> dict:
    return json.loads(Path(path).read_text())
