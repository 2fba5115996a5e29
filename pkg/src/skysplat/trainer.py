"""Joint optimization of background/human Gaussians, per-frame body poses
and skinning weights; evaluation and scene editing over the resulting
checkpoints.

Training composites the static background set with the skinning-deformed
human sets each iteration, renders with the differentiable rasterizer, and
descends the combined photometric / opacity / neighborhood / smoothness
objective with per-group Adam. Background Gaussians densify and prune on the
accumulated absolute view-space gradient statistic.
"""

from __future__ import annotations

import csv
import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import quatmath as qm
from .body import BodyTemplate, load_template, save_template
from .camera import CameraPose, scale_pose
from .config import OptimConfig, SceneConfig
from .gaussians import (GaussianSet, compose, deform_human, deform_human_vjp,
                        filter_background_points, init_background, init_human,
                        logit, sigmoid)
from .losses import (build_knn, knn_regularizer, opacity_loss,
                     photometric_loss, psnr, ssim)
from .optim import Adam
from .pipeline import SceneData
from .rasterizer import rasterize, rasterize_backward
from .refine import FrameStatus
from .tensor_io import read_tensor, write_tensor


@dataclass
class SceneState:
    """Everything the optimizer owns: Gaussian sets, pose tracks, geometry."""

    bg: GaussianSet
    humans: dict[int, GaussianSet]
    theta: dict[int, np.ndarray]   # person -> T x n_b x 4
    psi: dict[int, np.ndarray]     # person -> T x 3
    valid: dict[int, np.ndarray]   # person -> T bool
    tpl: BodyTemplate | None
    sigma: float
    extent: float
    iteration: int = 0
    config_hash: str = ""

    def person_ids(self):
        return sorted(self.humans.keys())

    def save(self, out_dir):
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        self.bg.save(out / "bg")
        for pid, g in self.humans.items():
            g.save(out / f"human_{pid}")
        poses = out / "poses"
        poses.mkdir(exist_ok=True)
        for pid in self.humans:
            write_tensor(poses / f"theta_p{pid}.t", self.theta[pid].astype(np.float32))
            write_tensor(poses / f"psi_p{pid}.t", self.psi[pid].astype(np.float32))
            write_tensor(poses / f"valid_p{pid}.t",
                         self.valid[pid].astype(np.uint8) * 255)
        if self.tpl is not None:
            save_template(self.tpl, out / "template")
        meta = {
            "iteration": self.iteration,
            "sigma": self.sigma,
            "extent": self.extent,
            "config_hash": self.config_hash,
            "people": sorted(self.humans.keys()),
        }
        (out / "meta.json").write_text(json.dumps(meta, sort_keys=True))

    @classmethod
    def load(cls, in_dir) -> "SceneState":
        src = Path(in_dir)
        meta = json.loads((src / "meta.json").read_text())
        humans, theta, psi, valid = {}, {}, {}, {}
        for pid in meta["people"]:
            humans[pid] = GaussianSet.load(src / f"human_{pid}")
            theta[pid] = read_tensor(src / "poses" / f"theta_p{pid}.t").astype(np.float64)
            theta[pid] /= np.linalg.norm(theta[pid], axis=-1, keepdims=True)
            psi[pid] = read_tensor(src / "poses" / f"psi_p{pid}.t").astype(np.float64)
            valid[pid] = read_tensor(src / "poses" / f"valid_p{pid}.t") > 0
        tpl = load_template(src / "template") if (src / "template").exists() else None
        return cls(bg=GaussianSet.load(src / "bg"), humans=humans, theta=theta,
                   psi=psi, valid=valid, tpl=tpl, sigma=meta["sigma"],
                   extent=meta["extent"], iteration=meta["iteration"],
                   config_hash=meta.get("config_hash", ""))


def init_state(scene: SceneData, refined, placement: dict, sigma: float,
               include_humans: bool = True) -> SceneState:
    """Build the initial Gaussian scene in sigma-scaled (metric) world."""
    cfg = scene.cfg
    human_masks = []
    for t in range(scene.n_frames):
        human_masks.append(scene.human_mask_union(t) if include_humans else None)
    points, sel = filter_background_points(
        scene.point_maps, scene.confidences,
        human_masks if include_humans else None,
        conf_percentile=cfg.background.conf_percentile,
        altitude_mode=cfg.init.altitude_mode,
        stride=cfg.init.bg_stride)
    colors = np.concatenate([scene.images[i][m] for i, m in sel], axis=0)
    bg = init_background(points * sigma, colors, opacity=cfg.init.bg_opacity)
    centroid = bg.means.mean(axis=0)
    extent = float(np.max(np.linalg.norm(bg.means - centroid, axis=1)))

    humans, theta, psi, valid = {}, {}, {}, {}
    T = scene.n_frames
    if include_humans and scene.tpl is not None:
        roots = placement.get("roots", {})
        for pid_s, track_roots in roots.items():
            pid = int(pid_s)
            track = refined[pid]
            betas = [tf.params.beta for tf in track.values()
                     if tf.params is not None and tf.status in
                     (FrameStatus.VALID, FrameStatus.INTERPOLATED)]
            beta_mean = np.mean(betas, axis=0) if betas else None
            g = init_human(scene.tpl, beta_mean, person_id=pid,
                           opacity=cfg.init.human_opacity)
            th = np.tile(qm.IDENTITY, (T, scene.tpl.n_joints, 1))
            ps = np.zeros((T, 3))
            va = np.zeros(T, dtype=bool)
            for t_s, root in track_roots.items():
                t = int(t_s)
                tf = track.get(t)
                if tf is None or tf.params is None:
                    continue
                th[t] = tf.params.theta
                ps[t] = root
                va[t] = True
            humans[pid] = g
            theta[pid] = th
            psi[pid] = ps
            valid[pid] = va
    return SceneState(bg=bg, humans=humans, theta=theta, psi=psi, valid=valid,
                      tpl=scene.tpl, sigma=sigma, extent=extent,
                      config_hash=cfg.hash())


def densify_prune(g: GaussianSet, accum_abs_grads: np.ndarray,
                  counts: np.ndarray, cfg: OptimConfig, extent: float,
                  rng: np.random.Generator):
    """AbsGS-style densify + opacity prune for one Gaussian set.

    Returns (new_set, keep_mask, n_added): keep_mask covers the original
    rows (prune + split parents removed), the n_added new rows append at the
    end (clones first, then split children).
    """
    n = len(g)
    avg = accum_abs_grads / np.maximum(counts, 1)
    hot = avg > cfg.densify_grad_threshold
    max_scale = np.exp(g.log_scales).max(axis=1)
    big = max_scale > cfg.split_scale_fraction * extent
    clone_mask = hot & ~big
    split_mask = hot & big
    room = max(cfg.max_gaussians - n, 0)
    if int(clone_mask.sum()) + 2 * int(split_mask.sum()) > room:
        clone_mask &= False
        split_mask &= False

    pieces = {k: [] for k in
              ("means", "rotations", "log_scales", "opacity_logits", "sh")}

    def append_rows(idx, means, log_scales):
        pieces["means"].append(means)
        pieces["rotations"].append(g.rotations[idx])
        pieces["log_scales"].append(log_scales)
        pieces["opacity_logits"].append(g.opacity_logits[idx])
        pieces["sh"].append(g.sh[idx])

    ci = np.nonzero(clone_mask)[0]
    if ci.size:
        append_rows(ci, g.means[ci], g.log_scales[ci])
    si = np.nonzero(split_mask)[0]
    if si.size:
        R = qm.to_matrix(qm.normalize(g.rotations[si]))
        for _ in range(2):
            local = rng.normal(size=(si.size, 3)) * np.exp(g.log_scales[si])
            offs = np.einsum("nij,nj->ni", R, local)
            append_rows(si, g.means[si] + offs,
                        g.log_scales[si] - np.log(1.6))

    keep = sigmoid(g.opacity_logits) >= cfg.prune_opacity
    keep &= ~split_mask  # split parents are replaced by their children

    def cat(key, base):
        rows = pieces[key]
        return np.concatenate([base[keep]] + rows, axis=0) if rows else base[keep]

    new = GaussianSet(
        means=cat("means", g.means),
        rotations=cat("rotations", g.rotations),
        log_scales=cat("log_scales", g.log_scales),
        opacity_logits=cat("opacity_logits", g.opacity_logits),
        sh=cat("sh", g.sh),
        tag=g.tag,
    )
    n_added = len(new) - int(keep.sum())
    return new, keep, n_added


@dataclass
class TrainLog:
    rows: list = field(default_factory=list)

    def add(self, **kw):
        self.rows.append(kw)

    def save_csv(self, path):
        if not self.rows:
            return
        keys = list(self.rows[0].keys())
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=keys)
            w.writeheader()
            for r in self.rows:
                w.writerow(r)


def train_test_split(n_frames: int, test_every: int = 8):
    """Frame t is held out iff t % test_every == 0."""
    frames = np.arange(n_frames)
    test = frames[frames % test_every == 0]
    train = frames[frames % test_every != 0]
    return train, test


def _mean_lr(cfg: OptimConfig, extent: float, iteration: int, total: int):
    frac = min(max(iteration / max(total, 1), 0.0), 1.0)
    return extent * cfg.lr_mean_init * (cfg.lr_mean_final / cfg.lr_mean_init) ** frac


def train(state: SceneState, scene: SceneData, iterations: int,
          workdir=None, seed: int = 0, log_every: int = 50) -> TrainLog:
    """Optimize the scene state in place for the given iteration count."""
    cfg = scene.cfg.optim
    weights = scene.cfg.weights
    W, H = scene.size
    cams = {t: scale_pose(scene.cams[t], state.sigma)
            for t in range(scene.n_frames)}
    train_frames, _ = train_test_split(scene.n_frames, cfg.test_every)
    rng = np.random.default_rng(seed)
    adam = Adam()
    adam.unit_quaternion_keys = set()

    knn_cache = {pid: build_knn(g.means, scene.cfg.optim.knn_k)
                 for pid, g in state.humans.items()}

    accum = np.zeros(len(state.bg))
    counts = np.zeros(len(state.bg))
    log = TrainLog()
    order = rng.permutation(train_frames)
    cursor = 0
    t_start = time.time()

    for it in range(1, iterations + 1):
        state.iteration += 1
        if cursor >= len(order):
            order = rng.permutation(train_frames)
            cursor = 0
        t = int(order[cursor])
        cursor += 1

        sh_degree = min(state.iteration // cfg.sh_degree_interval,
                        cfg.sh_degree_max)

        posed, caches, pids = [], [], []
        for pid in state.person_ids():
            if not state.valid[pid][t]:
                continue
            p, cache = deform_human(state.humans[pid], state.tpl,
                                    state.theta[pid][t], state.psi[pid][t],
                                    with_cache=True)
            posed.append(p)
            caches.append(cache)
            pids.append(pid)
        scene_set = compose(state.bg, *posed)
        res = rasterize(scene_set, cams[t], W, H, sh_degree=sh_degree)

        l1, lssim, g_l1, g_ssim = photometric_loss(res.image, scene.images[t],
                                                   with_grad=True)
        d_image = (1.0 - weights.pho) * g_l1 + weights.pho * g_ssim
        lo, g_o = opacity_loss(res.opacity, scene.sky_masks[t], with_grad=True)
        d_opacity = weights.opacity * g_o

        grads = rasterize_backward(res.tape, d_image, d_opacity,
                                   scene=scene_set)

        params: dict[str, np.ndarray] = {}
        gdict: dict[str, np.ndarray] = {}
        rates: dict[str, float] = {}

        bg_g = scene_set.slice_grad(grads, "background")
        mean_lr = _mean_lr(cfg, state.extent, state.iteration, iterations)
        _add_group(params, gdict, rates, adam, "bg", state.bg, bg_g, {
            "means": mean_lr, "rotations": cfg.bg_lr_rotation,
            "log_scales": cfg.bg_lr_scale, "sh0": cfg.bg_lr_sh0,
            "sh_rest": cfg.bg_lr_sh_rest, "opacity_logits": cfg.lr_opacity,
        })

        loss_knn = 0.0
        for pid, cache in zip(pids, caches):
            seg = scene_set.slice_grad(grads, f"human:{pid}")
            dg = deform_human_vjp(cache, seg["means"], seg["rotations"])
            g_h = state.humans[pid]
            hgrads = {
                "means": dg["means"],
                "rotations": dg["rotations"],
                "log_scales": seg["log_scales"],
                "opacity_logits": seg["opacity_logits"],
                "sh": seg["sh"],
                "skin_logits": dg["skin_logits"],
            }
            attrs = {"means": g_h.means, "rotations": g_h.rotations,
                     "log_scales": g_h.log_scales,
                     "opacity_logits": g_h.opacity_logits, "sh": g_h.sh}
            if weights.knn > 0 and knn_cache[pid].size:
                lk, kg = knn_regularizer(attrs, knn_cache[pid], with_grad=True)
                loss_knn += lk
                for key, kgrad in kg.items():
                    hgrads[key] = hgrads[key] + weights.knn * kgrad
            hlr = _mean_lr(cfg, 2.0, state.iteration, iterations)
            _add_group(params, gdict, rates, adam, f"h{pid}", g_h, hgrads, {
                "means": hlr, "rotations": cfg.h_lr_rotation,
                "log_scales": cfg.h_lr_scale, "sh0": cfg.h_lr_sh0,
                "sh_rest": cfg.h_lr_sh_rest, "opacity_logits": cfg.lr_opacity,
                "skin_logits": cfg.skin_lr,
            })
            # Pose parameters for this frame.
            key_t = f"theta:{pid}:{t}"
            params[key_t] = state.theta[pid][t]
            gdict[key_t] = dg["theta"]
            rates[key_t] = cfg.pose_lr_rotation
            adam.unit_quaternion_keys.add(key_t)
            key_p = f"psi:{pid}:{t}"
            params[key_p] = state.psi[pid][t]
            gdict[key_p] = dg["psi"]
            rates[key_p] = cfg.pose_lr_translation

        # Temporal smoothness in a window around the sampled frame.
        loss_smooth = 0.0
        if weights.smooth > 0:
            for pid in pids:
                th = state.theta[pid]
                va = state.valid[pid]
                for r in (t - 1, t, t + 1):
                    if r - 1 < 0 or r + 1 >= th.shape[0]:
                        continue
                    if not (va[r - 1] and va[r] and va[r + 1]):
                        continue
                    v = 2.0 * th[r] - th[r - 1] - th[r + 1]
                    norm = np.linalg.norm(v)
                    loss_smooth += norm
                    if norm > 1e-12:
                        unit = v / norm
                        for rr, coef in ((r, 2.0), (r - 1, -1.0), (r + 1, -1.0)):
                            key = f"theta:{pid}:{rr}"
                            if key not in params:
                                params[key] = th[rr]
                                gdict[key] = np.zeros_like(th[rr])
                                rates[key] = cfg.pose_lr_rotation
                                adam.unit_quaternion_keys.add(key)
                            gdict[key] = gdict[key] + 0.5 * weights.smooth * coef * unit

        adam.step(params, gdict, rates)

        # Densification bookkeeping uses the background segment only.
        nb = len(state.bg)
        accum += grads["abs_grad2d"][:nb]
        counts += (grads["touched"][:nb] > 0)

        if (cfg.densify_start <= state.iteration <= cfg.densify_stop
                and state.iteration % cfg.densify_interval == 0):
            new_bg, keep, n_added = densify_prune(state.bg, accum, counts,
                                                  cfg, state.extent, rng)
            for key in ("means", "rotations", "log_scales",
                        "opacity_logits", "sh0", "sh_rest"):
                adam.mask_state(f"bg:{key}", keep)
                adam.extend_state(f"bg:{key}", n_added)
            state.bg = new_bg
            accum = np.zeros(len(state.bg))
            counts = np.zeros(len(state.bg))

        if (state.iteration % cfg.opacity_reset_interval == 0
                and state.iteration <= cfg.densify_stop
                and state.iteration < iterations):
            state.bg.opacity_logits = np.minimum(state.bg.opacity_logits,
                                                 logit(0.01))
            adam.state.pop("bg:opacity_logits", None)

        total = ((1 - weights.pho) * l1 + weights.pho * lssim
                 + weights.opacity * lo + weights.knn * loss_knn
                 + 0.5 * weights.smooth * loss_smooth)
        if it % log_every == 0 or it == iterations:
            log.add(iteration=state.iteration, total=round(total, 6),
                    l1=round(l1, 6), dssim=round(lssim, 6), opacity=round(lo, 6),
                    knn=round(loss_knn, 6), smooth=round(loss_smooth, 6),
                    n_gaussians=len(state.bg) + sum(len(h) for h in state.humans.values()),
                    seconds=round(time.time() - t_start, 2))

    if workdir is not None:
        workdir = Path(workdir)
        workdir.mkdir(parents=True, exist_ok=True)
        log.save_csv(workdir / "train_log.csv")
    return log


def _add_group(params, gdict, rates, adam, prefix, g: GaussianSet,
               grads: dict, lrs: dict):
    params[f"{prefix}:means"] = g.means
    gdict[f"{prefix}:means"] = grads["means"]
    rates[f"{prefix}:means"] = lrs["means"]
    params[f"{prefix}:rotations"] = g.rotations
    gdict[f"{prefix}:rotations"] = grads["rotations"]
    rates[f"{prefix}:rotations"] = lrs["rotations"]
    adam.unit_quaternion_keys.add(f"{prefix}:rotations")
    params[f"{prefix}:log_scales"] = g.log_scales
    gdict[f"{prefix}:log_scales"] = grads["log_scales"]
    rates[f"{prefix}:log_scales"] = lrs["log_scales"]
    params[f"{prefix}:opacity_logits"] = g.opacity_logits
    gdict[f"{prefix}:opacity_logits"] = grads["opacity_logits"]
    rates[f"{prefix}:opacity_logits"] = lrs["opacity_logits"]
    # Zeroth SH band and the rest learn at different rates.
    params[f"{prefix}:sh0"] = g.sh[:, :1, :]
    gdict[f"{prefix}:sh0"] = grads["sh"][:, :1, :]
    rates[f"{prefix}:sh0"] = lrs["sh0"]
    params[f"{prefix}:sh_rest"] = g.sh[:, 1:, :]
    gdict[f"{prefix}:sh_rest"] = grads["sh"][:, 1:, :]
    rates[f"{prefix}:sh_rest"] = lrs["sh_rest"]
    if "skin_logits" in grads and g.skin_logits is not None:
        params[f"{prefix}:skin_logits"] = g.skin_logits
        gdict[f"{prefix}:skin_logits"] = grads["skin_logits"]
        rates[f"{prefix}:skin_logits"] = lrs["skin_logits"]


def render_frame(state: SceneState, scene: SceneData, t: int,
                 sh_degree: int | None = None, skip_people: set | None = None):
    cam = scale_pose(scene.cams[t], state.sigma)
    W, H = scene.size
    if sh_degree is None:
        sh_degree = min(state.iteration // scene.cfg.optim.sh_degree_interval,
                        scene.cfg.optim.sh_degree_max)
    posed = []
    for pid in state.person_ids():
        if skip_people and pid in skip_people:
            continue
        if not state.valid[pid][t]:
            continue
        posed.append(deform_human(state.humans[pid], state.tpl,
                                  state.theta[pid][t], state.psi[pid][t]))
    return rasterize(compose(state.bg, *posed), cam, W, H, sh_degree=sh_degree)


def evaluate(state: SceneState, scene: SceneData, split: str = "test") -> dict:
    """PSNR/SSIM for full frames and mask-union human crops on the split."""
    train_f, test_f = train_test_split(scene.n_frames, scene.cfg.optim.test_every)
    frames = {"test": test_f, "train": train_f, "all": np.arange(scene.n_frames)}[split]
    rows = []
    for t in frames:
        res = render_frame(state, scene, int(t))
        gt = scene.images[t]
        render = np.clip(res.image, 0.0, 1.0)
        row = {"frame": int(t), "psnr": psnr(render, gt),
               "ssim": ssim(render, gt)}
        union = scene.human_mask_union(int(t))
        if union.any():
            ys, xs = np.nonzero(union)
            y0, y1 = ys.min(), ys.max()
            x0, x1 = xs.min(), xs.max()
            y0, y1, x0, x1 = _pad_crop(y0, y1, x0, x1, *gt.shape[:2], pad=2,
                                       min_size=16)
            crop_r = render[y0:y1 + 1, x0:x1 + 1]
            crop_g = gt[y0:y1 + 1, x0:x1 + 1]
            row["psnr_human"] = psnr(crop_r, crop_g)
            row["ssim_human"] = ssim(crop_r, crop_g)
        rows.append(row)
    out = {"split": split, "frames": rows}
    for key in ("psnr", "ssim", "psnr_human", "ssim_human"):
        vals = [r[key] for r in rows if key in r]
        out[f"mean_{key}"] = float(np.mean(vals)) if vals else None
    return out


def _pad_crop(y0, y1, x0, x1, H, W, pad=2, min_size=16):
    y0, y1 = max(y0 - pad, 0), min(y1 + pad, H - 1)
    x0, x1 = max(x0 - pad, 0), min(x1 + pad, W - 1)
    while y1 - y0 + 1 < min_size:
        y0 = max(y0 - 1, 0)
        y1 = min(y1 + 1, H - 1)
        if y0 == 0 and y1 == H - 1:
            break
    while x1 - x0 + 1 < min_size:
        x0 = max(x0 - 1, 0)
        x1 = min(x1 + 1, W - 1)
        if x0 == 0 and x1 == W - 1:
            break
    return y0, y1, x0, x1


def edit_scene(state: SceneState, edits: list[dict]) -> SceneState:
    """Apply removal/translation edits; background Gaussians are untouched."""
    new = SceneState(
        bg=state.bg, humans=dict(state.humans),
        theta={k: v.copy() for k, v in state.theta.items()},
        psi={k: v.copy() for k, v in state.psi.items()},
        valid={k: v.copy() for k, v in state.valid.items()},
        tpl=state.tpl, sigma=state.sigma, extent=state.extent,
        iteration=state.iteration, config_hash=state.config_hash,
    )
    for edit in edits:
        op = edit.get("op")
        pid = int(edit.get("person"))
        if op == "remove":
            new.humans.pop(pid, None)
            new.theta.pop(pid, None)
            new.psi.pop(pid, None)
            new.valid.pop(pid, None)
        elif op == "translate":
            delta = np.asarray(edit.get("delta"), dtype=np.float64).reshape(3)
            if pid in new.psi:
                new.psi[pid] = new.psi[pid] + delta
        else:
            raise ValueError(f"unknown edit op '{op}'")
    return new
