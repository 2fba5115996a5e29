"""Acceptance suite: one test per criterion, each printing a PASS line with
its measured figure so the run reads as a checklist.

The desk-scale end-to-end criterion trains the full model and the
background-only ablation on the same 48-frame fixture; both runs share a
session-scoped fixture directory so the suite stays a single command.
"""

import json
import time
from pathlib import Path

import numpy as np
import pytest

from skysplat import pipeline, quatmath as qm
from skysplat.camera import CameraPose, project, scale_pose
from skysplat.fixtures import generate_scene
from skysplat.gaussians import GaussianSet, compose, deform_human, init_human
from skysplat.losses import (knn_regularizer, build_knn, opacity_loss,
                             photometric_loss, smoothness_loss, ssim)
from skysplat.placement import contact_pixel
from skysplat.rasterizer import rasterize, rasterize_backward
from skysplat.refine import FrameStatus, bbox_area
from skysplat.scale import grid_minimum, optimize_scale, sample_scale_problem
from skysplat.trainer import (edit_scene, evaluate, init_state, render_frame,
                              train)


def report(name, ok, detail):
    print(f"\n[{'PASS' if ok else 'FAIL'}] {name}: {detail}")
    assert ok, f"{name}: {detail}"


# ---------------------------------------------------------------------------
# Criterion 1 — scale recovery on 10 seeded fixtures
# ---------------------------------------------------------------------------

SCALE_CASES = [(0, 1.0), (1, 10.0), (2, 40.0), (3, 80.0), (4, 40.0),
               (5, 10.0), (6, 80.0), (7, 1.0), (8, 40.0), (9, 80.0)]


def _scale_fixture(tmp_path, seed, true_scale):
    out = tmp_path / f"scale_{seed}_{int(true_scale)}"
    generate_scene(out, seed=seed, n_frames=25, n_people=8,
                   true_scale=true_scale, altitude=20.0, orbit_radius=30.0,
                   width=192, height=128, focal=840.0, noise=0.01,
                   render_images=False)
    return out


def test_criterion_1_scale_recovery(tmp_path_factory):
    base = tmp_path_factory.mktemp("scale_fixtures")
    worst_truth = 0.0
    worst_grid = 0.0
    slowest = 0.0
    for seed, ts in SCALE_CASES:
        scene_dir = _scale_fixture(base, seed, ts)
        scene = pipeline.load_scene(scene_dir / "manifest.json")
        refined = pipeline.stage_refine(scene, scene_dir / "wd")
        tracks, keypoints = {}, {}
        for pid, track in refined.items():
            usable = {}
            for t, tf in track.items():
                if tf.status not in (FrameStatus.VALID,
                                     FrameStatus.INTERPOLATED):
                    continue
                kp = scene.keypoints(t, pid)
                if kp is not None:
                    usable[t] = (tf.params.theta, tf.params.beta)
                    keypoints[(t, pid)] = kp
            if usable:
                tracks[pid] = usable
        pms = {t: scene.point_maps[t] for t in range(scene.n_frames)}
        t0 = time.time()
        problem = sample_scale_problem(scene.tpl, tracks, pms, keypoints,
                                       scene.cfg.scale)
        sigma, _ = optimize_scale(problem, scene.cfg.scale.learning_rate,
                                  scene.cfg.scale.steps)
        grid = grid_minimum(problem, sigma / 4.0, sigma * 4.0)
        elapsed = time.time() - t0
        slowest = max(slowest, elapsed)
        worst_truth = max(worst_truth, abs(sigma - ts) / ts)
        worst_grid = max(worst_grid, abs(sigma - grid) / grid)
    ok = worst_truth < 0.02 and worst_grid < 0.005 and slowest < 5.0
    report("criterion 1 scale recovery", ok,
           f"max |sigma-truth|/truth {100*worst_truth:.2f}% (<2%), "
           f"max grid deviation {100*worst_grid:.3f}% (<0.5%), "
           f"slowest recovery {slowest:.2f}s (<5s)")


# ---------------------------------------------------------------------------
# Criterion 2 — placement accuracy
# ---------------------------------------------------------------------------

@pytest.fixture(scope="module")
def placement_fixture(tmp_path_factory):
    out = tmp_path_factory.mktemp("placement") / "scene"
    generate_scene(out, seed=11, n_frames=25, n_people=6, altitude=20.0,
                   orbit_radius=30.0, width=192, height=128, focal=840.0,
                   render_images=False, gait_amplitude=0.12)
    scene = pipeline.load_scene(out / "manifest.json")
    wd = out / "wd"
    refined = pipeline.stage_refine(scene, wd)
    mesh = pipeline.stage_recon(scene, wd)
    rep = pipeline.stage_scale(scene, refined, wd)
    placement = pipeline.stage_place(scene, refined, mesh, rep["sigma"], wd)
    return out, scene, refined, rep, placement


def test_criterion_2_placement(placement_fixture):
    out, scene, refined, rep, placement = placement_fixture
    gt = json.loads((out / "ground_truth.json").read_text())
    roots_gt = np.array(gt["roots"])
    errs = []
    reproj = []
    up = np.array(placement["up_axis"])
    for pid_s, rr in placement["roots"].items():
        pid = int(pid_s)
        for t_s, root in rr.items():
            t = int(t_s)
            errs.append(np.linalg.norm(np.array(root) - roots_gt[pid, t]))
            tf = refined[pid][t]
            xc, _ = contact_pixel(tf.bbox_detected)
            ground = np.array(root) - up * scene.tpl.pelvis_offset
            px, _ = project(ground, scale_pose(scene.cams[t], rep["sigma"]))
            reproj.append(abs(px[0] - xc))
    rms = float(np.sqrt(np.mean(np.array(errs) ** 2)))
    worst_px = float(np.max(reproj))
    ok = rms < 0.15 and worst_px < 3.0
    report("criterion 2 placement", ok,
           f"pelvis RMS {rms:.3f} (<0.15) over {len(errs)} placements, "
           f"worst contact-x reprojection {worst_px:.2f}px (<3)")


# ---------------------------------------------------------------------------
# Criterion 3 — rasterizer forward oracle + FD gradients
# ---------------------------------------------------------------------------

def test_criterion_3_rasterizer(rng):
    from skysplat.sh import C0
    cam = CameraPose(np.array([[2.0, 0, 3.5], [0, 2.0, 3.5], [0, 0, 1.0]]),
                     np.eye(3), np.zeros(3))
    W = H = 8
    # Forward: two-Gaussian compositing closed form on the principal axis.
    sh = np.zeros((2, 16, 3))
    c1, c2 = np.array([0.8, 0.2, 0.1]), np.array([0.1, 0.7, 0.9])
    sh[0, 0] = (c1 - 0.5) / C0
    sh[1, 0] = (c2 - 0.5) / C0
    g = GaussianSet(np.array([[0.0, 0.0, 2.0], [0.0, 0.0, 4.0]]),
                    np.tile(qm.IDENTITY, (2, 1)),
                    np.log(np.full((2, 3), 5.0)), [1.2, 0.8], sh, "background")
    res = rasterize(g, cam, W, H, sh_degree=0)
    from skysplat.gaussians import sigmoid
    worst_fwd = 0.0
    for (yy, xx) in [(0, 0), (4, 3), (7, 7), (2, 6), (3, 3)]:
        vals = []
        for i, z in enumerate([2.0, 4.0]):
            var = (5.0 * 2.0 / z) ** 2 + 0.3
            dd = np.array([3.5 - xx, 3.5 - yy])
            q = (dd @ dd) / var
            vals.append(min(0.99, sigmoid(g.opacity_logits[i]) * np.exp(-q / 2)))
        a1, a2 = vals
        expect = c1 * a1 + c2 * a2 * (1 - a1)
        worst_fwd = max(worst_fwd, np.abs(res.image[yy, xx] - expect).max())

    # Backward: central finite differences across every attribute class.
    t0 = time.time()
    n = 5
    means = np.stack([rng.uniform(1.5, 6.5, n), rng.uniform(1.5, 6.5, n),
                      rng.uniform(3.5, 9, n)], axis=1)
    scene = GaussianSet(means, qm.random_unit(rng, (n,)),
                        np.log(rng.uniform(0.4, 1.0, (n, 3))),
                        rng.normal(0.3, 0.8, n),
                        rng.normal(0, 0.25, (n, 16, 3)), "background")
    g_img = rng.normal(size=(H, W, 3))
    g_op = rng.normal(size=(H, W))

    fields = {"means": scene.means, "rotations": scene.rotations,
              "log_scales": scene.log_scales,
              "opacity_logits": scene.opacity_logits, "sh": scene.sh}

    def loss(**kw):
        s = GaussianSet(tag="background", **kw)
        r = rasterize(s, cam, W, H, sh_degree=3, cull=False)
        return np.sum(r.image * g_img) + np.sum(r.opacity * g_op)

    res2 = rasterize(scene, cam, W, H, sh_degree=3, cull=False)
    grads = rasterize_backward(res2.tape, g_img, g_op, scene=scene)
    h = 1e-5
    worst_grad = {}
    for name, arr in fields.items():
        errs = []
        it = np.nditer(arr, flags=["multi_index"])
        for _ in it:
            ix = it.multi_index
            a1 = arr.copy(); a1[ix] += h
            a2 = arr.copy(); a2[ix] -= h
            f1 = loss(**{k: (a1 if k == name else v) for k, v in fields.items()})
            f2 = loss(**{k: (a2 if k == name else v) for k, v in fields.items()})
            fd = (f1 - f2) / (2 * h)
            an = grads[name][ix]
            errs.append(abs(fd - an) / max(abs(fd), abs(an), 1e-4))
        worst_grad[name] = max(errs)
    elapsed = time.time() - t0
    worst = max(worst_grad.values())
    ok = worst_fwd < 1e-6 and worst < 1e-3 and elapsed < 60.0
    report("criterion 3 rasterizer", ok,
           f"forward oracle err {worst_fwd:.2e} (<1e-6), worst FD rel err "
           f"{worst:.2e} (<1e-3) over {list(worst_grad)}, suite {elapsed:.1f}s (<60s)")


# ---------------------------------------------------------------------------
# Criterion 4 — LBS deformation correctness
# ---------------------------------------------------------------------------

def test_criterion_4_lbs(rng):
    from skysplat.body import forward_kinematics, make_capsule_rig
    rig = make_capsule_rig(24)
    g = init_human(rig)
    theta = qm.random_unit(rng, (24,))
    psi = rng.normal(size=3)
    posed = deform_human(g, rig, theta, psi)
    rot, trans = forward_kinematics(rig, theta)
    w = g.skin_weights()
    naive = np.einsum("nk,kij,nj->ni", w, rot, g.means) \
        + w @ trans + psi
    worst = np.abs(posed.means - naive).max()

    ident = deform_human(g, rig, np.tile(qm.IDENTITY, (24, 1)), np.zeros(3))
    ident_err = np.abs(ident.means - g.means).max()

    # Rigid equivariance: a root rotation about the rest pelvis moves all
    # Gaussians rigidly.
    theta_rigid = np.tile(qm.IDENTITY, (24, 1))
    theta_rigid[0] = qm.random_unit(rng)
    R = qm.to_matrix(theta_rigid[0])
    j0 = rig.rest_joints()[0]
    rigid = deform_human(g, rig, theta_rigid, np.zeros(3))
    expect = (g.means - j0) @ R.T + j0
    rigid_err = np.abs(rigid.means - expect).max()

    ok = worst < 1e-6 and ident_err < 1e-9 and rigid_err < 1e-9
    report("criterion 4 lbs", ok,
           f"naive-blend err {worst:.2e} (<1e-6), identity {ident_err:.2e}, "
           f"rigid equivariance {rigid_err:.2e}")


# ---------------------------------------------------------------------------
# Criterion 5 — refinement behavior
# ---------------------------------------------------------------------------

def test_criterion_5_refinement(tmp_path, rng):
    import shutil
    from skysplat.fixtures import corrupt_track
    from skysplat.refine import refine_tracks
    src_dir = tmp_path / "scene"
    generate_scene(src_dir, seed=13, n_frames=8, n_people=1, width=96,
                   height=64, render_images=False)
    corrupt_track(src_dir / "manifest.json", frame=4, person=0, mode="blowup")
    scene = pipeline.load_scene(src_dir / "manifest.json")
    refined = pipeline.stage_refine(scene, tmp_path / "wd")
    blown = pipeline.build_track_frames(scene)[0][4]
    ratio = bbox_area(blown.bbox_projected) / bbox_area(blown.bbox_detected)
    repaired = refined[0][4].status == FrameStatus.INTERPOLATED

    # Idempotence over 100 random corruption patterns.
    masks = {0: {t: scene.human_mask(t, 0) for t in range(scene.n_frames)}}
    frames0 = pipeline.build_track_frames(scene)
    stable = True
    for trial in range(100):
        frames = {0: dict(frames0[0])}
        for t in range(scene.n_frames):
            r = rng.random()
            tf = frames[0][t]
            if r < 0.2 and tf.params is not None:
                import dataclasses
                bad_beta = tf.params.beta.copy()
                bad_beta[0] += 1.0
                from skysplat.body import BodyParams
                frames[0][t] = dataclasses.replace(
                    tf, params=BodyParams(tf.params.theta, bad_beta,
                                          tf.params.psi),
                    bbox_projected=tuple(2.0 * np.asarray(tf.bbox_projected)))
            elif r < 0.35:
                import dataclasses
                frames[0][t] = dataclasses.replace(
                    tf, params=None, status=FrameStatus.MISSING)
        once = refine_tracks(frames, {0: masks[0]}, 1.2, 5)
        twice = refine_tracks(once, {0: masks[0]}, 1.2, 5)
        s1 = [once[0][t].status for t in sorted(once[0])]
        s2 = [twice[0][t].status for t in sorted(twice[0])]
        if s1 != s2:
            stable = False
            break
    ok = ratio > 1.2 and repaired and stable
    report("criterion 5 refinement", ok,
           f"blowup ratio {ratio:.2f} (>1.2) repaired={repaired}, "
           f"idempotent over 100 corruption patterns={stable}")


# ---------------------------------------------------------------------------
# Criterion 6 — background reconstruction
# ---------------------------------------------------------------------------

def test_criterion_6_background(rng):
    from skysplat.background import (BackgroundMesh, estimate_normals,
                                     poisson_reconstruct, render_depth)
    side = 100
    g = np.linspace(-1, 1, side)
    gx, gy = np.meshgrid(g, g)
    pts = np.stack([gx.ravel(), gy.ravel(),
                    rng.normal(0, 0.01, side * side)], axis=1)
    pts[:, :2] += rng.normal(0, 0.005, (side * side, 2))
    normals = estimate_normals(pts, 16, np.array([[0, 0, 5.0]]))
    mesh = poisson_reconstruct(pts, normals, grid_depth=6)
    inside = (np.abs(mesh.vertices[:, 0]) < 0.9) & (np.abs(mesh.vertices[:, 1]) < 0.9)
    rms = float(np.sqrt(np.mean(mesh.vertices[inside, 2] ** 2)))

    verts = rng.normal(size=(9, 3)) * 3.0
    verts[:, 2] = rng.uniform(2.5, 4.0, 9)
    tri = BackgroundMesh(verts, np.array([[0, 1, 2], [3, 4, 5], [6, 7, 8]]))
    cam = CameraPose(np.array([[6.0, 0, 7.5], [0, 6.0, 7.5], [0, 0, 1]]),
                     np.eye(3), np.zeros(3))
    D = render_depth(tri, cam, 16, 16)
    from tests.test_background import raycast_oracle
    O = raycast_oracle(tri, cam, 16, 16)
    both = np.isfinite(D) & np.isfinite(O)
    depth_err = float(np.abs(D[both] - O[both]).max()) if both.any() else 0.0
    ok = rms < 0.02 and both.sum() > 20 and depth_err < 1e-4
    report("criterion 6 background", ok,
           f"plane RMS {rms:.4f} (<0.02), depth-vs-raycast max err "
           f"{depth_err:.2e} (<1e-4) on {int(both.sum())} probe pixels")


# ---------------------------------------------------------------------------
# Criterion 7 — end-to-end desk-scale run (plus criterion 8 on its output)
# ---------------------------------------------------------------------------

@pytest.fixture(scope="module")
def desk_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("desk") / "scene"
    generate_scene(out, seed=7, n_frames=48, n_people=3, width=96, height=64)
    scene = pipeline.load_scene(out / "manifest.json")
    wd = out / "wd"
    refined = pipeline.stage_refine(scene, wd)
    mesh = pipeline.stage_recon(scene, wd)
    rep = pipeline.stage_scale(scene, refined, wd)
    placement = pipeline.stage_place(scene, refined, mesh, rep["sigma"], wd)

    state = init_state(scene, refined, placement, rep["sigma"])
    t0 = time.time()
    train(state, scene, 3000, workdir=wd, seed=0, log_every=500)
    wall = time.time() - t0
    metrics = evaluate(state, scene, split="test")

    state_bg = init_state(scene, refined, placement, rep["sigma"],
                          include_humans=False)
    train(state_bg, scene, 3000, seed=0, log_every=3000)
    metrics_bg = evaluate(state_bg, scene, split="test")
    return {"scene": scene, "state": state, "metrics": metrics,
            "metrics_bg": metrics_bg, "wall": wall}


def test_criterion_7_end_to_end(desk_run):
    m = desk_run["metrics"]
    mb = desk_run["metrics_bg"]
    gain = m["mean_psnr_human"] - mb["mean_psnr_human"]
    ok = (m["mean_psnr"] > 28.0 and gain >= 2.0
          and desk_run["wall"] < 900.0)
    report("criterion 7 end-to-end", ok,
           f"held-out PSNR {m['mean_psnr']:.2f} (>28), human-region "
           f"{m['mean_psnr_human']:.2f} vs background-only "
           f"{mb['mean_psnr_human']:.2f} (gain {gain:.2f} dB, >=2), "
           f"train wall {desk_run['wall']:.0f}s (<900)")


def test_criterion_8_scene_editing(desk_run):
    from scipy.ndimage import binary_dilation
    scene = desk_run["scene"]
    state = desk_run["state"]
    t = 9
    full = render_frame(state, scene, t)
    removed = edit_scene(state, [{"op": "remove", "person": 0}])
    partial = render_frame(removed, scene, t)
    diff = np.abs(full.image - partial.image).max(axis=2)
    changed = diff > 1e-6
    gt_mask = scene.human_mask(t, 0)
    radius = int(np.ceil(full.tape.radius.max())) + 1
    dilated = binary_dilation(gt_mask,
                              np.ones((2 * radius + 1, 2 * radius + 1)))
    outside = changed & ~dilated
    zero = edit_scene(state, [{"op": "translate", "person": 1,
                               "delta": [0.0, 0.0, 0.0]}])
    z_img = render_frame(zero, scene, t)
    identical = np.array_equal(z_img.image, full.image)
    ok = not outside.any() and identical and changed.any()
    report("criterion 8 scene editing", ok,
           f"pixels changed outside dilated silhouette: {int(outside.sum())} "
           f"(=0), translate-by-zero identical: {identical}")


# ---------------------------------------------------------------------------
# Criterion 9 — loss stack
# ---------------------------------------------------------------------------

def test_criterion_9_loss_stack(rng):
    x = rng.random((16, 18, 3))
    y = np.clip(x + rng.normal(0, 0.1, x.shape), 0, 1)

    checks = {}

    def fd(f, arr, grad, samples=8, h=1e-6):
        worst = 0.0
        for _ in range(samples):
            ix = tuple(rng.integers(0, s) for s in arr.shape)
            ap = arr.copy(); ap[ix] += h
            am = arr.copy(); am[ix] -= h
            est = (f(ap) - f(am)) / (2 * h)
            worst = max(worst, abs(est - grad[ix])
                        / max(abs(est), abs(grad[ix]), 1e-6))
        return worst

    _, _, g1, gs = photometric_loss(x, y, with_grad=True)
    checks["l1"] = fd(lambda a: photometric_loss(a, y)[0], x, g1)
    checks["dssim"] = fd(lambda a: photometric_loss(a, y)[1], x, gs)

    o = rng.uniform(0.05, 0.95, (12, 12))
    sky = rng.random((12, 12)) > 0.7
    _, go = opacity_loss(o, sky, with_grad=True)
    checks["opacity"] = fd(lambda a: opacity_loss(a, sky), o, go)

    pts = rng.normal(size=(30, 3))
    idx = build_knn(pts, 6)
    attrs = {"a": rng.normal(size=(30, 3))}
    _, gk = knn_regularizer(attrs, idx, with_grad=True)
    checks["knn"] = fd(lambda a: knn_regularizer({"a": a}, idx), attrs["a"],
                       gk["a"])

    th = rng.normal(size=(7, 3, 4))
    _, gsm = smoothness_loss(th, with_grad=True)
    checks["smooth"] = fd(lambda a: smoothness_loss(a), th, gsm)

    ssim_ident = ssim(x, x)
    opac_form = opacity_loss(np.full((10, 10), 0.5))
    worst = max(checks.values())
    ok = (worst < 1e-3 and abs(ssim_ident - 1.0) < 1e-12
          and abs(opac_form - 0.5 * np.log(2)) < 1e-12)
    report("criterion 9 loss stack", ok,
           f"worst FD rel err {worst:.2e} (<1e-3) over {sorted(checks)}, "
           f"SSIM(x,x)={ssim_ident}, opacity@0.5={opac_form:.6f} "
           f"(= ln2/2 {0.5*np.log(2):.6f})")
