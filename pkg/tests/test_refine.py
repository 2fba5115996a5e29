import numpy as np
import pytest

from skysplat import quatmath as qm
from skysplat.body import BodyParams, make_capsule_rig
from skysplat.camera import CameraPose, project_many
from skysplat.errors import AllVerticesBehindCamera
from skysplat.refine import (FrameStatus, TrackFrame, bbox_area,
                             interpolate_params, overlap_gate, projected_bbox,
                             ratio_filter, refine_tracks)

CAM = CameraPose(np.array([[40.0, 0, 31.5], [0, 40.0, 23.5], [0, 0, 1]]),
                 np.eye(3), np.array([0.0, 0.0, 6.0]))
W, H = 64, 48


@pytest.fixture(scope="module")
def rig():
    return make_capsule_rig(4, 0.4)


def params_at(rig, psi, scale_beta=0.0):
    beta = np.zeros(10)
    beta[0] = scale_beta
    return BodyParams(np.tile(qm.IDENTITY, (rig.n_joints, 1)), beta, psi)


def test_projected_bbox_matches_bruteforce(rig, rng):
    p = params_at(rig, np.array([0.2, -0.1, 0.0]))
    box = projected_bbox(rig, p, CAM, W, H)
    from skysplat.body import lbs_vertices
    verts = lbs_vertices(rig, p.theta, p.beta, p.psi)
    px, z = project_many(verts, CAM)
    px = px[z > 0]
    expect = (np.clip(px[:, 0].min(), 0, W - 1), np.clip(px[:, 1].min(), 0, H - 1),
              np.clip(px[:, 0].max(), 0, W - 1), np.clip(px[:, 1].max(), 0, H - 1))
    np.testing.assert_allclose(box, expect, atol=1e-12)


def test_projected_bbox_grows_toward_camera(rig):
    areas = []
    for z in (0.0, -1.0, -2.0, -3.0):
        box = projected_bbox(rig, params_at(rig, np.array([0, 0, z])), CAM, W, H)
        areas.append(bbox_area(box))
    assert all(a < b for a, b in zip(areas, areas[1:]))


def test_projected_bbox_single_point_degenerate():
    tiny = make_capsule_rig(2, 1e-9)
    # Collapse all vertices onto the principal ray.
    tiny.vertices[:] = 0.0
    p = BodyParams(np.tile(qm.IDENTITY, (2, 1)), np.zeros(10), np.zeros(3))
    box = projected_bbox(tiny, p, CAM, W, H)
    assert bbox_area(box) < 1e-9
    assert abs(box[0] - 31.5) < 1e-9 and abs(box[1] - 23.5) < 1e-9


def test_projected_bbox_behind_camera(rig):
    p = params_at(rig, np.array([0.0, 0.0, -20.0]))
    with pytest.raises(AllVerticesBehindCamera):
        projected_bbox(rig, p, CAM, W, H)


def frame(status=FrameStatus.VALID, det=10.0, proj=10.0, params=None, t=0):
    return TrackFrame(person_id=0, frame=t,
                      bbox_detected=(0, 0, det, det),
                      bbox_projected=(0, 0, proj, proj),
                      params=params, status=status)


def test_ratio_filter_boundary_rules():
    # area ratio 1.0 -> kept at the published 1.2 threshold
    kept = ratio_filter([frame(det=10, proj=10)], 1.2)
    assert kept[0].status == FrameStatus.VALID
    # exactly at the threshold -> kept (strict inequality)
    at = ratio_filter([frame(det=10, proj=10 * np.sqrt(1.2))], 1.2)
    assert at[0].status == FrameStatus.VALID
    # 1.5x area -> rejected
    over = ratio_filter([frame(det=10, proj=10 * np.sqrt(1.5))], 1.2)
    assert over[0].status == FrameStatus.REJECTED


def test_overlap_gate_cases():
    empty = np.zeros((20, 20), np.uint8)
    full = np.zeros((20, 20), np.uint8)
    full[8:12, 8:12] = 255
    bbox = (7.0, 7.0, 13.0, 13.0)
    assert not overlap_gate(empty, empty, bbox, 2)
    assert overlap_gate(full, full, bbox, 2)
    assert not overlap_gate(full, empty, bbox, 2)  # prev only
    assert not overlap_gate(empty, full, bbox, 2)
    # Dilation closes a gap: mask at distance 3 from the box edge.
    far = np.zeros((20, 20), np.uint8)
    far[0:2, 0:2] = 255
    assert not overlap_gate(far, far, bbox, 2)
    assert overlap_gate(far, far, bbox, 6)


def test_interpolate_params_cases(rng):
    rig = make_capsule_rig(3, 0.5)
    a = BodyParams(qm.random_unit(rng, (3,)), rng.normal(size=10),
                   rng.normal(size=3))
    same = interpolate_params(a, a)
    np.testing.assert_allclose(np.abs(np.sum(same.theta * a.theta, axis=1)),
                               1.0, atol=1e-12)
    np.testing.assert_allclose(same.beta, a.beta)
    # 180-degree arc midpoint: 90 degrees about z.
    q0 = np.tile(qm.IDENTITY, (3, 1))
    q1 = q0.copy()
    q1[0] = [np.cos(np.pi / 2), 0, 0, np.sin(np.pi / 2)]
    mid = interpolate_params(BodyParams(q0, np.zeros(10), np.zeros(3)),
                             BodyParams(q1, np.zeros(10), np.zeros(3)))
    expect = np.array([np.cos(np.pi / 4), 0, 0, np.sin(np.pi / 4)])
    assert min(np.linalg.norm(mid.theta[0] - expect),
               np.linalg.norm(mid.theta[0] + expect)) < 1e-9


def test_interpolated_quaternions_near_slerp(rng):
    for _ in range(20):
        q0 = qm.random_unit(rng, (4,))
        # arcs under 90 degrees
        ang = rng.uniform(0, np.pi / 2, 4)
        ax = rng.normal(size=(4, 3))
        ax /= np.linalg.norm(ax, axis=1, keepdims=True)
        delta = np.concatenate([np.cos(ang / 2)[:, None],
                                np.sin(ang / 2)[:, None] * ax], axis=1)
        q1 = qm.multiply(q0, delta)
        a = BodyParams(q0, np.zeros(10), np.zeros(3))
        b = BodyParams(q1, np.zeros(10), np.zeros(3))
        mid = interpolate_params(a, b)
        s = qm.slerp(q0, q1, 0.5)
        dots = np.clip(np.abs(np.sum(mid.theta * s, axis=1)), -1, 1)
        assert np.degrees(2 * np.arccos(dots)).max() < 5.0
        np.testing.assert_allclose(np.linalg.norm(mid.theta, axis=1), 1.0,
                                   atol=1e-12)


def test_interpolated_beta_between_neighbors(rng):
    rig = make_capsule_rig(3, 0.5)
    a = BodyParams(np.tile(qm.IDENTITY, (3, 1)), rng.normal(size=10), np.zeros(3))
    b = BodyParams(np.tile(qm.IDENTITY, (3, 1)), rng.normal(size=10), np.zeros(3))
    mid = interpolate_params(a, b)
    lo = np.minimum(a.beta, b.beta)
    hi = np.maximum(a.beta, b.beta)
    assert np.all(mid.beta >= lo - 1e-12) and np.all(mid.beta <= hi + 1e-12)


def _track(rig, n=5, bad=None, drop=None):
    frames = {}
    masks = {}
    for t in range(n):
        psi = np.array([0.05 * t, 0.0, 0.0])
        params = params_at(rig, psi, scale_beta=1.0 if t == bad else 0.0)
        if t == drop:
            tf = TrackFrame(person_id=0, frame=t,
                            bbox_detected=projected_bbox(rig, params_at(rig, psi), CAM, W, H),
                            status=FrameStatus.MISSING)
        else:
            det = projected_bbox(rig, params_at(rig, psi), CAM, W, H)
            proj = projected_bbox(rig, params, CAM, W, H)
            tf = TrackFrame(person_id=0, frame=t, bbox_detected=det,
                            bbox_projected=proj, params=params,
                            status=FrameStatus.VALID)
        frames[t] = tf
        m = np.zeros((H, W), np.uint8)
        b = frames[t].bbox_detected
        m[int(b[1]):int(b[3]) + 1, int(b[0]):int(b[2]) + 1] = 255
        masks[t] = m
    return {0: frames}, {0: masks}


def test_refine_clean_track_unchanged(rig):
    frames, masks = _track(rig)
    out = refine_tracks(frames, masks, 1.2, 5)
    for t, tf in out[0].items():
        assert tf.status == FrameStatus.VALID
        assert tf.params is frames[0][t].params  # untouched object


def test_refine_blowup_rejected_then_interpolated(rig):
    frames, masks = _track(rig, bad=2)
    out = refine_tracks(frames, masks, 1.2, 5)
    assert out[0][2].status == FrameStatus.INTERPOLATED
    # Interpolated pose sits between the neighbors: position error under
    # twice the inter-frame motion.
    expect = 0.5 * (frames[0][1].params.psi + frames[0][3].params.psi)
    np.testing.assert_allclose(out[0][2].params.psi, expect, atol=0.1)
    assert np.all(out[0][2].params.beta == 0.0)


def test_refine_boundary_frame_stays_missing(rig):
    frames, masks = _track(rig, bad=0)
    out = refine_tracks(frames, masks, 1.2, 5)
    assert out[0][0].status == FrameStatus.MISSING


def test_refine_dropped_frame_repaired(rig):
    frames, masks = _track(rig, drop=2)
    out = refine_tracks(frames, masks, 1.2, 5)
    assert out[0][2].status == FrameStatus.INTERPOLATED


def test_refine_double_gap_stays_missing(rig):
    frames, masks = _track(rig, n=6)
    for t in (2, 3):
        frames[0][t] = TrackFrame(person_id=0, frame=t,
                                  bbox_detected=frames[0][t].bbox_detected,
                                  status=FrameStatus.MISSING)
    out = refine_tracks(frames, masks, 1.2, 5)
    assert out[0][2].status == FrameStatus.MISSING
    assert out[0][3].status == FrameStatus.MISSING


def _statuses(track):
    return [tf.status for t, tf in sorted(track.items())]


def test_refine_idempotent_over_random_corruptions(rig, rng):
    for trial in range(100):
        n = 6
        frames, masks = _track(rig, n=n)
        # Random corruption pattern: blow up or drop a few frames.
        for t in range(n):
            r = rng.random()
            if r < 0.25:
                psi = frames[0][t].params.psi
                bad = params_at(rig, psi, scale_beta=1.0)
                frames[0][t].params = bad
                frames[0][t].bbox_projected = projected_bbox(rig, bad, CAM, W, H)
            elif r < 0.4:
                frames[0][t] = TrackFrame(
                    person_id=0, frame=t,
                    bbox_detected=frames[0][t].bbox_detected,
                    status=FrameStatus.MISSING)
        once = refine_tracks(frames, masks, 1.2, 5)
        twice = refine_tracks(once, masks, 1.2, 5)
        assert _statuses(once[0]) == _statuses(twice[0])
        for t in once[0]:
            a, b = once[0][t], twice[0][t]
            if a.params is not None and b.params is not None:
                np.testing.assert_allclose(a.params.theta, b.params.theta,
                                           atol=1e-12)
            else:
                assert (a.params is None) == (b.params is None)
