"""Human-track refinement: reject body-mesh estimates whose projected
bounding box blows up relative to the detection, and repair single-frame
gaps by interpolating pose/shape from the temporal neighbors when the
dilated masks overlap the gap's box on both sides.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from enum import Enum

import numpy as np
from scipy.ndimage import binary_dilation

from . import quatmath as qm
from .body import BodyParams, BodyTemplate, lbs_vertices
from .camera import CameraPose, project_many
from .errors import AllVerticesBehindCamera


class FrameStatus(str, Enum):
    VALID = "valid"
    REJECTED = "rejected"
    INTERPOLATED = "interpolated"
    MISSING = "missing"


@dataclass
class TrackFrame:
    person_id: int
    frame: int
    bbox_detected: tuple | None = None
    bbox_projected: tuple | None = None
    params: BodyParams | None = None
    mask_path: str | None = None
    status: FrameStatus = FrameStatus.MISSING


def projected_bbox(tpl: BodyTemplate, params: BodyParams, cam: CameraPose,
                   width: int, height: int):
    """Axis-aligned box over the projected posed vertices, clamped to the
    image. Raises when every vertex lies behind the camera."""
    verts = lbs_vertices(tpl, params.theta, params.beta, params.psi)
    px, z = project_many(verts, cam)
    front = z > 1e-9
    if not np.any(front):
        raise AllVerticesBehindCamera(
            f"person {getattr(params, 'person_id', '?')}: no visible vertices")
    px = px[front]
    x0 = float(np.clip(px[:, 0].min(), 0, width - 1))
    x1 = float(np.clip(px[:, 0].max(), 0, width - 1))
    y0 = float(np.clip(px[:, 1].min(), 0, height - 1))
    y1 = float(np.clip(px[:, 1].max(), 0, height - 1))
    return (x0, y0, x1, y1)


def bbox_area(b):
    return max(b[2] - b[0], 0.0) * max(b[3] - b[1], 0.0)


def ratio_filter(frames: list[TrackFrame], box_ratio_limit: float) -> list[TrackFrame]:
    """Mark frames whose projected/detected box area ratio strictly exceeds
    the limit as rejected. Frames exactly at the limit are kept."""
    if box_ratio_limit <= 0:
        raise ValueError("box ratio limit must be positive")
    out = []
    for tf in frames:
        if (tf.status == FrameStatus.VALID and tf.bbox_projected is not None
                and tf.bbox_detected is not None):
            a_det = bbox_area(tf.bbox_detected)
            a_proj = bbox_area(tf.bbox_projected)
            # A degenerate detection cannot vouch for the mesh either way.
            ratio = a_proj / a_det if a_det > 1e-12 else np.inf
            if ratio > box_ratio_limit:
                tf = replace(tf, status=FrameStatus.REJECTED)
        out.append(tf)
    return out


def overlap_gate(mask_prev: np.ndarray, mask_next: np.ndarray, bbox,
                 dilation_px: int = 5) -> bool:
    """True iff the box intersects the dilated mask in both neighbors."""
    if bbox is None:
        return False

    x0, y0, x1, y1 = (int(np.floor(bbox[0])), int(np.floor(bbox[1])),
                      int(np.ceil(bbox[2])), int(np.ceil(bbox[3])))

    def hit(mask):
        if mask is None:
            return False
        m = np.asarray(mask) > 0
        if not m.any():
            return False
        if dilation_px > 0:
            size = 2 * dilation_px + 1
            m = binary_dilation(m, structure=np.ones((size, size), dtype=bool))
        h, w = m.shape
        xa, xb = max(x0, 0), min(x1, w - 1)
        ya, yb = max(y0, 0), min(y1, h - 1)
        if xa > xb or ya > yb:
            return False
        return bool(m[ya:yb + 1, xa:xb + 1].any())

    return hit(mask_prev) and hit(mask_next)


def interpolate_params(prev: BodyParams, nxt: BodyParams) -> BodyParams:
    """Midpoint interpolation: per-joint shortest-arc nlerp for the pose,
    arithmetic mean for shape and root."""
    theta = qm.nlerp(prev.theta, nxt.theta, 0.5)
    beta = 0.5 * (prev.beta + nxt.beta)
    psi = 0.5 * (prev.psi + nxt.psi)
    return BodyParams(theta, beta, psi, present=True)


def refine_tracks(frames_by_person: dict[int, dict[int, TrackFrame]],
                  masks_by_person: dict[int, dict[int, np.ndarray]] | None,
                  box_ratio_limit: float = 1.2,
                  dilation_px: int = 5) -> dict[int, dict[int, TrackFrame]]:
    """Rejection pass followed by single-frame-gap interpolation.

    Only originally-valid frames serve as interpolation sources, so the
    operation is idempotent and never touches a valid frame. Holes that
    cannot be repaired become missing.
    """
    refined: dict[int, dict[int, TrackFrame]] = {}
    for pid, track in frames_by_person.items():
        ts = sorted(track.keys())
        filtered = {tf.frame: tf for tf in
                    ratio_filter([track[t] for t in ts], box_ratio_limit)}
        masks = (masks_by_person or {}).get(pid, {})
        out = {}
        for t in ts:
            tf = filtered[t]
            if tf.status == FrameStatus.VALID:
                out[t] = tf
                continue
            prev = filtered.get(t - 1)
            nxt = filtered.get(t + 1)
            sources_ok = (prev is not None and nxt is not None
                          and prev.status == FrameStatus.VALID
                          and nxt.status == FrameStatus.VALID)
            gate = sources_ok and overlap_gate(
                masks.get(t - 1), masks.get(t + 1), tf.bbox_detected,
                dilation_px)
            if sources_ok and gate:
                params = interpolate_params(prev.params, nxt.params)
                out[t] = replace(tf, params=params,
                                 status=FrameStatus.INTERPOLATED)
            else:
                out[t] = replace(tf, status=FrameStatus.MISSING)
        refined[pid] = out
    return refined
