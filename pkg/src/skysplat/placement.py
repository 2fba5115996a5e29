"""World-space human placement: unproject the 2D ground-contact point of
each detection through the background-mesh depth, then lift the root by the
pelvis offset along the scene's up axis.
"""

from __future__ import annotations

import numpy as np

from .camera import CameraPose, unproject
from .errors import NoGroundDepth
from .refine import FrameStatus, TrackFrame


def contact_pixel(bbox) -> tuple[float, float]:
    """Bottom-center of the box: ((x_min + x_max)/2, y_max)."""
    x0, y0, x1, y1 = bbox
    return ((x0 + x1) / 2.0, y1)


def _depth_at(depth_map: np.ndarray, x: float, y: float,
              search_radius: int) -> float:
    h, w = depth_map.shape
    xi = int(round(x))
    yi = int(round(y))
    xi = min(max(xi, 0), w - 1)
    yi = min(max(yi, 0), h - 1)
    if np.isfinite(depth_map[yi, xi]):
        return float(depth_map[yi, xi])
    # Hole fallback: nearest finite depth within the search window.
    r = search_radius
    ys = slice(max(yi - r, 0), min(yi + r + 1, h))
    xs = slice(max(xi - r, 0), min(xi + r + 1, w))
    window = depth_map[ys, xs]
    finite = np.isfinite(window)
    if not finite.any():
        raise NoGroundDepth(f"no finite depth near contact pixel ({x:.1f}, {y:.1f})")
    wy, wx = np.nonzero(finite)
    wy = wy + ys.start
    wx = wx + xs.start
    d2 = (wy - yi) ** 2 + (wx - xi) ** 2
    j = int(np.argmin(d2))
    return float(depth_map[wy[j], wx[j]])


def place_human(bbox, depth_map: np.ndarray, cam: CameraPose, sigma: float,
                up_axis: np.ndarray, pelvis_offset: float = 1.0,
                search_radius: int = 3) -> np.ndarray:
    """Root translation: scaled unprojection of the contact point plus the
    pelvis offset along the up axis."""
    xc, yc = contact_pixel(bbox)
    d = _depth_at(depth_map, xc, yc, search_radius)
    ground = unproject((xc, yc), d, cam, sigma)
    return ground + pelvis_offset * np.asarray(up_axis, dtype=np.float64)


def place_all(tracks: dict[int, dict[int, TrackFrame]],
              depth_maps: dict[int, np.ndarray],
              cams: dict[int, CameraPose], sigma: float,
              up_axis: np.ndarray, pelvis_offset: float = 1.0,
              search_radius: int = 3) -> dict[int, dict[int, np.ndarray]]:
    """Fill roots for every valid/interpolated frame; missing frames are
    skipped. Returns {person: {frame: root}}."""
    roots: dict[int, dict[int, np.ndarray]] = {}
    for pid, track in tracks.items():
        out = {}
        for t, tf in track.items():
            if tf.status not in (FrameStatus.VALID, FrameStatus.INTERPOLATED):
                continue
            if tf.bbox_detected is None or t not in depth_maps:
                continue
            out[t] = place_human(tf.bbox_detected, depth_maps[t], cams[t],
                                 sigma, up_axis, pelvis_offset, search_radius)
        roots[pid] = out
    return roots
