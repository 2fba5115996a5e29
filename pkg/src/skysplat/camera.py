"""Pinhole camera model.

Convention: extrinsics map world to camera, ``x_cam = R @ x_world + T``.
Unprojection therefore recovers ``sigma * R^T (K^-1 * d * [u, v, 1]) - sigma * R^T T``
for a pixel with depth ``d`` under a global geometry scale ``sigma``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import BehindCamera, NonInvertibleK, NonPositiveScale


@dataclass(frozen=True)
class CameraPose:
    K: np.ndarray  # 3x3 intrinsics, pixels
    R: np.ndarray  # 3x3 world-to-camera rotation
    T: np.ndarray  # 3 world-to-camera translation, scene units

    def __post_init__(self):
        K = np.asarray(self.K, dtype=np.float64).reshape(3, 3)
        R = np.asarray(self.R, dtype=np.float64).reshape(3, 3)
        T = np.asarray(self.T, dtype=np.float64).reshape(3)
        object.__setattr__(self, "K", K)
        object.__setattr__(self, "R", R)
        object.__setattr__(self, "T", T)
        if not np.allclose(R @ R.T, np.eye(3), atol=1e-5):
            raise ValueError("R is not orthonormal")
        if not np.isclose(np.linalg.det(R), 1.0, atol=1e-5):
            raise ValueError("R must have determinant +1")
        if K[0, 0] <= 0 or K[1, 1] <= 0 or np.any(np.abs(K[[1, 2, 2], [0, 0, 1]]) > 1e-9):
            raise ValueError("K must be upper-triangular with positive focals")

    @property
    def center(self) -> np.ndarray:
        """Camera center in world coordinates (-R^T T)."""
        return -self.R.T @ self.T

    def to_dict(self) -> dict:
        return {"K": self.K.tolist(), "R": self.R.tolist(), "T": self.T.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "CameraPose":
        return cls(np.array(d["K"]), np.array(d["R"]), np.array(d["T"]))


def project(point_world, cam: CameraPose):
    """Project a world point; returns ((u, v), depth). Raises BehindCamera for z <= 0."""
    p = np.asarray(point_world, dtype=np.float64)
    pc = cam.R @ p + cam.T
    if pc[2] <= 0:
        raise BehindCamera(f"point has camera depth {pc[2]:.6g}")
    uvw = cam.K @ pc
    return uvw[:2] / uvw[2], float(pc[2])


def project_many(points_world: np.ndarray, cam: CameraPose):
    """Vectorized projection. Returns (n x 2 pixels, n depths); callers cull z <= 0."""
    pc = points_world @ cam.R.T + cam.T
    z = pc[:, 2]
    uvw = pc @ cam.K.T
    with np.errstate(divide="ignore", invalid="ignore"):
        px = uvw[:, :2] / uvw[:, 2:3]
    return px, z


def unproject(pixel, depth: float, cam: CameraPose, sigma: float = 1.0) -> np.ndarray:
    """Lift a pixel at the given camera depth into (sigma-scaled) world coordinates."""
    if depth <= 0:
        raise BehindCamera(f"depth {depth} must be positive")
    if sigma <= 0:
        raise NonPositiveScale(f"sigma {sigma} must be positive")
    try:
        Kinv = np.linalg.inv(cam.K)
    except np.linalg.LinAlgError as exc:
        raise NonInvertibleK(str(exc)) from exc
    uv1 = np.array([pixel[0], pixel[1], 1.0], dtype=np.float64)
    return sigma * (cam.R.T @ (Kinv @ (depth * uv1))) - sigma * (cam.R.T @ cam.T)


def scale_pose(cam: CameraPose, sigma: float) -> CameraPose:
    """Rescale the pose so scaling world geometry by sigma leaves projections fixed."""
    if sigma <= 0:
        raise NonPositiveScale(f"sigma {sigma} must be positive")
    return CameraPose(cam.K, cam.R, sigma * cam.T)
