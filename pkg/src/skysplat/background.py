"""Static background geometry: confidence-percentile point filtering, normal
estimation, Poisson surface reconstruction on a regular grid, and z-buffer
depth rendering of the resulting mesh.

The Poisson solve follows the indicator-field recipe: splat unit normals
into a staggered-free node grid with trilinear weights, take the central
difference divergence, solve the 7-point Neumann Laplacian with conjugate
gradients (algebraic-multigrid preconditioned), and extract the iso-surface
at the mean indicator value of the input samples with marching cubes.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import pyamg
import scipy.sparse as sp
from scipy.sparse.linalg import cg
from scipy.spatial import cKDTree
from skimage.measure import marching_cubes

from .camera import CameraPose
from .errors import DegenerateInput, EmptyResult, SolverDivergence
from .tensor_io import read_tensor, write_tensor


@dataclass
class BackgroundMesh:
    vertices: np.ndarray  # n x 3
    faces: np.ndarray     # m x 3 int

    def save(self, out_dir):
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        write_tensor(out / "vertices.t", self.vertices.astype(np.float32))
        # Face indices stored as f32 (exact for meshes below 2^24 vertices);
        # the tensor format deliberately has no wide integer dtype.
        write_tensor(out / "faces.t", self.faces.astype(np.float32))

    @classmethod
    def load(cls, in_dir):
        src = Path(in_dir)
        return cls(
            vertices=read_tensor(src / "vertices.t").astype(np.float64),
            faces=np.rint(read_tensor(src / "faces.t")).astype(np.int64),
        )

    def export_ply(self, path):
        """ASCII PLY for quick inspection in external viewers."""
        with open(path, "w") as fh:
            fh.write("ply\nformat ascii 1.0\n")
            fh.write(f"element vertex {len(self.vertices)}\n")
            fh.write("property float x\nproperty float y\nproperty float z\n")
            fh.write(f"element face {len(self.faces)}\n")
            fh.write("property list uchar int vertex_indices\nend_header\n")
            for v in self.vertices:
                fh.write(f"{v[0]:.6f} {v[1]:.6f} {v[2]:.6f}\n")
            for f in self.faces:
                fh.write(f"3 {f[0]} {f[1]} {f[2]}\n")

    def dominant_up_axis(self, toward: np.ndarray | None = None) -> np.ndarray:
        """Area-weighted dominant face normal; the world 'up' used for the
        pelvis offset at placement time.

        ``toward`` (e.g. the mean camera center) fixes the sign: up points
        from the mesh centroid toward it. Without it, the mean face normal
        decides.
        """
        v = self.vertices
        f = self.faces
        e1 = v[f[:, 1]] - v[f[:, 0]]
        e2 = v[f[:, 2]] - v[f[:, 0]]
        cr = np.cross(e1, e2)  # |cr| = 2 * area
        # Normal sign is arbitrary per-face; use the orientation-agnostic
        # scatter matrix and take its principal eigenvector.
        M = cr.T @ cr
        _, vecs = np.linalg.eigh(M)
        up = vecs[:, -1]
        if toward is not None:
            ref = np.asarray(toward, dtype=np.float64) - v.mean(axis=0)
        else:
            ref = cr.sum(axis=0)
        if np.dot(up, ref) < 0:
            up = -up
        return up / np.linalg.norm(up)


def percentile_filter(point_maps, confidences, conf_percentile: float):
    """Keep points whose confidence reaches the percentile computed jointly
    over all frames. Returns (points, keep_masks)."""
    if not 0.0 <= conf_percentile <= 100.0:
        raise ValueError("percentile must lie in [0, 100]")
    confs = [np.asarray(c, dtype=np.float64) for c in confidences]
    flat = np.concatenate([c.reshape(-1) for c in confs])
    thresh = np.percentile(flat, conf_percentile)
    keep_masks = [c >= thresh for c in confs]
    pts = [np.asarray(pm)[m] for pm, m in zip(point_maps, keep_masks)]
    points = np.concatenate(pts, axis=0) if pts else np.zeros((0, 3))
    if points.shape[0] == 0:
        raise EmptyResult("confidence filter removed every point")
    return points, keep_masks


def estimate_normals(points: np.ndarray, k_neighbors: int,
                     camera_centers: np.ndarray) -> np.ndarray:
    """Per-point PCA normals oriented toward the mean camera center."""
    pts = np.asarray(points, dtype=np.float64)
    n = pts.shape[0]
    if k_neighbors >= n:
        raise DegenerateInput(f"k={k_neighbors} >= point count {n}")
    tree = cKDTree(pts)
    _, idx = tree.query(pts, k=k_neighbors + 1)
    nbrs = pts[idx]                                     # n x (k+1) x 3
    centered = nbrs - nbrs.mean(axis=1, keepdims=True)
    cov = np.einsum("nki,nkj->nij", centered, centered)
    _, vecs = np.linalg.eigh(cov)
    normals = vecs[:, :, 0]                             # smallest eigenvalue
    target = np.mean(np.atleast_2d(camera_centers), axis=0)
    flip = np.einsum("ni,ni->n", normals, target - pts) < 0
    normals[flip] *= -1.0
    return normals


def poisson_reconstruct(points: np.ndarray, normals: np.ndarray,
                        grid_depth: int = 7, cg_tol: float = 1e-8,
                        cg_max_iter: int = 2000, pad: float = 0.1) -> BackgroundMesh:
    """Indicator-field surface reconstruction on a 2**grid_depth node grid."""
    pts = np.asarray(points, dtype=np.float64)
    nrm = np.asarray(normals, dtype=np.float64)
    if pts.shape[0] < 4:
        raise DegenerateInput("need at least 4 points")
    lo = pts.min(axis=0)
    hi = pts.max(axis=0)
    extent = hi - lo
    if np.max(extent) < 1e-9:
        raise DegenerateInput("all points identical")
    # Cubical domain with padding so the splatted field vanishes at walls.
    size = float(np.max(extent)) * (1.0 + 2.0 * pad)
    center = 0.5 * (lo + hi)
    origin = center - 0.5 * size
    N = 2 ** grid_depth
    h = size / (N - 1)

    # Trilinear splat of the normal field onto grid nodes.
    gcoord = (pts - origin) / h
    gcoord = np.clip(gcoord, 0.0, N - 1 - 1e-9)
    base = np.floor(gcoord).astype(np.int64)
    frac = gcoord - base
    field = np.zeros((3, N, N, N))
    for corner in range(8):
        off = np.array([(corner >> 2) & 1, (corner >> 1) & 1, corner & 1])
        w = np.prod(np.where(off[None, :] == 1, frac, 1.0 - frac), axis=1)
        ix, iy, iz = (base + off).T
        for c in range(3):
            np.add.at(field[c], (ix, iy, iz), w * nrm[:, c])

    # RHS: central-difference divergence (Neumann-consistent: one-sided at
    # the walls, where the field is zero anyway thanks to the padding).
    div = np.zeros((N, N, N))
    for c, axis in enumerate(range(3)):
        d = np.zeros((N, N, N))
        sl_p = [slice(None)] * 3
        sl_m = [slice(None)] * 3
        sl_c = [slice(None)] * 3
        sl_p[axis] = slice(2, None)
        sl_m[axis] = slice(0, -2)
        sl_c[axis] = slice(1, -1)
        d[tuple(sl_c)] = (field[c][tuple(sl_p)] - field[c][tuple(sl_m)]) / (2 * h)
        div += d

    A = _neumann_laplacian(N) / (h * h)
    b = div.reshape(-1)
    b = b - b.mean()  # project onto the solvable range of the singular system
    ml = pyamg.smoothed_aggregation_solver(A.tocsr(), B=np.ones((A.shape[0], 1)))
    M = ml.aspreconditioner()
    chi, info = cg(A, b, rtol=cg_tol, maxiter=cg_max_iter, M=M)
    if info < 0:
        raise SolverDivergence(f"conjugate gradient failed (info={info})")
    chi = chi.reshape(N, N, N)

    # Iso level: mean indicator value at the input samples.
    iso = float(np.mean(_trilinear(chi, gcoord)))
    span = chi.max() - chi.min()
    if span < 1e-12:
        raise SolverDivergence("indicator field is constant")
    level = np.clip(iso, chi.min() + 1e-9 * span, chi.max() - 1e-9 * span)
    verts, faces, _, _ = marching_cubes(chi, level=level, spacing=(h, h, h))
    verts = verts + origin
    # Drop zero-area faces.
    e1 = verts[faces[:, 1]] - verts[faces[:, 0]]
    e2 = verts[faces[:, 2]] - verts[faces[:, 0]]
    area2 = np.linalg.norm(np.cross(e1, e2), axis=1)
    faces = faces[area2 > 1e-14]
    return BackgroundMesh(vertices=verts, faces=np.asarray(faces, dtype=np.int64))


def _neumann_laplacian(N: int) -> sp.spmatrix:
    """Negative-semidefinite-free 7-point Laplacian with Neumann walls,
    scaled for unit spacing (caller divides by h^2). Positive semi-definite
    with the constant nullspace."""
    d = _neumann_1d(N)
    eye = sp.identity(N, format="csr")
    return (sp.kron(sp.kron(d, eye), eye)
            + sp.kron(sp.kron(eye, d), eye)
            + sp.kron(sp.kron(eye, eye), d))


def _neumann_1d(N: int) -> sp.spmatrix:
    main = np.full(N, 2.0)
    main[0] = main[-1] = 1.0
    off = -np.ones(N - 1)
    return sp.diags([off, main, off], [-1, 0, 1], format="csr")


def _trilinear(volume: np.ndarray, coords: np.ndarray) -> np.ndarray:
    base = np.floor(coords).astype(np.int64)
    N = volume.shape[0]
    base = np.clip(base, 0, N - 2)
    frac = coords - base
    out = np.zeros(coords.shape[0])
    for corner in range(8):
        off = np.array([(corner >> 2) & 1, (corner >> 1) & 1, corner & 1])
        w = np.prod(np.where(off[None, :] == 1, frac, 1.0 - frac), axis=1)
        ix, iy, iz = (base + off).T
        out += w * volume[ix, iy, iz]
    return out


def render_depth(mesh: BackgroundMesh, cam: CameraPose, width: int,
                 height: int) -> np.ndarray:
    """Z-buffer rasterization of the mesh; +inf where nothing is hit.

    Depth is perspective-correct (1/z interpolated in screen space), which
    is exact for planar triangles. Triangles with any vertex behind the
    camera are skipped.
    """
    depth = np.full((height, width), np.inf)
    v_cam = mesh.vertices @ cam.R.T + cam.T
    z = v_cam[:, 2]
    fx, fy = cam.K[0, 0], cam.K[1, 1]
    cx, cy = cam.K[0, 2], cam.K[1, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        px = fx * v_cam[:, 0] / z + cx
        py = fy * v_cam[:, 1] / z + cy
    tri_ok = np.all(z[mesh.faces] > 1e-9, axis=1)
    for f in mesh.faces[tri_ok]:
        xs, ys, zs = px[f], py[f], z[f]
        x0 = max(int(np.floor(xs.min())), 0)
        x1 = min(int(np.ceil(xs.max())), width - 1)
        y0 = max(int(np.floor(ys.min())), 0)
        y1 = min(int(np.ceil(ys.max())), height - 1)
        if x0 > x1 or y0 > y1:
            continue
        gx, gy = np.meshgrid(np.arange(x0, x1 + 1), np.arange(y0, y1 + 1))
        d = _edge_bary(xs, ys, gx, gy)
        if d is None:
            continue
        b0, b1, b2, inside = d
        if not np.any(inside):
            continue
        inv_z = b0 * (1.0 / zs[0]) + b1 * (1.0 / zs[1]) + b2 * (1.0 / zs[2])
        zpix = 1.0 / inv_z
        tile = depth[y0:y1 + 1, x0:x1 + 1]
        upd = inside & (zpix < tile)
        tile[upd] = zpix[upd]
    return depth


def _edge_bary(xs, ys, gx, gy):
    denom = (ys[1] - ys[2]) * (xs[0] - xs[2]) + (xs[2] - xs[1]) * (ys[0] - ys[2])
    if abs(denom) < 1e-12:
        return None
    b0 = ((ys[1] - ys[2]) * (gx - xs[2]) + (xs[2] - xs[1]) * (gy - ys[2])) / denom
    b1 = ((ys[2] - ys[0]) * (gx - xs[2]) + (xs[0] - xs[2]) * (gy - ys[2])) / denom
    b2 = 1.0 - b0 - b1
    inside = (b0 >= 0) & (b1 >= 0) & (b2 >= 0)
    return b0, b1, b2, inside
