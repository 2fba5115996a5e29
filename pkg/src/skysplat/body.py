"""Canonical articulated body: forward kinematics and linear blend skinning.

The template interface is SMPL-compatible (canonical vertices, joint
regressor, skinning weights, kinematic tree, optional shape blendshapes).
``make_capsule_rig`` builds a fully synthetic rig so nothing in the test
suite depends on licensed body-model assets.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import quatmath as qm
from .config import COCO_KEYPOINT_NAMES
from .tensor_io import read_tensor, write_tensor


@dataclass
class BodyTemplate:
    vertices: np.ndarray          # n_v x 3 canonical rest pose, metric units
    faces: np.ndarray             # n_f x 3 int
    joint_regressor: np.ndarray   # n_b x n_v
    weights: np.ndarray           # n_v x n_b, rows sum to 1
    parents: np.ndarray           # n_b ints, -1 for the pelvis root
    shape_basis: np.ndarray | None = None  # n_v x 3 x n_shape
    keypoint_map: dict[str, int] = field(default_factory=dict)
    body_bone_pairs: list[tuple[int, int]] = field(default_factory=list)
    pelvis_offset: float = 1.0    # ground-to-pelvis distance used at placement

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64)
        self.faces = np.asarray(self.faces, dtype=np.int64)
        self.joint_regressor = np.asarray(self.joint_regressor, dtype=np.float64)
        self.weights = np.asarray(self.weights, dtype=np.float64)
        self.parents = np.asarray(self.parents, dtype=np.int64)
        rows = self.weights.sum(axis=1)
        if np.any(self.weights < -1e-9) or np.max(np.abs(rows - 1.0)) > 1e-5:
            raise ValueError("skinning weight rows must be non-negative and sum to 1")
        if self.parents[0] != -1 or np.any(self.parents[1:] >= np.arange(1, self.n_joints)):
            raise ValueError("kinematic chain must be a tree rooted at joint 0")

    @property
    def n_vertices(self) -> int:
        return self.vertices.shape[0]

    @property
    def n_joints(self) -> int:
        return self.joint_regressor.shape[0]

    def shaped_vertices(self, beta) -> np.ndarray:
        if self.shape_basis is None or beta is None:
            return self.vertices
        beta = np.asarray(beta, dtype=np.float64)
        k = min(beta.shape[0], self.shape_basis.shape[2])
        return self.vertices + self.shape_basis[:, :, :k] @ beta[:k]

    def rest_joints(self, beta=None) -> np.ndarray:
        return self.joint_regressor @ self.shaped_vertices(beta)

    def coco_joint_ids(self) -> np.ndarray:
        """Joint index per COCO keypoint slot, -1 where unmapped."""
        out = np.full(len(COCO_KEYPOINT_NAMES), -1, dtype=np.int64)
        for i, name in enumerate(COCO_KEYPOINT_NAMES):
            out[i] = self.keypoint_map.get(name, -1)
        return out


@dataclass
class BodyParams:
    theta: np.ndarray             # n_b x 4 unit quaternions, root first
    beta: np.ndarray              # shape coefficients
    psi: np.ndarray               # world root translation
    present: bool = True

    def __post_init__(self):
        self.theta = np.asarray(self.theta, dtype=np.float64).reshape(-1, 4)
        self.beta = np.asarray(self.beta, dtype=np.float64).reshape(-1)
        self.psi = np.asarray(self.psi, dtype=np.float64).reshape(3)
        norms = np.linalg.norm(self.theta, axis=1)
        if np.max(np.abs(norms - 1.0)) > 1e-6:
            raise ValueError("pose quaternions must be unit norm")

    @classmethod
    def identity(cls, n_joints: int, n_shape: int = 10) -> "BodyParams":
        theta = np.tile(qm.IDENTITY, (n_joints, 1))
        return cls(theta, np.zeros(n_shape), np.zeros(3))


def forward_kinematics(tpl: BodyTemplate, theta, beta=None):
    """Per-joint rigid transforms (rot n_b x 3 x 3, trans n_b x 3) mapping
    rest-pose space to posed space, composed along the kinematic chain."""
    rot, trans, _ = _fk_full(tpl, theta, beta)
    return rot, trans


def _fk_full(tpl: BodyTemplate, theta, beta=None):
    theta = np.asarray(theta, dtype=np.float64).reshape(-1, 4)
    joints = tpl.rest_joints(beta)
    n_b = tpl.n_joints
    R_local = qm.to_matrix(theta)
    Rg = np.empty((n_b, 3, 3))
    tg = np.empty((n_b, 3))
    Rg[0] = R_local[0]
    tg[0] = joints[0]
    for k in range(1, n_b):
        p = tpl.parents[k]
        Rg[k] = Rg[p] @ R_local[k]
        tg[k] = Rg[p] @ (joints[k] - joints[p]) + tg[p]
    # B_k x = Rg_k x + (tg_k - Rg_k j_k): identity pose gives the identity map.
    B_rot = Rg
    B_trans = tg - np.einsum("kij,kj->ki", Rg, joints)
    cache = {"theta": theta, "joints": joints, "R_local": R_local, "Rg": Rg, "tg": tg}
    return B_rot, B_trans, cache


def fk_backward(tpl: BodyTemplate, cache, dB_rot, dB_trans):
    """Backward of _fk_full: gradients w.r.t. the raw pose quaternions."""
    joints = cache["joints"]
    R_local = cache["R_local"]
    Rg = cache["Rg"]
    n_b = tpl.n_joints
    dRg = np.array(dB_rot, dtype=np.float64, copy=True)
    dtg = np.array(dB_trans, dtype=np.float64, copy=True)
    # B_trans = tg - Rg @ j  =>  dRg -= outer(dB_trans, j)
    dRg -= np.einsum("ki,kj->kij", dB_trans, joints)
    dR_local = np.zeros_like(dRg)
    for k in range(n_b - 1, 0, -1):
        p = tpl.parents[k]
        # Rg_k = Rg_p R_k ; tg_k = Rg_p d_k + tg_p
        d_k = joints[k] - joints[p]
        dR_local[k] = Rg[p].T @ dRg[k]
        dRg[p] += dRg[k] @ R_local[k].T
        dRg[p] += np.einsum("i,j->ij", dtg[k], d_k)
        dtg[p] += dtg[k]
    dR_local[0] = dRg[0]
    dq_unit = qm.to_matrix_vjp(qm.normalize(cache["theta"]), dR_local)
    return qm.normalize_vjp(cache["theta"], dq_unit)


def lbs_vertices(tpl: BodyTemplate, theta, beta=None, psi=None) -> np.ndarray:
    """Pose the shaped canonical vertices with linear blend skinning."""
    B_rot, B_trans = forward_kinematics(tpl, theta, beta)
    verts = tpl.shaped_vertices(beta)
    A_rot = np.einsum("vk,kij->vij", tpl.weights, B_rot)
    A_trans = tpl.weights @ B_trans
    posed = np.einsum("vij,vj->vi", A_rot, verts) + A_trans
    if psi is not None:
        posed = posed + np.asarray(psi, dtype=np.float64)
    return posed


def joint_positions(tpl: BodyTemplate, theta, beta=None, psi=None) -> np.ndarray:
    """Posed joint locations (root translation applied when given)."""
    _, _, cache = _fk_full(tpl, theta, beta)
    J = cache["tg"]
    if psi is not None:
        J = J + np.asarray(psi, dtype=np.float64)
    return J


def bone_vectors(tpl: BodyTemplate) -> list[tuple[int, int]]:
    """Kinematic tree edges (parent, child)."""
    return [(int(tpl.parents[k]), k) for k in range(1, tpl.n_joints)]


# ---------------------------------------------------------------------------
# Synthetic capsule rigs
# ---------------------------------------------------------------------------

_HUMANOID_PARENTS = np.array(
    [-1, 0, 0, 0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 9, 9, 12, 13, 14, 16, 17, 18, 19, 20, 21]
)

_HUMANOID_NAMES = [
    "pelvis", "left_hip", "right_hip", "spine1", "left_knee", "right_knee",
    "spine2", "left_ankle", "right_ankle", "spine3", "left_foot", "right_foot",
    "neck", "left_collar", "right_collar", "head", "left_shoulder",
    "right_shoulder", "left_elbow", "right_elbow", "left_wrist", "right_wrist",
    "left_hand", "right_hand",
]

_COCO_TO_HUMANOID = {
    "nose": "head",
    "left_shoulder": "left_shoulder", "right_shoulder": "right_shoulder",
    "left_elbow": "left_elbow", "right_elbow": "right_elbow",
    "left_wrist": "left_wrist", "right_wrist": "right_wrist",
    "left_hip": "left_hip", "right_hip": "right_hip",
    "left_knee": "left_knee", "right_knee": "right_knee",
    "left_ankle": "left_ankle", "right_ankle": "right_ankle",
}


def _humanoid_rest_joints() -> np.ndarray:
    # Z-up, facing +x. The pelvis sits at the origin (root-translation
    # convention) with the foot soles exactly 1 unit below it.
    j = {
        "pelvis": (0.0, 0.0, 1.0),
        "left_hip": (0.0, 0.10, 0.95), "right_hip": (0.0, -0.10, 0.95),
        "spine1": (0.0, 0.0, 1.15),
        "left_knee": (0.0, 0.10, 0.50), "right_knee": (0.0, -0.10, 0.50),
        "spine2": (0.0, 0.0, 1.30),
        "left_ankle": (0.0, 0.10, 0.10), "right_ankle": (0.0, -0.10, 0.10),
        "spine3": (0.0, 0.0, 1.45),
        "left_foot": (0.10, 0.10, 0.04), "right_foot": (0.10, -0.10, 0.04),
        "neck": (0.0, 0.0, 1.55),
        "left_collar": (0.0, 0.08, 1.48), "right_collar": (0.0, -0.08, 1.48),
        "head": (0.0, 0.0, 1.70),
        "left_shoulder": (0.0, 0.20, 1.50), "right_shoulder": (0.0, -0.20, 1.50),
        "left_elbow": (0.0, 0.45, 1.50), "right_elbow": (0.0, -0.45, 1.50),
        "left_wrist": (0.0, 0.70, 1.50), "right_wrist": (0.0, -0.70, 1.50),
        "left_hand": (0.0, 0.78, 1.50), "right_hand": (0.0, -0.78, 1.50),
    }
    out = np.array([j[name] for name in _HUMANOID_NAMES])
    out[:, 2] -= 1.0
    return out


# Near-uniform radii: keypoint lookups land on surfaces offset from the
# joints by the local radius; equal radii cancel along each bone. Foot
# capsules are thin so the soles rest exactly on the ground plane.
_BONE_RADII = {"head": 0.075, "left_foot": 0.04, "right_foot": 0.04}


def _capsule_geometry(joints: np.ndarray, parents: np.ndarray, radii: np.ndarray,
                      ring_n: int = 8, ring_fracs=(0.2, 0.5, 0.8)):
    """Rings of vertices around every bone plus 4 regressor anchors per joint.

    Bone vertices bind to the bone's parent joint, blending toward the child
    joint near its end so articulation stays smooth.
    """
    n_b = joints.shape[0]
    verts, faces, weight_rows = [], [], []

    def add_vertex(p, w_parent, parent, child):
        verts.append(p)
        row = np.zeros(n_b)
        row[parent] = w_parent
        row[child] += 1.0 - w_parent
        weight_rows.append(row)
        return len(verts) - 1

    for c in range(1, n_b):
        p = parents[c]
        a, b = joints[p], joints[c]
        length = np.linalg.norm(b - a)
        if length < 1e-9:
            continue
        axis = (b - a) / length
        ref = np.array([1.0, 0.0, 0.0]) if abs(axis[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
        u = np.cross(axis, ref)
        u /= np.linalg.norm(u)
        v = np.cross(axis, u)
        r = radii[c]

        def parent_share(frac):
            return 1.0 - 0.6 * np.clip((frac - 0.5) / 0.5, 0.0, 1.0)

        ring_ids = []
        for frac in ring_fracs:
            center = a + frac * (b - a)
            ring = [
                add_vertex(center + r * (np.cos(ang) * u + np.sin(ang) * v),
                           parent_share(frac), p, c)
                for ang in 2 * np.pi * np.arange(ring_n) / ring_n
            ]
            ring_ids.append(ring)
        cap0 = add_vertex(a.copy(), parent_share(0.0), p, c)
        cap1 = add_vertex(b.copy(), parent_share(1.0), p, c)
        for r0, r1 in zip(ring_ids[:-1], ring_ids[1:]):
            for s in range(ring_n):
                s2 = (s + 1) % ring_n
                faces.append((r0[s], r0[s2], r1[s]))
                faces.append((r0[s2], r1[s2], r1[s]))
        for s in range(ring_n):
            s2 = (s + 1) % ring_n
            faces.append((cap0, ring_ids[0][s2], ring_ids[0][s]))
            faces.append((cap1, ring_ids[-1][s], ring_ids[-1][s2]))

    # Regressor anchors: symmetric offsets around each joint, one-hot weights.
    anchor_ids = []
    eps = 0.01
    offsets = np.array([[eps, 0, 0], [-eps, 0, 0], [0, eps, 0], [0, -eps, 0]])
    for k in range(n_b):
        ids = []
        for off in offsets:
            verts.append(joints[k] + off)
            row = np.zeros(n_b)
            row[k] = 1.0
            weight_rows.append(row)
            ids.append(len(verts) - 1)
        anchor_ids.append(ids)

    verts = np.asarray(verts)
    faces = np.asarray(faces, dtype=np.int64)
    weights = np.asarray(weight_rows)
    regressor = np.zeros((n_b, verts.shape[0]))
    for k, ids in enumerate(anchor_ids):
        regressor[k, ids] = 0.25
    return verts, faces, regressor, weights


def make_capsule_rig(n_joints: int = 24, limb_length: float = 0.5) -> BodyTemplate:
    """Synthetic articulated rig.

    ``n_joints == 24`` builds the humanoid (COCO keypoint map, torso/limb bone
    pairs, pelvis 1 unit above the soles); any other count builds a straight
    chain with every bone exactly ``limb_length`` long.
    """
    if n_joints == 24:
        return make_humanoid_rig()
    if n_joints < 2:
        raise ValueError("a rig needs at least 2 joints")
    parents = np.arange(-1, n_joints - 1)
    joints = np.zeros((n_joints, 3))
    joints[:, 2] = limb_length * np.arange(n_joints)
    radii = np.full(n_joints, 0.2 * limb_length)
    verts, faces, regressor, weights = _capsule_geometry(joints, parents, radii)
    shape_basis = np.zeros((verts.shape[0], 3, 10))
    shape_basis[:, :, 0] = verts - joints[0]
    return BodyTemplate(verts, faces, regressor, weights, parents,
                        shape_basis=shape_basis)


def make_humanoid_rig() -> BodyTemplate:
    joints = _humanoid_rest_joints()
    parents = _HUMANOID_PARENTS
    radii = np.full(24, 0.055)
    for name, r in _BONE_RADII.items():
        radii[_HUMANOID_NAMES.index(name)] = r
    verts, faces, regressor, weights = _capsule_geometry(joints, parents, radii)
    shape_basis = np.zeros((verts.shape[0], 3, 10))
    shape_basis[:, :, 0] = verts - joints[0]          # uniform scale about pelvis
    shape_basis[:, 2, 1] = verts[:, 2] - joints[0, 2]  # height-only stretch
    name_to_id = {n: i for i, n in enumerate(_HUMANOID_NAMES)}
    keypoint_map = {coco: name_to_id[joint] for coco, joint in _COCO_TO_HUMANOID.items()}
    pairs = [
        ("left_shoulder", "left_elbow"), ("right_shoulder", "right_elbow"),
        ("left_elbow", "left_wrist"), ("right_elbow", "right_wrist"),
        ("left_hip", "left_knee"), ("right_hip", "right_knee"),
        ("left_knee", "left_ankle"), ("right_knee", "right_ankle"),
        ("left_shoulder", "left_hip"), ("right_shoulder", "right_hip"),
    ]
    bone_pairs = [(name_to_id[p], name_to_id[c]) for p, c in pairs]
    return BodyTemplate(verts, faces, regressor, weights, parents,
                        shape_basis=shape_basis, keypoint_map=keypoint_map,
                        body_bone_pairs=bone_pairs, pelvis_offset=1.0)


# ---------------------------------------------------------------------------
# Template persistence (directory of tensor files + JSON skeleton descriptor)
# ---------------------------------------------------------------------------

def save_template(tpl: BodyTemplate, out_dir):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_tensor(out / "vertices.t", tpl.vertices.astype(np.float32))
    write_tensor(out / "faces.t", tpl.faces.astype(np.uint16)
                 if tpl.faces.size and tpl.faces.max() < 65536 else tpl.faces.astype(np.float32))
    write_tensor(out / "regressor.t", tpl.joint_regressor.astype(np.float32))
    write_tensor(out / "weights.t", tpl.weights.astype(np.float32))
    if tpl.shape_basis is not None:
        write_tensor(out / "shape_basis.t", tpl.shape_basis.astype(np.float32))
    meta = {
        "parents": tpl.parents.tolist(),
        "keypoint_map": tpl.keypoint_map,
        "body_bone_pairs": [list(p) for p in tpl.body_bone_pairs],
        "pelvis_offset": tpl.pelvis_offset,
        "faces_dtype": "u16" if tpl.faces.size and tpl.faces.max() < 65536 else "f32",
    }
    (out / "skeleton.json").write_text(json.dumps(meta, indent=1))


def load_template(in_dir) -> BodyTemplate:
    src = Path(in_dir)
    meta = json.loads((src / "skeleton.json").read_text())
    faces = read_tensor(src / "faces.t")
    shape_basis = None
    if (src / "shape_basis.t").exists():
        shape_basis = read_tensor(src / "shape_basis.t").astype(np.float64)
    # Weight rows are stored f32; renormalize to restore the exact-sum invariant.
    weights = read_tensor(src / "weights.t").astype(np.float64)
    weights /= weights.sum(axis=1, keepdims=True)
    return BodyTemplate(
        vertices=read_tensor(src / "vertices.t").astype(np.float64),
        faces=faces.astype(np.int64),
        joint_regressor=read_tensor(src / "regressor.t").astype(np.float64),
        weights=weights,
        parents=np.asarray(meta["parents"], dtype=np.int64),
        shape_basis=shape_basis,
        keypoint_map={k: int(v) for k, v in meta.get("keypoint_map", {}).items()},
        body_bone_pairs=[tuple(p) for p in meta.get("body_bone_pairs", [])],
        pelvis_offset=float(meta.get("pelvis_offset", 1.0)),
    )


def load_smpl_archive(path) -> BodyTemplate:
    """Load a standard SMPL parameter archive (.npz).

    Field mapping: v_template -> vertices, f -> faces, J_regressor ->
    joint_regressor, weights -> weights, kintree_table[0] -> parents,
    shapedirs[..., :10] -> shape_basis. Pose blendshapes are ignored.
    """
    data = np.load(path, allow_pickle=True)
    parents = np.asarray(data["kintree_table"], dtype=np.int64)[0].copy()
    parents[0] = -1
    shape_basis = None
    if "shapedirs" in data:
        shape_basis = np.asarray(data["shapedirs"], dtype=np.float64)[..., :10]
    keypoint_map = {coco: _HUMANOID_NAMES.index(joint)
                    for coco, joint in _COCO_TO_HUMANOID.items()}
    weights = np.asarray(data["weights"], dtype=np.float64)
    weights = weights / weights.sum(axis=1, keepdims=True)
    bone_pairs = make_humanoid_rig().body_bone_pairs
    return BodyTemplate(
        vertices=np.asarray(data["v_template"], dtype=np.float64),
        faces=np.asarray(data["f"], dtype=np.int64),
        joint_regressor=np.asarray(data["J_regressor"], dtype=np.float64),
        weights=weights,
        parents=parents,
        shape_basis=shape_basis,
        keypoint_map=keypoint_map,
        body_bone_pairs=bone_pairs,
    )
