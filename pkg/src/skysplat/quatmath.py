"""Quaternion utilities with analytic derivatives.

Quaternions are stored (w, x, y, z). Batched inputs take shape (..., 4);
rotation matrices take shape (..., 3, 3).
"""

from __future__ import annotations

import numpy as np

IDENTITY = np.array([1.0, 0.0, 0.0, 0.0])


def normalize(q: np.ndarray) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    return q / np.linalg.norm(q, axis=-1, keepdims=True)


def normalize_vjp(q_raw: np.ndarray, d_unit: np.ndarray) -> np.ndarray:
    """Backward of q -> q/|q|: projects the gradient onto the tangent space."""
    q_raw = np.asarray(q_raw, dtype=np.float64)
    n = np.linalg.norm(q_raw, axis=-1, keepdims=True)
    u = q_raw / n
    return (d_unit - u * np.sum(u * d_unit, axis=-1, keepdims=True)) / n


def multiply(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Hamilton product a * b."""
    aw, ax, ay, az = np.moveaxis(np.asarray(a, dtype=np.float64), -1, 0)
    bw, bx, by, bz = np.moveaxis(np.asarray(b, dtype=np.float64), -1, 0)
    return np.stack(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ],
        axis=-1,
    )


def left_matrix(q: np.ndarray) -> np.ndarray:
    """4x4 matrix L(q) with multiply(q, p) == L(q) @ p."""
    w, x, y, z = np.moveaxis(np.asarray(q, dtype=np.float64), -1, 0)
    rows = [
        [w, -x, -y, -z],
        [x, w, -z, y],
        [y, z, w, -x],
        [z, -y, x, w],
    ]
    return np.stack([np.stack(r, axis=-1) for r in rows], axis=-2)


def right_matrix(q: np.ndarray) -> np.ndarray:
    """4x4 matrix R(q) with multiply(p, q) == R(q) @ p."""
    w, x, y, z = np.moveaxis(np.asarray(q, dtype=np.float64), -1, 0)
    rows = [
        [w, -x, -y, -z],
        [x, w, z, -y],
        [y, -z, w, x],
        [z, y, -x, w],
    ]
    return np.stack([np.stack(r, axis=-1) for r in rows], axis=-2)


def to_matrix(q: np.ndarray) -> np.ndarray:
    """Rotation matrix of a unit quaternion (input is normalized first)."""
    q = normalize(q)
    w, x, y, z = np.moveaxis(q, -1, 0)
    row0 = np.stack([1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)], -1)
    row1 = np.stack([2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)], -1)
    row2 = np.stack([2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)], -1)
    return np.stack([row0, row1, row2], axis=-2)


def to_matrix_vjp(q_unit: np.ndarray, dM: np.ndarray) -> np.ndarray:
    """Backward of to_matrix for an already-unit quaternion.

    Returns dL/dq for the unit quaternion; combine with normalize_vjp for raw
    parameters.
    """
    q = np.asarray(q_unit, dtype=np.float64)
    w, x, y, z = np.moveaxis(q, -1, 0)
    zeros = np.zeros_like(w)

    def mat(rows):
        return 2.0 * np.stack([np.stack(r, axis=-1) for r in rows], axis=-2)

    dR_dw = mat([[zeros, -z, y], [z, zeros, -x], [-y, x, zeros]])
    dR_dx = mat([[zeros, y, z], [y, -2 * x, -w], [z, w, -2 * x]])
    dR_dy = mat([[-2 * y, x, w], [x, zeros, z], [-w, z, -2 * y]])
    dR_dz = mat([[-2 * z, -w, x], [w, -2 * z, y], [x, y, zeros]])
    basis = np.stack([dR_dw, dR_dx, dR_dy, dR_dz], axis=-3)  # (...,4,3,3)
    return np.einsum("...qij,...ij->...q", basis, dM)


def from_matrix(M: np.ndarray) -> np.ndarray:
    """Unit quaternion of a proper rotation matrix (Shepperd branching)."""
    M = np.asarray(M, dtype=np.float64)
    batch = M.shape[:-2]
    m = M.reshape(-1, 3, 3)
    n = m.shape[0]
    q = np.empty((n, 4))
    tr = m[:, 0, 0] + m[:, 1, 1] + m[:, 2, 2]

    cand = np.stack([tr, m[:, 0, 0], m[:, 1, 1], m[:, 2, 2]], axis=1)
    branch = np.argmax(cand, axis=1)

    for b in range(4):
        idx = np.nonzero(branch == b)[0]
        if idx.size == 0:
            continue
        mm = m[idx]
        if b == 0:
            S = 2.0 * np.sqrt(tr[idx] + 1.0)
            q[idx, 0] = 0.25 * S
            q[idx, 1] = (mm[:, 2, 1] - mm[:, 1, 2]) / S
            q[idx, 2] = (mm[:, 0, 2] - mm[:, 2, 0]) / S
            q[idx, 3] = (mm[:, 1, 0] - mm[:, 0, 1]) / S
        elif b == 1:
            S = 2.0 * np.sqrt(1.0 + mm[:, 0, 0] - mm[:, 1, 1] - mm[:, 2, 2])
            q[idx, 0] = (mm[:, 2, 1] - mm[:, 1, 2]) / S
            q[idx, 1] = 0.25 * S
            q[idx, 2] = (mm[:, 0, 1] + mm[:, 1, 0]) / S
            q[idx, 3] = (mm[:, 0, 2] + mm[:, 2, 0]) / S
        elif b == 2:
            S = 2.0 * np.sqrt(1.0 + mm[:, 1, 1] - mm[:, 0, 0] - mm[:, 2, 2])
            q[idx, 0] = (mm[:, 0, 2] - mm[:, 2, 0]) / S
            q[idx, 1] = (mm[:, 0, 1] + mm[:, 1, 0]) / S
            q[idx, 2] = 0.25 * S
            q[idx, 3] = (mm[:, 1, 2] + mm[:, 2, 1]) / S
        else:
            S = 2.0 * np.sqrt(1.0 + mm[:, 2, 2] - mm[:, 0, 0] - mm[:, 1, 1])
            q[idx, 0] = (mm[:, 1, 0] - mm[:, 0, 1]) / S
            q[idx, 1] = (mm[:, 0, 2] + mm[:, 2, 0]) / S
            q[idx, 2] = (mm[:, 1, 2] + mm[:, 2, 1]) / S
            q[idx, 3] = 0.25 * S
    return normalize(q).reshape(*batch, 4)


def from_matrix_vjp(M: np.ndarray, dq: np.ndarray) -> np.ndarray:
    """Backward of from_matrix, branch-consistent with the forward pass."""
    M = np.asarray(M, dtype=np.float64)
    batch = M.shape[:-2]
    m = M.reshape(-1, 3, 3)
    g = np.asarray(dq, dtype=np.float64).reshape(-1, 4)
    n = m.shape[0]
    dM = np.zeros_like(m)
    tr = m[:, 0, 0] + m[:, 1, 1] + m[:, 2, 2]
    cand = np.stack([tr, m[:, 0, 0], m[:, 1, 1], m[:, 2, 2]], axis=1)
    branch = np.argmax(cand, axis=1)

    # Branch b: component b equals S/4 with S = 2*sqrt(u); the other three are
    # (sum/diff of two off-diagonal entries)/S. u is a +/- sum of the diagonal.
    diag_signs = {
        0: np.array([1.0, 1.0, 1.0]),
        1: np.array([1.0, -1.0, -1.0]),
        2: np.array([-1.0, 1.0, -1.0]),
        3: np.array([-1.0, -1.0, 1.0]),
    }
    # For each branch, the numerator entries of the non-pivot components:
    # list of (component, (i,j), sign) pairs with q[comp] = (m[i,j]*sign + ...)/S.
    numerators = {
        0: [(1, (2, 1), 1.0), (1, (1, 2), -1.0), (2, (0, 2), 1.0), (2, (2, 0), -1.0),
            (3, (1, 0), 1.0), (3, (0, 1), -1.0)],
        1: [(0, (2, 1), 1.0), (0, (1, 2), -1.0), (2, (0, 1), 1.0), (2, (1, 0), 1.0),
            (3, (0, 2), 1.0), (3, (2, 0), 1.0)],
        2: [(0, (0, 2), 1.0), (0, (2, 0), -1.0), (1, (0, 1), 1.0), (1, (1, 0), 1.0),
            (3, (1, 2), 1.0), (3, (2, 1), 1.0)],
        3: [(0, (1, 0), 1.0), (0, (0, 1), -1.0), (1, (0, 2), 1.0), (1, (2, 0), 1.0),
            (2, (1, 2), 1.0), (2, (2, 1), 1.0)],
    }

    for b in range(4):
        idx = np.nonzero(branch == b)[0]
        if idx.size == 0:
            continue
        mm = m[idx]
        signs = diag_signs[b]
        u = 1.0 + signs[0] * mm[:, 0, 0] + signs[1] * mm[:, 1, 1] + signs[2] * mm[:, 2, 2]
        S = 2.0 * np.sqrt(u)
        # Pre-normalization quaternion of this branch (unit only on SO(3)).
        comp_num = np.zeros((idx.size, 4))
        for comp, (i, j), sign in numerators[b]:
            comp_num[:, comp] += sign * mm[:, i, j]
        q_raw = comp_num / S[:, None]
        q_raw[:, b] = 0.25 * S
        # The forward pass normalizes; push the gradient through that first.
        gg = normalize_vjp(q_raw, g[idx])
        # dq[comp]/dm[i,j] direct numerator terms.
        for comp, (i, j), sign in numerators[b]:
            dM[idx, i, j] += gg[:, comp] * sign / S
        # dS/dm_diag = 2*signs / S; chain through pivot and the 1/S factors.
        dq_dS = -comp_num / S[:, None] ** 2  # non-pivot components
        dq_dS[:, b] = 0.25
        dL_dS = np.sum(gg * dq_dS, axis=1)
        for axis in range(3):
            dM[idx, axis, axis] += dL_dS * 2.0 * signs[axis] / S
    return dM.reshape(*batch, 3, 3)


def nlerp(q0: np.ndarray, q1: np.ndarray, t: float) -> np.ndarray:
    """Normalized linear interpolation along the shorter arc."""
    q0 = np.asarray(q0, dtype=np.float64)
    q1 = np.asarray(q1, dtype=np.float64)
    dot = np.sum(q0 * q1, axis=-1, keepdims=True)
    q1 = np.where(dot < 0, -q1, q1)
    return normalize((1.0 - t) * q0 + t * q1)


def slerp(q0: np.ndarray, q1: np.ndarray, t: float) -> np.ndarray:
    """Spherical interpolation; reference oracle for nlerp accuracy checks."""
    q0 = normalize(q0)
    q1 = normalize(q1)
    dot = np.sum(q0 * q1, axis=-1, keepdims=True)
    q1 = np.where(dot < 0, -q1, q1)
    dot = np.clip(np.abs(dot), -1.0, 1.0)
    omega = np.arccos(np.clip(dot, 0.0, 1.0))
    small = omega < 1e-8
    so = np.where(small, 1.0, np.sin(omega))
    w0 = np.where(small, 1.0 - t, np.sin((1.0 - t) * omega) / so)
    w1 = np.where(small, t, np.sin(t * omega) / so)
    return normalize(w0 * q0 + w1 * q1)


def rotate_vector(q: np.ndarray, v: np.ndarray) -> np.ndarray:
    return np.einsum("...ij,...j->...i", to_matrix(q), v)


def random_unit(rng: np.random.Generator, shape=()) -> np.ndarray:
    q = rng.normal(size=(*shape, 4))
    return normalize(q)
