"""Quaternion and rotation-matrix helpers.

Quaternions are stored as ``(w, x, y, z)`` in the last axis. The world frame
is Y-up with characters facing +Z at zero yaw; +X is the character's left.
"""

import numpy as np
import torch


def quat_identity(shape=()):
    q = np.zeros(tuple(shape) + (4,))
    q[..., 0] = 1.0
    return q


def quat_normalize(q):
    return q / np.linalg.norm(q, axis=-1, keepdims=True)


def quat_mul(a, b):
    aw, ax, ay, az = np.moveaxis(a, -1, 0)
    bw, bx, by, bz = np.moveaxis(b, -1, 0)
    return np.stack([
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ], axis=-1)


def quat_conj(q):
    return q * np.array([1.0, -1.0, -1.0, -1.0])


def quat_rotate(q, v):
    """Rotate vectors ``v`` (..., 3) by unit quaternions ``q`` (..., 4)."""
    w = q[..., :1]
    u = q[..., 1:]
    t = 2.0 * np.cross(u, v)
    return v + w * t + np.cross(u, t)


def quat_from_axis_angle(axis, angle):
    axis = np.asarray(axis, dtype=np.float64)
    angle = np.asarray(angle, dtype=np.float64)
    axis = axis / np.linalg.norm(axis, axis=-1, keepdims=True)
    half = 0.5 * angle[..., None]
    return np.concatenate([np.cos(half), np.sin(half) * axis], axis=-1)


def quat_yaw(angle):
    """Rotation about +Y by ``angle`` radians."""
    angle = np.asarray(angle, dtype=np.float64)
    q = np.zeros(angle.shape + (4,))
    q[..., 0] = np.cos(0.5 * angle)
    q[..., 2] = np.sin(0.5 * angle)
    return q


def quat_to_matrix(q):
    q = quat_normalize(q)
    w, x, y, z = np.moveaxis(q, -1, 0)
    m = np.stack([
        1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y),
        2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x),
        2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y),
    ], axis=-1)
    return m.reshape(q.shape[:-1] + (3, 3))


def matrix_to_quat(m):
    """Shepperd's method, vectorised. Returns quaternions with w >= 0."""
    m = np.asarray(m, dtype=np.float64)
    batch = m.shape[:-2]
    m = m.reshape(-1, 3, 3)
    tr = m[:, 0, 0] + m[:, 1, 1] + m[:, 2, 2]
    cand = np.stack([
        tr,
        m[:, 0, 0],
        m[:, 1, 1],
        m[:, 2, 2],
    ], axis=-1)
    choice = np.argmax(cand, axis=-1)
    q = np.empty((m.shape[0], 4))
    for k in range(4):
        sel = choice == k
        if not np.any(sel):
            continue
        r = m[sel]
        if k == 0:
            s = np.sqrt(1.0 + tr[sel]) * 2
            q[sel] = np.stack([0.25 * s,
                               (r[:, 2, 1] - r[:, 1, 2]) / s,
                               (r[:, 0, 2] - r[:, 2, 0]) / s,
                               (r[:, 1, 0] - r[:, 0, 1]) / s], axis=-1)
        elif k == 1:
            s = np.sqrt(1.0 + r[:, 0, 0] - r[:, 1, 1] - r[:, 2, 2]) * 2
            q[sel] = np.stack([(r[:, 2, 1] - r[:, 1, 2]) / s,
                               0.25 * s,
                               (r[:, 0, 1] + r[:, 1, 0]) / s,
                               (r[:, 0, 2] + r[:, 2, 0]) / s], axis=-1)
        elif k == 2:
            s = np.sqrt(1.0 + r[:, 1, 1] - r[:, 0, 0] - r[:, 2, 2]) * 2
            q[sel] = np.stack([(r[:, 0, 2] - r[:, 2, 0]) / s,
                               (r[:, 0, 1] + r[:, 1, 0]) / s,
                               0.25 * s,
                               (r[:, 1, 2] + r[:, 2, 1]) / s], axis=-1)
        else:
            s = np.sqrt(1.0 + r[:, 2, 2] - r[:, 0, 0] - r[:, 1, 1]) * 2
            q[sel] = np.stack([(r[:, 1, 0] - r[:, 0, 1]) / s,
                               (r[:, 0, 2] + r[:, 2, 0]) / s,
                               (r[:, 1, 2] + r[:, 2, 1]) / s,
                               0.25 * s], axis=-1)
    q = np.where(q[:, :1] < 0, -q, q)
    return quat_normalize(q).reshape(batch + (4,))


def yaw_of(q):
    """Heading angle of the rotated +Z axis projected on the ground plane."""
    fwd = quat_rotate(q, np.broadcast_to([0.0, 0.0, 1.0], q.shape[:-1] + (3,)))
    return np.arctan2(fwd[..., 0], fwd[..., 2])


def rot_y(angle):
    """Rotation matrices about +Y, shape (..., 3, 3)."""
    angle = np.asarray(angle, dtype=np.float64)
    c, s = np.cos(angle), np.sin(angle)
    z, o = np.zeros_like(angle), np.ones_like(angle)
    return np.stack([c, z, s, z, o, z, -s, z, c], axis=-1).reshape(angle.shape + (3, 3))


def rot_x(angle):
    angle = np.asarray(angle, dtype=np.float64)
    c, s = np.cos(angle), np.sin(angle)
    z, o = np.zeros_like(angle), np.ones_like(angle)
    return np.stack([o, z, z, z, c, -s, z, s, c], axis=-1).reshape(angle.shape + (3, 3))


def rot_z(angle):
    angle = np.asarray(angle, dtype=np.float64)
    c, s = np.cos(angle), np.sin(angle)
    z, o = np.zeros_like(angle), np.ones_like(angle)
    return np.stack([c, -s, z, s, c, z, z, z, o], axis=-1).reshape(angle.shape + (3, 3))


def wrap_angle(a):
    return (a + np.pi) % (2 * np.pi) - np.pi


# 6D continuous rotation representation: the first two columns of the matrix.

def matrix_to_6d(m):
    return np.concatenate([m[..., :, 0], m[..., :, 1]], axis=-1)


def sixd_to_matrix(d6):
    """Gram-Schmidt back to a rotation matrix; works on numpy arrays and tensors."""
    if isinstance(d6, torch.Tensor):
        a1, a2 = d6[..., :3], d6[..., 3:6]
        b1 = torch.nn.functional.normalize(a1, dim=-1)
        b2 = a2 - (b1 * a2).sum(-1, keepdim=True) * b1
        b2 = torch.nn.functional.normalize(b2, dim=-1)
        b3 = torch.cross(b1, b2, dim=-1)
        return torch.stack([b1, b2, b3], dim=-1)
    a1, a2 = d6[..., :3], d6[..., 3:6]
    b1 = a1 / np.linalg.norm(a1, axis=-1, keepdims=True)
    b2 = a2 - np.sum(b1 * a2, axis=-1, keepdims=True) * b1
    b2 = b2 / np.linalg.norm(b2, axis=-1, keepdims=True)
    b3 = np.cross(b1, b2)
    return np.stack([b1, b2, b3], axis=-1)


def frame_rotation(src_a, src_b, dst_a, dst_b):
    """Rotation taking the orthonormal pair (src_a, src_b) onto (dst_a, dst_b).

    ``dst_b`` is orthogonalised against ``dst_a`` first. Inputs broadcast.
    """
    def basis(a, b):
        a = a / np.linalg.norm(a, axis=-1, keepdims=True)
        b = b - np.sum(a * b, axis=-1, keepdims=True) * a
        b = b / np.linalg.norm(b, axis=-1, keepdims=True)
        return np.stack([a, b, np.cross(a, b)], axis=-1)
    src = basis(np.asarray(src_a, float), np.asarray(src_b, float))
    dst = basis(np.asarray(dst_a, float), np.asarray(dst_b, float))
    return dst @ np.swapaxes(src, -1, -2)
