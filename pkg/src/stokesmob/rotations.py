"""Unit-quaternion and rotation-matrix helpers.

Quaternions are stored scalar-first as (w, x, y, z). Rotations act on column
vectors, R v, and compose left to right: quat_multiply(a, b) performs b then a.
"""

import numpy as np


def quat_normalize(q):
    q = np.asarray(q, dtype=float)
    return q / np.linalg.norm(q)


def quat_multiply(a, b):
    aw, ax, ay, az = a
    bw, bx, by, bz = b
    return np.array([
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ])


def quat_to_matrix(q):
    w, x, y, z = quat_normalize(q)
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def quat_exp(v):
    """Quaternion of the rotation by angle |v| about v (exponential map)."""
    v = np.asarray(v, dtype=float)
    angle = np.linalg.norm(v)
    if angle < 1e-300:
        return np.array([1.0, 0.0, 0.0, 0.0])
    axis = v / angle
    h = 0.5 * angle
    return np.concatenate([[np.cos(h)], np.sin(h) * axis])


def quat_from_axis_angle(axis, angle):
    return quat_exp(np.asarray(axis, dtype=float)
                    / np.linalg.norm(axis) * angle)


def rotation_about(axis, angle):
    """Rodrigues rotation matrix: I + sin(t) M + (1 - cos(t)) M^2."""
    axis = np.asarray(axis, dtype=float)
    axis = axis / np.linalg.norm(axis)
    M = cross_matrix(axis)
    return np.eye(3) + np.sin(angle) * M + (1.0 - np.cos(angle)) * (M @ M)


def cross_matrix(a):
    """Matrix [a]_x with [a]_x b = a x b."""
    return np.array([[0.0, -a[2], a[1]],
                     [a[2], 0.0, -a[0]],
                     [-a[1], a[0], 0.0]])
