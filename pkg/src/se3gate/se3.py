"""Rotation helpers.

Conventions:
    - Quaternions are scalar-first Hamilton quaternions ``[q0, qx, qy, qz]``.
    - ``quat_to_rotmat(q)`` maps body-frame vectors into the world frame.
    - Produced quaternions are unit-norm with ``q0 >= 0``.
    - Rodrigues (Gibbs) vectors are ``axis * tan(angle / 2)``.
"""
from __future__ import annotations

import numpy as np

from .errors import NearPiRotation

RODRIGUES_Q0_MIN = 1e-6


def canonical_quat(q) -> np.ndarray:
    """Normalize ``q`` and flip its sign so that ``q0 >= 0``."""
    q = np.asarray(q, dtype=float)
    q = q / np.linalg.norm(q)
    if q[0] < 0.0:
        q = -q
    return q


def quat_to_rotmat(q) -> np.ndarray:
    q0, qx, qy, qz = np.asarray(q, dtype=float) / np.linalg.norm(q)
    return np.array(
        [
            [1 - 2 * (qy * qy + qz * qz), 2 * (qx * qy - q0 * qz), 2 * (qx * qz + q0 * qy)],
            [2 * (qx * qy + q0 * qz), 1 - 2 * (qx * qx + qz * qz), 2 * (qy * qz - q0 * qx)],
            [2 * (qx * qz - q0 * qy), 2 * (qy * qz + q0 * qx), 1 - 2 * (qx * qx + qy * qy)],
        ]
    )


def rodrigues_to_quat(rho) -> np.ndarray:
    rho = np.asarray(rho, dtype=float)
    q = np.concatenate(([1.0], rho)) / np.sqrt(1.0 + rho @ rho)
    return q  # q0 > 0 by construction


def quat_to_rodrigues(q) -> np.ndarray:
    q = canonical_quat(q)
    if q[0] <= RODRIGUES_Q0_MIN:
        raise NearPiRotation(f"q0={q[0]:.3g} is within {RODRIGUES_Q0_MIN} of a pi rotation")
    return q[1:] / q[0]


def axis_angle_to_quat(axis, angle: float) -> np.ndarray:
    axis = np.asarray(axis, dtype=float)
    axis = axis / np.linalg.norm(axis)
    return canonical_quat(np.concatenate(([np.cos(angle / 2)], np.sin(angle / 2) * axis)))


def yaw_to_quat(psi: float) -> np.ndarray:
    return axis_angle_to_quat([0.0, 0.0, 1.0], psi)


def quat_multiply(a, b) -> np.ndarray:
    a0, av = a[0], np.asarray(a[1:], dtype=float)
    b0, bv = b[0], np.asarray(b[1:], dtype=float)
    return np.concatenate(([a0 * b0 - av @ bv], a0 * bv + b0 * av + np.cross(av, bv)))


def attitude_trace_error(q_a, q_b) -> float:
    """``Tr(I - R(q_a)^T R(q_b))``; equals ``2 (1 - cos phi)`` for relative angle phi."""
    R_a = quat_to_rotmat(q_a)
    R_b = quat_to_rotmat(q_b)
    return float(3.0 - np.sum(R_a * R_b))
