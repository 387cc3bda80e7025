"""Quadrotor rigid-body model, rotor mixing, gate kinematics and Euler integration.

The state is a flat 13-vector ``[p (3), v (3), q (4), w (3)]`` with ``p, v`` in the
world frame, ``q`` the body-to-world quaternion and ``w`` the body angular rate.

Rotor layout (X configuration, body frame, z up)::

        2 (-d, +d)    1 (+d, +d)
                  \\  /
                   \\/
                   /\\
                  /  \\
        3 (-d, -d)    4 (+d, -d)

with ``d = arm / sqrt(2)``. Rotors 1 and 3 produce drag torque ``+c_tau * f``
about body z, rotors 2 and 4 produce ``-c_tau * f``.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import NonFinite

POS = slice(0, 3)
VEL = slice(3, 6)
QUAT = slice(6, 10)
OMEGA = slice(10, 13)
STATE_DIM = 13
CONTROL_DIM = 4


@dataclass(frozen=True)
class QuadParams:
    m: float = 1.0
    J: tuple = ((0.01, 0.0, 0.0), (0.0, 0.01, 0.0), (0.0, 0.0, 0.02))
    g: float = 9.81
    arm: float = 0.2
    c_tau: float = 0.01
    f_max: float = 6.0
    half_width: float = 0.75

    def __post_init__(self):
        J = self.inertia
        if self.m <= 0 or self.arm <= 0 or self.f_max <= 0:
            raise ValueError("m, arm and f_max must be positive")
        if J.shape != (3, 3) or not np.allclose(J, J.T) or np.linalg.eigvalsh(J).min() <= 0:
            raise ValueError("J must be a symmetric positive definite 3x3 matrix")

    @property
    def inertia(self) -> np.ndarray:
        return np.asarray(self.J, dtype=float)

    @property
    def hover_thrust(self) -> float:
        """Per-rotor thrust that balances gravity."""
        return self.m * self.g / 4.0

    @property
    def allocation(self) -> np.ndarray:
        """Maps ``[f1, f2, f3, f4]`` to ``[f_r, tau_x, tau_y, tau_z]``."""
        d = self.arm / np.sqrt(2.0)
        c = self.c_tau
        return np.array(
            [
                [1.0, 1.0, 1.0, 1.0],
                [d, d, -d, -d],
                [-d, d, d, -d],
                [c, -c, c, -c],
            ]
        )


@dataclass(frozen=True)
class QuadState:
    p: np.ndarray
    v: np.ndarray
    q: np.ndarray
    w: np.ndarray

    def to_array(self) -> np.ndarray:
        return np.concatenate([self.p, self.v, self.q, self.w]).astype(float)

    @classmethod
    def from_array(cls, x) -> "QuadState":
        x = np.asarray(x, dtype=float)
        return cls(x[POS].copy(), x[VEL].copy(), x[QUAT].copy(), x[OMEGA].copy())


def make_state(p=(0, 0, 0), v=(0, 0, 0), q=(1, 0, 0, 0), w=(0, 0, 0)) -> np.ndarray:
    return np.concatenate([p, v, q, w]).astype(float)


def hover_state(p, q=(1.0, 0.0, 0.0, 0.0)) -> np.ndarray:
    return make_state(p=p, q=q)


@dataclass(frozen=True)
class GateMotion:
    """Rectangular gate moving by ``p_g = p_g0 + v_g t`` and ``theta = theta_g0 + omega_g t``."""

    p_g0: np.ndarray = field(default_factory=lambda: np.zeros(3))
    theta_g0: float = 0.0
    v_g: np.ndarray = field(default_factory=lambda: np.zeros(3))
    omega_g: float = 0.0
    width: float = 0.9
    height: float = 2.0

    def __post_init__(self):
        if self.width <= 0 or self.height <= 0:
            raise ValueError("gate width and height must be positive")


def mixer(u, params: QuadParams):
    """Collective thrust and body torque from the four rotor thrusts."""
    wrench = params.allocation @ np.asarray(u, dtype=float)
    return wrench[0], wrench[1:]


def omega_matrix(w) -> np.ndarray:
    wx, wy, wz = w
    return np.array(
        [
            [0.0, -wx, -wy, -wz],
            [wx, 0.0, wz, -wy],
            [wy, -wz, 0.0, wx],
            [wz, wy, -wx, 0.0],
        ]
    )


def quad_derivative(x, u, params: QuadParams) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    q = x[QUAT]
    w = x[OMEGA]
    f_r, tau = mixer(u, params)
    q0, qx, qy, qz = q
    # third column of R(q)
    body_z = np.array([2 * (qx * qz + q0 * qy), 2 * (qy * qz - q0 * qx), q0 * q0 - qx * qx - qy * qy + qz * qz])
    J = params.inertia

    dx = np.empty(STATE_DIM)
    dx[POS] = x[VEL]
    dx[VEL] = f_r / params.m * body_z - np.array([0.0, 0.0, params.g])
    dx[QUAT] = 0.5 * omega_matrix(w) @ q
    dx[OMEGA] = np.linalg.solve(J, tau - np.cross(w, J @ w))
    return dx


def integrate_quad(x, u, dt: float, substeps: int, params: QuadParams) -> np.ndarray:
    """Forward Euler with zero-order-hold control; the quaternion is renormalized each substep."""
    if dt <= 0 or substeps < 1:
        raise ValueError("dt must be positive and substeps >= 1")
    h = dt / substeps
    x = np.array(x, dtype=float)
    for _ in range(substeps):
        x = x + h * quad_derivative(x, u, params)
        x[QUAT] /= np.linalg.norm(x[QUAT])
        if not np.all(np.isfinite(x)):
            raise NonFinite("quadrotor state left the finite range")
    return x


def gate_state_at(gate: GateMotion, t: float):
    """Gate center and pitch at time ``t``."""
    p = np.asarray(gate.p_g0, dtype=float) + np.asarray(gate.v_g, dtype=float) * t
    return p, gate.theta_g0 + gate.omega_g * t
