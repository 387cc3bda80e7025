"""Gate geometry, vertex/plane crossings, collision loss and reward terms.

Gate frame: the aperture lies in a vertical plane through the gate center with
unit normal ``+y`` (gate yaw is fixed to zero). The pitch ``theta`` rotates the
rectangle inside that plane about the normal, so the width axis is
``(cos theta, 0, -sin theta)`` and the height axis ``(sin theta, 0, cos theta)``.
The normal points from the approach side to the exit side.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .dynamics import POS, QUAT, GateMotion
from .errors import OffPlane
from .se3 import quat_to_rotmat

GATE_NORMAL = np.array([0.0, 1.0, 0.0])
ON_PLANE_TOL = 1e-6

# body-frame vertex signs, counter-clockwise seen from above
_VERTEX_SIGNS = np.array([[1.0, 1.0, 0.0], [-1.0, 1.0, 0.0], [-1.0, -1.0, 0.0], [1.0, -1.0, 0.0]])


@dataclass(frozen=True)
class RewardConfig:
    r_max: float = 100.0
    alpha: float = 1.0
    beta: float = 10.0
    n_terminal: int = 5
    eps: float = 0.2

    def __post_init__(self):
        if self.r_max <= 0 or self.alpha <= 0 or self.beta <= 0 or self.eps <= 0:
            raise ValueError("r_max, alpha, beta and eps must be positive")
        if self.n_terminal < 0:
            raise ValueError("n_terminal must be non-negative")


@dataclass(frozen=True)
class PlaneCrossing:
    point: np.ndarray  # s_iw, world frame
    index: int  # first waypoint behind the gate
    inside: bool
    distance: float  # >= 0; ``inside`` carries the side


def gate_axes(theta: float):
    """Width axis, height axis and normal of a gate pitched by ``theta``."""
    c, s = np.cos(theta), np.sin(theta)
    return np.array([c, 0.0, -s]), np.array([s, 0.0, c]), GATE_NORMAL.copy()


def gate_plane(center, theta: float):
    """Point on the gate plane and its unit normal."""
    return np.asarray(center, dtype=float), gate_axes(theta)[2]


def vertex_world_positions(p_w, q, half_width: float) -> np.ndarray:
    """World positions of the four corners of the planar-square body, shape ``(4, 3)``."""
    offsets = half_width * _VERTEX_SIGNS
    return np.asarray(p_w, dtype=float) + offsets @ quat_to_rotmat(q).T


def vertex_trajectories(states, half_width: float) -> np.ndarray:
    """Corner trajectories for a ``(K, 13)`` state array, shape ``(4, K, 3)``."""
    states = np.atleast_2d(states)
    q = states[:, QUAT] / np.linalg.norm(states[:, QUAT], axis=1, keepdims=True)
    q0, qx, qy, qz = q.T
    # batched R(q) columns for body x and body y
    col_x = np.stack([1 - 2 * (qy**2 + qz**2), 2 * (qx * qy + q0 * qz), 2 * (qx * qz - q0 * qy)], axis=1)
    col_y = np.stack([2 * (qx * qy - q0 * qz), 1 - 2 * (qx**2 + qz**2), 2 * (qy * qz + q0 * qx)], axis=1)
    p = states[:, POS]
    return np.stack(
        [p + half_width * (sx * col_x + sy * col_y) for sx, sy, _ in _VERTEX_SIGNS],
        axis=0,
    )


def _first_crossing(signed: np.ndarray) -> Optional[int]:
    behind = signed > 0.0
    hits = np.nonzero(behind[1:] & ~behind[:-1])[0]
    return None if hits.size == 0 else int(hits[0]) + 1


def plane_crossing(points, center, normal):
    """First segment of ``points`` that passes to the far side of the plane.

    Returns ``(s, j)`` with ``j`` the first waypoint behind the plane and ``s`` the
    linearly interpolated intersection, or ``None``. A waypoint exactly on the
    plane is not yet behind it.
    """
    points = np.asarray(points, dtype=float)
    signed = (points - np.asarray(center, dtype=float)) @ np.asarray(normal, dtype=float)
    j = _first_crossing(signed)
    if j is None:
        return None
    lam = -signed[j - 1] / (signed[j] - signed[j - 1])
    s = points[j - 1] + lam * (points[j] - points[j - 1])
    return s, j


def rect_distance(a: float, b: float, half_w: float, half_h: float):
    """Side test and distance to the boundary of an axis-aligned rectangle in 2D."""
    ax, bx = abs(a), abs(b)
    if ax <= half_w and bx <= half_h:
        return True, float(min(half_w - ax, half_h - bx))
    return False, float(np.hypot(max(ax - half_w, 0.0), max(bx - half_h, 0.0)))


def edge_distance(s, center, theta: float, width: float, height: float):
    """``(inside, d)`` for a point ``s`` on the gate plane."""
    e_w, e_h, n = gate_axes(theta)
    rel = np.asarray(s, dtype=float) - np.asarray(center, dtype=float)
    if abs(rel @ n) > ON_PLANE_TOL:
        raise OffPlane(f"point is {rel @ n:.3g} m off the gate plane")
    return rect_distance(rel @ e_w, rel @ e_h, width / 2.0, height / 2.0)


def collision_loss(inside: bool, d: float, eps: float) -> float:
    if inside:
        return max(0.0, eps - d)
    return 2.0 * eps * d + eps * eps


def vertex_crossings(states, gate: GateMotion, half_width: float):
    """Crossing record per corner against a static gate (``None`` where a corner never crosses)."""
    center, theta = np.asarray(gate.p_g0, dtype=float), gate.theta_g0
    _, n = gate_plane(center, theta)
    out = []
    for traj in vertex_trajectories(states, half_width):
        hit = plane_crossing(traj, center, n)
        if hit is None:
            out.append(None)
            continue
        s, j = hit
        inside, d = edge_distance(s, center, theta, gate.width, gate.height)
        out.append(PlaneCrossing(s, j, inside, d))
    return out


def no_crossing_loss(terminal_point, center, eps: float) -> float:
    """Fallback loss for a corner that never crosses: ``2 eps D + eps^2``, D the terminal plane distance."""
    dist = abs((np.asarray(terminal_point) - center) @ GATE_NORMAL)
    return 2.0 * eps * dist + eps * eps


def collision_penalty(states, gate: GateMotion, cfg: RewardConfig, half_width: float) -> float:
    states = np.atleast_2d(states)
    crossings = vertex_crossings(states, gate, half_width)
    corners_final = vertex_trajectories(states[-1:], half_width)[:, 0, :]
    total = 0.0
    for i, c in enumerate(crossings):
        if c is None:
            total += no_crossing_loss(corners_final[i], np.asarray(gate.p_g0, dtype=float), cfg.eps)
        else:
            total += collision_loss(c.inside, c.distance, cfg.eps)
    return total


def target_penalty(states, p_T, n: int) -> float:
    """Sum of squared position errors over the last ``n + 1`` knots."""
    states = np.atleast_2d(states)
    N = states.shape[0] - 1
    if n > N:
        raise ValueError(f"n={n} exceeds horizon N={N}")
    err = states[N - n :, POS] - np.asarray(p_T, dtype=float)
    return float(np.sum(err * err))


def reward_from_terms(l_target: float, l_coll: float, cfg: RewardConfig) -> float:
    return cfg.r_max - cfg.alpha * l_target - cfg.beta * l_coll


def reward(states, gate: GateMotion, p_T, cfg: RewardConfig, half_width: float) -> float:
    l_t = target_penalty(states, p_T, cfg.n_terminal)
    l_c = collision_penalty(states, gate, cfg, half_width)
    return reward_from_terms(l_t, l_c, cfg)
