"""Gate-traversal MPC: cost assembly, trajectory optimizer and receding-horizon wrapper.

The problem is transcribed by single shooting: states are eliminated by rolling
the Euler dynamics forward from ``x_init``, so the optimizer only sees the
``N x 4`` rotor thrusts (box constrained). The solver itself is a
control-limited iLQR compiled with numba (see ``_kernels``).
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from . import _kernels as K
from .dynamics import QuadParams, hover_state
from .errors import NonFinite
from .se3 import rodrigues_to_quat


def _diag(*blocks):
    return np.diag(np.concatenate([np.full(n, v, dtype=float) for n, v in blocks]))


@dataclass(frozen=True)
class MpcWeights:
    Q_x: np.ndarray = field(default_factory=lambda: _diag((3, 10.0), (3, 1.0), (4, 1.0), (3, 0.1)))
    Q_u: np.ndarray = field(default_factory=lambda: 0.01 * np.eye(4))
    Q_du: np.ndarray = field(default_factory=lambda: 0.01 * np.eye(4))
    Q_max: np.ndarray = field(default_factory=lambda: np.diag([100.0, 100.0, 100.0, 50.0]))
    gamma: float = 30.0

    def __post_init__(self):
        for name, shape in (("Q_x", (13, 13)), ("Q_u", (4, 4)), ("Q_du", (4, 4)), ("Q_max", (4, 4))):
            M = np.asarray(getattr(self, name), dtype=float)
            if M.shape != shape:
                raise ValueError(f"{name} must have shape {shape}")
            if not np.allclose(M, M.T) or np.linalg.eigvalsh(M).min() < -1e-12:
                raise ValueError(f"{name} must be symmetric positive semidefinite")
            object.__setattr__(self, name, M)
        if self.gamma <= 0:
            raise ValueError("gamma must be positive")

    def traversal_dominates(self) -> bool:
        """True when every diagonal entry of Q_max exceeds all time-invariant diagonal entries."""
        largest = max(np.diag(self.Q_x).max(), np.diag(self.Q_u).max(), np.diag(self.Q_du).max())
        return bool(np.all(np.diag(self.Q_max) > largest))

    def with_traversal_off(self) -> "MpcWeights":
        return replace(self, Q_max=np.zeros((4, 4)))


@dataclass(frozen=True)
class DecisionVars:
    p_tra: np.ndarray
    rho_tra: np.ndarray
    t_tra: float

    @classmethod
    def from_array(cls, z) -> "DecisionVars":
        z = np.asarray(z, dtype=float)
        if z.shape != (7,) or not np.all(np.isfinite(z)):
            raise ValueError("decision vector must have 7 finite entries")
        return cls(z[:3].copy(), z[3:6].copy(), float(z[6]))

    def to_array(self) -> np.ndarray:
        return np.concatenate([self.p_tra, self.rho_tra, [self.t_tra]]).astype(float)

    @property
    def q_tra(self) -> np.ndarray:
        return rodrigues_to_quat(self.rho_tra)


@dataclass(frozen=True)
class MpcConfig:
    N: int = 50
    dt: float = 0.1
    weights: MpcWeights = field(default_factory=MpcWeights)
    params: QuadParams = field(default_factory=QuadParams)
    max_iter: int = 100
    tol_grad: float = 1e-4
    tol_rel: float = 1e-8


@dataclass(frozen=True)
class MpcProblem:
    x_init: np.ndarray
    u_init: np.ndarray
    x_T: np.ndarray
    z: DecisionVars
    N: int = 50
    dt: float = 0.1
    weights: MpcWeights = field(default_factory=MpcWeights)
    params: QuadParams = field(default_factory=QuadParams)
    bounds: Optional[tuple] = None  # (lo, hi); default [0, f_max]^4
    u_ref: Optional[np.ndarray] = None  # control-effort reference; default hover thrust

    def __post_init__(self):
        if self.N < 2 or self.dt <= 0:
            raise ValueError("need N >= 2 and dt > 0")

    @classmethod
    def from_config(cls, cfg: MpcConfig, x_init, u_init, x_T, z: DecisionVars, **kw) -> "MpcProblem":
        return cls(np.asarray(x_init, float), np.asarray(u_init, float), np.asarray(x_T, float), z,
                   N=cfg.N, dt=cfg.dt, weights=cfg.weights, params=cfg.params, **kw)

    @property
    def lower(self) -> np.ndarray:
        return np.zeros(4) if self.bounds is None else np.broadcast_to(np.asarray(self.bounds[0], float), (4,)).copy()

    @property
    def upper(self) -> np.ndarray:
        if self.bounds is None:
            return np.full(4, self.params.f_max)
        return np.broadcast_to(np.asarray(self.bounds[1], float), (4,)).copy()

    @property
    def reference_control(self) -> np.ndarray:
        return np.full(4, self.params.hover_thrust) if self.u_ref is None else np.asarray(self.u_ref, float)

    def traversal_factors(self) -> np.ndarray:
        return traversal_factors(self.z.t_tra, self.N, self.dt, self.weights.gamma)


@dataclass
class OptimalTrajectory:
    states: np.ndarray  # (N + 1, 13)
    controls: np.ndarray  # (N, 4)
    cost: float
    iterations: int
    converged: bool
    stationarity: float
    cost_trace: np.ndarray = field(default_factory=lambda: np.zeros(0))
    damping: float = 1.0  # final Levenberg-Marquardt damping, reused by warm restarts

    def diagnostics(self) -> dict:
        return {
            "iterations": int(self.iterations),
            "converged": bool(self.converged),
            "cost": float(self.cost),
            "stationarity": float(self.stationarity),
            "cost_trace": [float(c) for c in self.cost_trace],
        }


def clamp_traversal_time(t_tra: float, N: int, dt: float) -> float:
    """Upper-clamp to the horizon end; negative (already passed) times slide the window out."""
    return min(float(t_tra), N * dt)


def traversal_factors(t_tra: float, N: int, dt: float, gamma: float) -> np.ndarray:
    t = clamp_traversal_time(t_tra, N, dt)
    k = np.arange(N)
    return np.exp(-gamma * (k * dt - t) ** 2)


def traversal_weight(t_tra: float, k: int, dt: float, Q_max, gamma: float) -> np.ndarray:
    return np.asarray(Q_max, dtype=float) * np.exp(-gamma * (k * dt - t_tra) ** 2)


def _kernel_args(problem: MpcProblem):
    p = problem.params
    J = p.inertia
    w = problem.weights
    return (
        problem.dt, p.m, p.g, J, np.linalg.inv(J), p.allocation,
        problem.traversal_factors(), np.asarray(problem.x_T, float), problem.reference_control,
        w.Q_x, w.Q_u, w.Q_du, w.Q_max,
        np.asarray(problem.z.p_tra, float), problem.z.q_tra,
    )


def stage_cost(x_k, u_k, u_prev, k: int, problem: MpcProblem) -> float:
    """Cost of knot ``k``; ``k == N`` gives the terminal (state-tracking only) term."""
    args = _kernel_args(problem)
    wts = args[6]
    terminal = k >= problem.N
    w_tra = 0.0 if terminal else float(wts[k])
    u_k = np.zeros(4) if u_k is None else np.asarray(u_k, float)
    u_prev = np.zeros(4) if u_prev is None else np.asarray(u_prev, float)
    return float(K.stage_cost(np.asarray(x_k, float), u_k, u_prev, w_tra, terminal, *args[7:]))


def total_cost(controls, problem: MpcProblem):
    """Roll ``controls`` out from ``x_init``; returns ``(states, cost)``."""
    args = _kernel_args(problem)
    X, c = K.rollout(np.asarray(problem.x_init, float), np.asarray(problem.u_init, float),
                     np.asarray(controls, float), args[0], *args[1:6], *args[6:])
    return X, float(c)


def cost_gradient(controls, problem: MpcProblem) -> np.ndarray:
    """Exact gradient of the total cost w.r.t. the controls (adjoint recursion)."""
    args = _kernel_args(problem)
    U = np.asarray(controls, float)
    X, _ = total_cost(U, problem)
    As, Bs, lzs, _, lus, _, _ = K._linearize(X, U, np.asarray(problem.u_init, float), *args)
    return K.control_gradient(U, As, Bs, lzs, lus)


def solve(problem: MpcProblem, warm_start=None, max_iter: int = 100, tol_grad: float = 1e-4,
          tol_rel: float = 1e-8) -> OptimalTrajectory:
    """Locally optimal controls for ``problem``.

    ``warm_start`` may be an ``OptimalTrajectory`` (controls and solver damping
    are reused) or an ``(N, 4)`` control array; by default every rotor starts
    at hover thrust. Hitting ``max_iter`` returns
    the best iterate with ``converged=False``.
    """
    N = problem.N
    mu0 = float(getattr(warm_start, "damping", 1.0))
    if warm_start is None:
        U0 = np.full((N, 4), problem.params.hover_thrust)
    else:
        U0 = np.asarray(getattr(warm_start, "controls", warm_start), dtype=float)
        if U0.shape != (N, 4):
            raise ValueError(f"warm start has shape {U0.shape}, expected {(N, 4)}")
    X, U, cost, iters, status, stat, trace, n_trace, mu = K.ilqr(
        np.asarray(problem.x_init, float), np.asarray(problem.u_init, float), np.ascontiguousarray(U0),
        problem.lower, problem.upper, *_kernel_args(problem), max_iter, tol_grad, tol_rel, mu0,
    )
    if status == 2:
        raise NonFinite("MPC rollout diverged")
    return OptimalTrajectory(X, U, float(cost), int(iters), status == 0, float(stat), trace[:n_trace].copy(),
                             float(mu))


def shift_controls(controls: np.ndarray) -> np.ndarray:
    """Drop the applied control and repeat the last one."""
    return np.vstack([controls[1:], controls[-1:]])


def receding_step(x_t, u_prev, z: DecisionVars, config: MpcConfig, x_T=None, warm=None):
    """One receding-horizon update; returns ``(u0, trajectory)``.

    ``warm`` is the trajectory from the previous control step; its controls are
    shifted by one knot before use. When the warm-started solve does not
    converge, the problem is also solved from the hover guess and the cheaper
    plan is kept: after a jump in ``z`` the shifted plan can trap the solver in
    a far worse local solution. ``x_T`` defaults to hovering at the origin.
    """
    if x_T is None:
        x_T = hover_state(np.zeros(3))
    problem = MpcProblem.from_config(config, x_t, u_prev, x_T, z)
    guess = None if warm is None else shift_controls(np.asarray(getattr(warm, "controls", warm)))
    traj = solve(problem, guess, config.max_iter, config.tol_grad, config.tol_rel)
    if guess is not None and not traj.converged:
        cold = solve(problem, None, config.max_iter, config.tol_grad, config.tol_rel)
        if cold.cost < traj.cost:
            traj = cold
    return traj.controls[0].copy(), traj


def append_diagnostics(path, traj: OptimalTrajectory, **extra) -> None:
    """Append one solve record as a JSON line."""
    with open(path, "a") as fh:
        fh.write(json.dumps({**extra, **traj.diagnostics()}) + "\n")
