"""Online use of the second network: binary search on the traversal time and the closed-loop simulator.

At every control step the gate pose is predicted at ``now + t1`` from its
current velocity and pitch rate, the network is queried in that (non-rotating,
translated) gate frame, and ``t1`` is averaged with the returned time until the
two agree. The resulting decision variables feed one receding-horizon MPC
solve, and the first control is held while the true dynamics are integrated
at ``sim_dt``.
"""
from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from typing import Callable, List, Optional

import numpy as np

from .dynamics import GateMotion, QuadParams, gate_state_at, hover_state, integrate_quad, make_state
from .errors import DimensionMismatch, NonFinite
from .mpc import DecisionVars, MpcConfig, OptimalTrajectory, receding_step
from .nn import MlpParams, forward
from .se3 import yaw_to_quat
from .traversal import GATE_NORMAL, edge_distance, vertex_trajectories
from .training import Scenario, dnn2_input

FIG8_PRESETS = {
    "fig8-trial1": (-1.0, 0.3, -0.4),
    "fig8-trial2": (1.0, 0.3, -0.4),
    "fig8-trial3": (-1.0, 0.3, 0.4),
    "fig8-trial4": (1.0, 0.3, 0.4),
}


@dataclass(frozen=True)
class RuntimeConfig:
    eps_bs: float = 0.01
    max_bs_iters: int = 20
    v_nominal: float = 3.0
    sim_dt: float = 0.01
    control_dt: float = 0.1
    duration: float = 6.0
    gate_sigma: tuple = (0.1, 0.1, 0.1)
    omega_g: float = np.pi / 2

    def __post_init__(self):
        if self.eps_bs <= 0 or self.max_bs_iters < 1 or self.v_nominal <= 0:
            raise ValueError("eps_bs, max_bs_iters and v_nominal must be positive")
        ratio = self.control_dt / self.sim_dt
        if self.sim_dt <= 0 or abs(ratio - round(ratio)) > 1e-9:
            raise ValueError("sim_dt must divide control_dt")

    @property
    def substeps(self) -> int:
        return int(round(self.control_dt / self.sim_dt))

    @property
    def n_steps(self) -> int:
        return int(round(self.duration / self.control_dt))


@dataclass(frozen=True)
class GateObservation:
    width: float
    theta: float


def transform_to_gate_frame(x, p_T, p_g, theta: float, width: float):
    """Pure translation into the non-rotating gate frame; returns ``(x', p_T', chi_g)``."""
    x = np.array(x, dtype=float)
    p_g = np.asarray(p_g, dtype=float)
    x[:3] -= p_g
    return x, np.asarray(p_T, dtype=float) - p_g, GateObservation(float(width), float(theta))


def dnn2_query(dnn2: MlpParams, x, p_T, obs: GateObservation) -> DecisionVars:
    if dnn2.n_in != 18:
        raise DimensionMismatch(f"second network must take 18 inputs, has {dnn2.n_in}")
    return DecisionVars.from_array(forward(dnn2, dnn2_input(x, p_T, obs.width, obs.theta)))


@dataclass(frozen=True)
class SearchResult:
    t_tra: float
    z: DecisionVars  # world frame, time relative to the query instant
    gate_position: np.ndarray
    gate_theta: float
    iterations: int
    converged: bool
    t1_trace: tuple = ()


def binary_search_traversal(dnn2, x_t, p_T, gate: GateMotion, now: float, cfg: RuntimeConfig,
                            query: Optional[Callable] = None) -> SearchResult:
    """Fixed-point search ``t1 <- (t1 + t2) / 2`` for the traversal time against a moving gate.

    ``gate`` describes the motion from time 0; ``query(x, p_T, obs)`` defaults to
    the second network. The returned time is the last network prediction ``t2``,
    which agrees with ``t1`` within ``eps_bs`` on convergence.
    """
    if query is None:
        def query(x, pT, obs):
            return dnn2_query(dnn2, x, pT, obs)

    x_t = np.asarray(x_t, dtype=float)
    p_now, _ = gate_state_at(gate, now)
    t1 = float(np.linalg.norm(x_t[:3] - p_now)) / cfg.v_nominal
    trace = [t1]
    converged = False
    it = 0
    while True:
        it += 1
        p_g, theta = gate_state_at(gate, now + t1)
        x_g, pT_g, obs = transform_to_gate_frame(x_t, p_T, p_g, theta, gate.width)
        zg = query(x_g, pT_g, obs)
        t2 = float(zg.t_tra)
        if abs(t1 - t2) <= cfg.eps_bs:
            converged = True
            break
        if it >= cfg.max_bs_iters:
            break
        t1 = 0.5 * (t1 + t2)
        trace.append(t1)
    t_out = t2 if converged else t1
    z_world = DecisionVars(zg.p_tra + p_g, zg.rho_tra.copy(), t_out)
    return SearchResult(t_out, z_world, p_g, theta, it, converged, tuple(trace))


# ---------------------------------------------------------------- episodes


@dataclass(frozen=True)
class DynamicScenario:
    """A closed-loop test case: start, target and the gate's initial pose and mean velocity."""

    p_init: np.ndarray
    psi_init: float
    p_T: np.ndarray
    gate: GateMotion  # v_g is the mean velocity mu; omega_g is the constant pitch rate

    @classmethod
    def from_static(cls, s: Scenario, mu=(0.0, 0.0, 0.0), omega_g: float = 0.0) -> "DynamicScenario":
        g = s.gate
        moving = GateMotion(g.p_g0, g.theta_g0, np.asarray(mu, float), omega_g, g.width, g.height)
        return cls(np.asarray(s.p_init, float), s.psi_init, np.asarray(s.p_T, float), moving)

    def initial_state(self) -> np.ndarray:
        return make_state(p=self.p_init, q=yaw_to_quat(self.psi_init))


LOG_COLUMNS = (
    ["t"] + [f"x{i}" for i in range(13)] + [f"u{i}" for i in range(4)]
    + ["gate_x", "gate_y", "gate_z", "gate_theta", "gate_vx", "gate_vy", "gate_vz"]
    + ["t_tra", "p_tra_x", "p_tra_y", "p_tra_z", "rho_x", "rho_y", "rho_z"]
    + ["bs_iters", "bs_converged", "mpc_iters", "mpc_converged", "mpc_cost"]
)


@dataclass
class Outcome:
    traversed: bool
    safe: bool
    safe_margin_min: Optional[float]
    target_error: float
    crossing_time: Optional[float]
    predicted_t_at_crossing: Optional[float]
    failed: bool = False


@dataclass
class EpisodeLog:
    rows: np.ndarray  # (n_steps, len(LOG_COLUMNS)), one row per control step
    fine_times: np.ndarray  # simulator time stamps
    fine_states: np.ndarray  # (n_fine, 13)
    fine_gate_pos: np.ndarray  # (n_fine, 3)
    fine_gate_theta: np.ndarray  # (n_fine,)
    outcome: Optional[Outcome] = None
    failed: bool = False
    trajectories: List[OptimalTrajectory] = field(default_factory=list, repr=False)

    def column(self, name: str) -> np.ndarray:
        return self.rows[:, LOG_COLUMNS.index(name)]

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(LOG_COLUMNS)
            for r in self.rows:
                w.writerow([repr(float(v)) for v in r])

    def write_outcome(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(asdict(self.outcome), fh, indent=2)


def _crossing_in_gate_frame(rel: np.ndarray, times: np.ndarray):
    """First transition of ``rel . n`` from <= 0 to > 0; returns ``(j, lambda)`` or ``None``."""
    signed = rel @ GATE_NORMAL
    behind = signed > 0.0
    hits = np.nonzero(behind[1:] & ~behind[:-1])[0]
    if hits.size == 0:
        return None
    j = int(hits[0]) + 1
    lam = -signed[j - 1] / (signed[j] - signed[j - 1])
    return j, lam


def traversal_outcome(times, states, gate_pos, gate_theta, p_T, width: float, height: float,
                      half_width: float, eps: float, rows: Optional[np.ndarray] = None) -> Outcome:
    """Crossing analysis in the moving gate's frame from finely sampled realized trajectories."""
    times = np.asarray(times, float)
    states = np.asarray(states, float)
    gate_pos = np.asarray(gate_pos, float)
    gate_theta = np.asarray(gate_theta, float)
    verts = vertex_trajectories(states, half_width)
    margins = []
    all_inside = True
    for traj in verts:
        rel = traj - gate_pos
        hit = _crossing_in_gate_frame(rel, times)
        if hit is None:
            all_inside = False
            margins = None
            break
        j, lam = hit
        s = rel[j - 1] + lam * (rel[j] - rel[j - 1])
        th = gate_theta[j - 1] + lam * (gate_theta[j] - gate_theta[j - 1])
        s[1] = 0.0  # exactly on the plane after interpolation, up to rounding
        inside, d = edge_distance(s, np.zeros(3), th, width, height)
        all_inside &= inside
        margins.append(d if inside else -d)
    com = _crossing_in_gate_frame(states[:, :3] - gate_pos, times)
    t_c = None
    pred = None
    if com is not None:
        j, lam = com
        t_c = float(times[j - 1] + lam * (times[j] - times[j - 1]))
        if rows is not None and len(rows):
            t_rows = rows[:, 0]
            before = np.nonzero(t_rows <= t_c)[0]
            if before.size:
                pred = float(rows[before[-1], LOG_COLUMNS.index("t_tra")])
    target_error = float(np.linalg.norm(states[-1, :3] - np.asarray(p_T, float)))
    if margins is None:
        return Outcome(False, False, None, target_error, t_c, pred)
    m = float(min(margins))
    traversed = bool(all_inside)
    return Outcome(traversed, bool(traversed and m >= eps), m, target_error, t_c, pred)


def run_episode(dnn2: Optional[MlpParams], scenario: DynamicScenario, cfg: RuntimeConfig, seed: int,
                mpc: MpcConfig = MpcConfig(), eps: float = 0.2, query: Optional[Callable] = None,
                use_search: bool = True, keep_trajectories: bool = False) -> EpisodeLog:
    """Closed-loop flight through a moving gate.

    The gate velocity is redrawn from ``N(mu, sigma)`` at every control step
    (``mu`` is ``scenario.gate.v_g``); the pitch advances at the constant rate
    ``scenario.gate.omega_g``. With ``use_search=False`` the network is queried
    once per step at the current gate pose (the static-gate baseline).
    """
    rng = np.random.default_rng(seed)
    params: QuadParams = mpc.params
    gate0 = scenario.gate
    mu = np.asarray(gate0.v_g, float)
    sigma = np.asarray(cfg.gate_sigma, float)
    p_T = np.asarray(scenario.p_T, float)
    x_T = hover_state(p_T)
    x = scenario.initial_state()
    u_prev = np.full(4, params.hover_thrust)
    g_pos = np.asarray(gate0.p_g0, float).copy()
    g_theta = float(gate0.theta_g0)
    h = cfg.sim_dt

    rows = []
    fine_t, fine_x, fine_gp, fine_gt = [0.0], [x.copy()], [g_pos.copy()], [g_theta]
    warm = None
    failed = False
    trajs = []
    for step in range(cfg.n_steps):
        now = step * cfg.control_dt
        v_g = mu + sigma * rng.standard_normal(3) if np.any(sigma > 0) else mu.copy()
        current = GateMotion(g_pos - v_g * now, g_theta - gate0.omega_g * now, v_g, gate0.omega_g,
                             gate0.width, gate0.height)
        if use_search:
            res = binary_search_traversal(dnn2, x, p_T, current, now, cfg, query)
        else:
            x_g, pT_g, obs = transform_to_gate_frame(x, p_T, g_pos, g_theta, gate0.width)
            zg = query(x_g, pT_g, obs) if query is not None else dnn2_query(dnn2, x_g, pT_g, obs)
            res = SearchResult(zg.t_tra, DecisionVars(zg.p_tra + g_pos, zg.rho_tra, zg.t_tra), g_pos, g_theta,
                               0, True)
        try:
            u0, traj = receding_step(x, u_prev, res.z, mpc, x_T=x_T, warm=warm)
        except NonFinite:
            failed = True
            break
        if keep_trajectories:
            trajs.append(traj)
        warm = traj
        z = res.z
        rows.append(np.concatenate([
            [now], x, u0, g_pos, [g_theta], v_g,
            [z.t_tra], z.p_tra, z.rho_tra,
            [res.iterations, float(res.converged), traj.iterations, float(traj.converged), traj.cost],
        ]))
        try:
            for sub in range(cfg.substeps):
                x = integrate_quad(x, u0, h, 1, params)
                g_pos = g_pos + v_g * h
                g_theta = g_theta + gate0.omega_g * h
                fine_t.append(now + (sub + 1) * h)
                fine_x.append(x.copy())
                fine_gp.append(g_pos.copy())
                fine_gt.append(g_theta)
        except NonFinite:
            failed = True
            break
        u_prev = u0

    log = EpisodeLog(np.array(rows).reshape(-1, len(LOG_COLUMNS)), np.array(fine_t), np.array(fine_x),
                     np.array(fine_gp), np.array(fine_gt), failed=failed, trajectories=trajs)
    out = traversal_outcome(log.fine_times, log.fine_states, log.fine_gate_pos, log.fine_gate_theta, p_T,
                            gate0.width, gate0.height, params.half_width, eps, log.rows)
    if failed:
        out.traversed = False
        out.safe = False
        out.failed = True
    log.outcome = out
    return log
