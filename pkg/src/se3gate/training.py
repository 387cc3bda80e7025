"""Reinforce-imitate training: RL of the first network, dataset relabeling, imitation of the second.

Stage 1 (``train_rl``): for each sampled static-gate scenario the first network
proposes ``z = (p_tra, rho_tra, t_tra)``, one open-loop MPC solve gives the
optimal trajectory, and the reward gradient with respect to ``z`` comes from
forward differences (seven extra warm-started solves). The chain rule through
the network and an Adam ascent step per episode close the loop.

Stage 2 (``make_imitation_dataset`` + ``train_il``): every knot ``k`` of the
optimal trajectory becomes a sample whose label keeps ``p_tra, rho_tra`` and
shifts the traversal time to ``t_tra - k dt``.
"""
from __future__ import annotations

import csv
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, List, Optional, Sequence

import numpy as np

from .dynamics import GateMotion, QuadParams, hover_state, make_state
from .errors import EmptyDataset, Se3GateError
from .mpc import DecisionVars, MpcConfig, MpcProblem, OptimalTrajectory, solve
from .nn import AdamState, MlpGrads, MlpParams, adam_step, backward, forward, forward_normalized, init_mlp
from .se3 import yaw_to_quat
from .traversal import RewardConfig, reward

DNN1_DIMS = (9, 64, 64, 7)
DNN2_DIMS = (18, 128, 128, 7)


def wrap_gate_angle(theta: float) -> float:
    """The aperture is symmetric under a half turn, so pitch is only meaningful modulo pi."""
    return float(theta - np.pi * np.floor((theta + np.pi / 2) / np.pi))


# ---------------------------------------------------------------- scenarios


@dataclass(frozen=True)
class ScenarioDistribution:
    init_center: tuple = (0.0, -9.0, 0.0)
    init_half_range: float = 5.0
    target_center: tuple = (0.0, 6.0, 0.0)
    target_half_range: float = 2.0
    yaw_half_range: float = 0.1
    width_mean: float = 0.9
    width_std: float = 0.2
    width_min: float = 0.5
    width_max: float = 1.5
    k_theta: float = 0.5
    theta_jitter: float = 0.0  # extra uniform pitch noise, half range [rad]
    gate_height: float = 2.0


@dataclass(frozen=True)
class Scenario:
    p_init: np.ndarray
    psi_init: float
    p_T: np.ndarray
    gate: GateMotion
    seed: int = 0

    def initial_state(self) -> np.ndarray:
        return make_state(p=self.p_init, q=yaw_to_quat(self.psi_init))

    def target_state(self) -> np.ndarray:
        return hover_state(self.p_T)


def sample_scenario(rng, dist: ScenarioDistribution = ScenarioDistribution(), seed: int = 0) -> Scenario:
    """Draw one static-gate scenario; an integer ``rng`` is used as the seed."""
    if isinstance(rng, (int, np.integer)):
        seed = int(rng)
        rng = np.random.default_rng(seed)
    p_init = np.asarray(dist.init_center, float) + rng.uniform(-dist.init_half_range, dist.init_half_range, 3)
    psi = float(rng.uniform(-dist.yaw_half_range, dist.yaw_half_range))
    p_T = np.asarray(dist.target_center, float) + rng.uniform(-dist.target_half_range, dist.target_half_range, 3)
    width = float(np.clip(rng.normal(dist.width_mean, dist.width_std), dist.width_min, dist.width_max))
    theta = dist.k_theta / width
    if dist.theta_jitter > 0:
        theta += float(rng.uniform(-dist.theta_jitter, dist.theta_jitter))
    gate = GateMotion(p_g0=np.zeros(3), theta_g0=theta, width=width, height=dist.gate_height)
    return Scenario(p_init, psi, p_T, gate, seed)


# independent seed streams so RL, dataset and evaluation scenarios never coincide
STREAM_RL, STREAM_DATASET, STREAM_EVAL = 0, 1, 2


def scenario_seed(base_seed: int, *path: int) -> int:
    """Stable per-scenario seed derived from the run seed and a position such as (stream, episode, index)."""
    return int(np.random.SeedSequence([base_seed, *path]).generate_state(1)[0])


def seeded_scenarios(base_seed: int, stream: int, n: int, dist: ScenarioDistribution = ScenarioDistribution()):
    return [sample_scenario(scenario_seed(base_seed, stream, i), dist) for i in range(n)]


# ---------------------------------------------------------------- networks

_POS, _VEL, _ANG, _RATE = 10.0, 5.0, np.pi, np.pi


def make_dnn1(seed: int = 0) -> MlpParams:
    """First network: ``(p_init, p_T, psi_init, width, theta) -> z``, time squashed to [0.5, 4.5] s."""
    return init_mlp(
        DNN1_DIMS, seed,
        in_scale=[_POS] * 6 + [_ANG, 1.0, _ANG],
        out_offset=[0, 0, 0, 0, 0, 0, 2.5],
        out_scale=[2, 2, 2, 1, 1, 1, 2.0],
        squash=[False] * 6 + [True],
        final_gain=0.1,
    )


def make_dnn2(seed: int = 0) -> MlpParams:
    """Second network: ``(x, p_T, width, theta) -> z``; the time range is signed, [-5, 5] s."""
    return init_mlp(
        DNN2_DIMS, seed,
        in_scale=[_POS] * 3 + [_VEL] * 3 + [1.0] * 4 + [_RATE] * 3 + [_POS] * 3 + [1.0, _ANG],
        out_offset=np.zeros(7),
        out_scale=[2, 2, 2, 1, 1, 1, 5.0],
        squash=[False] * 6 + [True],
        final_gain=0.1,
    )


def dnn1_input(s: Scenario) -> np.ndarray:
    """Raw 9-vector ``(p_init, p_T, psi_init, width, theta)``; scaling lives in the network."""
    return np.concatenate([s.p_init, s.p_T, [s.psi_init, s.gate.width, wrap_gate_angle(s.gate.theta_g0)]])


def dnn2_input(x, p_T, width: float, theta: float) -> np.ndarray:
    return np.concatenate([np.asarray(x, float), np.asarray(p_T, float), [width, wrap_gate_angle(theta)]])


# ---------------------------------------------------------------- configuration


@dataclass(frozen=True)
class TrainingConfig:
    episodes: int = 50
    solves_per_episode: int = 100
    fd_delta: tuple = (0.05,) * 7
    reward: RewardConfig = field(default_factory=RewardConfig)
    mpc: MpcConfig = field(default_factory=lambda: MpcConfig(max_iter=150, tol_rel=1e-6))
    distribution: ScenarioDistribution = field(default_factory=ScenarioDistribution)
    seed: int = 0
    lr: float = 5e-3
    il_scenarios: int = 200
    il_epochs: int = 300
    il_batch: int = 64
    il_lr: float = 1e-3
    il_val_fraction: float = 0.1
    il_max_iter: int = 500  # dataset solves must converge, so they get a larger budget
    threads: int = 1

    def __post_init__(self):
        if len(self.fd_delta) != 7 or min(self.fd_delta) <= 0:
            raise ValueError("fd_delta needs 7 positive entries")
        if self.episodes < 0 or self.solves_per_episode < 1:
            raise ValueError("episodes must be >= 0 and solves_per_episode >= 1")


# ---------------------------------------------------------------- reward evaluation


def scenario_problem(s: Scenario, z: DecisionVars, cfg: MpcConfig, params: Optional[QuadParams] = None) -> MpcProblem:
    params = cfg.params if params is None else params
    return MpcProblem.from_config(cfg, s.initial_state(), np.full(4, params.hover_thrust), s.target_state(), z)


class ScenarioEvaluator:
    """``z -> reward`` for one scenario, deterministic in ``z``.

    The anchor (the first ``z`` evaluated unless given) is solved cold once.
    Every evaluation, the anchor itself included, then warm-starts from that
    solution with the same budget. Finite differences therefore compare solves
    that ran the same procedure; differencing a cold solve against warm ones
    would credit the extra iterations to the perturbation.
    """

    def __init__(self, scenario: Scenario, mpc: MpcConfig, reward_cfg: RewardConfig, anchor=None):
        self.scenario = scenario
        self.mpc = mpc
        self.reward_cfg = reward_cfg
        self.anchor = anchor
        self.nominal: Optional[OptimalTrajectory] = None

    def _solve(self, z, warm) -> OptimalTrajectory:
        dv = z if isinstance(z, DecisionVars) else DecisionVars.from_array(z)
        problem = scenario_problem(self.scenario, dv, self.mpc)
        return solve(problem, warm, self.mpc.max_iter, self.mpc.tol_grad, self.mpc.tol_rel)

    def trajectory(self, z) -> OptimalTrajectory:
        if self.nominal is None:
            self.nominal = self._solve(z if self.anchor is None else self.anchor, None)
        return self._solve(z, self.nominal.controls)  # controls only: fresh damping

    def __call__(self, z) -> float:
        traj = self.trajectory(z)
        s = self.scenario
        return reward(traj.states, s.gate, s.p_T, self.reward_cfg, self.mpc.params.half_width)


def fd_gradient(reward_eval: Callable, z, delta, r0: Optional[float] = None):
    """Forward-difference gradient of ``reward_eval`` at ``z``; ``None`` if any evaluation fails.

    Returns ``(grad, r0)``. Pass ``r0`` to reuse a known value at ``z``.
    """
    z = np.asarray(z, dtype=float)
    delta = np.broadcast_to(np.asarray(delta, dtype=float), z.shape)
    try:
        if r0 is None:
            r0 = float(reward_eval(z))
        grad = np.empty_like(z)
        for i in range(z.size):
            zp = z.copy()
            zp[i] += delta[i]
            grad[i] = (float(reward_eval(zp)) - r0) / delta[i]
    except (Se3GateError, FloatingPointError):
        return None, r0
    if not np.all(np.isfinite(grad)):
        return None, r0
    return grad, r0


# ---------------------------------------------------------------- reinforcement learning


@dataclass(frozen=True)
class EpisodeRecord:
    episode: int
    median: float
    q25: float
    q75: float
    skipped: int


def _sample_gradient(dnn1: MlpParams, scenario: Scenario, cfg: TrainingConfig, evaluator_factory):
    x_in = dnn1_input(scenario)
    z = forward(dnn1, x_in)
    evaluator = evaluator_factory(scenario, cfg)
    try:
        r0 = float(evaluator(z))
    except (Se3GateError, FloatingPointError):
        return None, None
    g_z, _ = fd_gradient(evaluator, z, cfg.fd_delta, r0)
    if g_z is None:
        return None, r0
    return backward(dnn1, x_in, g_z), r0


def default_evaluator(scenario: Scenario, cfg: TrainingConfig):
    return ScenarioEvaluator(scenario, cfg.mpc, cfg.reward)


def train_rl(dnn1: MlpParams, cfg: TrainingConfig, evaluator_factory=default_evaluator, reward_csv=None,
             on_episode: Optional[Callable] = None):
    """Finite-difference policy gradient ascent on the expected reward.

    Returns ``(params, history)`` with one ``EpisodeRecord`` per episode. The
    reward statistics describe the scenarios evaluated with the parameters in
    force at the start of that episode.
    """
    params = dnn1.copy()
    adam = AdamState.for_params(params, lr=cfg.lr)
    history: List[EpisodeRecord] = []
    writer = None
    fh = None
    if reward_csv is not None:
        fh = open(reward_csv, "w", newline="")
        writer = csv.writer(fh)
        writer.writerow(["episode", "median", "q25", "q75", "skipped"])
    try:
        pool = ThreadPoolExecutor(cfg.threads) if cfg.threads > 1 else None
        for ep in range(cfg.episodes):
            scenarios = [
                sample_scenario(scenario_seed(cfg.seed, STREAM_RL, ep, i), cfg.distribution)
                for i in range(cfg.solves_per_episode)
            ]
            snapshot = params

            def work(s):
                return _sample_gradient(snapshot, s, cfg, evaluator_factory)

            results = list(pool.map(work, scenarios)) if pool else [work(s) for s in scenarios]
            rewards = np.array([r for _, r in results if r is not None])
            grads = [g for g, _ in results if g is not None]
            skipped = len(results) - len(grads)
            if grads:
                total = MlpGrads.zeros_like(params)
                for g in grads:
                    total.add_(g)
                params, adam = adam_step(adam, params, total.scaled(1.0 / len(grads)), ascent=True)
            if rewards.size:
                q25, med, q75 = np.percentile(rewards, [25, 50, 75])
            else:
                q25 = med = q75 = float("nan")
            rec = EpisodeRecord(ep, float(med), float(q25), float(q75), skipped)
            history.append(rec)
            if writer:
                writer.writerow([rec.episode, repr(rec.median), repr(rec.q25), repr(rec.q75), rec.skipped])
                fh.flush()
            if on_episode:
                on_episode(rec, params)
        if pool:
            pool.shutdown()
    finally:
        if fh:
            fh.close()
    return params, history


# ---------------------------------------------------------------- imitation learning


@dataclass(frozen=True)
class ImitationSample:
    input: np.ndarray  # (x_k, p_T, width, theta), 18 entries
    label: np.ndarray  # (p_tra, rho_tra, t_tra - k dt)
    scenario_id: int
    k: int


def imitation_samples(z, traj: OptimalTrajectory, scenario: Scenario, dt: float, scenario_id: int):
    """Relabel every knot of an optimal trajectory with the time-shifted decision variables."""
    z = np.asarray(z, dtype=float)
    out = []
    for k, x_k in enumerate(traj.states):
        label = z.copy()
        label[6] = z[6] - k * dt
        inp = dnn2_input(x_k, scenario.p_T, scenario.gate.width, scenario.gate.theta_g0)
        out.append(ImitationSample(inp, label, scenario_id, k))
    return out


def make_imitation_dataset(dnn1: MlpParams, scenarios: Sequence[Scenario], cfg: TrainingConfig,
                           require_converged: bool = True):
    """Returns ``(samples, skipped_scenario_ids)``."""
    samples: List[ImitationSample] = []
    skipped = []

    def work(item):
        sid, s = item
        z = forward(dnn1, dnn1_input(s))
        try:
            mpc = replace(cfg.mpc, max_iter=max(cfg.mpc.max_iter, cfg.il_max_iter))
            traj = ScenarioEvaluator(s, mpc, cfg.reward).trajectory(z)
        except (Se3GateError, FloatingPointError):
            return sid, None
        if require_converged and not traj.converged:
            return sid, None
        return sid, imitation_samples(z, traj, s, cfg.mpc.dt, sid)

    items = list(enumerate(scenarios))
    if cfg.threads > 1:
        with ThreadPoolExecutor(cfg.threads) as pool:
            results = list(pool.map(work, items))
    else:
        results = [work(it) for it in items]
    for sid, got in results:
        if got is None:
            skipped.append(sid)
        else:
            samples.extend(got)
    return samples, skipped


def save_dataset(samples: Sequence[ImitationSample], path) -> None:
    with open(path, "w") as fh:
        for s in samples:
            fh.write(json.dumps({
                "scenario_id": s.scenario_id, "k": s.k,
                "input": s.input.tolist(), "label": s.label.tolist(),
            }) + "\n")


def load_dataset(path) -> List[ImitationSample]:
    out = []
    for line in Path(path).read_text().splitlines():
        if line.strip():
            d = json.loads(line)
            out.append(ImitationSample(np.asarray(d["input"], float), np.asarray(d["label"], float),
                                       int(d["scenario_id"]), int(d["k"])))
    return out


def split_by_scenario(samples: Sequence[ImitationSample], val_fraction: float, seed: int):
    """Train/validation split that never puts one scenario on both sides."""
    ids = np.array(sorted({s.scenario_id for s in samples}))
    rng = np.random.default_rng(seed)
    rng.shuffle(ids)
    n_val = int(round(val_fraction * len(ids)))
    if val_fraction > 0 and len(ids) >= 2:
        n_val = min(max(n_val, 1), len(ids) - 1)
    val_ids = set(ids[:n_val].tolist())
    train = [s for s in samples if s.scenario_id not in val_ids]
    val = [s for s in samples if s.scenario_id in val_ids]
    return train, val


def _arrays(params: MlpParams, samples):
    X = np.array([s.input for s in samples])
    Y = params.normalize_output(np.array([s.label for s in samples]))
    return X, Y


def normalized_mse(params: MlpParams, samples) -> float:
    if not samples:
        return float("nan")
    X, Y = _arrays(params, samples)
    return float(np.mean((forward_normalized(params, X) - Y) ** 2))


@dataclass(frozen=True)
class EpochRecord:
    epoch: int
    train_mse: float
    val_mse: float


def train_il(dnn2: MlpParams, dataset: Sequence[ImitationSample], cfg: TrainingConfig, loss_csv=None,
             val_fraction: Optional[float] = None):
    """Mini-batch Adam on the mean squared error between normalized outputs and labels.

    Returns ``(params, history)`` with one ``EpochRecord`` per epoch.
    """
    if len(dataset) == 0:
        raise EmptyDataset("imitation dataset is empty")
    frac = cfg.il_val_fraction if val_fraction is None else val_fraction
    train, val = split_by_scenario(dataset, frac, cfg.seed)
    params = dnn2.copy()
    X, Y = _arrays(params, train)
    adam = AdamState.for_params(params, lr=cfg.il_lr)
    rng = np.random.default_rng(cfg.seed)
    history: List[EpochRecord] = []
    n = X.shape[0]
    for epoch in range(cfg.il_epochs):
        order = rng.permutation(n)
        for start in range(0, n, cfg.il_batch):
            idx = order[start:start + cfg.il_batch]
            S = forward_normalized(params, X[idx])
            G = 2.0 * (S - Y[idx]) / S.size
            params, adam = adam_step(adam, params, backward(params, X[idx], G, wrt="normalized"))
        train_mse = float(np.mean((forward_normalized(params, X) - Y) ** 2))
        history.append(EpochRecord(epoch, train_mse, normalized_mse(params, val)))
    if loss_csv is not None:
        with open(loss_csv, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["epoch", "train_mse", "val_mse"])
            for r in history:
                w.writerow([r.epoch, repr(r.train_mse), repr(r.val_mse)])
    return params, history
