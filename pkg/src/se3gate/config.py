"""Run configuration: nested dataclass sections, JSON documents and ``key.path=value`` overrides.

Every field has a default, so an empty document is a complete configuration.
Sections hold plain JSON-friendly values (weight matrices as diagonals); the
methods on ``RunConfig`` turn them into the library's domain objects.
"""
from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field, fields, is_dataclass, replace
from pathlib import Path
from typing import Any, Dict, Iterable, Optional

import numpy as np

from .dynamics import QuadParams
from .errors import ConfigError, ConfigIo, InvalidValue, UnknownKey
from .mpc import MpcConfig, MpcWeights
from .runtime import FIG8_PRESETS, RuntimeConfig
from .training import ScenarioDistribution, TrainingConfig
from .traversal import RewardConfig

OUTPUT_ENV = "SE3GATE_OUTPUT_DIR"


@dataclass(frozen=True)
class QuadSection:
    m: float = 1.0
    J_diag: tuple = (0.01, 0.01, 0.02)
    g: float = 9.81
    arm: float = 0.2
    c_tau: float = 0.01
    f_max: float = 6.0
    half_width: float = 0.75


@dataclass(frozen=True)
class MpcSection:
    N: int = 50
    dt: float = 0.1
    q_x: tuple = (10.0, 10.0, 10.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 0.1, 0.1, 0.1)
    q_u: tuple = (0.01, 0.01, 0.01, 0.01)
    q_du: tuple = (0.01, 0.01, 0.01, 0.01)
    q_max: tuple = (100.0, 100.0, 100.0, 50.0)
    gamma: float = 30.0
    max_iter: int = 100  # receding-horizon solves
    tol_grad: float = 1e-4
    tol_rel: float = 1e-8


@dataclass(frozen=True)
class RewardSection:
    r_max: float = 100.0
    alpha: float = 1.0
    beta: float = 10.0
    n_terminal: int = 5
    eps: float = 0.2


@dataclass(frozen=True)
class ScenarioSection:
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
    theta_jitter: float = 0.0
    gate_height: float = 2.0


@dataclass(frozen=True)
class TrainingSection:
    episodes: int = 50
    solves_per_episode: int = 100
    fd_delta: tuple = (0.05,) * 7
    lr: float = 5e-3
    mpc_max_iter: int = 150  # open-loop training solves
    mpc_tol_rel: float = 1e-6
    il_scenarios: int = 200
    il_epochs: int = 300
    il_batch: int = 64
    il_lr: float = 1e-3
    il_val_fraction: float = 0.1
    il_max_iter: int = 500


@dataclass(frozen=True)
class RuntimeSection:
    eps_bs: float = 0.01
    max_bs_iters: int = 20
    v_nominal: float = 3.0
    sim_dt: float = 0.01
    control_dt: float = 0.1
    duration: float = 6.0
    gate_sigma: tuple = (0.1, 0.1, 0.1)
    omega_g: float = float(np.pi / 2)


@dataclass(frozen=True)
class EvalSection:
    static_scenarios: int = 50
    dynamic_scenarios: int = 1  # per preset
    presets: tuple = tuple(FIG8_PRESETS)


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    output_dir: str = ""  # empty: $SE3GATE_OUTPUT_DIR, else ./runs
    threads: int = 1
    quad: QuadSection = field(default_factory=QuadSection)
    mpc: MpcSection = field(default_factory=MpcSection)
    reward: RewardSection = field(default_factory=RewardSection)
    scenario: ScenarioSection = field(default_factory=ScenarioSection)
    training: TrainingSection = field(default_factory=TrainingSection)
    runtime: RuntimeSection = field(default_factory=RuntimeSection)
    eval: EvalSection = field(default_factory=EvalSection)

    # ------------------------------------------------------------ domain objects

    def quad_params(self) -> QuadParams:
        q = self.quad
        return QuadParams(m=q.m, J=tuple(tuple(r) for r in np.diag(q.J_diag).tolist()), g=q.g, arm=q.arm,
                          c_tau=q.c_tau, f_max=q.f_max, half_width=q.half_width)

    def mpc_weights(self) -> MpcWeights:
        m = self.mpc
        return MpcWeights(np.diag(m.q_x), np.diag(m.q_u), np.diag(m.q_du), np.diag(m.q_max), m.gamma)

    def mpc_config(self) -> MpcConfig:
        m = self.mpc
        return MpcConfig(m.N, m.dt, self.mpc_weights(), self.quad_params(), m.max_iter, m.tol_grad, m.tol_rel)

    def reward_config(self) -> RewardConfig:
        return RewardConfig(**asdict(self.reward))

    def distribution(self) -> ScenarioDistribution:
        return ScenarioDistribution(**asdict(self.scenario))

    def training_config(self) -> TrainingConfig:
        t = self.training
        mpc = replace(self.mpc_config(), max_iter=t.mpc_max_iter, tol_rel=t.mpc_tol_rel)
        return TrainingConfig(
            episodes=t.episodes, solves_per_episode=t.solves_per_episode, fd_delta=tuple(t.fd_delta),
            reward=self.reward_config(), mpc=mpc, distribution=self.distribution(), seed=self.seed, lr=t.lr,
            il_scenarios=t.il_scenarios, il_epochs=t.il_epochs, il_batch=t.il_batch, il_lr=t.il_lr,
            il_val_fraction=t.il_val_fraction, il_max_iter=t.il_max_iter, threads=self.threads,
        )

    def runtime_config(self) -> RuntimeConfig:
        r = self.runtime
        return RuntimeConfig(r.eps_bs, r.max_bs_iters, r.v_nominal, r.sim_dt, r.control_dt, r.duration,
                             tuple(r.gate_sigma), r.omega_g)

    def resolved_output_dir(self) -> Path:
        return Path(self.output_dir or os.environ.get(OUTPUT_ENV) or "runs")

    def validate(self) -> "RunConfig":
        """Build every domain object once so inconsistent values fail early."""
        checks = (
            ("quad", self.quad_params), ("mpc", self.mpc_config), ("reward", self.reward_config),
            ("scenario", self.distribution), ("training", self.training_config),
            ("runtime", self.runtime_config),
        )
        for key, build in checks:
            try:
                build()
            except ConfigError:
                raise
            except (ValueError, TypeError) as exc:
                raise InvalidValue(key, str(exc)) from exc
        if self.threads < 1:
            raise InvalidValue("threads", "must be >= 1")
        if self.mpc.N < 2:
            raise InvalidValue("mpc.N", "must be >= 2")
        if self.eval.static_scenarios < 0 or self.eval.dynamic_scenarios < 0:
            raise InvalidValue("eval", "scenario counts must be non-negative")
        for name in self.eval.presets:
            if name not in FIG8_PRESETS:
                raise InvalidValue("eval.presets", f"unknown preset {name!r}")
        s = self.scenario
        if s.width_min <= 0 or s.width_min > s.width_max:
            raise InvalidValue("scenario.width_min", "need 0 < width_min <= width_max")
        return self


# ---------------------------------------------------------------- parsing


def _coerce(key: str, default: Any, value: Any) -> Any:
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise InvalidValue(key, f"expected a boolean, got {value!r}")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise InvalidValue(key, f"expected an integer, got {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)) or not np.isfinite(value):
            raise InvalidValue(key, f"expected a finite number, got {value!r}")
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise InvalidValue(key, f"expected a string, got {value!r}")
        return value
    if isinstance(default, tuple):
        if not isinstance(value, (list, tuple)):
            raise InvalidValue(key, f"expected a list, got {value!r}")
        if default and all(isinstance(d, str) for d in default):
            if not all(isinstance(v, str) for v in value):
                raise InvalidValue(key, "expected a list of strings")
            return tuple(value)
        if len(value) != len(default):
            raise InvalidValue(key, f"expected {len(default)} entries, got {len(value)}")
        return tuple(_coerce(f"{key}[{i}]", 0.0, v) for i, v in enumerate(value))
    raise InvalidValue(key, "unsupported field type")


def _merge(obj, doc: Dict[str, Any], prefix: str = ""):
    if not isinstance(doc, dict):
        raise InvalidValue(prefix.rstrip(".") or "<root>", "expected an object")
    names = {f.name: f for f in fields(obj)}
    updates = {}
    for k, v in doc.items():
        key = prefix + k
        if k not in names:
            while isinstance(v, dict) and len(v) == 1:  # name the full dotted path
                (sub, v), = v.items()
                key += "." + sub
            raise UnknownKey(key, "unknown configuration key")
        current = getattr(obj, k)
        if is_dataclass(current):
            updates[k] = _merge(current, v, key + ".")
        else:
            updates[k] = _coerce(key, current, v)
    return replace(obj, **updates)


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_override(doc: Dict[str, Any], assignment: str) -> None:
    """Insert one ``key.path=value`` assignment into a nested document (value parsed as JSON if possible)."""
    if "=" not in assignment:
        raise InvalidValue(assignment, "override must look like key.path=value")
    path, _, text = assignment.partition("=")
    parts = [p for p in path.strip().split(".") if p]
    if not parts:
        raise InvalidValue(assignment, "empty key")
    node = doc
    for p in parts[:-1]:
        nxt = node.setdefault(p, {})
        if not isinstance(nxt, dict):
            raise InvalidValue(path, f"{p} is not a section")
        node = nxt
    node[parts[-1]] = _parse_value(text.strip())


def config_from_dict(doc: Dict[str, Any]) -> RunConfig:
    return _merge(RunConfig(), doc).validate()


def parse_config(path: Optional[str] = None, overrides: Iterable[str] = ()) -> RunConfig:
    """Merge a JSON document (optional) over the defaults, then apply the overrides."""
    doc: Dict[str, Any] = {}
    if path is not None:
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigIo(str(path), f"cannot read config: {exc}") from exc
        try:
            doc = json.loads(text) if text.strip() else {}
        except json.JSONDecodeError as exc:
            raise InvalidValue(str(path), f"invalid JSON: {exc}") from exc
    for a in overrides:
        apply_override(doc, a)
    return config_from_dict(doc)


def config_to_dict(cfg: RunConfig) -> Dict[str, Any]:
    def plain(v):
        if isinstance(v, dict):
            return {k: plain(x) for k, x in v.items()}
        if isinstance(v, (list, tuple)):
            return [plain(x) for x in v]
        return v

    return plain(asdict(cfg))


def dump_config(cfg: RunConfig, path) -> None:
    Path(path).write_text(json.dumps(config_to_dict(cfg), indent=2, sort_keys=True) + "\n")
