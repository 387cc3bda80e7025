import csv
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from se3gate.dynamics import hover_state
from se3gate.errors import EmptyDataset, NonFinite
from se3gate.mpc import MpcConfig, OptimalTrajectory
from se3gate.nn import forward
from se3gate.training import (
    STREAM_DATASET, STREAM_EVAL, STREAM_RL, ImitationSample, ScenarioDistribution, ScenarioEvaluator,
    TrainingConfig, dnn1_input, dnn2_input, fd_gradient, imitation_samples, load_dataset, make_dnn1, make_dnn2,
    make_imitation_dataset, normalized_mse, sample_scenario, save_dataset, scenario_seed, seeded_scenarios,
    split_by_scenario, train_il, train_rl, wrap_gate_angle,
)

Z_STAR = np.array([0.5, -0.3, 0.2, 0.1, -0.1, 0.05, 3.0])


# ---------------------------------------------------------------- scenarios


def test_sampling_reproducible():
    a, b = sample_scenario(7), sample_scenario(7)
    assert np.array_equal(a.p_init, b.p_init) and a.psi_init == b.psi_init
    assert np.array_equal(a.p_T, b.p_T)
    assert (a.gate.width, a.gate.theta_g0) == (b.gate.width, b.gate.theta_g0)


def test_sampling_boxes():
    rng = np.random.default_rng(0)
    P = np.array([sample_scenario(rng).p_init for _ in range(1000)])
    rng = np.random.default_rng(0)
    S = [sample_scenario(rng) for _ in range(1000)]
    assert np.all(np.abs(P - [0, -9, 0]) <= 5.0)
    assert all(abs(s.psi_init) <= 0.1 for s in S)
    assert all(np.all(np.abs(s.p_T - [0, 6, 0]) <= 2.0) for s in S)
    assert all(0.5 <= s.gate.width <= 1.5 for s in S)
    assert all(s.gate.theta_g0 == pytest.approx(0.5 / s.gate.width) for s in S)
    assert all(np.all(s.gate.v_g == 0) and s.gate.omega_g == 0 for s in S)


def test_fixed_width_gives_exact_pitch():
    dist = ScenarioDistribution(width_std=0.0)
    s = sample_scenario(3, dist)
    assert s.gate.width == 0.9 and s.gate.theta_g0 == 0.5 / 0.9


def test_seed_streams_are_disjoint():
    seeds = {stream: {scenario_seed(0, stream, i) for i in range(200)}
             for stream in (STREAM_RL, STREAM_DATASET, STREAM_EVAL)}
    assert not (seeds[0] & seeds[1]) and not (seeds[0] & seeds[2]) and not (seeds[1] & seeds[2])
    a = seeded_scenarios(0, STREAM_DATASET, 3)
    assert np.array_equal(a[2].p_init, sample_scenario(scenario_seed(0, STREAM_DATASET, 2)).p_init)


@given(st.floats(-20, 20))
def test_wrap_gate_angle(theta):
    w = wrap_gate_angle(theta)
    assert -np.pi / 2 < w <= np.pi / 2 + 1e-12
    k = (theta - w) / np.pi
    assert k == pytest.approx(round(k), abs=1e-9)


# ---------------------------------------------------------------- network inputs


def test_dnn1_input_layout():
    s = sample_scenario(11)
    x = dnn1_input(s)
    assert x.shape == (9,)
    other = replace(s, psi_init=s.psi_init + 0.05)
    diff = np.nonzero(dnn1_input(other) - x)[0]
    assert diff.tolist() == [6]


def test_dnn1_normalized_inputs_bounded_at_means():
    s = sample_scenario(0, ScenarioDistribution(init_half_range=0, target_half_range=0, yaw_half_range=0,
                                                width_std=0))
    p = make_dnn1()
    xn = (dnn1_input(s) - p.in_shift) / p.in_scale
    assert np.all(np.abs(xn) <= 1.0)


def test_network_output_ranges(rng):
    d1, d2 = make_dnn1(), make_dnn2()
    for W in d1.weights + d2.weights:
        W *= 100.0  # saturate the squashing
    Z1 = forward(d1, rng.normal(scale=10, size=(200, 9)))
    Z2 = forward(d2, rng.normal(scale=10, size=(200, 18)))
    assert Z1[:, 6].min() >= 0.5 and Z1[:, 6].max() <= 4.5
    assert Z2[:, 6].min() >= -5.0 and Z2[:, 6].max() <= 5.0
    assert d1.layer_dims == (9, 64, 64, 7) and d2.layer_dims == (18, 128, 128, 7)


def test_initial_policy_near_nominal():
    z = forward(make_dnn1(), dnn1_input(sample_scenario(1)))
    assert np.all(np.abs(z[:3]) < 1.0) and 1.5 < z[6] < 3.5


# ---------------------------------------------------------------- finite differences


def test_fd_gradient_exact_on_affine(rng):
    for _ in range(10):
        c, b = rng.normal(size=7), rng.normal()
        z, d = rng.normal(size=7), rng.uniform(1e-3, 1.0, 7)
        g, r0 = fd_gradient(lambda v: c @ v + b, z, d)
        assert np.allclose(g, c, rtol=1e-9, atol=1e-9)
        assert r0 == pytest.approx(c @ z + b)


def test_fd_gradient_quadratic_and_constant(rng):
    z = rng.normal(size=7)
    d = np.full(7, 1e-4)
    g, _ = fd_gradient(lambda v: v @ v, z, d)
    assert np.allclose(g, 2 * z + d, atol=1e-9)  # forward difference bias is exactly delta
    assert np.allclose(g, 2 * z, atol=2e-4)
    g0, _ = fd_gradient(lambda v: 4.2, z, d)
    assert np.array_equal(g0, np.zeros(7))


def test_fd_gradient_failure_is_marked():
    calls = []

    def flaky(v):
        calls.append(1)
        if len(calls) == 3:
            raise NonFinite("diverged")
        return 1.0

    g, r0 = fd_gradient(flaky, np.zeros(7), 0.1)
    assert g is None and r0 == 1.0
    assert fd_gradient(lambda v: np.nan if v[0] > 0 else 0.0, np.zeros(7), 0.1)[0] is None


# ---------------------------------------------------------------- RL loop


class StubEvaluator:
    """Reward maximized at a known z*, independent of the scenario."""

    def __init__(self, scenario, cfg):
        pass

    def __call__(self, z):
        return 100.0 - float(np.sum((np.asarray(z) - Z_STAR) ** 2))


def test_train_rl_with_stub_moves_outputs_to_optimum():
    cfg = TrainingConfig(episodes=200, solves_per_episode=4, lr=5e-3, fd_delta=(1e-3,) * 7)
    dnn1 = make_dnn1(seed=0)
    probe = np.array([dnn1_input(sample_scenario(i)) for i in range(16)])
    d0 = np.linalg.norm(forward(dnn1, probe) - Z_STAR, axis=1).mean()
    trained, hist = train_rl(dnn1, cfg, StubEvaluator)
    d1 = np.linalg.norm(forward(trained, probe) - Z_STAR, axis=1).mean()
    assert len(hist) == 200
    assert d1 <= 0.5 * d0
    assert hist[-1].median > hist[0].median


def test_train_rl_zero_lr_keeps_params(tmp_path):
    cfg = TrainingConfig(episodes=3, solves_per_episode=2, lr=0.0)
    dnn1 = make_dnn1(seed=4)
    out, hist = train_rl(dnn1, cfg, StubEvaluator, reward_csv=tmp_path / "r.csv")
    assert all(np.array_equal(a, b) for a, b in zip(dnn1.weights, out.weights))
    rows = list(csv.reader(open(tmp_path / "r.csv")))
    assert rows[0] == ["episode", "median", "q25", "q75", "skipped"] and len(rows) == 4


def test_train_rl_counts_skips():
    class Failing(StubEvaluator):
        def __call__(self, z):
            raise NonFinite("always")

    _, hist = train_rl(make_dnn1(), TrainingConfig(episodes=1, solves_per_episode=3), Failing)
    assert hist[0].skipped == 3 and np.isnan(hist[0].median)


def test_train_rl_threads_do_not_change_results():
    cfg = TrainingConfig(episodes=3, solves_per_episode=5, fd_delta=(1e-3,) * 7)
    a, ha = train_rl(make_dnn1(), cfg, StubEvaluator)
    b, hb = train_rl(make_dnn1(), replace(cfg, threads=3), StubEvaluator)
    assert ha == hb
    assert all(np.array_equal(x, y) for x, y in zip(a.weights, b.weights))


def test_train_rl_smoke_with_mpc():
    mpc = MpcConfig(N=20, max_iter=20)
    cfg = TrainingConfig(episodes=2, solves_per_episode=3, mpc=mpc)
    _, hist = train_rl(make_dnn1(), cfg)
    assert len(hist) == 2 and all(np.isfinite(h.median) for h in hist)


# ---------------------------------------------------------------- imitation data


def fake_trajectory(n_states):
    X = np.array([hover_state(np.array([0.0, -5.0 + 0.1 * k, 0.0])) for k in range(n_states)])
    return OptimalTrajectory(X, np.zeros((n_states - 1, 4)), 0.0, 1, True, 0.0)


def test_label_shift_examples():
    s = sample_scenario(5)
    z = np.array([0.1, 0.2, 0.3, 0.01, 0.02, 0.03, 2.0])
    samples = imitation_samples(z, fake_trajectory(51), s, 0.1, scenario_id=9)
    assert len(samples) == 51
    assert samples[0].label[6] == 2.0
    assert samples[5].label[6] == pytest.approx(1.5)
    assert all(np.array_equal(x.label[:6], z[:6]) for x in samples)
    t = np.array([x.label[6] for x in samples])
    assert np.allclose(np.diff(t), -0.1, atol=1e-12)
    assert samples[30].label[6] < 0  # signed after the traversal
    assert samples[7].input.shape == (18,) and samples[7].k == 7 and samples[7].scenario_id == 9
    assert np.array_equal(samples[7].input, dnn2_input(fake_trajectory(51).states[7], s.p_T, s.gate.width,
                                                       s.gate.theta_g0))


def test_make_imitation_dataset_with_mpc():
    cfg = TrainingConfig(mpc=MpcConfig(N=20, max_iter=30), il_max_iter=60)
    scen = seeded_scenarios(0, STREAM_DATASET, 3)
    samples, skipped = make_imitation_dataset(make_dnn1(), scen, cfg, require_converged=False)
    assert skipped == [] and len(samples) == 3 * 21
    by_id = {}
    for s in samples:
        by_id.setdefault(s.scenario_id, []).append(s)
    for group in by_id.values():
        assert len({tuple(s.label[:6]) for s in group}) == 1
        t = [s.label[6] for s in sorted(group, key=lambda s: s.k)]
        assert np.allclose(np.diff(t), -cfg.mpc.dt, atol=1e-12)


def test_dataset_round_trip(tmp_path):
    samples = imitation_samples(np.arange(7.0), fake_trajectory(4), sample_scenario(1), 0.1, 2)
    save_dataset(samples, tmp_path / "d.jsonl")
    back = load_dataset(tmp_path / "d.jsonl")
    assert len(back) == 4
    for a, b in zip(samples, back):
        assert np.array_equal(a.input, b.input) and np.array_equal(a.label, b.label)
        assert (a.scenario_id, a.k) == (b.scenario_id, b.k)


def test_split_never_shares_scenarios():
    samples = [ImitationSample(np.zeros(18), np.zeros(7), sid, k) for sid in range(30) for k in range(5)]
    for seed in range(5):
        train, val = split_by_scenario(samples, 0.1, seed)
        a, b = {s.scenario_id for s in train}, {s.scenario_id for s in val}
        assert not (a & b) and len(a | b) == 30 and len(b) == 3
    train, val = split_by_scenario(samples[:10], 0.1, 0)
    assert len(val) == 5 and len(train) == 5


def test_train_il_empty_dataset():
    with pytest.raises(EmptyDataset):
        train_il(make_dnn2(), [], TrainingConfig())


@pytest.fixture(scope="module")
def two_scenario_dataset():
    cfg = TrainingConfig(mpc=MpcConfig(max_iter=100))
    scen = seeded_scenarios(1, STREAM_DATASET, 2)
    samples, _ = make_imitation_dataset(make_dnn1(), scen, cfg, require_converged=False)
    return samples


def test_overfit_two_scenarios(two_scenario_dataset):
    cfg = TrainingConfig(il_epochs=2000, il_batch=64, il_lr=1e-3)
    params, hist = train_il(make_dnn2(), two_scenario_dataset, cfg, val_fraction=0.0)
    first = next(i for i, h in enumerate(hist) if h.train_mse < 1e-3)
    assert first < 2000
    assert normalized_mse(params, two_scenario_dataset) < 1e-3


def test_train_loss_descends_after_smoothing(two_scenario_dataset, tmp_path):
    """Full batch on a fixed tiny dataset: the window-5 smoothed loss never rises."""
    cfg = TrainingConfig(il_epochs=300, il_batch=len(two_scenario_dataset))
    _, hist = train_il(make_dnn2(), two_scenario_dataset, cfg, loss_csv=tmp_path / "l.csv", val_fraction=0.0)
    loss = np.array([h.train_mse for h in hist])
    smooth = np.convolve(loss, np.ones(5) / 5, mode="valid")
    assert np.all(np.diff(smooth) <= 0.0)
    rows = list(csv.reader(open(tmp_path / "l.csv")))
    assert rows[0] == ["epoch", "train_mse", "val_mse"] and len(rows) == 301


def test_minibatch_loss_descends_overall(two_scenario_dataset):
    _, hist = train_il(make_dnn2(), two_scenario_dataset, TrainingConfig(il_epochs=100), val_fraction=0.0)
    loss = np.array([h.train_mse for h in hist])
    assert loss[-10:].mean() < 0.1 * loss[:10].mean()


def test_evaluator_is_deterministic_in_z():
    # reward_eval must not depend on call order, or finite differences pick up solver progress
    s = sample_scenario(3)
    mpc, rc = MpcConfig(N=20, max_iter=20), TrainingConfig().reward
    z = forward(make_dnn1(), dnn1_input(s))
    zp = z + np.r_[0.05, np.zeros(6)]
    ev = ScenarioEvaluator(s, mpc, rc)
    r1 = ev(z)
    nominal = ev.nominal
    rp = ev(zp)
    assert ev(z) == r1 and ev.nominal is nominal
    assert ScenarioEvaluator(s, mpc, rc, anchor=z)(zp) == rp
    assert np.isfinite(r1)
