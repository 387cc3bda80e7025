import json
import subprocess
import time

import pytest

from se3gate.cli import EXIT_MISSING, EXIT_OK, EXIT_USAGE, git_blob_hash, main
from se3gate.config import (
    OUTPUT_ENV, RunConfig, apply_override, config_from_dict, config_to_dict, dump_config, parse_config,
)
from se3gate.errors import ConfigIo, InvalidValue, UnknownKey
from se3gate.mpc import MpcConfig

TINY = [
    "mpc.N=20", "mpc.max_iter=10", "training.episodes=2", "training.solves_per_episode=3",
    "training.mpc_max_iter=20", "training.il_scenarios=3", "training.il_epochs=5", "training.il_max_iter=60",
    "eval.static_scenarios=2", "eval.dynamic_scenarios=1", "runtime.duration=1.0",
]


def tiny_args():
    return [a for s in TINY for a in ("--set", s)]


# ---------------------------------------------------------------- configuration


def test_empty_document_gives_defaults(tmp_path):
    (tmp_path / "c.json").write_text("")
    assert parse_config(tmp_path / "c.json") == RunConfig()
    (tmp_path / "d.json").write_text("{}")
    cfg = parse_config(tmp_path / "d.json")
    assert cfg.mpc_config().N == MpcConfig().N == 50
    assert cfg.mpc_config().weights.gamma == 30.0


def test_unknown_key_named():
    with pytest.raises(UnknownKey) as err:
        config_from_dict({"mcp": {"gama": 30}})
    assert err.value.key == "mcp.gama"
    with pytest.raises(UnknownKey) as err:
        parse_config(None, ["mpc.gama=3"])
    assert err.value.key == "mpc.gama"


def test_override_round_trips_through_dump(tmp_path):
    cfg = parse_config(None, ["mpc.gamma=30", "training.lr=0.01", "eval.presets=[\"fig8-trial2\"]"])
    dump_config(cfg, tmp_path / "eff.json")
    doc = json.loads((tmp_path / "eff.json").read_text())
    assert doc["mpc"]["gamma"] == 30.0 and doc["training"]["lr"] == 0.01
    assert parse_config(tmp_path / "eff.json") == cfg
    assert config_from_dict(config_to_dict(cfg)) == cfg


def test_invalid_values_named():
    for assignment, key in (("mpc.N=1", "mpc.N"), ("mpc.q_x=[1,2]", "mpc.q_x"), ("mpc.gamma=\"x\"", "mpc.gamma"),
                            ("training.episodes=1.5", "training.episodes"), ("threads=0", "threads"),
                            ("eval.presets=[\"nope\"]", "eval.presets")):
        with pytest.raises(InvalidValue) as err:
            parse_config(None, [assignment])
        assert err.value.key == key
    with pytest.raises(InvalidValue):
        parse_config(None, ["reward.r_max=0"])
    with pytest.raises(InvalidValue):
        apply_override({}, "no-equals-sign")


def test_io_errors(tmp_path):
    with pytest.raises(ConfigIo):
        parse_config(tmp_path / "missing.json")
    (tmp_path / "bad.json").write_text("{not json")
    with pytest.raises(InvalidValue):
        parse_config(tmp_path / "bad.json")


def test_output_dir_precedence(tmp_path, monkeypatch):
    monkeypatch.delenv(OUTPUT_ENV, raising=False)
    assert str(RunConfig().resolved_output_dir()) == "runs"
    monkeypatch.setenv(OUTPUT_ENV, str(tmp_path / "env"))
    assert RunConfig().resolved_output_dir() == tmp_path / "env"
    assert parse_config(None, ["output_dir=elsewhere"]).resolved_output_dir().name == "elsewhere"


def test_sections_build_domain_objects():
    cfg = parse_config(None, ["quad.J_diag=[0.02,0.02,0.04]", "mpc.q_max=[200,200,200,100]"])
    assert cfg.quad_params().inertia[0, 0] == 0.02
    assert cfg.mpc_weights().Q_max[3, 3] == 100.0
    t = cfg.training_config()
    assert t.mpc.max_iter == 150 and t.mpc.tol_rel == 1e-6 and t.il_max_iter == 500
    assert cfg.runtime_config().substeps == 10


# ---------------------------------------------------------------- CLI


def test_git_blob_hash_matches_git(tmp_path):
    p = tmp_path / "f.txt"
    p.write_bytes(b"hello\n")
    assert git_blob_hash(p) == "ce013625030ba8dba906f756967f9e9ca394464a"
    out = subprocess.run(["git", "hash-object", str(p)], capture_output=True, text=True)
    if out.returncode == 0:
        assert out.stdout.strip() == git_blob_hash(p)


def test_usage_errors(tmp_path, capsys):
    assert main([]) == EXIT_USAGE
    assert main(["no-such-command"]) == EXIT_USAGE
    assert main(["train-rl", "--set", "mcp.gama=1", "--out", str(tmp_path)]) == EXIT_USAGE
    assert "mcp.gama" in capsys.readouterr().err


def test_missing_artifacts(tmp_path):
    assert main(["train-il", "--out", str(tmp_path / "a")]) == EXIT_MISSING
    assert main(["train-il", "--dataset", str(tmp_path / "none.jsonl"), "--out", str(tmp_path / "b")]) == EXIT_MISSING
    assert main(["eval-static", "--out", str(tmp_path / "c")]) == EXIT_MISSING
    assert main(["replay", "--log", str(tmp_path / "x.csv"), "--out", str(tmp_path / "d")]) == EXIT_MISSING


@pytest.fixture(scope="module")
def tiny_pipeline(tmp_path_factory):
    root = tmp_path_factory.mktemp("pipeline")
    t0 = time.time()
    codes = {}
    codes["train-rl"] = main(["train-rl", "--out", str(root / "rl"), *tiny_args()])
    codes["make-dataset"] = main(["make-dataset", "--dnn1", str(root / "rl" / "dnn1.json"),
                                  "--out", str(root / "ds"), *tiny_args()])
    codes["train-il"] = main(["train-il", "--dataset", str(root / "ds" / "dataset.jsonl"),
                              "--out", str(root / "il"), *tiny_args()])
    dnn2 = str(root / "il" / "dnn2.json")
    codes["eval-static"] = main(["eval-static", "--dnn2", dnn2, "--out", str(root / "st"), *tiny_args()])
    codes["eval-dynamic"] = main(["eval-dynamic", "--dnn2", dnn2, "--preset", "fig8-trial1",
                                  "--out", str(root / "dy"), *tiny_args()])
    return root, codes, time.time() - t0


def test_tiny_pipeline_end_to_end(tiny_pipeline):
    root, codes, elapsed = tiny_pipeline
    assert all(c == EXIT_OK for c in codes.values()), codes
    assert elapsed < 300
    for sub, files in (("rl", ["dnn1.json", "rewards.csv"]), ("ds", ["dataset.jsonl", "dataset_summary.json"]),
                       ("il", ["dnn2.json", "il_loss.csv", "il_summary.json"]),
                       ("st", ["static_outcomes.json", "static/episode_000.csv"]),
                       ("dy", ["dynamic_outcomes.json", "dynamic/fig8-trial1_00.csv"])):
        for f in files + ["config.json", "manifest.json"]:
            assert (root / sub / f).is_file(), (sub, f)
    assert len((root / "rl" / "rewards.csv").read_text().splitlines()) == 3


def test_manifest_hashes(tiny_pipeline):
    root, _, _ = tiny_pipeline
    man = json.loads((root / "il" / "manifest.json").read_text())
    assert man["command"] == "train-il"
    assert man["inputs"]["dataset"]["sha1"] == git_blob_hash(root / "ds" / "dataset.jsonl")
    for rel, h in man["outputs"].items():
        assert git_blob_hash(root / "il" / rel) == h
    assert "config.json" in man["outputs"]


def test_effective_config_reparses(tiny_pipeline):
    root, _, _ = tiny_pipeline
    cfg = parse_config(root / "rl" / "config.json")
    assert cfg.mpc.N == 20 and cfg.training.episodes == 2
    assert cfg.output_dir == str(root / "rl")


def test_preset_velocity(tiny_pipeline):
    root, _, _ = tiny_pipeline
    doc = json.loads((root / "dy" / "dynamic_outcomes.json").read_text())
    assert [e["mu"] for e in doc["episodes"]] == [[-1.0, 0.3, -0.4]]
    for key in ("traversed", "safe", "safe_margin_min", "target_error", "crossing_time", "crossing_prediction_ok"):
        assert key in doc["episodes"][0]


def test_custom_mu_and_bad_preset(tiny_pipeline, tmp_path):
    root, _, _ = tiny_pipeline
    dnn2 = str(root / "il" / "dnn2.json")
    assert main(["eval-dynamic", "--dnn2", dnn2, "--preset", "fig9", "--out", str(tmp_path / "a"), *tiny_args()]) == EXIT_USAGE
    assert main(["eval-dynamic", "--dnn2", dnn2, "--mu", "1,2", "--out", str(tmp_path / "b"), *tiny_args()]) == EXIT_USAGE
    assert main(["eval-dynamic", "--dnn2", dnn2, "--mu", "0.5,0.2,0", "--out", str(tmp_path / "c"), *tiny_args()]) == EXIT_OK
    doc = json.loads((tmp_path / "c" / "dynamic_outcomes.json").read_text())
    assert doc["episodes"][0]["mu"] == [0.5, 0.2, 0.0]


def test_replay(tiny_pipeline, tmp_path):
    root, _, _ = tiny_pipeline
    assert main(["replay", "--log", str(root / "dy" / "dynamic" / "fig8-trial1_00.csv"), "--out", str(tmp_path)]) == EXIT_OK
    lines = (tmp_path / "replay.csv").read_text().splitlines()
    assert lines[0].startswith("t,quad_x") and len(lines) == 11
    summary = json.loads((tmp_path / "replay_summary.json").read_text())
    assert summary["rows"] == 10 and summary["duration"] == pytest.approx(1.0)
    (tmp_path / "junk.csv").write_text("a,b\n1,2\n")
    assert main(["replay", "--log", str(tmp_path / "junk.csv"), "--out", str(tmp_path / "r2")]) == 3


def test_rerun_is_hash_identical(tiny_pipeline):
    root, _, _ = tiny_pipeline
    before = json.loads((root / "il" / "manifest.json").read_text())
    assert main(["train-il", "--dataset", str(root / "ds" / "dataset.jsonl"), "--out", str(root / "il"),
                 *tiny_args()]) == EXIT_OK
    after = json.loads((root / "il" / "manifest.json").read_text())
    assert before == after


def test_env_output_dir(tiny_pipeline, tmp_path, monkeypatch):
    root, _, _ = tiny_pipeline
    monkeypatch.setenv(OUTPUT_ENV, str(tmp_path / "from-env"))
    assert main(["replay", "--log", str(root / "st" / "static" / "episode_000.csv")]) == EXIT_OK
    assert (tmp_path / "from-env" / "replay.csv").is_file()
