"""Command-line entry point: ``se3gate <command> [--config FILE] [--set key.path=value ...]``.

Commands and their main artifacts (written to the output directory):

    train-rl      dnn1.json, rewards.csv
    make-dataset  dataset.jsonl, dataset_summary.json       (needs --dnn1)
    train-il      dnn2.json, il_loss.csv, il_summary.json   (needs --dataset)
    eval-static   static_outcomes.json, static/episode_NNN.csv
    eval-dynamic  dynamic_outcomes.json, dynamic/<preset>_NN.csv
    replay        replay.csv, replay_summary.json           (needs --log)

Every command also writes ``config.json`` (the effective configuration) and
``manifest.json`` with git-style blob hashes of its input and output files.
Exit codes: 0 success, 1 usage or configuration error, 2 missing artifact,
3 runtime failure.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, replace
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np

from .config import RunConfig, dump_config, parse_config
from .errors import ConfigError, MissingArtifact, Se3GateError
from .nn import load_weights, save_weights
from .runtime import FIG8_PRESETS, LOG_COLUMNS, DynamicScenario, run_episode
from .training import (
    STREAM_DATASET, STREAM_EVAL, load_dataset, make_dnn1, make_dnn2, make_imitation_dataset, save_dataset,
    scenario_seed, seeded_scenarios, train_il, train_rl,
)

log = logging.getLogger("se3gate")

EXIT_OK, EXIT_USAGE, EXIT_MISSING, EXIT_RUNTIME = 0, 1, 2, 3
STREAM_DYNAMIC = 3  # seed stream for dynamic-gate evaluation episodes


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def git_blob_hash(path) -> str:
    """SHA-1 of ``b"blob <size>\\0" + content``, as ``git hash-object`` computes it."""
    data = Path(path).read_bytes()
    return hashlib.sha1(b"blob %d\0" % len(data) + data).hexdigest()


def _require(path: Optional[str], what: str) -> Path:
    if not path:
        raise MissingArtifact(f"{what} is required")
    p = Path(path)
    if not p.is_file():
        raise MissingArtifact(f"{what} not found: {p}")
    return p


def _write_manifest(out: Path, command: str, inputs: Dict[str, Path], outputs: List[Path]) -> None:
    doc = {
        "command": command,
        "inputs": {k: {"path": str(v), "sha1": git_blob_hash(v)} for k, v in sorted(inputs.items())},
        "outputs": {str(p.relative_to(out)): git_blob_hash(p) for p in sorted(outputs)},
    }
    (out / "manifest.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def _map(cfg: RunConfig, fn, items):
    if cfg.threads > 1:
        with ThreadPoolExecutor(cfg.threads) as pool:
            return list(pool.map(fn, items))
    return [fn(it) for it in items]


def _outcome_record(name: str, episode, seed: int, eps_cross: float) -> dict:
    o = asdict(episode.outcome)
    pred = o["predicted_t_at_crossing"]
    o["crossing_prediction_ok"] = bool(pred is not None and abs(pred) <= eps_cross)
    return {"name": name, "seed": seed, **o}


# ---------------------------------------------------------------- commands


def cmd_train_rl(cfg: RunConfig, args, out: Path):
    tcfg = cfg.training_config()
    dnn1 = make_dnn1(cfg.seed)
    csv_path = out / "rewards.csv"

    def report(rec, _params):
        log.info("episode %d: median %.2f (q25 %.2f, q75 %.2f, skipped %d)",
                 rec.episode, rec.median, rec.q25, rec.q75, rec.skipped)

    params, _ = train_rl(dnn1, tcfg, reward_csv=csv_path, on_episode=report)
    save_weights(params, out / "dnn1.json")
    return {}, [out / "dnn1.json", csv_path]


def cmd_make_dataset(cfg: RunConfig, args, out: Path):
    dnn1_path = _require(args.dnn1, "--dnn1 weights")
    dnn1 = load_weights(dnn1_path)
    tcfg = cfg.training_config()
    scenarios = seeded_scenarios(cfg.seed, STREAM_DATASET, tcfg.il_scenarios, tcfg.distribution)
    samples, skipped = make_imitation_dataset(dnn1, scenarios, tcfg)
    save_dataset(samples, out / "dataset.jsonl")
    summary = {"scenarios": len(scenarios), "samples": len(samples), "skipped": skipped,
               "skipped_fraction": len(skipped) / max(len(scenarios), 1)}
    (out / "dataset_summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    log.info("dataset: %d samples, %d of %d scenarios skipped", len(samples), len(skipped), len(scenarios))
    return {"dnn1": dnn1_path}, [out / "dataset.jsonl", out / "dataset_summary.json"]


def cmd_train_il(cfg: RunConfig, args, out: Path):
    ds_path = _require(args.dataset, "--dataset file")
    dataset = load_dataset(ds_path)
    params, history = train_il(make_dnn2(cfg.seed), dataset, cfg.training_config(), loss_csv=out / "il_loss.csv")
    save_weights(params, out / "dnn2.json")
    last = history[-1] if history else None
    summary = {"epochs": len(history), "train_mse": last.train_mse if last else None,
               "val_mse": last.val_mse if last else None}
    (out / "il_summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    log.info("imitation: train %.3e, validation %.3e", summary["train_mse"], summary["val_mse"])
    return {"dataset": ds_path}, [out / "dnn2.json", out / "il_loss.csv", out / "il_summary.json"]


def _rate(records, key):
    return float(np.mean([r[key] for r in records])) if records else float("nan")


def cmd_eval_static(cfg: RunConfig, args, out: Path):
    dnn2_path = _require(args.dnn2, "--dnn2 weights")
    dnn2 = load_weights(dnn2_path)
    rt = replace(cfg.runtime_config(), gate_sigma=(0.0, 0.0, 0.0))
    mpc = cfg.mpc_config()
    scenarios = seeded_scenarios(cfg.seed, STREAM_EVAL, cfg.eval.static_scenarios, cfg.distribution())
    (out / "static").mkdir(exist_ok=True)

    def work(item):
        i, s = item
        ep = run_episode(dnn2, DynamicScenario.from_static(s), rt, s.seed, mpc, eps=cfg.reward.eps)
        path = out / "static" / f"episode_{i:03d}.csv"
        ep.write_csv(path)
        return _outcome_record(f"static_{i:03d}", ep, s.seed, 2 * rt.control_dt), path

    results = _map(cfg, work, list(enumerate(scenarios)))
    records = [r for r, _ in results]
    doc = {"traversal_rate": _rate(records, "traversed"), "safe_rate": _rate(records, "safe"),
           "episodes": records}
    (out / "static_outcomes.json").write_text(json.dumps(doc, indent=2) + "\n")
    log.info("static: traversed %.2f, safe %.2f", doc["traversal_rate"], doc["safe_rate"])
    return {"dnn2": dnn2_path}, [out / "static_outcomes.json"] + [p for _, p in results]


def _parse_mu(text: str):
    try:
        mu = [float(v) for v in text.split(",")]
    except ValueError as exc:
        raise UsageError(f"--mu expects three comma-separated numbers: {text}") from exc
    if len(mu) != 3:
        raise UsageError(f"--mu expects three comma-separated numbers: {text}")
    return tuple(mu)


def cmd_eval_dynamic(cfg: RunConfig, args, out: Path):
    dnn2_path = _require(args.dnn2, "--dnn2 weights")
    dnn2 = load_weights(dnn2_path)
    rt = cfg.runtime_config()
    mpc = cfg.mpc_config()
    if args.mu:
        cases = [("custom", _parse_mu(args.mu))]
    else:
        names = args.preset or list(cfg.eval.presets)
        for n in names:
            if n not in FIG8_PRESETS:
                raise UsageError(f"unknown preset {n!r}; choose from {', '.join(FIG8_PRESETS)}")
        cases = [(n, FIG8_PRESETS[n]) for n in names]
    base = seeded_scenarios(cfg.seed, STREAM_DYNAMIC, cfg.eval.dynamic_scenarios, cfg.distribution())
    (out / "dynamic").mkdir(exist_ok=True)
    items = [(ci, name, mu, j, s) for ci, (name, mu) in enumerate(cases) for j, s in enumerate(base)]

    def work(item):
        ci, name, mu, j, s = item
        seed = scenario_seed(cfg.seed, STREAM_DYNAMIC, 1000 + ci, j)
        ep = run_episode(dnn2, DynamicScenario.from_static(s, mu, rt.omega_g), rt, seed, mpc, eps=cfg.reward.eps)
        path = out / "dynamic" / f"{name}_{j:02d}.csv"
        ep.write_csv(path)
        rec = _outcome_record(f"{name}_{j:02d}", ep, seed, 2 * rt.control_dt)
        rec["mu"] = list(mu)
        return rec, path

    results = _map(cfg, work, items)
    records = [r for r, _ in results]
    ok = [r["traversed"] and r["target_error"] < 0.5 for r in records]
    doc = {"success_rate": float(np.mean(ok)) if ok else float("nan"), "episodes": records}
    (out / "dynamic_outcomes.json").write_text(json.dumps(doc, indent=2) + "\n")
    log.info("dynamic: %d of %d episodes traversed with target error < 0.5 m", sum(ok), len(ok))
    return {"dnn2": dnn2_path}, [out / "dynamic_outcomes.json"] + [p for _, p in results]


def cmd_replay(cfg: RunConfig, args, out: Path):
    log_path = _require(args.log, "--log episode CSV")
    with open(log_path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != LOG_COLUMNS:
            raise Se3GateError(f"{log_path} is not an episode log")
        rows = np.array([[float(v) for v in r] for r in reader]).reshape(-1, len(LOG_COLUMNS))
    col = {n: i for i, n in enumerate(LOG_COLUMNS)}
    out_cols = ["t", "quad_x", "quad_y", "quad_z", "gate_x", "gate_y", "gate_z", "gate_theta",
                "t_tra", "dy_quad_gate", "dist_quad_gate"]
    with open(out / "replay.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(out_cols)
        for r in rows:
            p = r[[col["x0"], col["x1"], col["x2"]]]
            g = r[[col["gate_x"], col["gate_y"], col["gate_z"]]]
            w.writerow([repr(float(v)) for v in [r[col["t"]], *p, *g, r[col["gate_theta"]], r[col["t_tra"]],
                                                   p[1] - g[1], np.linalg.norm(p - g)]])
    summary = {"rows": int(rows.shape[0]),
               "duration": float(rows[-1, 0] + (rows[1, 0] - rows[0, 0])) if rows.shape[0] > 1 else 0.0,
               "mpc_converged_fraction": float(np.mean(rows[:, col["mpc_converged"]])) if len(rows) else None,
               "search_converged_fraction": float(np.mean(rows[:, col["bs_converged"]])) if len(rows) else None}
    (out / "replay_summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    return {"log": log_path}, [out / "replay.csv", out / "replay_summary.json"]


COMMANDS = {
    "train-rl": cmd_train_rl,
    "make-dataset": cmd_make_dataset,
    "train-il": cmd_train_il,
    "eval-static": cmd_eval_static,
    "eval-dynamic": cmd_eval_dynamic,
    "replay": cmd_replay,
}


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="se3gate", description="Learned SE(3) gate traversal with MPC.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name in COMMANDS:
        s = sub.add_parser(name)
        s.add_argument("--config", help="JSON configuration document")
        s.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override one configuration entry, e.g. mpc.gamma=30 (repeatable)")
        s.add_argument("--out", help="output directory (default: config output_dir, "
                                     "$SE3GATE_OUTPUT_DIR, or ./runs)")
        s.add_argument("--threads", type=int, help="cap on concurrent MPC solves or episodes")
        s.add_argument("--seed", type=int, help="global seed")
        s.add_argument("-v", "--verbose", action="store_true")
        if name == "make-dataset":
            s.add_argument("--dnn1", help="first-network weights (from train-rl)")
        if name == "train-il":
            s.add_argument("--dataset", help="imitation dataset (from make-dataset)")
        if name in ("eval-static", "eval-dynamic"):
            s.add_argument("--dnn2", help="second-network weights (from train-il)")
        if name == "eval-dynamic":
            s.add_argument("--preset", action="append", help="one of " + ", ".join(FIG8_PRESETS) + " (repeatable)")
            s.add_argument("--mu", help="custom mean gate velocity 'vx,vy,vz' instead of presets")
        if name == "replay":
            s.add_argument("--log", help="episode CSV written by eval-static or eval-dynamic")
    return p


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        overrides = list(args.set)
        if args.threads is not None:
            overrides.append(f"threads={args.threads}")
        if args.seed is not None:
            overrides.append(f"seed={args.seed}")
        if args.out is not None:
            overrides.append(f"output_dir={json.dumps(args.out)}")
        cfg = parse_config(args.config, overrides)
    except (UsageError, ConfigError) as exc:
        print(f"se3gate: error: {exc}", file=sys.stderr)
        return EXIT_USAGE

    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(message)s", stream=sys.stderr)
    out = cfg.resolved_output_dir()
    try:
        out.mkdir(parents=True, exist_ok=True)
        dump_config(cfg, out / "config.json")
        inputs, outputs = COMMANDS[args.command](cfg, args, out)
        _write_manifest(out, args.command, inputs, [out / "config.json", *outputs])
    except UsageError as exc:
        print(f"se3gate: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except MissingArtifact as exc:
        print(f"se3gate: missing artifact: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except (Se3GateError, OSError, ValueError, FloatingPointError) as exc:
        print(f"se3gate: failed: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
