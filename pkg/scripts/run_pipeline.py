"""Full reinforce-imitate pipeline through the CLI: train-rl, make-dataset, train-il, eval-static, eval-dynamic.

    python3 scripts/run_pipeline.py --out artifacts/default [--config cfg.json] [--set key=value ...]

Each stage writes into its own subdirectory and stops the pipeline on a
non-zero exit status. Stages whose manifest already exists are skipped unless
``--force`` is given.
"""
import argparse
import sys
import time
from pathlib import Path

from se3gate.cli import main as cli


def run_stage(name, out: Path, argv, force: bool) -> int:
    stage_dir = out / name
    if (stage_dir / "manifest.json").exists() and not force:
        print(f"[{name}] exists, skipping")
        return 0
    t0 = time.time()
    code = cli([name, "--out", str(stage_dir), "-v", *argv])
    print(f"[{name}] exit {code} after {time.time() - t0:.0f} s", flush=True)
    return code


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="artifacts/default")
    ap.add_argument("--config")
    ap.add_argument("--set", action="append", default=[])
    ap.add_argument("--force", action="store_true")
    ap.add_argument("--stop-after", choices=["train-rl", "make-dataset", "train-il", "eval-static"])
    args = ap.parse_args()
    out = Path(args.out)
    common = (["--config", args.config] if args.config else []) + [a for s in args.set for a in ("--set", s)]
    stages = [
        ("train-rl", []),
        ("make-dataset", ["--dnn1", str(out / "train-rl" / "dnn1.json")]),
        ("train-il", ["--dataset", str(out / "make-dataset" / "dataset.jsonl")]),
        ("eval-static", ["--dnn2", str(out / "train-il" / "dnn2.json")]),
        ("eval-dynamic", ["--dnn2", str(out / "train-il" / "dnn2.json")]),
    ]
    for name, extra in stages:
        code = run_stage(name, out, common + extra, args.force)
        if code != 0:
            sys.exit(code)
        if name == args.stop_after:
            break


if __name__ == "__main__":
    main()
