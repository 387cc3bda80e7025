"""Reward-versus-episode curve of the first network's RL training (median and interquartile band).

    python3 scripts/fig6_rl_curve.py --csv artifacts/default/train-rl/rewards.csv [--plot curve.png]
    python3 scripts/fig6_rl_curve.py --run --out artifacts/smoke-rl --set training.episodes=20 ...

With ``--run`` the training is executed first through ``se3gate train-rl``.
The plot needs matplotlib, which is not a package dependency.
"""
import argparse
import csv
import sys
from pathlib import Path

from se3gate.cli import main as cli


def read_curve(path):
    with open(path, newline="") as fh:
        return [{k: float(v) for k, v in row.items()} for row in csv.DictReader(fh)]


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--csv")
    ap.add_argument("--run", action="store_true")
    ap.add_argument("--out", default="artifacts/fig6")
    ap.add_argument("--set", action="append", default=[])
    ap.add_argument("--plot")
    args = ap.parse_args()
    path = Path(args.csv) if args.csv else Path(args.out) / "rewards.csv"
    if args.run:
        code = cli(["train-rl", "--out", args.out, "-v", *[a for s in args.set for a in ("--set", s)]])
        if code:
            sys.exit(code)
    rows = read_curve(path)
    print(f"{'episode':>7} {'median':>9} {'q25':>9} {'q75':>9} {'skipped':>7}")
    for r in rows:
        print(f"{int(r['episode']):7d} {r['median']:9.2f} {r['q25']:9.2f} {r['q75']:9.2f} {int(r['skipped']):7d}")
    if args.plot:
        import matplotlib
        matplotlib.use("Agg")
        import matplotlib.pyplot as plt
        ep = [r["episode"] for r in rows]
        fig, ax = plt.subplots(figsize=(5, 3))
        ax.fill_between(ep, [r["q25"] for r in rows], [r["q75"] for r in rows], alpha=0.3)
        ax.plot(ep, [r["median"] for r in rows])
        ax.set_xlabel("episode")
        ax.set_ylabel("reward")
        fig.tight_layout()
        fig.savefig(args.plot, dpi=150)


if __name__ == "__main__":
    main()
