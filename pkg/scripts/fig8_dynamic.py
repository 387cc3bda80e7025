"""Closed-loop flights through the moving, rotating gate for the four mean-velocity presets.

    python3 scripts/fig8_dynamic.py --dnn2 artifacts/default/train-il/dnn2.json [--out artifacts/fig8] [--plot fig8.png]

Prints one outcome line per preset. The optional plot shows, per preset, the
quadrotor and gate y positions next to the predicted traversal time; the
crossing of the two y curves should coincide with the time reaching zero.
"""
import argparse
import csv
import json
import sys
from pathlib import Path

from se3gate.cli import main as cli


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--dnn2", required=True)
    ap.add_argument("--out", default="artifacts/fig8")
    ap.add_argument("--set", action="append", default=[])
    ap.add_argument("--plot")
    args = ap.parse_args()
    code = cli(["eval-dynamic", "--dnn2", args.dnn2, "--out", args.out, "-v",
                *[a for s in args.set for a in ("--set", s)]])
    if code:
        sys.exit(code)
    doc = json.loads((Path(args.out) / "dynamic_outcomes.json").read_text())
    for r in doc["episodes"]:
        margin = r["safe_margin_min"]
        print(f"{r['name']:>16}  mu={r['mu']}  traversed={r['traversed']}  "
              f"margin={'-' if margin is None else f'{margin:.3f}'}  target_error={r['target_error']:.3f}  "
              f"t_tra at crossing={r['predicted_t_at_crossing']}")
    if args.plot:
        import matplotlib
        matplotlib.use("Agg")
        import matplotlib.pyplot as plt
        eps = doc["episodes"]
        fig, axes = plt.subplots(len(eps), 1, figsize=(5, 2.2 * len(eps)), squeeze=False)
        for ax, r in zip(axes[:, 0], eps):
            with open(Path(args.out) / "dynamic" / f"{r['name']}.csv", newline="") as fh:
                rows = list(csv.DictReader(fh))
            t = [float(x["t"]) for x in rows]
            ax.plot(t, [float(x["x1"]) for x in rows], label="quad y")
            ax.plot(t, [float(x["gate_y"]) for x in rows], label="gate y")
            ax.plot(t, [float(x["t_tra"]) for x in rows], label="t_tra")
            ax.axhline(0.0, color="k", lw=0.5)
            ax.set_title(r["name"], fontsize=9)
            ax.legend(fontsize=7)
        fig.tight_layout()
        fig.savefig(args.plot, dpi=150)


if __name__ == "__main__":
    main()
