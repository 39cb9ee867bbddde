"""Collect per-mode identity/Frechet/sync drift curves from an ablation run directory.

    python3 scripts/drift_curves.py runs/ablation --out runs/ablation/drift_curves.csv [--plot curves.png]

Curves are medians over seeds at every horizon point. The plot needs matplotlib,
which is not a package dependency.
"""

import argparse
import csv
import json
import statistics
import sys
from pathlib import Path

METRICS = ("id_sim_curve", "frechet_curve", "sync_curve")


def collect(run_dir: Path) -> dict:
    curves: dict = {}
    for summary in sorted(run_dir.glob("seed_*/*_*/eval/eval_summary.json")):
        cell = summary.parent.parent.name  # e.g. TRE_asymmetric
        data = json.loads(summary.read_text())
        entry = curves.setdefault(cell, {"points": data["horizon_points"], **{m: [] for m in METRICS}})
        for m in METRICS:
            entry[m].append(data[m])
    return {cell: {"points": c["points"], **{m: [statistics.median(v) for v in zip(*c[m])] for m in METRICS},
                   "seeds": len(c["id_sim_curve"])}
            for cell, c in curves.items()}


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("run_dir", type=Path)
    parser.add_argument("--out", type=Path)
    parser.add_argument("--plot", type=Path)
    parser.add_argument("--T", type=int, default=17, help="frames per chunk, for the seconds column")
    args = parser.parse_args()

    curves = collect(args.run_dir)
    if not curves:
        print(f"no eval summaries under {args.run_dir}", file=sys.stderr)
        return 1
    out = args.out or args.run_dir / "drift_curves.csv"
    with open(out, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["cell", "chunk_index", "seconds_equiv", "id_sim", "frechet", "sync_corr", "seeds"])
        for cell, c in curves.items():
            for i, k in enumerate(c["points"]):
                writer.writerow([cell, k, k * args.T / 25, c["id_sim_curve"][i], c["frechet_curve"][i],
                                 c["sync_curve"][i], c["seeds"]])
    for cell, c in curves.items():
        ids = c["id_sim_curve"]
        print(f"{cell:22} seeds={c['seeds']} id_sim {ids[0]:.5f} -> {ids[-1]:.5f} "
              f"(min {min(ids):.5f}), frechet {c['frechet_curve'][0]:.4f} -> {c['frechet_curve'][-1]:.4f}")
    print(f"wrote {out}")

    if args.plot:
        import matplotlib
        matplotlib.use("Agg")
        import matplotlib.pyplot as plt
        fig, axes = plt.subplots(1, 3, figsize=(14, 4))
        for cell, c in curves.items():
            for ax, m in zip(axes, METRICS):
                ax.plot(c["points"], c[m], marker="o", label=cell)
        for ax, m in zip(axes, METRICS):
            ax.set_xlabel("chunk index")
            ax.set_title(m.replace("_curve", ""))
        axes[0].legend(fontsize=7)
        fig.tight_layout()
        fig.savefig(args.plot, dpi=120)
        print(f"wrote {args.plot}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
