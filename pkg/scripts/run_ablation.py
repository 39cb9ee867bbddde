"""Run the TRE/ETR x AKD grid plus the three distillation modes and print the comparison table.

    python3 scripts/run_ablation.py --out runs/ablation --seeds 0 1 2 3 4

Cells already present under --out are reused, so an interrupted run can be resumed.
"""

import argparse
import csv
import sys
from pathlib import Path

from chunkflow.cli import main as cli_main


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--out", type=Path, default=Path("runs/ablation"))
    parser.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2, 3, 4])
    parser.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE")
    args = parser.parse_args()

    argv = ["ablate", "--out", str(args.out), "--set", f"ablation.seeds={args.seeds}"]
    for item in args.overrides:
        argv += ["--set", item]
    code = cli_main(argv)
    if code:
        return code

    with open(args.out / "ablation.csv") as fh:
        rows = list(csv.DictReader(fh))
    print(f"{'table':6} {'scheme':6} {'mode':14} {'id_sim first':>12} {'id_sim final':>12} {'frechet':>9} {'sync':>7}")
    for r in rows:
        print(f"{r['table']:6} {r['identity_scheme']:6} {r['mode']:14} {float(r['id_sim_first']):12.5f} "
              f"{float(r['id_sim_final']):12.5f} {float(r['frechet_final']):9.4f} {float(r['sync_final']):7.3f}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
