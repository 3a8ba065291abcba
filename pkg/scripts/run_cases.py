#!/usr/bin/env python3
"""Run the four FedAvg regimes end to end and print a comparison table.

For each case: simulate one round, run the unweighted baseline attack, run
the weight-tuned attack, and score both against the ground truth. Use
--fast for a smoke-test budget; defaults mirror the full experiment
settings (1000 attack iterations, 50/12 tuning trials).
"""

import argparse
import sys
import time
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parent.parent / "src"))

from gradinv.cli import main as cli_main  # noqa: E402


def run(case, out_root, seed, fast):
    out = Path(out_root) / f"case{case}"
    config = Path(out_root) / f"case{case}.ini"
    config.parent.mkdir(parents=True, exist_ok=True)
    iters = 60 if fast else 1000
    n_bo, n_init = (5, 3) if fast else (50, 12)
    config.write_text(f"""
[experiment]
arch = cnn_small
classes = 10
master_seed = {seed}

[data]
source = synthetic
channels = 3
height = 8
width = 8
n = 4

[federated]
eta = 0.001

[attack]
iterations = {iters}
eta_hat = 0.1
loss = unweighted

[tune]
n_bo = {n_bo}
n_init = {n_init}
""")
    t0 = time.perf_counter()
    assert cli_main(["simulate", "--config", str(config), "--case", str(case),
                     "--out", str(out / "round")]) == 0
    assert cli_main(["attack", "--config", str(config), "--case", str(case),
                     "--record", str(out / "round"),
                     "--out", str(out / "baseline")]) == 0
    assert cli_main(["tune", "--config", str(config), "--case", str(case),
                     "--record", str(out / "round"),
                     "--out", str(out / "tuned")]) == 0
    print(f"case {case} finished in {time.perf_counter() - t0:.0f}s")
    return [out / "baseline", out / "tuned"]


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--out", default="runs/cases")
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--cases", type=int, nargs="+",
                        default=[1, 2, 3, 4], choices=[1, 2, 3, 4])
    parser.add_argument("--fast", action="store_true",
                        help="smoke-test budgets (~1 min total)")
    args = parser.parse_args()
    run_dirs = []
    for case in args.cases:
        run_dirs.extend(run(case, args.out, args.seed, args.fast))
    cli_main(["report"] + [str(d) for d in run_dirs]
             + ["--out", str(Path(args.out) / "report.csv")])
    print(Path(Path(args.out) / "report.csv").read_text())


if __name__ == "__main__":
    main()
