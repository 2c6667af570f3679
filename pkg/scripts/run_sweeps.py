#!/usr/bin/env python3
"""Sweep each loss weight (always including 0) and the fusion partner count,
writing one CSV per parameter for metric-vs-value curves."""

import argparse
import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parent.parent / "src"))

from xmml.bench import benchmark_train_config, run_sweep, write_sweep_csv
from xmml.evaluator import Protocol
from xmml.synthdata import GeneratorConfig, generate_dataset

SWEEPS = {
    "lambda1": [0.0, 0.1, 0.25, 0.5, 1.0],
    "lambda2": [0.0, 0.05, 0.2, 0.5, 1.0],
    "lambda3": [0.0, 0.02, 0.08, 0.2, 0.5],
    "lambda4": [0.0, 0.01, 0.05, 0.2, 1.0],
    "M": [0, 1, 2, 3],
}


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--out", default="runs/sweeps")
    parser.add_argument("--seeds", default="0")
    parser.add_argument("--params", default=",".join(SWEEPS),
                        help="comma subset of sweep parameters")
    args = parser.parse_args()

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    seeds = tuple(int(s) for s in args.seeds.split(","))

    data = generate_dataset(GeneratorConfig(seed=0))
    train_cfg = benchmark_train_config()
    for param in args.params.split(","):
        values = SWEEPS[param]
        cells = run_sweep(data, train_cfg, Protocol(), param,
                          [float(v) for v in values], seeds=seeds)
        path = out / f"sweep_{param}.csv"
        write_sweep_csv(path, cells, param)
        print(f"{param}: {len(cells)} cells -> {path}")
        for c in cells:
            print(f"  {c.label:<12} seed={c.seed} rank1={c.rank1:.3f} map={c.map:.3f}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
