"""Train every Comparison Model pairing on shared synthetic data and print the table.

    python demos/ablation.py --iterations 100 --rows 1 2
"""

import argparse
import json
from pathlib import Path

from cbhvt.data import SynthConfig, split_dataset, synth_generate
from cbhvt.harness import TrainConfig, ablate, comparison_pairs, format_table


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--iterations", type=int, default=100)
    ap.add_argument("--rows", type=int, nargs="+", default=list(range(1, 7)))
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--out", default="ablation_rows.json")
    args = ap.parse_args()

    pool = synth_generate(SynthConfig(n_images=30, seed=args.seed))
    train_set, val_set, test_set = split_dataset(pool, (0.6, 0.2, 0.2), seed=args.seed)
    pairs = [comparison_pairs()[k - 1] for k in args.rows]
    base = TrainConfig(seed=args.seed, learning_rate=0.01, epochs=10 ** 6, max_iterations=args.iterations)
    rows = ablate([c for c, _ in pairs], [m for _, m in pairs], base, train_set, {"val": val_set, "test": test_set},
                  names=[f"Comparison Model-{k}" for k in args.rows])
    print(format_table(rows))
    Path(args.out).write_text(json.dumps(rows, indent=1))
    print(f"rows -> {args.out}; render with: cbhvt report --ablation {args.out}")


if __name__ == "__main__":
    main()
