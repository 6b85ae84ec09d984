"""Synthesize data, train the desk model briefly, score it, and write detections.

    python demos/quickstart.py --out /tmp/cbhvt_demo --iterations 200
"""

import argparse
import logging
from pathlib import Path

from cbhvt.data import SynthConfig, split_dataset, synth_generate
from cbhvt.harness import TrainConfig, infer, train, write_detections
from cbhvt.metrics import MatchCriterion


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="demo_run")
    ap.add_argument("--iterations", type=int, default=200)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(message)s")

    # 40 images in groups of two; the split never separates a group
    pool = synth_generate(SynthConfig(n_images=40, seed=args.seed, group_size=2))
    train_set, val_set, test_set = split_dataset(pool, (0.6, 0.2, 0.2), seed=args.seed)
    print(f"train {len(train_set)} / val {len(val_set)} / test {len(test_set)} images")

    cfg = TrainConfig(seed=args.seed, learning_rate=0.01, epochs=10 ** 6, max_iterations=args.iterations,
                      output_dir=str(Path(args.out) / "run"))
    rec = train(cfg, train_set, {"val": val_set, "test": test_set}, log_every=25)
    for split, rep in rec.metrics.items():
        print(f"{split:5s} IoU>=0.5  F {rep.f_score:.3f}  R {rep.recall:.3f}  P {rep.precision:.3f}")

    # the center-distance criterion scores the same predictions differently
    from cbhvt.harness import evaluate
    rep = evaluate(rec.model, test_set, MatchCriterion.center(12))
    print(f"test  center<=12px F {rep.f_score:.3f}  R {rep.recall:.3f}")

    path = write_detections(infer(rec.model, test_set), Path(args.out) / "test_detections.json")
    print(f"detections -> {path}; checkpoints and run.json in {cfg.output_dir}")


if __name__ == "__main__":
    main()
