"""Command-line entry point: ``cbhvt <verb> [options]``.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import fields
from pathlib import Path

from .backend import ConfigurationError, InvalidInputError, NumericError
from .data import SOURCES, DataError, SynthConfig, load_dataset, save_dataset, split_dataset, synth_generate
from .metrics import MatchCriterion, MetricsReport

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4

log = logging.getLogger("cbhvt")


def _load_config(path) -> dict:
    if path is None:
        return {}
    try:
        cfg = json.loads(Path(path).read_text())
    except FileNotFoundError as exc:
        raise ConfigurationError(f"config file {path} not found") from exc
    except json.JSONDecodeError as exc:
        raise ConfigurationError(f"config file {path}: invalid JSON ({exc})") from exc
    if not isinstance(cfg, dict):
        raise ConfigurationError(f"config file {path} must hold a JSON object")
    return cfg


def _overrides(args, mapping: dict[str, str]) -> dict:
    """Flags that were actually given, renamed to config fields."""
    return {field: getattr(args, flag) for flag, field in mapping.items() if getattr(args, flag) is not None}


TRAIN_FLAGS = {"epochs": "epochs", "lr": "learning_rate", "weight_decay": "weight_decay", "momentum": "momentum",
               "batch_size": "batch_size", "seed": "seed", "combo": "generator_combo", "merger": "merger_preset",
               "c_fpn": "c_fpn", "profile": "profile", "max_iterations": "max_iterations", "out": "output_dir"}


def _train_config(args):
    from .harness import TrainConfig
    cfg = _load_config(args.config)
    data = {k: cfg.pop(k) for k in ("data", "format", "eval_data", "split") if k in cfg}
    flags = dict(TRAIN_FLAGS)
    if args.verb == "ablate":
        flags.pop("out")  # ablate --out names the rows file
    cfg.update(_overrides(args, flags))
    return TrainConfig.from_dict(cfg), data


def _datasets(args, data: dict, seed: int):
    root = args.data or data.get("data")
    if root is None:
        raise ConfigurationError("no dataset given (use --data or a 'data' config entry)")
    fmt = args.format or data.get("format", "synthetic")
    samples = load_dataset(root, fmt)
    eval_root = args.eval_data or data.get("eval_data")
    if eval_root is not None:
        return samples, {"test": load_dataset(eval_root, fmt)}
    split = data.get("split")
    if split:
        train, val, test = split_dataset(samples, split, seed)
        return train, {"val": val, "test": test}
    return samples, {}


def _criterion(args) -> MatchCriterion:
    if args.criterion == "center":
        return MatchCriterion.center(args.threshold or 12.0)
    return MatchCriterion("iou", args.threshold or 0.5)


def cmd_synth(args) -> None:
    cfg = _load_config(args.config)
    cfg.update(_overrides(args, {"n": "n_images", "seed": "seed", "size": "image_size", "group_size": "group_size"}))
    known = {f.name for f in fields(SynthConfig)}
    unknown = set(cfg) - known
    if unknown:
        raise ConfigurationError(f"unknown SynthConfig fields: {sorted(unknown)}")
    samples = synth_generate(SynthConfig(**cfg))
    root = save_dataset(samples, args.out)
    print(f"wrote {len(samples)} images to {root}")


def cmd_train(args) -> None:
    from .harness import train
    config, data = _train_config(args)
    train_set, eval_sets = _datasets(args, data, config.seed)
    rec = train(config, train_set, eval_sets, _criterion(args))
    for split, rep in rec.metrics.items():
        print(f"{split}: F {rep.f_score:.4f} R {rep.recall:.4f} P {rep.precision:.4f}")
    if rec.checkpoints:
        print(f"final checkpoint: {rec.checkpoints[-1]}")


def cmd_eval(args) -> None:
    from .harness import evaluate
    samples = load_dataset(args.data, args.format)
    report = evaluate(args.checkpoint, samples, _criterion(args))
    print(f"F {report.f_score:.4f} R {report.recall:.4f} P {report.precision:.4f} "
          f"(tp {report.tp} fp {report.fp} fn {report.fn}; {report.criterion})")
    if args.out:
        report.save(args.out)


def cmd_infer(args) -> None:
    from .harness import infer, load_model, write_detections
    samples = load_dataset(args.data, args.format)
    dets = infer(load_model(args.checkpoint), samples)
    path = write_detections(dets, args.out)
    print(f"{sum(map(len, dets.values()))} detections over {len(dets)} images -> {path}")


def cmd_ablate(args) -> None:
    from .harness import ablate, comparison_pairs, format_table
    config, data = _train_config(args)
    train_set, eval_sets = _datasets(args, data, config.seed)
    ks = args.rows or list(range(1, 7))
    pairs = [comparison_pairs()[k - 1] for k in ks]
    rows = ablate([c for c, _ in pairs], [m for _, m in pairs], config, train_set, eval_sets, _criterion(args),
                  names=[f"Comparison Model-{k}" for k in ks])
    print(format_table(rows))
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(json.dumps(rows, indent=1))


def cmd_gradcheck(args) -> int:
    from .harness import gradcheck_suite
    reports = gradcheck_suite(tuple(range(args.seeds)), args.tolerance)
    worst = {}
    for r in reports:
        block = r.parameter_name.split("[")[0]
        worst[block] = max(worst.get(block, 0.0), r.max_relative_error)
    for block, err in worst.items():
        print(f"{'PASS' if err < args.tolerance else 'FAIL'} {block:20s} max rel err {err:.2e}")
    failed = [r for r in reports if not r.passed]
    print(f"{len(reports) - len(failed)}/{len(reports)} checks passed")
    return EXIT_NUMERIC if failed else EXIT_OK


def cmd_report(args) -> None:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    from .harness import format_table

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.run:
        run = json.loads(Path(args.run).read_text())
        it = [r["iteration"] for r in run["losses"]]
        fig, ax = plt.subplots(figsize=(6, 4))
        for key in ("total", "l_c", "l_l", "l_b"):
            ax.plot(it, [r[key] for r in run["losses"]], label=key)
        ax.set_yscale("log")
        ax.set_xlabel("iteration")
        ax.set_ylabel("loss")
        ax.legend()
        fig.tight_layout()
        fig.savefig(out / "loss_curve.png", dpi=120)
        plt.close(fig)
        lines = ["| split | F-score | recall | precision |", "|---|---|---|---|"]
        for split, m in run["metrics"].items():
            lines.append(f"| {split} | {m['f_score']:.4f} | {m['recall']:.4f} | {m['precision']:.4f} |")
        (out / "metrics.md").write_text("\n".join(lines) + "\n")
        print(f"wrote {out / 'loss_curve.png'} and {out / 'metrics.md'}")
    if args.ablation:
        rows = json.loads(Path(args.ablation).read_text())
        (out / "ablation.md").write_text(format_table(rows) + "\n")
        cols = [c for c in rows[0] if c.endswith("_f_score")]
        fig, ax = plt.subplots(figsize=(7, 4))
        width = 0.8 / max(len(cols), 1)
        for j, c in enumerate(cols):
            ax.bar([i + j * width for i in range(len(rows))], [r.get(c, 0.0) for r in rows], width, label=c)
        ax.set_xticks([i + 0.4 - width / 2 for i in range(len(rows))])
        ax.set_xticklabels([r["name"].replace("Comparison ", "") for r in rows], rotation=20)
        ax.set_ylabel("F-score")
        ax.legend()
        fig.tight_layout()
        fig.savefig(out / "ablation.png", dpi=120)
        plt.close(fig)
        print(f"wrote {out / 'ablation.md'} and {out / 'ablation.png'}")
    for path in args.metrics or []:
        rep = MetricsReport.load(path)
        print(f"{path}: F {rep.f_score:.4f} R {rep.recall:.4f} P {rep.precision:.4f}")
    if not (args.run or args.ablation or args.metrics):
        raise ConfigurationError("report needs --run, --ablation or --metrics")


def _add_train_flags(p, seed_required: bool):
    p.add_argument("--config", help="JSON file with TrainConfig fields (plus data, format, eval_data, split)")
    p.add_argument("--data", help="dataset root holding annotations.json and images/")
    p.add_argument("--eval-data", dest="eval_data", help="held-out dataset root")
    p.add_argument("--format", choices=SOURCES)
    p.add_argument("--seed", type=int, required=seed_required)
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--weight-decay", dest="weight_decay", type=float)
    p.add_argument("--momentum", type=float)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--combo")
    p.add_argument("--merger")
    p.add_argument("--c-fpn", dest="c_fpn", type=int)
    p.add_argument("--profile", choices=("desk", "paper"))
    p.add_argument("--max-iterations", dest="max_iterations", type=int)
    _add_criterion(p)


def _add_criterion(p):
    p.add_argument("--criterion", choices=("iou", "center"), default="iou")
    p.add_argument("--threshold", type=float, help="IoU threshold or center distance in pixels")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cbhvt", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="verb", required=True)

    p = sub.add_parser("synth", help="write a synthetic dataset")
    p.add_argument("--config")
    p.add_argument("--n", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--size", type=int)
    p.add_argument("--group-size", dest="group_size", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_synth)

    p = sub.add_parser("train", help="train a detector")
    _add_train_flags(p, seed_required=True)
    p.add_argument("--out", help="output directory for checkpoints and run.json")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="score a checkpoint on a labeled dataset")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--format", choices=SOURCES, default="synthetic")
    p.add_argument("--out", help="MetricsReport JSON path")
    _add_criterion(p)
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("infer", help="write detections without scoring")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--format", choices=SOURCES, default="synthetic")
    p.add_argument("--out", required=True, help="detections JSON path")
    p.set_defaults(fn=cmd_infer)

    p = sub.add_parser("ablate", help="train and score the Comparison Model pairings")
    _add_train_flags(p, seed_required=True)
    p.add_argument("--rows", type=int, nargs="+", choices=range(1, 7), help="subset of Comparison Model rows")
    p.add_argument("--out", help="ablation rows JSON path")
    p.set_defaults(fn=cmd_ablate)

    p = sub.add_parser("gradcheck", help="finite-difference gradient checks")
    p.add_argument("--seeds", type=int, default=5)
    p.add_argument("--tolerance", type=float, default=1e-4)
    p.set_defaults(fn=cmd_gradcheck)

    p = sub.add_parser("report", help="render loss curves and tables")
    p.add_argument("--run", help="run.json from train")
    p.add_argument("--ablation", help="rows JSON from ablate")
    p.add_argument("--metrics", nargs="+", help="MetricsReport JSON files")
    p.add_argument("--out", default="report")
    p.set_defaults(fn=cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        code = args.fn(args)
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ConfigurationError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, InvalidInputError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    return code or EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
