"""Command-line interface.

Verbs: ``train`` (one seed/mode run), ``evaluate`` (accuracy of a checkpoint),
``analyze`` (entropy of a checkpoint, oscillations of a trace CSV), and
``compare`` (paired CR-vs-baseline experiment over seeds). Flags override
config-file keys, which override defaults.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

import numpy as np

from .checkpoint import load_checkpoint
from .config import RunConfig, apply_overrides, load_config
from .errors import CrqatError
from .metrics import evaluate_accuracy, oscillation_count, weight_entropy
from .runner import prepare_data, run_experiment, run_single


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="flat text config file")
    parser.add_argument("--seed", type=int, help="training seed")
    parser.add_argument("--mode", choices=("cr", "baseline", "fp"))
    parser.add_argument("--out", dest="out_dir", help="output directory")
    parser.add_argument("--arch", help="model architecture")
    parser.add_argument("--wbits", type=int, help="weight bit width")
    parser.add_argument("--abits", type=int, help="activation bit width")
    parser.add_argument("--epochs", type=int, help="training epochs")
    parser.add_argument("--dataset", choices=("synthetic", "cifar10"))
    parser.add_argument("--data-dir", dest="data_dir", help="CIFAR-10 directory")
    parser.add_argument("--seeds", help="comma list of seeds (compare)")
    parser.add_argument("--cr-strength", dest="cr_strength", type=float)
    parser.add_argument("--ema-momentum", dest="ema_momentum", type=float)
    parser.add_argument("--batch-size", dest="batch_size", type=int)
    parser.add_argument("--train-size", dest="train_size", type=int)
    parser.add_argument("--test-size", dest="test_size", type=int)
    parser.add_argument("--labeled-fraction", dest="labeled_fraction", type=float)


_CONFIG_KEYS = (
    "seed", "mode", "out_dir", "arch", "wbits", "abits", "epochs", "dataset",
    "data_dir", "seeds", "cr_strength", "ema_momentum", "batch_size",
    "train_size", "test_size", "labeled_fraction",
)


def _build_config(args: argparse.Namespace) -> RunConfig:
    config = RunConfig()
    if args.config:
        config = load_config(args.config, base=config)
    overrides = {key: getattr(args, key, None) for key in _CONFIG_KEYS}
    return apply_overrides(config, overrides)


def _cmd_train(args) -> int:
    config = _build_config(args)
    out_dir = Path(config.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "config.txt").write_text(config.to_text())
    row = run_single(config, config.seed, config.mode, out_dir)
    result_path = out_dir / f"{config.mode}_seed{config.seed}_result.json"
    result_path.write_text(json.dumps(row, indent=1, sort_keys=True))
    print(json.dumps(row, indent=1, sort_keys=True))
    return 0


def _cmd_compare(args) -> int:
    config = _build_config(args)
    summary = run_experiment(config)
    print(json.dumps(summary.get("paired", {}), indent=1, sort_keys=True))
    print(f"summary written to {Path(config.out_dir) / 'summary.json'}")
    return 0


def _cmd_evaluate(args) -> int:
    config = _build_config(args)
    model = load_checkpoint(args.checkpoint)
    _, test_set, _, _ = prepare_data(config)
    n = args.samples or len(test_set)
    acc = evaluate_accuracy(model, test_set, n, seed=config.seed)
    out = {"checkpoint": str(args.checkpoint), "role": model.role,
           "samples": n, "accuracy": acc}
    print(json.dumps(out, indent=1, sort_keys=True))
    return 0


def _cmd_analyze(args) -> int:
    report = {}
    if args.checkpoint:
        model = load_checkpoint(args.checkpoint)
        entropy = weight_entropy(model)
        report["entropy_total"] = entropy.total
        report["entropy_bins"] = entropy.bins
        report["kernels"] = len(entropy.per_kernel)
        if args.out:
            out_dir = Path(args.out)
            out_dir.mkdir(parents=True, exist_ok=True)
            with open(out_dir / "entropy.csv", "w", newline="") as fh:
                writer = csv.writer(fh)
                writer.writerow(["layer", "channel", "entropy", "degenerate"])
                for k in entropy.per_kernel:
                    writer.writerow([k.layer, k.channel, repr(k.entropy),
                                     int(k.degenerate)])
    if args.traces:
        with open(args.traces, newline="") as fh:
            rows = list(csv.reader(fh))
        header, body = rows[0], rows[1:]
        levels = np.array([[int(v) for v in row[1:]] for row in body])
        counts = {header[j + 1]: oscillation_count(levels[:, j])
                  for j in range(levels.shape[1])} if levels.size else {}
        report["oscillations_total"] = int(sum(counts.values()))
        report["oscillations_per_site"] = counts
    if not report:
        print("analyze: need --checkpoint and/or --traces", file=sys.stderr)
        return 2
    print(json.dumps(report, indent=1, sort_keys=True))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="crqat",
        description="Consistency-regularized quantization-aware training",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser("train", help="run one training job")
    _add_common(p_train)
    p_train.set_defaults(func=_cmd_train)

    p_compare = sub.add_parser("compare", help="paired CR vs baseline over seeds")
    _add_common(p_compare)
    p_compare.set_defaults(func=_cmd_compare)

    p_eval = sub.add_parser("evaluate", help="accuracy of a checkpoint")
    _add_common(p_eval)
    p_eval.add_argument("--checkpoint", required=True)
    p_eval.add_argument("--samples", type=int, default=0)
    p_eval.set_defaults(func=_cmd_evaluate)

    p_analyze = sub.add_parser("analyze", help="entropy/oscillation diagnostics")
    p_analyze.add_argument("--checkpoint")
    p_analyze.add_argument("--traces", help="trace CSV from a training run")
    p_analyze.add_argument("--out", help="directory for the entropy CSV")
    p_analyze.set_defaults(func=_cmd_analyze)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except CrqatError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
