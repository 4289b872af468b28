"""Experiment orchestration: single runs, paired comparisons, reports.

A single run covers data preparation, calibration, training, and evaluation
for one (seed, mode) pair. A comparison runs the consistency-regularized mode
and the plain-QAT baseline over a shared list of seeds; within one seed both
modes see identical data splits, initial weights, augmentation streams, and
calibration, so per-seed differences are paired. Results land in per-run CSV
files, checkpoints, and one summary JSON that is a pure function of the
config.
"""

from __future__ import annotations

import csv
import json
import sys
import time
from pathlib import Path

import numpy as np

from .augmentation import AugmentationPolicy
from .checkpoint import save_checkpoint
from .config import RunConfig
from .data import (
    Dataset,
    load_cifar10,
    make_synthetic_pair,
    normalize_images,
    sample_calibration,
    split_labeled,
)
from .errors import ConfigError, TrainingDiverged
from .metrics import evaluate_accuracy, total_oscillations, weight_entropy
from .models import build_model, calibrate_model
from .training import TrainConfig, TrainData, TrainResult, train


def derive_seed(*parts: int) -> int:
    return int(np.random.SeedSequence(list(parts)).generate_state(1)[0])


def prepare_data(config: RunConfig):
    """Train/test splits plus the labeled/pool split, fixed by data_seed."""
    if config.dataset == "synthetic":
        train_set, test_set = make_synthetic_pair(
            config.train_size, config.test_size, config.num_classes,
            seed=config.data_seed,
        )
    else:
        if not config.data_dir:
            raise ConfigError("dataset 'cifar10' needs data_dir")
        train_set, test_set = load_cifar10(config.data_dir)
        rng = np.random.default_rng(config.data_seed)
        if config.train_size < len(train_set):
            idx = rng.permutation(len(train_set))[: config.train_size]
            train_set = train_set.subset(np.sort(idx))
        if config.test_size < len(test_set):
            idx = rng.permutation(len(test_set))[: config.test_size]
            test_set = test_set.subset(np.sort(idx), split="test")
    labeled, pool = split_labeled(train_set, config.labeled_fraction,
                                  seed=derive_seed(config.data_seed, 1))
    return train_set, test_set, labeled, pool


def _train_config(config: RunConfig, seed: int, mode: str) -> TrainConfig:
    ratio_l, ratio_u = config.ratio_parts()
    return TrainConfig(
        epochs=config.epochs,
        batch_size=config.batch_size,
        labeled_ratio=ratio_l,
        unlabeled_ratio=ratio_u,
        base_lr=config.base_lr,
        momentum=config.momentum,
        weight_decay=config.weight_decay,
        ema_momentum=config.ema_momentum,
        cr_strength=config.cr_strength if mode == "cr" else 0.0,
        warmup_epochs=config.warmup_epochs,
        divergence=config.divergence,
        seed=seed,
        trace_every=config.trace_every,
    )


def _policy(config: RunConfig, seed: int) -> AugmentationPolicy:
    return AugmentationPolicy(
        flip_prob=config.flip_prob,
        translate_px=config.translate_px,
        jitter=config.jitter,
        grayscale_prob=config.grayscale_prob,
        rotate_deg=config.rotate_deg,
        seed=derive_seed(config.data_seed, seed, 2),
    )


def run_single(config: RunConfig, seed: int, mode: str, out_dir,
               data=None) -> dict:
    """One training run; returns the result row and writes its artifacts."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if data is None:
        data = prepare_data(config)
    train_set, test_set, labeled, pool = data

    wbits = 32 if mode == "fp" else config.wbits
    abits = 32 if mode == "fp" else config.abits
    model = build_model(config.arch, config.num_classes, wbits, abits, seed=seed)

    calib = sample_calibration(
        train_set, min(config.calibration_size, len(train_set)),
        seed=derive_seed(config.data_seed, seed, 3),
    )
    calib_images = normalize_images(
        calib.images, train_set.channel_mean, train_set.channel_std
    )
    calibrate_model(model, calib_images)

    cfg = _train_config(config, seed, mode)
    data_spec = TrainData(
        labeled=labeled,
        unlabeled_images=pool.images if len(pool) else None,
        policy=_policy(config, seed),
    )
    started = time.time()
    result = train(model, cfg, data_spec)
    elapsed = time.time() - started

    eval_n = config.eval_samples or len(test_set)
    eval_seed = derive_seed(config.data_seed, seed, 4)
    row = {
        "seed": seed,
        "mode": mode,
        "student_acc": evaluate_accuracy(result.student, test_set, eval_n, eval_seed),
        "teacher_acc": evaluate_accuracy(result.teacher, test_set, eval_n, eval_seed),
    }
    for role in ("student", "teacher"):
        trace = result.traces[role]
        row[f"oscillations_{role}"] = (
            total_oscillations(trace) if trace.size and trace.shape[0] >= 2 else 0
        )
    if result.student.conv_layers():
        row["entropy_student"] = weight_entropy(result.student).total
        row["entropy_teacher"] = weight_entropy(result.teacher).total
    else:
        row["entropy_student"] = row["entropy_teacher"] = 0.0

    run_name = f"{mode}_seed{seed}"
    _write_steps_csv(out_dir / f"{run_name}_steps.csv", result.records)
    _write_trace_csv(out_dir / f"{run_name}_trace_student.csv",
                     result.traces["student"], result.tracked_site)
    _write_trace_csv(out_dir / f"{run_name}_trace_teacher.csv",
                     result.traces["teacher"], result.tracked_site)
    save_checkpoint(result.student, out_dir / f"{run_name}_student",
                    config_hash=config.config_hash(), epoch=config.epochs)
    save_checkpoint(result.teacher, out_dir / f"{run_name}_teacher",
                    config_hash=config.config_hash(), epoch=config.epochs)
    print(
        f"[{run_name}] student {row['student_acc']:.2f}% "
        f"teacher {row['teacher_acc']:.2f}% ({elapsed:.0f}s)",
        file=sys.stderr,
    )
    return row


def _write_steps_csv(path: Path, records) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["iteration", "epoch", "lambda", "ce", "cr", "total", "lr"])
        for r in records:
            writer.writerow([r.iteration, r.epoch, repr(r.lam), repr(r.ce),
                             repr(r.cr), repr(r.total), repr(r.lr)])


def _write_trace_csv(path: Path, trace: np.ndarray, site: str) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        n = trace.shape[1] if trace.size else 0
        writer.writerow(["iteration"] + [f"{site}[{j}]" for j in range(n)])
        for i in range(trace.shape[0] if trace.size else 0):
            writer.writerow([i] + [int(v) for v in trace[i]])


def _mean_std(values) -> tuple[float, float]:
    arr = np.asarray(values, dtype=np.float64)
    mean = float(arr.mean())
    std = float(arr.std(ddof=1)) if len(arr) > 1 else 0.0
    return mean, std


def _worker_init():
    # one BLAS thread per worker; the workers themselves provide parallelism
    import os
    os.environ.setdefault("OPENBLAS_NUM_THREADS", "1")
    os.environ.setdefault("OMP_NUM_THREADS", "1")
    os.environ.setdefault("MKL_NUM_THREADS", "1")


def _run_job(args):
    config, seed, mode, out_dir = args
    try:
        return seed, mode, run_single(config, seed, mode, out_dir), None
    except TrainingDiverged as exc:
        return seed, mode, None, str(exc)


def run_experiment(config: RunConfig, modes=None) -> dict:
    """Paired multi-seed comparison; writes summary.json and all artifacts.

    With ``jobs > 1`` the (seed, mode) runs execute in separate worker
    processes; each run's artifacts and results are identical to the serial
    path, so the summary does not depend on scheduling.
    """
    out_dir = Path(config.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "config.txt").write_text(config.to_text())

    if modes is None:
        modes = ["cr", "baseline"] + (["fp"] if config.include_fp else [])
    seeds = config.seed_list()

    results = {mode: [] for mode in modes}
    diverged = []
    if config.jobs > 1:
        import concurrent.futures as cf
        import multiprocessing as mp

        tasks = [(config, seed, mode, out_dir)
                 for seed in seeds for mode in modes]
        rows = {}
        ctx = mp.get_context("spawn")
        with cf.ProcessPoolExecutor(max_workers=config.jobs, mp_context=ctx,
                                    initializer=_worker_init) as pool:
            for seed, mode, row, error in pool.map(_run_job, tasks):
                rows[(seed, mode)] = (row, error)
        for seed in seeds:
            for mode in modes:
                row, error = rows[(seed, mode)]
                if error is None:
                    results[mode].append(row)
                else:
                    diverged.append({"seed": seed, "mode": mode, "error": error})
    else:
        data = prepare_data(config)
        for seed in seeds:
            for mode in modes:
                try:
                    results[mode].append(
                        run_single(config, seed, mode, out_dir, data=data)
                    )
                except TrainingDiverged as exc:
                    diverged.append({"seed": seed, "mode": mode,
                                     "error": str(exc)})

    summary = {
        "config_hash": config.config_hash(),
        "config": {k: v for k, v in sorted(vars(config).items())},
        "seeds": seeds,
        "modes": {},
        "diverged": diverged,
    }
    for mode in modes:
        rows = results[mode]
        block = {"rows": rows}
        for key in ("student_acc", "teacher_acc", "entropy_student",
                    "entropy_teacher"):
            vals = [r[key] for r in rows]
            mean, std = _mean_std(vals) if vals else (0.0, 0.0)
            block[f"{key}_mean"] = mean
            block[f"{key}_std"] = std
        block["oscillations_student"] = [r["oscillations_student"] for r in rows]
        block["oscillations_teacher"] = [r["oscillations_teacher"] for r in rows]
        summary["modes"][mode] = block

    if "cr" in results and "baseline" in results and results["cr"] \
            and len(results["cr"]) == len(results["baseline"]):
        cr_rows, base_rows = results["cr"], results["baseline"]
        acc_diff = [c["teacher_acc"] - b["student_acc"]
                    for c, b in zip(cr_rows, base_rows)]
        osc_lower = [c["oscillations_teacher"] < b["oscillations_student"]
                     for c, b in zip(cr_rows, base_rows)]
        ent_ge = [c["entropy_teacher"] >= b["entropy_student"]
                  for c, b in zip(cr_rows, base_rows)]
        summary["paired"] = {
            "teacher_minus_baseline_acc": acc_diff,
            "mean_improvement": float(np.mean(acc_diff)),
            "acc_wins": int(sum(d > 0 for d in acc_diff)),
            "oscillation_lower": osc_lower,
            "oscillation_wins": int(sum(osc_lower)),
            "entropy_not_lower": ent_ge,
            "entropy_wins": int(sum(ent_ge)),
        }

    (out_dir / "summary.json").write_text(json.dumps(summary, indent=1,
                                                     sort_keys=True))
    return summary
