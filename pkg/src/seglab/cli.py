"""Command-line harness: train, eval, ablate, gradcheck, gen-data.

Every command is a pure function of its configuration and input files:
reruns produce byte-identical outputs.  Machine output is CSV with a header
row; wall-clock timings go to stdout only so the files stay deterministic.

Config precedence: command-line flag > config file (``key = value`` lines,
``#`` comments) > built-in default.
"""

from __future__ import annotations

import argparse
import concurrent.futures
import csv
import os
import sys
import time
from dataclasses import dataclass, fields, replace

import numpy as np

from . import data as dsata
from . import losses as dlosses
from .model import (
    ModelConfig,
    OptimizerConfig,
    SegModel,
    TrainSettings,
    build_model,
    load_checkpoint,
    predict_batch,
    save_checkpoint,
    train,
)
from .losses import LossConfig
from .optim import sharpness_probe
from .registry import TOLERANCE, run_gradcheck

CLASS_COLUMNS = (("RV", 1), ("Myo", 2), ("LV", 3))
ABLATION_CONFIGS = ("ce_sgd", "ua_sgd", "ua_sam")
SPLIT_SEED_SALT = 0x5EED


def _fmt(x: float) -> str:
    return format(float(x), ".17g")


@dataclass
class RunConfig:
    command: str = ""
    data: str = ""            # dataset path; empty -> generate in memory
    out: str = "runs/out"
    checkpoint: str = ""
    epochs: int = 50
    batch_size: int = 8
    loss: str = "ua"          # "ce" or "ua"
    optimizer: str = "sam"    # "sgd" or "sam"
    lr: float = 5e-3
    rho: float = 0.05
    gamma: float = 2.0
    seed: int = 0
    data_seed: int = 1234
    n: int = 250
    height: int = 64
    width: int = 64
    seeds: str = "0,1,2,3,4"
    workers: int = 1
    probe_samples: int = 16

    def seed_list(self) -> list[int]:
        return [int(s) for s in self.seeds.split(",") if s.strip() != ""]


def parse_config_file(path) -> dict:
    values = {}
    with open(path, "r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            key, sep, value = line.partition("=")
            if not sep:
                raise ValueError(f"{path}:{lineno}: expected 'key = value', got {line!r}")
            values[key.strip()] = value.strip()
    return values


_FIELD_TYPES = {f.name: f.type for f in fields(RunConfig)}


def _coerce(key: str, value: str):
    kind = _FIELD_TYPES.get(key)
    if kind is None:
        raise ValueError(f"unknown config key {key!r}")
    if kind == "int":
        return int(value)
    if kind == "float":
        return float(value)
    return value


def resolve_config(args: argparse.Namespace) -> RunConfig:
    cfg = RunConfig()
    if getattr(args, "config", None):
        for key, value in parse_config_file(args.config).items():
            setattr(cfg, key, _coerce(key, value))
    for key in _FIELD_TYPES:
        flag = getattr(args, key, None)
        if flag is not None:
            setattr(cfg, key, flag)
    cfg.command = args.command
    return cfg


def load_splits(cfg: RunConfig):
    """(train, test) splits; the split seed derives from the dataset's own
    seed so every command sees the same partition of the same file."""
    if cfg.data:
        samples, header = dsata.read_dataset(cfg.data)
        base_seed = header.seed
    else:
        samples = dsata.generate_dataset(cfg.n, cfg.data_seed, h=cfg.height, w=cfg.width)
        base_seed = cfg.data_seed
    parts = dsata.split(samples, [0.8, 0.2], seed=base_seed ^ SPLIT_SEED_SALT)
    return parts[0], parts[1]


def _train_settings(cfg: RunConfig) -> TrainSettings:
    return TrainSettings(
        epochs=cfg.epochs,
        batch_size=cfg.batch_size,
        seed=cfg.seed,
        objective=cfg.loss,
        loss=LossConfig(gamma=cfg.gamma),
        optimizer=OptimizerConfig(kind=cfg.optimizer, lr=cfg.lr, rho=cfg.rho),
    )


def cmd_train(cfg: RunConfig) -> int:
    t0 = time.perf_counter()
    os.makedirs(cfg.out, exist_ok=True)
    train_split, _ = load_splits(cfg)
    model = build_model(ModelConfig(seed=cfg.seed))
    settings = _train_settings(cfg)
    m_sigma = len(settings.loss.components) if cfg.loss == "ua" else 0
    header = ["epoch", "mean_loss", "loss_dice", "loss_ce", "loss_focal"]
    header += [f"sigma_{i + 1}" for i in range(m_sigma)]
    rows = []

    def on_epoch(stats):
        row = [str(stats.epoch), _fmt(stats.mean_loss)]
        row += [_fmt(stats.component_means[k]) for k in ("dice", "ce", "focal")]
        row += [_fmt(s) for s in stats.sigmas]
        rows.append(row)
        print(f"epoch {stats.epoch}: loss {stats.mean_loss:.6f}", flush=True)

    train(model, train_split, settings, on_epoch=on_epoch)
    save_checkpoint(model, os.path.join(cfg.out, "checkpoint.bin"))
    with open(os.path.join(cfg.out, "train_metrics.csv"), "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(header)
        writer.writerows(rows)
    print(f"trained {cfg.epochs} epochs in {time.perf_counter() - t0:.1f}s -> {cfg.out}")
    return 0


def _eval_model(model: SegModel, test_split, cfg: RunConfig):
    """Per-class DSC on argmax masks, MSE on probabilities, CE-loss sharpness."""
    probs_all = []
    batch = max(1, cfg.batch_size)
    for start in range(0, len(test_split), batch):
        chunk = test_split[start : start + batch]
        images = np.stack([s.image for s in chunk]).astype(np.float64)
        probs_all.extend(predict_batch(model, images))
    truths = [s.mask for s in test_split]
    preds = [p.argmax(axis=0) for p in probs_all]
    per_class = {
        name: float(np.mean([dlosses.dsc_metric(p, t, cid) for p, t in zip(preds, truths)]))
        for name, cid in CLASS_COLUMNS
    }
    avg = float(np.mean([per_class[name] for name, _ in CLASS_COLUMNS]))
    mse = dlosses.mse_metric(probs_all, truths)
    sharp = _sharpness_of(model, test_split, cfg)
    return per_class, avg, mse, sharp


def _sharpness_of(model: SegModel, samples, cfg: RunConfig) -> float:
    """Loss-landscape probe on a fixed batch, always with the plain CE loss so
    values are comparable across training configurations."""
    from .model import _batch_loss_fn

    probe = samples[: min(cfg.probe_samples, len(samples))]
    images = np.stack([s.image for s in probe]).astype(np.float64)
    images = np.ascontiguousarray(images.transpose(0, 2, 3, 1))
    labels = np.stack([s.mask for s in probe])
    settings = TrainSettings(objective="ce", loss=LossConfig(gamma=cfg.gamma))
    loss_fn = _batch_loss_fn(model.cfg, settings, images, labels, None)
    return sharpness_probe(
        model.params, loss_fn, rho=cfg.rho, n_ascent_steps=3, n_random_dirs=8, seed=cfg.seed
    )


EVAL_HEADER = ["dsc_rv", "dsc_myo", "dsc_lv", "dsc_avg_foreground", "mse", "sharpness", "seed"]


def cmd_eval(cfg: RunConfig) -> int:
    t0 = time.perf_counter()
    if not cfg.checkpoint:
        print("eval requires --checkpoint", file=sys.stderr)
        return 2
    os.makedirs(cfg.out, exist_ok=True)
    model = load_checkpoint(cfg.checkpoint)
    _, test_split = load_splits(cfg)
    per_class, avg, mse, sharp = _eval_model(model, test_split, cfg)
    row = [
        _fmt(per_class["RV"]), _fmt(per_class["Myo"]), _fmt(per_class["LV"]),
        _fmt(avg), _fmt(mse), _fmt(sharp), str(cfg.seed),
    ]
    with open(os.path.join(cfg.out, "eval_metrics.csv"), "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(EVAL_HEADER)
        writer.writerow(row)
    print(f"{'class':>6} {'DSC':>8}")
    for name, _ in CLASS_COLUMNS:
        print(f"{name:>6} {per_class[name]:8.4f}")
    print(f"{'avg':>6} {avg:8.4f}")
    print(f"MSE {mse:.6f}  sharpness {sharp:.6f}  ({time.perf_counter() - t0:.1f}s)")
    return 0


def _ablation_cell_config(config_name: str, cfg: RunConfig, seed: int) -> RunConfig:
    loss = "ce" if config_name == "ce_sgd" else "ua"
    optimizer = "sam" if config_name == "ua_sam" else "sgd"
    return replace(cfg, loss=loss, optimizer=optimizer, seed=seed,
                   out=os.path.join(cfg.out, f"{config_name}_seed{seed}"))


def _run_ablation_cell(args):
    config_name, cfg = args
    code = cmd_train(cfg)
    if code != 0:
        raise RuntimeError(f"training failed for {config_name} seed {cfg.seed}")
    model = load_checkpoint(os.path.join(cfg.out, "checkpoint.bin"))
    _, test_split = load_splits(cfg)
    per_class, avg, mse, sharp = _eval_model(model, test_split, cfg)
    return {
        "config": config_name, "seed": cfg.seed,
        "dsc_rv": per_class["RV"], "dsc_myo": per_class["Myo"], "dsc_lv": per_class["LV"],
        "dsc_avg_foreground": avg, "mse": mse, "sharpness": sharp,
        "epochs": cfg.epochs, "batch_size": cfg.batch_size, "lr": cfg.lr,
        "rho": cfg.rho, "gamma": cfg.gamma, "data_seed": cfg.data_seed,
    }


ABLATION_HEADER = [
    "config", "seed", "dsc_rv", "dsc_myo", "dsc_lv", "dsc_avg_foreground",
    "mse", "sharpness", "epochs", "batch_size", "lr", "rho", "gamma", "data_seed",
]


def cmd_ablate(cfg: RunConfig) -> int:
    """One row per (config, seed) plus per-config means, everything but the
    mechanism under test held fixed; pairwise orderings land in ordering.csv."""
    t0 = time.perf_counter()
    os.makedirs(cfg.out, exist_ok=True)
    seeds = cfg.seed_list()
    if not seeds:
        print("ablate requires at least one seed", file=sys.stderr)
        return 2
    cells = [
        (name, _ablation_cell_config(name, cfg, seed))
        for name in ABLATION_CONFIGS
        for seed in seeds
    ]
    if cfg.workers > 1:
        with concurrent.futures.ProcessPoolExecutor(max_workers=cfg.workers) as pool:
            results = list(pool.map(_run_ablation_cell, cells))
    else:
        results = [_run_ablation_cell(cell) for cell in cells]

    by_config = {name: [r for r in results if r["config"] == name] for name in ABLATION_CONFIGS}
    means = {}
    rows = []
    for name in ABLATION_CONFIGS:
        for r in by_config[name]:
            rows.append([_cell_str(r[k]) for k in ABLATION_HEADER])
        mean_row = dict(by_config[name][0])
        for key in ("dsc_rv", "dsc_myo", "dsc_lv", "dsc_avg_foreground", "mse", "sharpness"):
            mean_row[key] = float(np.mean([r[key] for r in by_config[name]]))
        mean_row["seed"] = "mean"
        means[name] = mean_row
        rows.append([_cell_str(mean_row[k]) for k in ABLATION_HEADER])
    with open(os.path.join(cfg.out, "ablation.csv"), "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(ABLATION_HEADER)
        writer.writerows(rows)

    order_rows = []
    for metric, better_low in (("dsc_avg_foreground", False), ("mse", True), ("sharpness", True)):
        for a, b in (("ce_sgd", "ua_sgd"), ("ua_sgd", "ua_sam"), ("ce_sgd", "ua_sam")):
            va, vb = means[a][metric], means[b][metric]
            ok = (vb <= va) if better_low else (vb >= va)
            order_rows.append([metric, a, b, _fmt(va), _fmt(vb), str(ok)])
            print(f"{metric}: {a} {va:.5f} vs {b} {vb:.5f} -> improved={ok}")
    with open(os.path.join(cfg.out, "ordering.csv"), "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(["metric", "baseline", "candidate", "baseline_value", "candidate_value", "improved"])
        writer.writerows(order_rows)
    print(f"ablation finished in {(time.perf_counter() - t0) / 60:.1f} min -> {cfg.out}")
    return 0


def _cell_str(v) -> str:
    if isinstance(v, float):
        return _fmt(v)
    return str(v)


def cmd_gradcheck(cfg: RunConfig) -> int:
    t0 = time.perf_counter()
    results = run_gradcheck(seed=cfg.seed)
    failed = 0
    for name, err, ok in results:
        print(f"{name:28s} max_rel_err {err:.3e}  {'PASS' if ok else 'FAIL'}")
        failed += 0 if ok else 1
    print(f"{len(results)} ops checked, {failed} failures, tolerance {TOLERANCE:g}, "
          f"{time.perf_counter() - t0:.1f}s")
    return 1 if failed else 0


def cmd_gen_data(cfg: RunConfig) -> int:
    if not cfg.out:
        print("gen-data requires --out", file=sys.stderr)
        return 2
    samples = dsata.generate_dataset(cfg.n, cfg.data_seed, h=cfg.height, w=cfg.width)
    parent = os.path.dirname(cfg.out)
    if parent:
        os.makedirs(parent, exist_ok=True)
    dsata.write_dataset(samples, cfg.out, seed=cfg.data_seed)
    print(f"wrote {cfg.n} samples ({cfg.height}x{cfg.width}) to {cfg.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="seglab", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    defs = {
        "train": "train a model and write checkpoint + per-epoch CSV",
        "eval": "evaluate a checkpoint: per-class DSC, MSE, sharpness",
        "ablate": "run the CE / uncertainty / uncertainty+SAM comparison",
        "gradcheck": "finite-difference check of every registered op",
        "gen-data": "generate and write a synthetic dataset file",
    }
    for name, help_text in defs.items():
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="key = value config file")
        p.add_argument("--data", help="dataset file (default: generate in memory)")
        p.add_argument("--out", help="output directory (gen-data: output file)")
        p.add_argument("--checkpoint", help="checkpoint file (eval)")
        p.add_argument("--epochs", type=int)
        p.add_argument("--batch-size", dest="batch_size", type=int)
        p.add_argument("--loss", choices=("ce", "ua"))
        p.add_argument("--optimizer", choices=("sgd", "sam"))
        p.add_argument("--lr", type=float)
        p.add_argument("--rho", type=float)
        p.add_argument("--gamma", type=float)
        p.add_argument("--seed", type=int)
        p.add_argument("--data-seed", dest="data_seed", type=int)
        p.add_argument("--n", type=int)
        p.add_argument("--height", type=int)
        p.add_argument("--width", type=int)
        p.add_argument("--seeds", help="comma list for ablate")
        p.add_argument("--workers", type=int)
        p.add_argument("--probe-samples", dest="probe_samples", type=int)
    return parser


COMMANDS = {
    "train": cmd_train,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "gradcheck": cmd_gradcheck,
    "gen-data": cmd_gen_data,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    cfg = resolve_config(args)
    try:
        return COMMANDS[args.command](cfg)
    except (dsata.DatasetFormatError, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
