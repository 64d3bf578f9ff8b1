"""Command-line entry point: synth | train | eval | tune | predict | ablate | gradcheck.

Settings come from built-in defaults, then an optional INI-style config
file (``[common]`` plus a section per command), then command-line flags.
Exit codes: 0 success, 2 usage error, 3 numeric failure, 4 I/O failure.
"""

from __future__ import annotations

import argparse
import configparser
import json
import logging
import sys
import time
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import __version__
from .checks import OP_CASES, run_suite
from .datapipe import (
    depth_to_color,
    load_rgb,
    read_dataset,
    save_depth,
    synth_dataset,
    write_dataset,
)
from .losses import ConfigError as LossConfigError
from .losses import LossWeights
from .network import ConfigError, DepthModel, ModelConfig, load_checkpoint, save_checkpoint
from .optimization import (
    FinetuneEvaluator,
    TrainConfig,
    evaluate,
    split_dataset,
    train,
    tune_weights,
    write_history,
)
from .tensor import DimensionError, NumericError

logger = logging.getLogger("irdepth")

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC, EXIT_IO = 0, 2, 3, 4

# each loss dropped, then each loss alone, then all three
ABLATION_COMBOS: List[Tuple[str, Tuple[float, float, float]]] = [
    ("w1=0", (0.0, 1.0, 1.0)),
    ("w2=0", (1.0, 0.0, 1.0)),
    ("w3=0", (1.0, 1.0, 0.0)),
    ("w1=0,w2=0", (0.0, 0.0, 1.0)),
    ("w2=0,w3=0", (1.0, 0.0, 0.0)),
    ("w1=0,w3=0", (0.0, 1.0, 0.0)),
    ("all", (1.0, 1.0, 1.0)),
]

DEFAULTS: Dict[str, Dict[str, object]] = {
    "common": {"seed": 0, "preset": "desk", "out": "run"},
    "synth": {"count": 16, "size": "32x32", "shapes": 3},
    "train": {
        "data": None,
        "synth_count": 80,
        "size": "32x32",
        "shapes": 3,
        "iters": 400,
        "batch": 8,
        "lr": 1e-4,
        "weights": "1,1,1",
        "val_split": 0.2,
        "no_augment": False,
    },
    "eval": {"checkpoint": None, "data": None},
    "tune": {
        "checkpoint": None,
        "data": None,
        "step": 0.1,
        "floor": 0.1,
        "finetune_iters": 20,
        "batch": 8,
        "lr": 1e-4,
        "val_split": 0.2,
    },
    "predict": {"checkpoint": None, "rgb": None},
    "ablate": {
        "data": None,
        "synth_count": 80,
        "size": "32x32",
        "shapes": 3,
        "iters": 400,
        "batch": 8,
        "lr": 1e-4,
        "val_split": 0.2,
        "combos": None,
    },
    "gradcheck": {"sabotage": None, "tol": 1e-4},
}


class UsageError(ValueError):
    pass


# --------------------------------------------------------------------------
# argument plumbing


def _parse_size(text: str) -> Tuple[int, int]:
    try:
        h, w = (int(v) for v in str(text).lower().split("x"))
    except ValueError as exc:
        raise UsageError(f"size must look like HxW, got {text!r}") from exc
    return h, w


def _parse_weights(text: str) -> Tuple[float, float, float]:
    try:
        parts = tuple(float(v) for v in str(text).split(","))
    except ValueError as exc:
        raise UsageError(f"weights must be three comma-separated numbers, got {text!r}") from exc
    if len(parts) != 3:
        raise UsageError(f"weights must be three comma-separated numbers, got {text!r}")
    return parts  # type: ignore[return-value]


def _coerce(value, like):
    if like is None or value is None:
        return value
    if isinstance(like, bool):
        return str(value).strip().lower() in ("1", "true", "yes", "on")
    return type(like)(value)


def _resolve(args: argparse.Namespace) -> Dict[str, object]:
    """Merge defaults, config file and flags (flags win)."""
    cmd = args.command
    resolved: Dict[str, object] = {**DEFAULTS["common"], **DEFAULTS[cmd]}
    if args.config:
        parser = configparser.ConfigParser()
        if not parser.read(args.config):
            raise OSError(f"cannot read config file {args.config}")
        for section in ("common", cmd):
            if parser.has_section(section):
                for key, value in parser.items(section):
                    key = key.replace("-", "_")
                    if key not in resolved:
                        raise UsageError(f"unknown key {key!r} in [{section}] of {args.config}")
                    resolved[key] = _coerce(value, resolved[key])
    for key, value in vars(args).items():
        if key in ("command", "config", "func") or value is None:
            continue
        resolved[key] = value
    resolved["command"] = cmd
    return resolved


def _write_manifest(out: Path, cfg: Dict[str, object]) -> None:
    out.mkdir(parents=True, exist_ok=True)
    manifest = {"version": __version__, **{k: v for k, v in cfg.items()}}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True, default=str) + "\n")


def _dataset(cfg) -> list:
    if cfg.get("data"):
        return read_dataset(cfg["data"])
    h, w = _parse_size(cfg["size"])
    return synth_dataset(int(cfg["seed"]), int(cfg["synth_count"]), h, w, int(cfg["shapes"]))


# --------------------------------------------------------------------------
# commands


def cmd_synth(cfg) -> int:
    count = int(cfg["count"])
    if count < 1:
        raise UsageError(f"--count must be >= 1, got {count}")
    h, w = _parse_size(cfg["size"])
    out = Path(cfg["out"])
    _write_manifest(out, cfg)
    pairs = synth_dataset(int(cfg["seed"]), count, h, w, int(cfg["shapes"]))
    write_dataset(pairs, out)
    print(f"wrote {count} samples to {out}")
    return EXIT_OK


def cmd_train(cfg) -> int:
    out = Path(cfg["out"])
    weights = LossWeights(*_parse_weights(cfg["weights"]))
    tc = TrainConfig(
        iterations=int(cfg["iters"]),
        lr=float(cfg["lr"]),
        batch_size=int(cfg["batch"]),
        seed=int(cfg["seed"]),
        weights=weights,
        val_split=float(cfg["val_split"]),
        augment=not cfg["no_augment"],
    )
    _write_manifest(out, cfg)
    data = _dataset(cfg)
    train_set, val_set = split_dataset(data, tc.val_split)
    h, w = train_set[0].hw
    model = DepthModel(ModelConfig.preset(str(cfg["preset"]), h, w, seed=int(cfg["seed"])))
    history = train(train_set, model, tc)
    save_checkpoint(model, out / "model.dfkt")
    write_history(history, out / "history.tsv")
    ratio = history[-1].total / history[0].total
    print(f"iterations={len(history)} initial_loss={history[0].total:.6f} final_loss={history[-1].total:.6f}")
    print(f"final/initial loss ratio={ratio:.4f}")
    if val_set:
        metrics, losses = evaluate(model, val_set, weights)
        (out / "val_report.txt").write_text(metrics.to_text())
        print(f"validation rmse={metrics.rmse:.5f} delta1={metrics.delta1:.4f}")
    return EXIT_OK


def cmd_eval(cfg) -> int:
    out = Path(cfg["out"])
    _write_manifest(out, cfg)
    model = load_checkpoint(cfg["checkpoint"])
    data = read_dataset(cfg["data"])
    start = time.perf_counter()
    metrics, losses = evaluate(model, data)
    per_sample = (time.perf_counter() - start) / len(data)
    (out / "report.txt").write_text(metrics.to_text())
    (out / "report.csv").write_text(metrics.csv_header() + "\n" + metrics.csv_row() + "\n")
    (out / "timing.txt").write_text(f"samples={len(data)}\nseconds_per_sample={per_sample!r}\n")
    print(metrics.to_text(), end="")
    print(f"seconds_per_sample={per_sample:.6f}")
    return EXIT_OK


def cmd_tune(cfg) -> int:
    out = Path(cfg["out"])
    _write_manifest(out, cfg)
    model = load_checkpoint(cfg["checkpoint"])
    data = read_dataset(cfg["data"])
    train_set, val_set = split_dataset(data, float(cfg["val_split"]))
    if not val_set:
        raise UsageError("tuning needs a non-empty validation split")
    base = TrainConfig(
        iterations=int(cfg["finetune_iters"]),
        lr=float(cfg["lr"]),
        batch_size=int(cfg["batch"]),
        seed=int(cfg["seed"]),
    )
    evaluator = FinetuneEvaluator(model, train_set, val_set, base)
    result = tune_weights(evaluator, step=float(cfg["step"]), floor=float(cfg["floor"]))
    (out / "tune.tsv").write_text(result.to_text())
    w1, w2, w3 = result.weights
    print(f"weights={w1:g},{w2:g},{w3:g} rmse={result.score:.6f} initial_rmse={result.initial_score:.6f}")
    return EXIT_OK


def cmd_predict(cfg) -> int:
    out = Path(cfg["out"])
    out.parent.mkdir(parents=True, exist_ok=True)
    model = load_checkpoint(cfg["checkpoint"])
    rgb = load_rgb(cfg["rgb"])
    depth = model.predict(rgb.astype(np.float32)).data[0, 0].astype(np.float64)
    depth_path = out.with_name(out.name + "_depth.png")
    color_path = out.with_name(out.name + "_color.png")
    save_depth(depth, depth_path)
    from PIL import Image

    Image.fromarray(depth_to_color(depth)).save(color_path, format="PNG")
    print(f"wrote {depth_path} and {color_path}")
    return EXIT_OK


def _parse_combos(text: Optional[str]):
    if not text:
        return ABLATION_COMBOS
    combos = []
    for chunk in str(text).split(";"):
        w = _parse_weights(chunk)
        combos.append((chunk.strip(), w))
    return combos


def run_ablation(cfg) -> List[Dict[str, object]]:
    data = _dataset(cfg)
    train_set, val_set = split_dataset(data, float(cfg["val_split"]))
    if not val_set:
        raise UsageError("ablation needs a non-empty validation split")
    h, w = train_set[0].hw
    rows = []
    for label, combo in _parse_combos(cfg.get("combos")):
        weights = LossWeights(*combo)
        model = DepthModel(ModelConfig.preset(str(cfg["preset"]), h, w, seed=int(cfg["seed"])))
        tc = TrainConfig(
            iterations=int(cfg["iters"]),
            lr=float(cfg["lr"]),
            batch_size=int(cfg["batch"]),
            seed=int(cfg["seed"]),
            weights=weights,
        )
        train(train_set, model, tc)
        metrics, losses = evaluate(model, val_set, weights)
        recombined = weights.w1 * losses.depth + weights.w2 * losses.grad + weights.w3 * losses.ssim
        rows.append(
            {
                "combination": label,
                "w1": combo[0],
                "w2": combo[1],
                "w3": combo[2],
                "are": metrics.are,
                "rmse": metrics.rmse,
                "log10": metrics.log10,
                "delta1": metrics.delta1,
                "delta2": metrics.delta2,
                "delta3": metrics.delta3,
                "r2": metrics.r2,
                "loss_depth": losses.depth,
                "loss_grad": losses.grad,
                "loss_ssim": losses.ssim,
                "loss_total": losses.total,
                "identity_ok": int(abs(recombined - losses.total) <= 1e-12),
            }
        )
    return rows


def cmd_ablate(cfg) -> int:
    import csv

    out = Path(cfg["out"])
    _write_manifest(out, cfg)
    rows = run_ablation(cfg)
    with open(out / "ablation.csv", "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0]))
        writer.writeheader()
        for row in rows:
            writer.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})
    for row in rows:
        print(f"{row['combination']:<12} rmse={row['rmse']:.4f} delta1={row['delta1']:.4f} are={row['are']:.4f}")
    return EXIT_OK


def cmd_gradcheck(cfg) -> int:
    sabotage = cfg.get("sabotage")
    if sabotage and sabotage not in OP_CASES:
        raise UsageError(f"unknown op {sabotage!r}; choose from {', '.join(OP_CASES)}")
    out = Path(cfg["out"])
    _write_manifest(out, cfg)
    results = run_suite(seed=int(cfg["seed"]), tol=float(cfg["tol"]), sabotage=sabotage)
    lines = [f"{r.name}\t{r.max_rel_error:.3e}\t{r.checked}\t{'PASS' if r.passed else 'FAIL'}" for r in results]
    (out / "gradcheck.tsv").write_text("op\tmax_rel_error\tchecked\tstatus\n" + "\n".join(lines) + "\n")
    print("\n".join(lines))
    failed = [r.name for r in results if not r.passed]
    if failed:
        print(f"FAILED: {', '.join(failed)}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


COMMANDS = {
    "synth": cmd_synth,
    "train": cmd_train,
    "eval": cmd_eval,
    "tune": cmd_tune,
    "predict": cmd_predict,
    "ablate": cmd_ablate,
    "gradcheck": cmd_gradcheck,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="irdepth", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="INI file with [common] and per-command sections")
        p.add_argument("--seed", type=int)
        p.add_argument("--out", help="output directory (predict: output path prefix)")
        p.add_argument("--preset", choices=("desk", "paper"))
        return p

    def synth_source(p):
        p.add_argument("--data", help="dataset directory with rgb/ and depth/ (default: synthesise)")
        p.add_argument("--synth-count", type=int)
        p.add_argument("--size", help="synthetic image size HxW")
        p.add_argument("--shapes", type=int)

    def training(p):
        p.add_argument("--iters", type=int)
        p.add_argument("--batch", type=int)
        p.add_argument("--lr", type=float)
        p.add_argument("--val-split", type=float)

    p = common(sub.add_parser("synth", help="write a synthetic RGB-D dataset"))
    p.add_argument("--count", type=int)
    p.add_argument("--size")
    p.add_argument("--shapes", type=int)

    p = common(sub.add_parser("train", help="train a model"))
    synth_source(p)
    training(p)
    p.add_argument("--weights", help="w1,w2,w3")
    p.add_argument("--no-augment", action="store_true", default=None)

    p = common(sub.add_parser("eval", help="evaluate a checkpoint on a dataset"))
    p.add_argument("--checkpoint")
    p.add_argument("--data")

    p = common(sub.add_parser("tune", help="greedy loss-weight search"))
    p.add_argument("--checkpoint")
    p.add_argument("--data")
    p.add_argument("--step", type=float)
    p.add_argument("--floor", type=float)
    p.add_argument("--finetune-iters", type=int)
    training(p)

    p = common(sub.add_parser("predict", help="predict depth for one RGB image"))
    p.add_argument("--checkpoint")
    p.add_argument("--rgb")

    p = common(sub.add_parser("ablate", help="train and evaluate each loss-weight combination"))
    synth_source(p)
    training(p)
    p.add_argument("--combos", help="semicolon-separated w1,w2,w3 triples (default: the seven standard rows)")

    p = common(sub.add_parser("gradcheck", help="finite-difference check of every differentiable op"))
    p.add_argument("--sabotage", help="perturb the analytic gradient of this op (negative control)")
    p.add_argument("--tol", type=float)
    return parser


_REQUIRED = {"eval": ("checkpoint", "data"), "tune": ("checkpoint", "data"), "predict": ("checkpoint", "rgb")}


def main(argv: Optional[Sequence[str]] = None) -> int:
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = _resolve(args)
        for key in _REQUIRED.get(args.command, ()):
            if not cfg.get(key):
                raise UsageError(f"--{key} is required")
        return COMMANDS[args.command](cfg)
    except (UsageError, ConfigError, LossConfigError, DimensionError) as exc:
        print(f"{parser.prog} {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericError as exc:
        print(f"{parser.prog} {args.command}: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except OSError as exc:
        print(f"{parser.prog} {args.command}: I/O failure: {exc}", file=sys.stderr)
        return EXIT_IO
    except ValueError as exc:
        print(f"{parser.prog} {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
