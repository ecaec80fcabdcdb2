"""Command line entry point: ``sslpurify <subcommand> --config PATH ...``."""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np
import torch

from .config import ConfigError, ExperimentConfig, load_config, parse_config
from .data import DataError
from .evaluation import attack_batch, compare_modes, format_comparisons, read_report_csv, tensor_hash
from .experiment import get_classifier, get_heads, load_data, reversal_configs, run_experiment
from .models import CheckpointError, predict
from .reversal import ReversalMode, reverse_in_chunks, write_trace_csv

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_RUNTIME = 0, 1, 2, 3


def _config(args) -> ExperimentConfig:
    overrides = {}
    if args.seed is not None:
        overrides["experiment.seed"] = str(args.seed)
    if args.data_dir:
        overrides["data.dir"] = args.data_dir
        overrides["data.source"] = "cifar10"
    return load_config(args.config, overrides) if args.config else parse_config("", overrides)


def _save_batch(path: Path, x: torch.Tensor, y: torch.Tensor) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    np.savez(path, images=x.numpy(), labels=y.numpy())


def _load_batch(path: Path) -> tuple[torch.Tensor, torch.Tensor]:
    if not path.exists():
        raise FileNotFoundError(f"input batch not found: {path}")
    with np.load(path) as z:
        return torch.from_numpy(z["images"]), torch.from_numpy(z["labels"])


def cmd_train_classifier(args, cfg):
    train, test = load_data(cfg)
    model = get_classifier(cfg, train, args.model_dir or args.out)
    acc = float((predict(model, test.images) == test.targets).float().mean())
    print(f"classifier saved to {(args.model_dir or args.out) / 'classifier.ckpt'}; held-out clean accuracy {acc:.4f}")


def cmd_pretrain_ssl(args, cfg):
    train, _ = load_data(cfg)
    get_heads(cfg, train, args.model_dir or args.out)
    print(f"self-supervised heads saved under {(args.model_dir or args.out) / 'heads'}")


def cmd_attack(args, cfg):
    train, test = load_data(cfg)
    model = get_classifier(cfg, train, args.model_dir or args.out, args.checkpoint)
    adv = attack_batch(test.images, test.targets, model, cfg.attack)
    _save_batch(args.out / "attacked.npz", adv, test.targets)
    clean = float((predict(model, test.images) == test.targets).float().mean())
    attacked = float((predict(model, adv) == test.targets).float().mean())
    print(f"clean accuracy {clean:.4f}, attacked accuracy {attacked:.4f}, sha256 {tensor_hash(adv)[:16]}")


def cmd_reverse(args, cfg):
    train, test = load_data(cfg)
    source = args.out / "attacked.npz"
    x, y = _load_batch(source) if source.exists() else (test.images, test.targets)
    heads = get_heads(cfg, train, args.model_dir or args.out)
    model = get_classifier(cfg, train, args.model_dir or args.out, args.checkpoint)
    for name, rc in reversal_configs(cfg, heads).items():
        if rc.mode is ReversalMode.NONE:
            continue
        repaired, traces = reverse_in_chunks(x, rc)
        _save_batch(args.out / f"repaired_{name}.npz", repaired, y)
        write_trace_csv(traces, args.out / f"trace_{name}.csv", mode=name)
        acc = float((predict(model, repaired) == y).float().mean())
        print(f"{name}: accuracy after reversal {acc:.4f}")


def cmd_evaluate(args, cfg):
    report = run_experiment(cfg, args.out, args.checkpoint, model_dir=args.model_dir)
    print(report.table())
    print(format_comparisons(compare_modes(report)))


def cmd_report(args, cfg):
    report = read_report_csv(args.out / "report.csv")
    print(report.table())
    print(format_comparisons(compare_modes(report)))


COMMANDS = {
    "train-classifier": cmd_train_classifier,
    "pretrain-ssl": cmd_pretrain_ssl,
    "attack": cmd_attack,
    "reverse": cmd_reverse,
    "evaluate": cmd_evaluate,
    "report": cmd_report,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sslpurify", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", type=Path, help="INI experiment config")
        p.add_argument("--seed", type=int)
        p.add_argument("--data-dir", help="directory with the CIFAR-10 binary batches")
        p.add_argument("--out", type=Path, default=Path("runs/default"))
        p.add_argument("--checkpoint", help="classifier checkpoint to use instead of training")
        p.add_argument("--model-dir", type=Path, help="where trained models are cached (default: --out)")
        p.add_argument("-v", "--verbose", action="store_true")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = _config(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        COMMANDS[args.command](args, cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, FileNotFoundError, CheckpointError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except Exception as exc:  # noqa: BLE001
        logging.getLogger(__name__).debug("runtime failure", exc_info=True)
        print(f"runtime error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
