"""Wire a config to data, models and the evaluation; checkpoints are cached under the output dir."""
from __future__ import annotations

import logging
from pathlib import Path

import torch
import torch.nn as nn

from .config import ExperimentConfig
from .data import Dataset, DataError, SyntheticSpec, generate_synthetic, load_cifar10, split, subset
from .evaluation import EvalReport, evaluate
from .models import (ClassifierSpec, TrainingConfig, import_external, load_checkpoint, save_checkpoint,
                     train_classifier)
from .reversal import ReversalConfig, ReversalMode
from .ssl_tasks import SslHeads, SslTrainingConfig, TaskId, head_checkpoint, pretrain_head

log = logging.getLogger(__name__)


def load_data(cfg: ExperimentConfig) -> tuple[Dataset, Dataset]:
    """(training set, evaluation set of size ``cfg.n``)."""
    if cfg.data_source == "cifar10":
        train, test = load_cifar10(cfg.data_dir)
        if cfg.train_size > len(train) or cfg.n > len(test):
            raise DataError("requested more records than CIFAR-10 provides")
        return subset(train, cfg.train_size, cfg.model_seed), subset(test, cfg.n, cfg.seed + 1)
    full = generate_synthetic(SyntheticSpec(cfg.num_images, cfg.image_size, cfg.num_classes, cfg.model_seed))
    train, rest = split(full, 1 - cfg.train_size / cfg.num_images, cfg.model_seed)
    return train, subset(rest, cfg.n, cfg.seed + 1)


def get_classifier(cfg: ExperimentConfig, train: Dataset, out_dir: Path, checkpoint: str | None = None) -> nn.Module:
    path = checkpoint or cfg.classifier_checkpoint
    if path:
        return load_checkpoint(path).to_model()
    if cfg.classifier_external:
        model, ckpt = import_external(cfg.classifier_external, cfg.classifier_arch,
                                      {"num_classes": train.num_classes} if cfg.classifier_arch == "wrn" else
                                      {"num_classes": train.num_classes, "width": cfg.classifier_width})
        return model
    cached = out_dir / "classifier.ckpt"
    if cached.exists():
        return load_checkpoint(cached).to_model()
    spec = ClassifierSpec(cfg.classifier_arch, train.num_classes, cfg.classifier_width, cfg.model_seed)
    tc = TrainingConfig(cfg.classifier_epochs, cfg.classifier_batch_size, cfg.classifier_lr,
                        adversarial=cfg.adversarial_budget)
    _, ckpt = train_classifier(spec, train, tc, seed=cfg.model_seed)
    save_checkpoint(ckpt, cached)
    # reload so a fresh run and a cached run see identical float32 parameters
    return load_checkpoint(cached).to_model()


def get_heads(cfg: ExperimentConfig, train: Dataset, out_dir: Path) -> SslHeads:
    directory = Path(cfg.ssl_checkpoint_dir) if cfg.ssl_checkpoint_dir else out_dir / "heads"
    heads = {}
    for task in TaskId:
        path = directory / f"{task.value}.ckpt"
        if not path.exists():
            if cfg.ssl_checkpoint_dir:
                raise FileNotFoundError(f"missing head checkpoint {path}")
            tc = SslTrainingConfig(cfg.ssl_epochs, cfg.ssl_batch_size, cfg.ssl_lr, cfg.ssl_width)
            head = pretrain_head(task, train, tc, seed=cfg.model_seed, configs=cfg.ssl)
            save_checkpoint(head_checkpoint(head, {"dataset_hash": train.content_hash, "epochs": cfg.ssl_epochs,
                                                   "seed": cfg.model_seed}), path)
        heads[task] = load_checkpoint(path).to_model()
    return SslHeads(heads[TaskId.CONTRASTIVE], heads[TaskId.ROTATION], heads[TaskId.INPAINTING])


def reversal_configs(cfg: ExperimentConfig, heads: SslHeads | None) -> dict[str, ReversalConfig]:
    return {
        mode.value: ReversalConfig(cfg.reversal_budget, mode, heads if mode is not ReversalMode.NONE else None,
                                   cfg.ssl, cfg.seed, cfg.sign_steps, cfg.task_weights, cfg.reversal_batch_size)
        for mode in cfg.modes
    }


def run_experiment(cfg: ExperimentConfig, out_dir, checkpoint: str | None = None, model_dir=None) -> EvalReport:
    """Evaluate and write the report to ``out_dir``; trained models are cached in ``model_dir`` (default out_dir)."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    model_dir = Path(model_dir) if model_dir else out_dir
    torch.manual_seed(cfg.seed)
    train, test = load_data(cfg)
    classifier = get_classifier(cfg, train, model_dir, checkpoint)
    needs_heads = any(m is not ReversalMode.NONE for m in cfg.modes)
    heads = get_heads(cfg, train, model_dir) if needs_heads else None
    report = evaluate(classifier, test, cfg.attack, reversal_configs(cfg, heads), seed=cfg.seed,
                      keep_traces=cfg.traces)
    report.config = cfg.echo()
    report.write(out_dir)
    return report
