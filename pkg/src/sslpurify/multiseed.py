"""Repeat an experiment over evaluation seeds with shared trained models and summarize."""
from __future__ import annotations

from dataclasses import replace
from pathlib import Path

import numpy as np

from .config import ExperimentConfig
from .evaluation import EvalReport
from .experiment import run_experiment


def run_seeds(cfg: ExperimentConfig, seeds, out_root, model_dir=None, checkpoint=None) -> dict[int, EvalReport]:
    out_root = Path(out_root)
    model_dir = Path(model_dir) if model_dir else out_root / "models"
    reports = {}
    for s in seeds:
        c = replace(cfg, seed=s, attack=replace(cfg.attack, seed=s))
        reports[s] = run_experiment(c, out_root / f"seed{s}", checkpoint, model_dir=model_dir)
    return reports


def mean_accuracy(reports: dict[int, EvalReport], mode: str, condition: str) -> float:
    return float(np.mean([r.accuracy(mode, condition) for r in reports.values()]))


def summary(reports: dict[int, EvalReport]) -> str:
    first = next(iter(reports.values()))
    conditions = sorted({c.input_condition for c in first.cells})
    lines = ["mode  " + "  ".join(f"{c:>18}" for c in conditions)]
    for mode in first.modes:
        cells = []
        for cond in conditions:
            vals = [r.accuracy(mode, cond) for r in reports.values()]
            cells.append(f"{100 * np.mean(vals):6.2f} ({', '.join(f'{100 * v:.1f}' for v in vals)})")
        lines.append(f"{mode:<5} " + "  ".join(f"{c:>18}" for c in cells))
    return "\n".join(lines)
