"""Clean/attacked accuracy per reversal mode, binomial errors, and pairwise z tests."""
from __future__ import annotations

import csv
import hashlib
import io
import json
import math
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import torch
import torch.nn as nn

from .attacks import defense_aware_attack, fgsm, pgd_attack
from .data import Dataset
from .models import predict
from .perturbation import PerturbationBudget
from .reversal import ReversalConfig, ReversalMode, reverse_in_chunks, write_trace_csv
from .ssl_tasks import TaskId

CSV_COLUMNS = ["mode", "input_condition", "n", "correct", "accuracy", "stderr"]
Z_95 = 1.959963984540054


def standard_error(p: float, n: int) -> float:
    if n <= 0:
        raise ValueError("n must be > 0")
    return math.sqrt(p * (1.0 - p) / n)


def two_proportion_z(p1: float, p2: float, n1: int, n2: int) -> float:
    """Pooled two-proportion z statistic for ``p1 - p2``."""
    pooled = (p1 * n1 + p2 * n2) / (n1 + n2)
    var = pooled * (1 - pooled) * (1 / n1 + 1 / n2)
    if var == 0:
        return 0.0
    return (p1 - p2) / math.sqrt(var)


@dataclass(frozen=True)
class AttackSpec:
    kind: str = "pgd"  # none | fgsm | pgd
    budget: PerturbationBudget = PerturbationBudget.from_pixels(8, 2, 20)
    seed: int = 0
    restarts: int = 1
    adaptive: bool = False
    unroll_steps: int | None = None
    batch_size: int = 250

    def __post_init__(self):
        if self.kind not in ("none", "fgsm", "pgd"):
            raise ValueError(f"unknown attack kind {self.kind!r}")


@dataclass
class Cell:
    mode: str
    input_condition: str
    n: int
    correct: int

    @property
    def accuracy(self) -> float:
        return self.correct / self.n

    @property
    def stderr(self) -> float:
        return standard_error(self.accuracy, self.n)


@dataclass
class EvalReport:
    cells: list[Cell] = field(default_factory=list)
    config: dict = field(default_factory=dict)
    attacked_hash: str = ""
    grad_evals: dict[str, dict[str, int]] = field(default_factory=dict)
    grad_evals_per_iteration: dict[str, float] = field(default_factory=dict)
    wall_clock: dict[str, float] = field(default_factory=dict)
    traces: dict = field(default_factory=dict)

    def cell(self, mode: str, condition: str) -> Cell:
        for c in self.cells:
            if c.mode == mode and c.input_condition == condition:
                return c
        raise KeyError((mode, condition))

    def accuracy(self, mode: str, condition: str) -> float:
        return self.cell(mode, condition).accuracy

    @property
    def modes(self) -> list[str]:
        return list(dict.fromkeys(c.mode for c in self.cells))

    def csv_text(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        for c in self.cells:
            w.writerow([c.mode, c.input_condition, c.n, c.correct, f"{c.accuracy:.6f}", f"{c.stderr:.6f}"])
        return buf.getvalue()

    def table(self) -> str:
        conditions = list(dict.fromkeys(c.input_condition for c in self.cells))
        head = f"{'reversal':<10}" + "".join(f"{cond:>24}" for cond in conditions)
        lines = [head, "-" * len(head)]
        for mode in self.modes:
            row = f"{mode:<10}"
            for cond in conditions:
                try:
                    c = self.cell(mode, cond)
                    row += f"{100 * c.accuracy:>15.1f}% ± {100 * c.stderr:.1f}"
                except KeyError:
                    row += f"{'-':>24}"
            lines.append(row)
        return "\n".join(lines) + "\n"

    def write(self, out_dir) -> dict[str, Path]:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        paths = {"csv": out / "report.csv", "table": out / "report.txt", "json": out / "report.json"}
        paths["csv"].write_text(self.csv_text())
        summary = self.table() + "\n" + format_comparisons(compare_modes(self))
        paths["table"].write_text(summary)
        paths["json"].write_text(json.dumps({
            "cells": [{**c.__dict__, "accuracy": c.accuracy, "stderr": c.stderr} for c in self.cells],
            "config": self.config,
            "attacked_hash": self.attacked_hash,
            "grad_evals": self.grad_evals,
            "grad_evals_per_iteration": self.grad_evals_per_iteration,
            "wall_clock_seconds": self.wall_clock,
            # per reversal chunk: [initial total, final total]
            "batch_totals": {f"{mode}/{cond}": [[t.initial.total, t.final.total] for t in traces]
                             for (mode, cond), traces in self.traces.items() if traces},
        }, indent=2, sort_keys=True))
        for (mode, cond), traces in self.traces.items():
            if traces:
                write_trace_csv(traces, out / f"trace_{mode}_{cond}.csv", mode=mode)
        return paths


def read_report_csv(path) -> EvalReport:
    report = EvalReport()
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            report.cells.append(Cell(row["mode"], row["input_condition"], int(row["n"]), int(row["correct"])))
    return report


@dataclass(frozen=True)
class Comparison:
    mode_a: str
    mode_b: str
    condition: str
    difference: float
    z: float

    @property
    def significant(self) -> bool:
        return abs(self.z) > Z_95


def compare_modes(report: EvalReport) -> list[Comparison]:
    """Two-proportion z tests for every pair of modes within each input condition."""
    out = []
    conditions = list(dict.fromkeys(c.input_condition for c in report.cells))
    for cond in conditions:
        cells = [c for c in report.cells if c.input_condition == cond]
        for i, a in enumerate(cells):
            for b in cells[i + 1:]:
                if a.n != b.n:
                    raise ValueError(f"cannot compare {a.mode} (n={a.n}) with {b.mode} (n={b.n})")
                out.append(Comparison(a.mode, b.mode, cond, a.accuracy - b.accuracy,
                                      two_proportion_z(a.accuracy, b.accuracy, a.n, b.n)))
    return out


def format_comparisons(comparisons: list[Comparison]) -> str:
    lines = [f"{'condition':<18}{'pair':<14}{'diff (pts)':>11}{'z':>9}  95%"]
    for c in comparisons:
        lines.append(f"{c.condition:<18}{c.mode_a + '-' + c.mode_b:<14}{100 * c.difference:>11.2f}"
                     f"{c.z:>9.3f}  {'yes' if c.significant else 'no'}")
    return "\n".join(lines) + "\n"


def tensor_hash(x: torch.Tensor) -> str:
    return hashlib.sha256(x.detach().cpu().contiguous().numpy().tobytes()).hexdigest()


def attack_batch(x: torch.Tensor, y: torch.Tensor, classifier: nn.Module, spec: AttackSpec,
                 reversal: ReversalConfig | None = None) -> torch.Tensor:
    """Attack ``x`` chunk by chunk (chunk ``i`` seeded ``spec.seed + i``)."""
    if spec.kind == "none" or spec.budget.epsilon == 0:
        return x.clone()
    outs = []
    for i, s in enumerate(range(0, len(x), spec.batch_size)):
        xb, yb = x[s:s + spec.batch_size], y[s:s + spec.batch_size]
        if reversal is not None:
            res = defense_aware_attack(xb, yb, classifier, replace(reversal, seed=reversal.seed + i), spec.budget,
                                       seed=spec.seed + i, unroll_steps=spec.unroll_steps, restarts=spec.restarts)
        elif spec.kind == "fgsm":
            res = fgsm(xb, yb, classifier, spec.budget.epsilon)
        else:
            res = pgd_attack(xb, yb, classifier, spec.budget, seed=spec.seed + i, restarts=spec.restarts)
        outs.append(res.adversarial)
    return torch.cat(outs)


def evaluate(classifier: nn.Module, dataset: Dataset, attack: AttackSpec, modes: dict[str, ReversalConfig],
             seed: int = 0, keep_traces: bool = False) -> EvalReport:
    """Score every reversal mode on the same clean and attacked inputs.

    The reversal chunk seeds are ``seed`` based and shared by all modes;
    with ``attack.adaptive`` each mode is additionally attacked through its
    own reversal (``attacked_adaptive`` rows).
    """
    n = len(dataset)
    if n == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    x, y = dataset.images, dataset.targets
    report = EvalReport()
    t0 = time.perf_counter()
    adv = attack_batch(x, y, classifier, attack)
    report.wall_clock["attack"] = time.perf_counter() - t0
    report.attacked_hash = tensor_hash(adv)

    for name, config in modes.items():
        config = replace(config, seed=seed)
        inputs = {"clean": x, "attacked": adv}
        if attack.adaptive and config.mode is not ReversalMode.NONE:
            t0 = time.perf_counter()
            inputs["attacked_adaptive"] = attack_batch(x, y, classifier, attack, reversal=config)
            report.wall_clock[f"{name}/adaptive_attack"] = time.perf_counter() - t0
        elif attack.adaptive:
            inputs["attacked_adaptive"] = adv
        evals = {t.value: 0 for t in TaskId}
        iterations = 0
        for cond, data in inputs.items():
            t0 = time.perf_counter()
            if config.mode is ReversalMode.NONE:
                preds, traces = predict(classifier, data), []
            else:
                repaired, traces = reverse_in_chunks(data, config)
                preds = predict(classifier, repaired)
            report.wall_clock[f"{name}/{cond}"] = time.perf_counter() - t0
            report.cells.append(Cell(name, cond, n, int((preds == y).sum())))
            for tr in traces:
                for t, c in tr.grad_evals.items():
                    evals[t.value] += c
                iterations += len(tr.bundles)
            if keep_traces:
                report.traces[(name, cond)] = traces
        report.grad_evals[name] = evals
        report.grad_evals_per_iteration[name] = sum(evals.values()) / iterations if iterations else 0.0
    return report
