"""Test-time repair: bounded descent on self-supervised losses before classifying.

The multi-task loop, per iteration k = 1..K at the current iterate x:

    L   = L_s(x) + L_r(x) + L_i(x)                      (per image)
    x' <- x - eta * (L_s/L) * grad L_s(x)
    x' <- x' - eta * (L_r/L) * grad L_r(x)   if k even
    x' <- x' - eta * (L_i/L) * grad L_i(x)   if k odd
    x  <- clip(x', input - eps, input + eps) clipped to [0, 1]

starting from the input plus uniform noise in the eps-ball. Weights are
constants for the step (no gradient flows through them).
"""
from __future__ import annotations

import csv
import enum
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path

import torch
import torch.nn as nn

from .models import predict
from .perturbation import PerturbationBudget, linf_distance, project_ball, project_ball_straight_through, uniform_noise
from .ssl_tasks import SslConfigs, SslHeads, TaskId, TaskLossBundle, task_losses

log = logging.getLogger(__name__)


class ReversalMode(str, enum.Enum):
    MULTI_TASK = "mtl"
    SINGLE_TASK_CONTRASTIVE = "ssl"
    NONE = "none"


DEFAULT_BUDGET = PerturbationBudget.from_pixels(8, 2, 20)


@dataclass
class ReversalConfig:
    budget: PerturbationBudget = DEFAULT_BUDGET
    mode: ReversalMode = ReversalMode.MULTI_TASK
    heads: SslHeads | None = None
    ssl: SslConfigs = field(default_factory=SslConfigs)
    seed: int = 0
    sign_steps: bool = False
    # static multipliers on (L_s, L_r, L_i) before the loss-fraction weighting
    task_weights: tuple[float, float, float] = (1.0, 1.0, 1.0)
    batch_size: int = 128

    def __post_init__(self):
        self.mode = ReversalMode(self.mode)
        if self.mode is not ReversalMode.NONE:
            if self.heads is None:
                raise ValueError(f"{self.mode.value} reversal needs self-supervised heads")
            needed = (
                [self.heads.contrastive, self.heads.rotation, self.heads.inpainting]
                if self.mode is ReversalMode.MULTI_TASK else [self.heads.contrastive]
            )
            if not all(h.trained for h in needed):
                raise ValueError(f"{self.mode.value} reversal needs trained heads")
        if any(w < 0 for w in self.task_weights):
            raise ValueError("task weights must be >= 0")


@dataclass
class ReversalTrace:
    bundles: list[TaskLossBundle] = field(default_factory=list)  # at the start of each iteration
    linf: list[float] = field(default_factory=list)  # after each iteration's projection
    step_norms: list[dict[TaskId, torch.Tensor]] = field(default_factory=list)  # per image L2 norm
    weights: list[dict[TaskId, torch.Tensor]] = field(default_factory=list)
    grad_evals: dict[TaskId, int] = field(default_factory=lambda: {t: 0 for t in TaskId})
    iterates: list[torch.Tensor] = field(default_factory=list)
    initial: TaskLossBundle | None = None  # start point and result, measured with one fixed seed
    final: TaskLossBundle | None = None
    reverse_vector: torch.Tensor | None = None
    skipped: int = 0

    def to_csv(self, path) -> None:
        write_trace_csv([self], path)


def iteration_seed(seed: int, k: int) -> int:
    return seed * 1_000_003 + k


def measure_seed(seed: int) -> int:
    return seed * 1_000_003 + 999_983


TASK_ORDER = (TaskId.CONTRASTIVE, TaskId.ROTATION, TaskId.INPAINTING)


def scheduled_tasks(mode: ReversalMode, k: int) -> tuple[TaskId, ...]:
    """Tasks stepped at iteration ``k`` (1-based)."""
    if mode is ReversalMode.SINGLE_TASK_CONTRASTIVE:
        return (TaskId.CONTRASTIVE,)
    return (TaskId.CONTRASTIVE, TaskId.ROTATION if k % 2 == 0 else TaskId.INPAINTING)


def _per_task(config: ReversalConfig, task: TaskId, x: torch.Tensor, seed: int) -> torch.Tensor:
    w = config.task_weights[TASK_ORDER.index(task)]
    return w * task_losses(task, x, config.heads, config.ssl, seed)


def measure(x: torch.Tensor, config: ReversalConfig, seed: int | None = None) -> TaskLossBundle:
    """Mean (weighted) task losses at ``x``; tasks unused by the mode report 0."""
    seed = measure_seed(config.seed) if seed is None else seed
    tasks = TASK_ORDER if config.mode is ReversalMode.MULTI_TASK else (TaskId.CONTRASTIVE,)
    with torch.no_grad():
        vals = {t: float(_per_task(config, t, x, seed).mean()) if t in tasks else 0.0 for t in TASK_ORDER}
    return TaskLossBundle(vals[TaskId.CONTRASTIVE], vals[TaskId.ROTATION], vals[TaskId.INPAINTING])


def _run(x_in: torch.Tensor, config: ReversalConfig, depth: int | None, trace: ReversalTrace | None,
         record_iterates: bool) -> torch.Tensor:
    budget, mode = config.budget, config.mode
    eps, eta, K = budget.epsilon, budget.step_size, budget.iterations
    differentiable = depth is not None
    start = K - depth if differentiable else K  # first iteration index kept in the graph is start + 1
    anchor = x_in.detach()
    gen = torch.Generator(device=x_in.device).manual_seed(config.seed)
    noise = uniform_noise(anchor, eps, gen) if eps > 0 else torch.zeros_like(anchor)
    if differentiable and start == 0:
        x = project_ball_straight_through(x_in + noise, anchor, eps)
    else:
        x = project_ball(anchor + noise, anchor, eps)
    if trace is not None:
        trace.initial = measure(x.detach(), config)

    for k in range(1, K + 1):
        graph = differentiable and k > start
        if graph and k == start + 1 and start > 0:
            x = x_in + (x - x_in).detach()
        xk = x if graph else x.detach().requires_grad_(True)
        seed = iteration_seed(config.seed, k)
        stepped = scheduled_tasks(mode, k)
        losses, grads = {}, {}
        for task in TASK_ORDER:
            if task in stepped:
                per = _per_task(config, task, xk, seed)
                (grads[task],) = torch.autograd.grad(per.sum(), xk, create_graph=graph)
                losses[task] = per.detach()
                if trace is not None:
                    trace.grad_evals[task] += 1
            elif mode is ReversalMode.MULTI_TASK:
                with torch.no_grad():
                    losses[task] = _per_task(config, task, xk.detach(), seed)
        if mode is ReversalMode.MULTI_TASK:
            total = losses[TaskId.CONTRASTIVE] + losses[TaskId.ROTATION] + losses[TaskId.INPAINTING]
            live = total > 0
            if not bool(live.all()):
                n = int((~live).sum())
                log.warning("iteration %d: %d image(s) with zero total loss; update skipped", k, n)
                if trace is not None:
                    trace.skipped += n
            safe_total = torch.where(live, total, torch.ones_like(total))
            weights = {t: torch.where(live, losses[t] / safe_total, torch.zeros_like(total)) for t in stepped}
        else:
            weights = {TaskId.CONTRASTIVE: torch.ones_like(losses[TaskId.CONTRASTIVE])}

        new = xk
        steps = {}
        for task in stepped:
            direction = grads[task].sign() if config.sign_steps else grads[task]
            step = eta * weights[task].view(-1, 1, 1, 1) * direction
            new = new - step
            if trace is not None:
                steps[task] = step.detach().flatten(1).norm(dim=1)
        if graph:
            x = project_ball_straight_through(new, anchor, eps)
        else:
            x = project_ball(new.detach(), anchor, eps)

        if trace is not None:
            vals = {t: float(losses[t].mean()) if t in losses else 0.0 for t in TASK_ORDER}
            trace.bundles.append(TaskLossBundle(vals[TaskId.CONTRASTIVE], vals[TaskId.ROTATION], vals[TaskId.INPAINTING]))
            trace.linf.append(linf_distance(x.detach(), anchor))
            trace.step_norms.append(steps)
            trace.weights.append({t: w.detach() for t, w in weights.items()})
            if record_iterates:
                trace.iterates.append(xk.detach().clone())

    if differentiable and start == K and K > 0:
        x = x_in + (x - x_in).detach()
    if trace is not None:
        trace.final = measure(x.detach(), config)
        trace.reverse_vector = (x.detach() - anchor)
    return x


def _reverse(x: torch.Tensor, config: ReversalConfig, record_iterates: bool = False) -> tuple[torch.Tensor, ReversalTrace]:
    trace = ReversalTrace()
    if config.mode is ReversalMode.NONE:
        trace.reverse_vector = torch.zeros_like(x)
        return x.clone(), trace
    with torch.enable_grad():
        out = _run(x, config, None, trace, record_iterates)
    return out.detach(), trace


def reverse_multitask(x: torch.Tensor, config: ReversalConfig, record_iterates: bool = False):
    """Repair a batch with the alternating multi-task loop; returns (repaired, trace)."""
    if config.mode is not ReversalMode.MULTI_TASK:
        raise ValueError("reverse_multitask needs mode MULTI_TASK")
    return _reverse(x, config, record_iterates)


def reverse_singletask(x: torch.Tensor, config: ReversalConfig, record_iterates: bool = False):
    """Contrastive-only repair with unit weight (the single-task baseline)."""
    if config.mode is not ReversalMode.SINGLE_TASK_CONTRASTIVE:
        raise ValueError("reverse_singletask needs mode SINGLE_TASK_CONTRASTIVE")
    return _reverse(x, config, record_iterates)


def reverse(x: torch.Tensor, config: ReversalConfig, record_iterates: bool = False):
    return _reverse(x, config, record_iterates)


def reverse_differentiable(x: torch.Tensor, config: ReversalConfig, depth: int | None = None) -> torch.Tensor:
    """Reversal output that stays in the autograd graph of ``x`` (for adaptive attacks)."""
    if config.mode is ReversalMode.NONE:
        return x
    depth = config.budget.iterations if depth is None else depth
    if not x.requires_grad:
        return _reverse(x, config)[0]
    with torch.enable_grad():
        return _run(x, config, depth, None, False)


def reverse_in_chunks(x: torch.Tensor, config: ReversalConfig) -> tuple[torch.Tensor, list[ReversalTrace]]:
    """Repair a large batch chunk by chunk; chunk ``i`` uses seed ``config.seed + i``."""
    outs, traces = [], []
    for i, start in enumerate(range(0, len(x), config.batch_size)):
        out, trace = _reverse(x[start:start + config.batch_size], replace(config, seed=config.seed + i))
        outs.append(out)
        traces.append(trace)
    if not outs:
        return x.clone(), traces
    return torch.cat(outs), traces


def defend_and_classify(x: torch.Tensor, classifier: nn.Module, config: ReversalConfig) -> torch.Tensor:
    if config.mode is ReversalMode.NONE:
        return predict(classifier, x)
    repaired, _ = reverse_in_chunks(x, config)
    return predict(classifier, repaired)


TRACE_COLUMNS = ["iteration", "l_s", "l_r", "l_i", "total", "linf_dist"]


def write_trace_csv(traces: list[ReversalTrace], path, mode: str | None = None) -> None:
    """One row per (chunk, iteration); the ``chunk`` and ``mode`` columns are added when useful."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    extra = (["mode"] if mode else []) + (["chunk"] if len(traces) > 1 else [])
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(extra + TRACE_COLUMNS)
        for c, trace in enumerate(traces):
            for k, (b, d) in enumerate(zip(trace.bundles, trace.linf), start=1):
                prefix = ([mode] if mode else []) + ([c] if len(traces) > 1 else [])
                w.writerow(prefix + [k, f"{b.l_s:.8g}", f"{b.l_r:.8g}", f"{b.l_i:.8g}", f"{b.total:.8g}", f"{d:.8g}"])
