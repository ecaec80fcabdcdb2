"""Bounded L-infinity attacks on a classifier: FGSM, PGD, and a defense-aware PGD."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import torch
import torch.nn as nn

from .models import cross_entropy_loss
from .perturbation import PerturbationBudget, linf_distance, project_ball, random_init


@dataclass
class AttackResult:
    adversarial: torch.Tensor
    perturbation: torch.Tensor
    success_mask: torch.Tensor  # True where the attacked input is misclassified
    loss_trace: list[float]
    clean: torch.Tensor | None = None

    @property
    def linf(self) -> float:
        return linf_distance(self.adversarial, self.clean)


def _result(clean, adversarial, labels, logits_fn, trace) -> AttackResult:
    with torch.no_grad():
        wrong = logits_fn(adversarial).argmax(1) != labels
    return AttackResult(adversarial.detach(), (adversarial - clean).detach(), wrong, trace, clean.detach())


def _loss_and_grad(forward: Callable[[torch.Tensor], torch.Tensor], x: torch.Tensor, labels: torch.Tensor):
    x = x.detach().requires_grad_(True)
    per_example = cross_entropy_loss(forward(x), labels, reduction="none")
    (grad,) = torch.autograd.grad(per_example.sum(), x)
    return per_example.detach(), grad


def fgsm(batch: torch.Tensor, labels: torch.Tensor, classifier: nn.Module, epsilon: float) -> AttackResult:
    if epsilon < 0:
        raise ValueError(f"epsilon must be >= 0, got {epsilon}")
    loss, grad = _loss_and_grad(classifier, batch, labels)
    adv = project_ball(batch + epsilon * grad.sign(), batch, epsilon)
    return _result(batch, adv, labels, classifier, [float(loss.mean())])


def _pgd_loop(batch, labels, forward, budget: PerturbationBudget, seed: int, random_start: bool, restarts: int,
              evaluate: Callable[[torch.Tensor], torch.Tensor]) -> tuple[torch.Tensor, list[float]]:
    if restarts < 1:
        raise ValueError("restarts must be >= 1")
    best, best_loss, best_trace = None, None, None
    for r in range(restarts):
        x = random_init(batch, budget.epsilon, seed + r) if random_start else batch.clone()
        trace = []
        for _ in range(budget.iterations):
            loss, grad = _loss_and_grad(forward, x, labels)
            trace.append(float(loss.mean()))
            x = project_ball(x + budget.step_size * grad.sign(), batch, budget.epsilon)
        with torch.no_grad():
            final = cross_entropy_loss(evaluate(x), labels, reduction="none")
        trace.append(float(final.mean()))
        if best is None:
            best, best_loss, best_trace = x, final, trace
        else:
            better = final > best_loss
            best = torch.where(better.view(-1, 1, 1, 1), x, best)
            best_loss = torch.maximum(final, best_loss)
            if trace[-1] > best_trace[-1]:
                best_trace = trace
    return best, best_trace


def pgd_attack(batch: torch.Tensor, labels: torch.Tensor, classifier: nn.Module, budget: PerturbationBudget,
               seed: int = 0, random_start: bool = True, restarts: int = 1) -> AttackResult:
    """Sign-gradient ascent on cross-entropy, projected into the eps-ball each step.

    ``loss_trace[k]`` is the mean loss at the k-th iterate; the last entry is
    the loss of the returned adversarial batch.
    """
    adv, trace = _pgd_loop(batch, labels, classifier, budget, seed, random_start, restarts, classifier)
    return _result(batch, adv, labels, classifier, trace)


def defense_aware_attack(batch: torch.Tensor, labels: torch.Tensor, classifier: nn.Module, reversal,
                         budget: PerturbationBudget, seed: int = 0, unroll_steps: int | None = None,
                         random_start: bool = True, restarts: int = 1) -> AttackResult:
    """PGD against ``classifier(reverse(x))``.

    ``reversal`` is a :class:`~sslpurify.reversal.ReversalConfig` (or None
    for no defense). Gradients are taken through the last ``unroll_steps``
    reversal iterations (all of them by default) with straight-through
    projections; earlier iterations are bypassed with an identity gradient,
    so ``unroll_steps=0`` is BPDA.
    """
    from .reversal import ReversalMode, reverse_differentiable

    if reversal is None or reversal.mode is ReversalMode.NONE:
        forward = classifier
    else:
        depth = reversal.budget.iterations if unroll_steps is None else unroll_steps
        if depth > reversal.budget.iterations:
            raise ValueError(
                f"unroll depth {depth} exceeds the reversal's {reversal.budget.iterations} iterations")
        if depth < 0:
            raise ValueError("unroll depth must be >= 0")

        def forward(x):
            return classifier(reverse_differentiable(x, reversal, depth))

    # success is judged against the defended pipeline
    adv, trace = _pgd_loop(batch, labels, forward, budget, seed, random_start, restarts, forward)
    return _result(batch, adv, labels, forward, trace)
