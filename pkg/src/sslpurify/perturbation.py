"""L-infinity ball arithmetic shared by the attacker and the defender."""
from __future__ import annotations

import enum
import logging
from dataclasses import dataclass

import torch

log = logging.getLogger(__name__)


class NormOrder(str, enum.Enum):
    L_INF = "linf"


@dataclass(frozen=True)
class PerturbationBudget:
    """Radius, step size and iteration count of a bounded search.

    ``epsilon`` and ``step_size`` are in [0, 1] pixel units, so "8" in the
    0-255 convention is ``8 / 255``.
    """

    epsilon: float
    step_size: float
    iterations: int
    norm_order: NormOrder = NormOrder.L_INF

    def __post_init__(self):
        if self.epsilon < 0:
            raise ValueError(f"epsilon must be >= 0, got {self.epsilon}")
        if self.step_size <= 0:
            raise ValueError(f"step_size must be > 0, got {self.step_size}")
        if self.iterations < 0:
            raise ValueError(f"iterations must be >= 0, got {self.iterations}")
        if NormOrder(self.norm_order) is not NormOrder.L_INF:
            raise ValueError("only the L-infinity norm is supported")

    @classmethod
    def from_pixels(cls, epsilon: float, step_size: float, iterations: int) -> "PerturbationBudget":
        """Build a budget from 0-255 pixel units."""
        return cls(epsilon / 255.0, step_size / 255.0, iterations)


def check_image_batch(x: torch.Tensor) -> None:
    if x.dim() != 4:
        raise ValueError(f"expected a [B, C, H, W] batch, got shape {tuple(x.shape)}")


def project_ball(candidate: torch.Tensor, anchor: torch.Tensor, epsilon: float) -> torch.Tensor:
    """Clamp ``candidate`` into the eps-ball around ``anchor``, then into [0, 1]."""
    if candidate.shape != anchor.shape:
        raise ValueError(f"shape mismatch: {tuple(candidate.shape)} vs {tuple(anchor.shape)}")
    if epsilon < 0:
        raise ValueError(f"epsilon must be >= 0, got {epsilon}")
    hi, lo = _ball_bound(anchor, epsilon, 1.0), _ball_bound(anchor, epsilon, -1.0)
    out = torch.maximum(torch.minimum(candidate, hi), lo)
    return out.clamp(0.0, 1.0)


def _ball_bound(anchor: torch.Tensor, epsilon: float, sign: float) -> torch.Tensor:
    # rounding anchor +/- eps to the tensor dtype may overshoot eps by one ulp; step back toward the anchor
    exact = anchor.double() + sign * epsilon
    bound = exact.to(anchor.dtype)
    over = (bound.double() - anchor.double()).abs() > epsilon
    return torch.where(over, torch.nextafter(bound, anchor), bound)


def project_ball_straight_through(candidate: torch.Tensor, anchor: torch.Tensor, epsilon: float) -> torch.Tensor:
    """Same forward value as :func:`project_ball`; backward is the identity in ``candidate``."""
    projected = project_ball(candidate.detach(), anchor.detach(), epsilon)
    return candidate + (projected - candidate).detach()


def uniform_noise(like: torch.Tensor, epsilon: float, generator: torch.Generator) -> torch.Tensor:
    u = torch.rand(like.shape, generator=generator, dtype=like.dtype, device=like.device)
    return (2.0 * u - 1.0) * epsilon


def random_init(anchor: torch.Tensor, epsilon: float, seed: int) -> torch.Tensor:
    """Uniform start inside the eps-ball around ``anchor``; deterministic in ``seed``."""
    if epsilon < 0:
        raise ValueError(f"epsilon must be >= 0, got {epsilon}")
    if epsilon == 0:
        return anchor.clone()
    g = torch.Generator(device=anchor.device).manual_seed(seed)
    return project_ball(anchor + uniform_noise(anchor, epsilon, g), anchor, epsilon)


def loss_weight(task_loss, total_loss):
    """Fraction of the total loss owed to one task.

    Works on floats or on per-example tensors. Zero totals raise for floats;
    tensors must be masked by the caller (see ``reversal``).
    """
    if isinstance(total_loss, torch.Tensor):
        if bool((total_loss <= 0).any()):
            raise ValueError("total loss must be > 0")
        return task_loss / total_loss
    if total_loss <= 0:
        raise ValueError(f"total loss must be > 0, got {total_loss}")
    if task_loss < 0 or task_loss > total_loss * (1 + 1e-12):
        raise ValueError(f"task loss {task_loss} outside [0, {total_loss}]")
    return task_loss / total_loss


def linf_distance(a: torch.Tensor, b: torch.Tensor) -> float:
    """Largest absolute difference, computed in float64 where float32 subtraction is exact."""
    return float((a.double() - b.double()).abs().max()) if a.numel() else 0.0
