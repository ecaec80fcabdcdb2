"""Contrastive, rotation and inpainting tasks: heads, augmentations, losses, pretraining.

Every task exposes a per-example loss (a ``[B]`` tensor, differentiable in
the input batch) and a ``*_loss`` wrapper returning ``(mean loss, gradient of
the mean)``. Losses never touch head parameters' ``.grad``.
"""
from __future__ import annotations

import enum
import logging
import math
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .data import Dataset, batches
from .models import Checkpoint, ConvEncoder, build_model, register_arch

log = logging.getLogger(__name__)


class TaskId(str, enum.Enum):
    CONTRASTIVE = "contrastive"
    ROTATION = "rotation"
    INPAINTING = "inpainting"


# ---------------------------------------------------------------------------
# configs

@dataclass(frozen=True)
class AugmentationConfig:
    crop_scale: tuple[float, float] = (0.5, 1.0)
    brightness: float = 0.4
    contrast: float = 0.4
    saturation: float = 0.4
    jitter_prob: float = 0.8
    flip_prob: float = 0.5
    grayscale_prob: float = 0.2


@dataclass(frozen=True)
class ContrastiveConfig:
    temperature: float = 0.5
    num_views: int = 2
    augmentation: AugmentationConfig = field(default_factory=AugmentationConfig)

    def __post_init__(self):
        if self.temperature <= 0:
            raise ValueError("temperature must be > 0")
        if self.num_views != 2:
            raise ValueError("only two views per image are supported")


@dataclass(frozen=True)
class RotationConfig:
    num_rotations: int = 4

    def __post_init__(self):
        if not 1 <= self.num_rotations <= 4:
            raise ValueError("num_rotations must be in 1..4 (multiples of 90 degrees)")


@dataclass(frozen=True)
class InpaintingConfig:
    center_fraction: float = 0.5
    mask: torch.Tensor | None = None  # explicit [H, W] override, 1 = dropped pixel

    def __post_init__(self):
        if not 0 < self.center_fraction < 1:
            raise ValueError("center_fraction must be in (0, 1)")

    def mask_for(self, height: int, width: int, dtype=torch.float32) -> torch.Tensor:
        if self.mask is not None:
            if tuple(self.mask.shape) != (height, width):
                raise ValueError(f"mask shape {tuple(self.mask.shape)} does not match image {height}x{width}")
            return self.mask.to(dtype)
        return center_mask(height, width, self.center_fraction, dtype)


@dataclass(frozen=True)
class SslConfigs:
    contrastive: ContrastiveConfig = field(default_factory=ContrastiveConfig)
    rotation: RotationConfig = field(default_factory=RotationConfig)
    inpainting: InpaintingConfig = field(default_factory=InpaintingConfig)


def center_mask(height: int, width: int, fraction: float, dtype=torch.float32) -> torch.Tensor:
    mh, mw = max(1, round(height * fraction)), max(1, round(width * fraction))
    top, left = (height - mh) // 2, (width - mw) // 2
    m = torch.zeros(height, width, dtype=dtype)
    m[top:top + mh, left:left + mw] = 1
    return m


# ---------------------------------------------------------------------------
# heads

class ContrastiveHead(nn.Module):
    task = TaskId.CONTRASTIVE

    def __init__(self, width: int = 32, proj_dim: int = 64):
        super().__init__()
        self.encoder = ConvEncoder(width)
        d = self.encoder.num_features
        self.projector = nn.Sequential(nn.Linear(d, d), nn.ReLU(), nn.Linear(d, proj_dim))
        self.trained = False

    def forward(self, x):
        return F.normalize(self.projector(self.encoder(x)), dim=1)


class RotationHead(nn.Module):
    task = TaskId.ROTATION

    def __init__(self, width: int = 32, num_rotations: int = 4):
        super().__init__()
        self.encoder = ConvEncoder(width)
        self.fc = nn.Linear(self.encoder.num_features, num_rotations)
        self.trained = False

    def forward(self, x):
        return self.fc(self.encoder(x))


class InpaintingHead(nn.Module):
    """Convolutional encoder-decoder; spatial size must be divisible by 4."""

    task = TaskId.INPAINTING

    def __init__(self, width: int = 32):
        super().__init__()
        w = width
        self.encoder = nn.Sequential(
            nn.Conv2d(3, w, 3, padding=1), nn.ReLU(),
            nn.Conv2d(w, 2 * w, 4, stride=2, padding=1), nn.ReLU(),
            nn.Conv2d(2 * w, 4 * w, 4, stride=2, padding=1), nn.ReLU(),
            nn.Conv2d(4 * w, 4 * w, 3, padding=2, dilation=2), nn.ReLU(),
        )
        self.decoder = nn.Sequential(
            nn.ConvTranspose2d(4 * w, 2 * w, 4, stride=2, padding=1), nn.ReLU(),
            nn.ConvTranspose2d(2 * w, w, 4, stride=2, padding=1), nn.ReLU(),
            nn.Conv2d(w, 3, 3, padding=1),
        )
        self.trained = False

    def forward(self, x):
        return torch.sigmoid(self.decoder(self.encoder(x)))


@register_arch("contrastive-head")
def _contrastive_head(width: int = 32, proj_dim: int = 64):
    return ContrastiveHead(width, proj_dim)


@register_arch("rotation-head")
def _rotation_head(width: int = 32, num_rotations: int = 4):
    return RotationHead(width, num_rotations)


@register_arch("inpainting-head")
def _inpainting_head(width: int = 32):
    return InpaintingHead(width)


HEAD_ARCH = {
    TaskId.CONTRASTIVE: "contrastive-head",
    TaskId.ROTATION: "rotation-head",
    TaskId.INPAINTING: "inpainting-head",
}


def make_head(task: TaskId | str, width: int = 32, seed: int = 0, **kwargs) -> nn.Module:
    torch.manual_seed(seed)
    head = build_model(HEAD_ARCH[TaskId(task)], width=width, **kwargs)
    head.eval()
    return head


def _check_head(head: nn.Module, task: TaskId) -> None:
    if getattr(head, "task", None) is not task:
        raise ValueError(f"expected a {task.value} head, got {getattr(head, 'task', type(head).__name__)}")


@dataclass
class SslHeads:
    contrastive: nn.Module
    rotation: nn.Module
    inpainting: nn.Module

    def __post_init__(self):
        _check_head(self.contrastive, TaskId.CONTRASTIVE)
        _check_head(self.rotation, TaskId.ROTATION)
        _check_head(self.inpainting, TaskId.INPAINTING)

    def all_trained(self) -> bool:
        return all(h.trained for h in (self.contrastive, self.rotation, self.inpainting))

    def to(self, dtype) -> "SslHeads":
        for h in (self.contrastive, self.rotation, self.inpainting):
            h.to(dtype)
        return self


def head_checkpoint(head: nn.Module, metadata: dict | None = None) -> Checkpoint:
    meta = {"task": head.task.value, "trained": bool(head.trained), **(metadata or {})}
    return Checkpoint.from_model(head, "ssl_head", meta)


# ---------------------------------------------------------------------------
# augmentations (sampled once per call, then a fixed differentiable map)

def _gray(x: torch.Tensor) -> torch.Tensor:
    w = torch.tensor([0.299, 0.587, 0.114], dtype=x.dtype, device=x.device)
    return (x * w.view(1, 3, 1, 1)).sum(1, keepdim=True)


def augment(x: torch.Tensor, config: AugmentationConfig, generator: torch.Generator) -> torch.Tensor:
    """Random resized crop, colour jitter, then random flip and grayscale.

    All sampled parameters come from ``generator``; given them, the output
    is a linear function of ``x`` (crop via bilinear resampling, jitter and
    grayscale as affine channel maps), so gradients flow to ``x``.
    """
    b = x.shape[0]
    dt, dev = x.dtype, x.device

    def u(lo, hi, n=b):
        return lo + (hi - lo) * torch.rand(n, generator=generator, dtype=torch.float64).to(dt)

    # crop: square box with area fraction in crop_scale, resized back to full size
    side = u(*config.crop_scale).sqrt()
    cx = (u(0, 1) * 2 - 1) * (1 - side)
    cy = (u(0, 1) * 2 - 1) * (1 - side)
    theta = torch.zeros(b, 2, 3, dtype=dt)
    theta[:, 0, 0] = side
    theta[:, 1, 1] = side
    theta[:, 0, 2] = cx
    theta[:, 1, 2] = cy
    grid = F.affine_grid(theta.to(dev), list(x.shape), align_corners=False)
    x = F.grid_sample(x, grid, mode="bilinear", padding_mode="border", align_corners=False)

    # colour jitter, applied per image with probability jitter_prob
    apply = (u(0, 1) < config.jitter_prob).to(dt).view(b, 1, 1, 1).to(dev)
    bright = u(1 - config.brightness, 1 + config.brightness).view(b, 1, 1, 1).to(dev)
    contr = u(1 - config.contrast, 1 + config.contrast).view(b, 1, 1, 1).to(dev)
    sat = u(1 - config.saturation, 1 + config.saturation).view(b, 1, 1, 1).to(dev)
    j = x * bright
    j = contr * j + (1 - contr) * _gray(j).mean(dim=(2, 3), keepdim=True)
    j = sat * j + (1 - sat) * _gray(j)
    x = apply * j + (1 - apply) * x

    flip = (u(0, 1) < config.flip_prob).view(b, 1, 1, 1).to(dev)
    x = torch.where(flip, x.flip(-1), x)
    gray = (u(0, 1) < config.grayscale_prob).view(b, 1, 1, 1).to(dev)
    return torch.where(gray, _gray(x).expand_as(x), x)


# ---------------------------------------------------------------------------
# contrastive

def nt_xent(similarity: torch.Tensor, positives: torch.Tensor, temperature: float,
            num_anchors: int | None = None) -> torch.Tensor:
    """Per-anchor contrastive cross-entropy.

    ``similarity`` is ``[A, N]`` (anchors are the first ``A`` candidates);
    each anchor's softmax runs over every candidate except itself and the
    target is ``positives[i]``.
    """
    a = similarity.shape[0] if num_anchors is None else num_anchors
    logits = similarity[:a] / temperature
    self_mask = torch.zeros_like(logits, dtype=torch.bool)
    idx = torch.arange(a, device=logits.device)
    self_mask[idx, idx] = True
    logits = logits.masked_fill(self_mask, float("-inf"))
    return F.cross_entropy(logits, positives, reduction="none")


def contrastive_losses(batch: torch.Tensor, head: nn.Module, config: ContrastiveConfig, seed: int,
                       negatives: torch.Tensor | None = None) -> torch.Tensor:
    """Per-image loss: mean over the image's two views of the view-anchored NT-Xent.

    Candidates for each anchor are the other view of the same image
    (positive), both views of every other image in ``batch``, and one view
    of each image in ``negatives``.
    """
    _check_head(head, TaskId.CONTRASTIVE)
    b = batch.shape[0]
    n_extra = 0 if negatives is None else negatives.shape[0]
    if 2 * b - 1 + n_extra < 2:
        raise ValueError("contrastive loss needs at least one negative: batch of 2+ or external negatives")
    g = torch.Generator().manual_seed(seed)
    views = [augment(batch, config.augmentation, g) for _ in range(2)]
    cands = torch.cat(views + ([augment(negatives, config.augmentation, g)] if n_extra else []))
    z = head(cands)
    sim = z[: 2 * b] @ z.T
    pos = torch.cat([torch.arange(b, 2 * b), torch.arange(0, b)]).to(batch.device)
    per_anchor = nt_xent(sim, pos, config.temperature)
    return 0.5 * (per_anchor[:b] + per_anchor[b:])


# ---------------------------------------------------------------------------
# rotation

def rotate(batch: torch.Tensor, k: int, num_rotations: int = 4) -> torch.Tensor:
    """Rotate by ``k`` quarter turns (counter-clockwise); a lossless pixel permutation."""
    if not 0 <= k < num_rotations:
        raise ValueError(f"rotation index {k} outside [0, {num_rotations})")
    if batch.shape[-1] != batch.shape[-2]:
        raise ValueError("rotations need square images")
    return torch.rot90(batch, k, dims=(-2, -1)) if k else batch


def rotation_losses(batch: torch.Tensor, head: nn.Module, config: RotationConfig) -> torch.Tensor:
    _check_head(head, TaskId.ROTATION)
    if batch.shape[-1] != batch.shape[-2]:
        raise ValueError("rotation loss needs square images")
    b, k = batch.shape[0], config.num_rotations
    rotated = torch.cat([rotate(batch, i, k) for i in range(k)])
    target = torch.arange(k, device=batch.device).repeat_interleave(b)
    ce = F.cross_entropy(head(rotated), target, reduction="none")
    return ce.view(k, b).mean(0)


# ---------------------------------------------------------------------------
# inpainting

def inpainting_losses(batch: torch.Tensor, head: nn.Module, config: InpaintingConfig) -> torch.Tensor:
    """Per-image squared L2 norm of the reconstruction error on the dropped pixels."""
    _check_head(head, TaskId.INPAINTING)
    mask = config.mask_for(batch.shape[-2], batch.shape[-1], batch.dtype).to(batch.device)
    recon = head((1 - mask) * batch)
    return (mask * (batch - recon)).pow(2).flatten(1).sum(1)


# ---------------------------------------------------------------------------
# loss + gradient wrappers

def _value_and_grad(fn, batch: torch.Tensor) -> tuple[float, torch.Tensor]:
    x = batch.detach().requires_grad_(True)
    loss = fn(x).mean()
    (grad,) = torch.autograd.grad(loss, x)
    return float(loss.detach()), grad


def contrastive_loss(batch, head, config: ContrastiveConfig, seed: int, negatives=None):
    return _value_and_grad(lambda x: contrastive_losses(x, head, config, seed, negatives), batch)


def rotation_loss(batch, head, config: RotationConfig):
    return _value_and_grad(lambda x: rotation_losses(x, head, config), batch)


def inpainting_loss(batch, head, config: InpaintingConfig):
    return _value_and_grad(lambda x: inpainting_losses(x, head, config), batch)


def task_losses(task: TaskId, x: torch.Tensor, heads: SslHeads, configs: SslConfigs, seed: int) -> torch.Tensor:
    """Per-example loss of one task; differentiable in ``x``."""
    task = TaskId(task)
    if task is TaskId.CONTRASTIVE:
        return contrastive_losses(x, heads.contrastive, configs.contrastive, seed)
    if task is TaskId.ROTATION:
        return rotation_losses(x, heads.rotation, configs.rotation)
    return inpainting_losses(x, heads.inpainting, configs.inpainting)


@dataclass(frozen=True)
class TaskLossBundle:
    l_s: float
    l_r: float
    l_i: float

    @property
    def total(self) -> float:
        return self.l_s + self.l_r + self.l_i

    def weights(self) -> tuple[float, float, float]:
        from .perturbation import loss_weight
        return tuple(loss_weight(v, self.total) for v in (self.l_s, self.l_r, self.l_i))


def bundle_losses(batch: torch.Tensor, heads: SslHeads, configs: SslConfigs, seed: int
                  ) -> tuple[TaskLossBundle, dict[TaskId, torch.Tensor]]:
    """All three mean losses plus one gradient per task (not summed)."""
    if not heads.all_trained():
        raise ValueError("every self-supervised head must be trained")
    values, grads = {}, {}
    for task in TaskId:
        values[task], grads[task] = _value_and_grad(lambda x: task_losses(task, x, heads, configs, seed), batch)
    bundle = TaskLossBundle(values[TaskId.CONTRASTIVE], values[TaskId.ROTATION], values[TaskId.INPAINTING])
    return bundle, grads


# ---------------------------------------------------------------------------
# pretraining

@dataclass
class SslTrainingConfig:
    epochs: int = 5
    batch_size: int = 128
    lr: float = 1e-3
    width: int = 32


def _training_loss(head, task: TaskId, x: torch.Tensor, configs: SslConfigs, seed: int) -> torch.Tensor:
    if task is TaskId.CONTRASTIVE:
        return contrastive_losses(x, head, configs.contrastive, seed).mean()
    if task is TaskId.ROTATION:
        return rotation_losses(x, head, configs.rotation).mean()
    return inpainting_losses(x, head, configs.inpainting).mean()


def pretrain_head(task: TaskId | str, dataset: Dataset, config: SslTrainingConfig | None = None,
                  seed: int = 0, configs: SslConfigs | None = None) -> nn.Module:
    """Train one self-supervised head on unlabeled images (labels are ignored)."""
    task = TaskId(task)
    config = config or SslTrainingConfig()
    configs = configs or SslConfigs()
    if len(dataset) == 0:
        raise ValueError("cannot pretrain on an empty dataset")
    kwargs = {"num_rotations": configs.rotation.num_rotations} if task is TaskId.ROTATION else {}
    head = make_head(task, config.width, seed, **kwargs)
    if config.epochs == 0:
        return head
    torch.manual_seed(seed)
    opt = torch.optim.Adam(head.parameters(), lr=config.lr)
    head.train()
    step = 0
    for epoch in range(config.epochs):
        running = []
        for x, _ in batches(dataset, config.batch_size, seed=seed * 7919 + epoch):
            if task is TaskId.CONTRASTIVE and len(x) < 2:
                continue
            loss = _training_loss(head, task, x, configs, seed * 1_000_003 + step)
            opt.zero_grad()
            loss.backward()
            opt.step()
            running.append(float(loss.detach()))
            step += 1
        log.info("%s epoch %d: loss %.4f", task.value, epoch, float(np.mean(running)) if running else math.nan)
    head.eval()
    head.trained = True
    return head


@torch.no_grad()
def evaluate_head(head: nn.Module, dataset: Dataset, configs: SslConfigs | None = None,
                  seed: int = 0, batch_size: int = 256) -> float:
    """Mean task loss of ``head`` over ``dataset``."""
    configs = configs or SslConfigs()
    total, count = 0.0, 0
    for i, (x, _) in enumerate(batches(dataset, batch_size)):
        if head.task is TaskId.CONTRASTIVE and len(x) < 2:
            continue
        total += float(_training_loss(head, head.task, x, configs, seed + i)) * len(x)
        count += len(x)
    return total / count


@torch.no_grad()
def rotation_accuracy(head: nn.Module, dataset: Dataset, config: RotationConfig | None = None) -> float:
    _check_head(head, TaskId.ROTATION)
    config = config or RotationConfig()
    correct, count = 0, 0
    for x, _ in batches(dataset, 256):
        for k in range(config.num_rotations):
            correct += int((head(rotate(x, k, config.num_rotations)).argmax(1) == k).sum())
            count += len(x)
    return correct / count
