"""Classifiers, training loops and the binary checkpoint container."""
from __future__ import annotations

import hashlib
import io
import json
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .data import Dataset, batches
from .perturbation import PerturbationBudget

log = logging.getLogger(__name__)

ARCHITECTURES: dict[str, Callable[..., nn.Module]] = {}


def register_arch(name: str):
    def deco(factory):
        ARCHITECTURES[name] = factory
        return factory
    return deco


def build_model(arch: str, **kwargs) -> nn.Module:
    if arch not in ARCHITECTURES:
        from . import ssl_tasks  # noqa: F401  (registers the head architectures)
    try:
        factory = ARCHITECTURES[arch]
    except KeyError:
        raise ValueError(f"unknown architecture {arch!r}; known: {sorted(ARCHITECTURES)}") from None
    model = factory(**kwargs)
    model.arch = arch
    model.arch_kwargs = dict(kwargs)
    return model


class ConvEncoder(nn.Module):
    """Three stride-2 stages and global average pooling; any H, W >= 8."""

    def __init__(self, width: int = 32, in_channels: int = 3):
        super().__init__()
        self.features = nn.Sequential(
            nn.Conv2d(in_channels, width, 3, padding=1), nn.ReLU(),
            nn.Conv2d(width, 2 * width, 3, stride=2, padding=1), nn.ReLU(),
            nn.Conv2d(2 * width, 2 * width, 3, stride=2, padding=1), nn.ReLU(),
            nn.Conv2d(2 * width, 4 * width, 3, stride=2, padding=1), nn.ReLU(),
        )
        self.num_features = 4 * width

    def forward(self, x):
        return self.features(x).mean(dim=(2, 3))


class ConvClassifier(nn.Module):
    def __init__(self, num_classes: int = 10, width: int = 32):
        super().__init__()
        self.encoder = ConvEncoder(width)
        self.fc = nn.Linear(self.encoder.num_features, num_classes)

    def forward(self, x):
        return self.fc(self.encoder(x))


@register_arch("convnet")
def _convnet(num_classes: int = 10, width: int = 32):
    return ConvClassifier(num_classes, width)


class LinearClassifier(nn.Module):
    """Logistic/softmax regression on flattened pixels; used by closed-form checks."""

    def __init__(self, in_features: int, num_classes: int = 2):
        super().__init__()
        self.fc = nn.Linear(in_features, num_classes)

    def forward(self, x):
        return self.fc(x.flatten(1))


@register_arch("linear")
def _linear(in_features: int, num_classes: int = 2):
    return LinearClassifier(in_features, num_classes)


# WideResNet layout used by common robust CIFAR-10 checkpoints; ingestion only.
class _WideBlock(nn.Module):
    def __init__(self, cin, cout, stride):
        super().__init__()
        self.bn1 = nn.BatchNorm2d(cin)
        self.relu1 = nn.ReLU(inplace=False)
        self.conv1 = nn.Conv2d(cin, cout, 3, stride, 1, bias=False)
        self.bn2 = nn.BatchNorm2d(cout)
        self.relu2 = nn.ReLU(inplace=False)
        self.conv2 = nn.Conv2d(cout, cout, 3, 1, 1, bias=False)
        self.equal = cin == cout
        self.convShortcut = None if self.equal else nn.Conv2d(cin, cout, 1, stride, 0, bias=False)

    def forward(self, x):
        o = self.relu1(self.bn1(x))
        y = self.conv2(self.relu2(self.bn2(self.conv1(o))))
        return y + (x if self.equal else self.convShortcut(o))


class _WideStage(nn.Module):
    def __init__(self, n, cin, cout, stride):
        super().__init__()
        self.layer = nn.Sequential(*[_WideBlock(cin if i == 0 else cout, cout, stride if i == 0 else 1) for i in range(n)])

    def forward(self, x):
        return self.layer(x)


class WideResNet(nn.Module):
    def __init__(self, depth: int = 28, widen_factor: int = 10, num_classes: int = 10):
        super().__init__()
        ch = [16, 16 * widen_factor, 32 * widen_factor, 64 * widen_factor]
        n = (depth - 4) // 6
        self.conv1 = nn.Conv2d(3, ch[0], 3, 1, 1, bias=False)
        self.block1 = _WideStage(n, ch[0], ch[1], 1)
        self.block2 = _WideStage(n, ch[1], ch[2], 2)
        self.block3 = _WideStage(n, ch[2], ch[3], 2)
        self.bn1 = nn.BatchNorm2d(ch[3])
        self.relu = nn.ReLU(inplace=False)
        self.fc = nn.Linear(ch[3], num_classes)

    def forward(self, x):
        o = self.relu(self.bn1(self.block3(self.block2(self.block1(self.conv1(x))))))
        return self.fc(F.adaptive_avg_pool2d(o, 1).flatten(1))


@register_arch("wrn")
def _wrn(depth: int = 28, widen_factor: int = 10, num_classes: int = 10):
    return WideResNet(depth, widen_factor, num_classes)


@dataclass(frozen=True)
class ClassifierSpec:
    arch: str = "convnet"
    num_classes: int = 10
    width: int = 32
    seed: int = 0

    def build(self) -> nn.Module:
        torch.manual_seed(self.seed)
        return build_model(self.arch, num_classes=self.num_classes, width=self.width)


# ---------------------------------------------------------------------------
# losses

def cross_entropy_loss(logits: torch.Tensor, labels: torch.Tensor, reduction: str = "mean") -> torch.Tensor:
    if labels.numel() and (int(labels.min()) < 0 or int(labels.max()) >= logits.shape[-1]):
        raise ValueError(f"labels must lie in [0, {logits.shape[-1]})")
    return F.cross_entropy(logits, labels, reduction=reduction)


def classification_loss_and_grad(classifier: nn.Module, x: torch.Tensor, labels: torch.Tensor) -> tuple[float, torch.Tensor]:
    """Mean cross-entropy of ``classifier`` on ``x`` and its gradient in ``x``."""
    x = x.detach().requires_grad_(True)
    loss = cross_entropy_loss(classifier(x), labels)
    (grad,) = torch.autograd.grad(loss, x)
    return float(loss.detach()), grad


@torch.no_grad()
def predict(classifier: nn.Module, x: torch.Tensor, batch_size: int = 500) -> torch.Tensor:
    return torch.cat([classifier(x[i:i + batch_size]).argmax(1) for i in range(0, len(x), batch_size)])


def accuracy(classifier: nn.Module, dataset: Dataset) -> float:
    if len(dataset) == 0:
        return float("nan")
    return float((predict(classifier, dataset.images) == dataset.targets).float().mean())


# ---------------------------------------------------------------------------
# training

@dataclass
class TrainingConfig:
    epochs: int = 10
    batch_size: int = 128
    lr: float = 1e-3
    weight_decay: float = 0.0
    adversarial: PerturbationBudget | None = None
    # fraction of each batch replaced by adversarial examples in adversarial mode
    adversarial_fraction: float = 1.0


def train_classifier(spec: ClassifierSpec, dataset: Dataset, config: TrainingConfig, seed: int = 0,
                     held_out: Dataset | None = None) -> tuple[nn.Module, "Checkpoint"]:
    """Standard or PGD adversarial training; returns the model and its checkpoint."""
    if len(dataset) == 0:
        raise ValueError("cannot train on an empty dataset")
    from .attacks import pgd_attack

    model = spec.build()
    torch.manual_seed(seed)
    opt = torch.optim.Adam(model.parameters(), lr=config.lr, weight_decay=config.weight_decay)
    losses = []
    for epoch in range(config.epochs):
        model.train()
        for step, (x, y) in enumerate(batches(dataset, config.batch_size, seed=seed * 1000 + epoch)):
            if config.adversarial is not None and config.adversarial.epsilon > 0:
                k = int(round(config.adversarial_fraction * len(x)))
                model.eval()
                adv = pgd_attack(x[:k], y[:k], model, config.adversarial, seed=seed * 100003 + epoch * 1009 + step)
                model.train()
                x = torch.cat([adv.adversarial, x[k:]])
            loss = cross_entropy_loss(model(x), y)
            opt.zero_grad()
            loss.backward()
            opt.step()
            losses.append(float(loss.detach()))
        log.info("epoch %d: mean loss %.4f", epoch, np.mean(losses[-50:]))
    model.eval()
    meta = {
        "dataset_hash": dataset.content_hash,
        "epochs": config.epochs,
        "seed": seed,
        "mode": "adversarial" if config.adversarial is not None else "standard",
        "final_loss": losses[-1] if losses else None,
    }
    if config.adversarial is not None:
        meta["budget"] = [config.adversarial.epsilon, config.adversarial.step_size, config.adversarial.iterations]
    if held_out is not None:
        meta["held_out_accuracy"] = accuracy(model, held_out)
    return model, Checkpoint.from_model(model, "classifier", meta)


# ---------------------------------------------------------------------------
# checkpoints

MAGIC = b"SSLPCKPT"
FORMAT_VERSION = 1
_DIGEST = 32


class CheckpointError(Exception):
    """Corrupt, truncated or incompatible checkpoint file."""


def parameter_hash(model_or_params) -> str:
    params = model_or_params.state_dict() if isinstance(model_or_params, nn.Module) else model_or_params
    h = hashlib.sha256()
    for name in sorted(params):
        t = params[name]
        arr = t.detach().cpu().numpy() if isinstance(t, torch.Tensor) else np.asarray(t)
        h.update(name.encode())
        h.update(np.ascontiguousarray(arr).tobytes())
    return h.hexdigest()


@dataclass
class Checkpoint:
    kind: str
    arch: str
    arch_kwargs: dict
    params: dict[str, np.ndarray]
    metadata: dict = field(default_factory=dict)
    version: int = FORMAT_VERSION

    @classmethod
    def from_model(cls, model: nn.Module, kind: str, metadata: dict | None = None) -> "Checkpoint":
        params = {
            k: v.detach().cpu().to(torch.float32).numpy().copy()
            for k, v in model.state_dict().items()
            if v.is_floating_point()
        }
        return cls(kind, model.arch, dict(model.arch_kwargs), params, dict(metadata or {}))

    def to_model(self) -> nn.Module:
        model = build_model(self.arch, **self.arch_kwargs)
        load_parameters(model, self.params)
        model.eval()
        for key in ("trained",):
            if key in self.metadata and hasattr(model, key):
                setattr(model, key, bool(self.metadata[key]))
        return model

    def to_bytes(self) -> bytes:
        header = json.dumps(
            {"kind": self.kind, "arch": self.arch, "arch_kwargs": self.arch_kwargs,
             "metadata": self.metadata, "tensors": [[k, list(v.shape)] for k, v in self.params.items()]},
            sort_keys=True,
        ).encode()
        buf = io.BytesIO()
        buf.write(MAGIC)
        buf.write(struct.pack("<II", self.version, len(header)))
        buf.write(header)
        for arr in self.params.values():
            buf.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
        body = buf.getvalue()
        return body + hashlib.sha256(body).digest()

    @classmethod
    def from_bytes(cls, blob: bytes) -> "Checkpoint":
        if len(blob) < len(MAGIC) + 8 + _DIGEST or blob[:len(MAGIC)] != MAGIC:
            raise CheckpointError("not a checkpoint file (bad magic or too short)")
        body, digest = blob[:-_DIGEST], blob[-_DIGEST:]
        if hashlib.sha256(body).digest() != digest:
            raise CheckpointError("checksum mismatch: file is truncated or corrupt")
        version, hlen = struct.unpack_from("<II", body, len(MAGIC))
        if version != FORMAT_VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version} (expected {FORMAT_VERSION})")
        off = len(MAGIC) + 8
        header = json.loads(body[off:off + hlen])
        off += hlen
        params = {}
        for name, shape in header["tensors"]:
            n = int(np.prod(shape)) if shape else 1
            end = off + 4 * n
            if end > len(body):
                raise CheckpointError(f"tensor {name!r} runs past the end of the file")
            params[name] = np.frombuffer(body, dtype="<f4", count=n, offset=off).reshape(shape).astype(np.float32)
            off = end
        if off != len(body):
            raise CheckpointError("trailing bytes after the last tensor")
        return cls(header["kind"], header["arch"], header["arch_kwargs"], params, header["metadata"], version)


def save_checkpoint(checkpoint: Checkpoint, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(checkpoint.to_bytes())
    tmp.replace(path)


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    return Checkpoint.from_bytes(path.read_bytes())


def load_parameters(model: nn.Module, params: dict) -> None:
    state = model.state_dict()
    expected = {k for k, v in state.items() if v.is_floating_point()}
    given = set(params)
    if expected != given:
        raise CheckpointError(
            f"parameter names do not match architecture: missing {sorted(expected - given)[:5]}, "
            f"unexpected {sorted(given - expected)[:5]}"
        )
    new_state = {}
    for k, v in state.items():
        if k in params:
            arr = torch.as_tensor(np.asarray(params[k]))
            if tuple(arr.shape) != tuple(v.shape):
                raise CheckpointError(f"{k}: shape {tuple(arr.shape)} != {tuple(v.shape)}")
            new_state[k] = arr.to(v.dtype)
        else:
            new_state[k] = v
    model.load_state_dict(new_state)


def import_external(path, arch: str, arch_kwargs: dict | None = None, metadata: dict | None = None) -> tuple[nn.Module, Checkpoint]:
    """Load externally trained classifier weights.

    Accepted layouts: an ``.npz`` archive whose keys are this package's
    parameter names (float arrays), or a torch-saved state dict (optionally
    wrapped as ``{"state_dict": ...}`` and/or prefixed with ``module.``).
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"external checkpoint not found: {path}")
    if path.suffix == ".npz":
        with np.load(path) as z:
            raw = {k: z[k] for k in z.files}
    else:
        raw = torch.load(path, map_location="cpu", weights_only=True)
        if isinstance(raw, dict) and "state_dict" in raw:
            raw = raw["state_dict"]
        raw = {k: v.numpy() for k, v in raw.items() if torch.is_tensor(v) and v.is_floating_point()}
    raw = {k[len("module."):] if k.startswith("module.") else k: v for k, v in raw.items()}
    model = build_model(arch, **(arch_kwargs or {}))
    load_parameters(model, raw)
    model.eval()
    return model, Checkpoint.from_model(model, "classifier", {"source": str(path), **(metadata or {})})


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())

