"""INI experiment configs. Budget values accept fractions such as ``8/255``."""
from __future__ import annotations

import configparser
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path

from .evaluation import AttackSpec
from .perturbation import PerturbationBudget
from .reversal import ReversalMode
from .ssl_tasks import ContrastiveConfig, InpaintingConfig, RotationConfig, SslConfigs

DEFAULT_CONFIG = """\
[experiment]
# evaluation seed: subset, attack and reversal noise
seed = 0
# data generation, train split and training
model_seed = 0

[data]
# synthetic | cifar10
source = synthetic
dir =
num_images = 8000
image_size = 16
num_classes = 10
train_size = 5000

[classifier]
arch = convnet
width = 16
checkpoint =
external =
epochs = 10
batch_size = 128
lr = 0.001
adversarial = true
epsilon = 8/255
step_size = 2/255
iterations = 7

[ssl]
width = 16
epochs = 20
batch_size = 128
lr = 0.001
temperature = 0.5
center_fraction = 0.5
num_rotations = 4
checkpoint_dir =

[attack]
# none | fgsm | pgd
kind = pgd
epsilon = 8/255
step_size = 2/255
iterations = 20
restarts = 1
adaptive = false
unroll_steps =

[reversal]
modes = none, ssl, mtl
epsilon = 8/255
step_size = 2/255
iterations = 20
sign_steps = false
batch_size = 128
task_weights = 1, 1, 1

[eval]
n = 1000
traces = true
"""


class ConfigError(ValueError):
    """Invalid or missing configuration value; the message names the field."""


def _num(section, key, value: str) -> float:
    try:
        return float(Fraction(value.strip()))
    except (ValueError, ZeroDivisionError):
        raise ConfigError(f"{section}.{key}: expected a number or fraction, got {value!r}") from None


class _Reader:
    def __init__(self, parser: configparser.ConfigParser):
        self.p = parser

    def raw(self, s, k) -> str:
        try:
            return self.p.get(s, k).strip()
        except (configparser.NoSectionError, configparser.NoOptionError):
            raise ConfigError(f"{s}.{k}: missing") from None

    def float(self, s, k, positive=False, nonneg=False) -> float:
        v = _num(s, k, self.raw(s, k))
        if positive and v <= 0:
            raise ConfigError(f"{s}.{k}: must be > 0, got {v}")
        if nonneg and v < 0:
            raise ConfigError(f"{s}.{k}: must be >= 0, got {v}")
        return v

    def int(self, s, k, minimum=None) -> int:
        v = self.raw(s, k)
        try:
            out = int(v)
        except ValueError:
            raise ConfigError(f"{s}.{k}: expected an integer, got {v!r}") from None
        if minimum is not None and out < minimum:
            raise ConfigError(f"{s}.{k}: must be >= {minimum}, got {out}")
        return out

    def bool(self, s, k) -> bool:
        try:
            return self.p.getboolean(s, k)
        except ValueError:
            raise ConfigError(f"{s}.{k}: expected true/false, got {self.raw(s, k)!r}") from None

    def opt(self, s, k) -> str | None:
        return self.raw(s, k) or None

    def budget(self, s) -> PerturbationBudget:
        return PerturbationBudget(self.float(s, "epsilon", nonneg=True), self.float(s, "step_size", positive=True),
                                  self.int(s, "iterations", minimum=0))


@dataclass
class ExperimentConfig:
    seed: int = 0
    model_seed: int = 0
    data_source: str = "synthetic"
    data_dir: str | None = None
    num_images: int = 8000
    image_size: int = 16
    num_classes: int = 10
    train_size: int = 5000
    classifier_arch: str = "convnet"
    classifier_width: int = 16
    classifier_checkpoint: str | None = None
    classifier_external: str | None = None
    classifier_epochs: int = 10
    classifier_batch_size: int = 128
    classifier_lr: float = 1e-3
    adversarial_budget: PerturbationBudget | None = None
    ssl_width: int = 16
    ssl_epochs: int = 20
    ssl_batch_size: int = 128
    ssl_lr: float = 1e-3
    ssl: SslConfigs = field(default_factory=SslConfigs)
    ssl_checkpoint_dir: str | None = None
    attack: AttackSpec = field(default_factory=AttackSpec)
    modes: list[ReversalMode] = field(default_factory=lambda: list(ReversalMode))
    reversal_budget: PerturbationBudget = PerturbationBudget.from_pixels(8, 2, 20)
    sign_steps: bool = False
    reversal_batch_size: int = 128
    task_weights: tuple[float, float, float] = (1.0, 1.0, 1.0)
    n: int = 1000
    traces: bool = True
    source_text: str = ""

    def echo(self) -> dict:
        return {"source": self.source_text}


def parse_config(text: str, overrides: dict | None = None) -> ExperimentConfig:
    """Parse INI ``text`` layered over the defaults; ``overrides`` maps "section.key" to strings."""
    parser = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    parser.read_string(DEFAULT_CONFIG)
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"unparseable config: {exc}") from None
    for key, value in (overrides or {}).items():
        section, _, option = key.partition(".")
        if not parser.has_section(section):
            raise ConfigError(f"{key}: unknown section")
        parser.set(section, option, str(value))
    known = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    known.read_string(DEFAULT_CONFIG)
    for section in parser.sections():
        if not known.has_section(section):
            raise ConfigError(f"{section}: unknown section")
        for option in parser.options(section):
            if not known.has_option(section, option):
                raise ConfigError(f"{section}.{option}: unknown key")
    r = _Reader(parser)

    source = r.raw("data", "source")
    if source not in ("synthetic", "cifar10"):
        raise ConfigError(f"data.source: expected synthetic or cifar10, got {source!r}")
    data_dir = r.opt("data", "dir")
    if source == "cifar10" and not data_dir:
        raise ConfigError("data.dir: required when data.source = cifar10")

    try:
        modes = [ReversalMode(m.strip()) for m in r.raw("reversal", "modes").split(",") if m.strip()]
    except ValueError as exc:
        raise ConfigError(f"reversal.modes: {exc}") from None
    if not modes:
        raise ConfigError("reversal.modes: at least one mode is required")
    weights = tuple(_num("reversal", "task_weights", w) for w in r.raw("reversal", "task_weights").split(","))
    if len(weights) != 3 or any(w < 0 for w in weights):
        raise ConfigError("reversal.task_weights: expected three non-negative numbers")

    kind = r.raw("attack", "kind")
    if kind not in ("none", "fgsm", "pgd"):
        raise ConfigError(f"attack.kind: expected none, fgsm or pgd, got {kind!r}")
    unroll = r.opt("attack", "unroll_steps")
    attack = AttackSpec(kind=kind, budget=r.budget("attack"), seed=r.int("experiment", "seed"),
                        restarts=r.int("attack", "restarts", minimum=1), adaptive=r.bool("attack", "adaptive"),
                        unroll_steps=None if unroll is None else r.int("attack", "unroll_steps", minimum=0))
    reversal_budget = r.budget("reversal")
    if attack.unroll_steps is not None and attack.unroll_steps > reversal_budget.iterations:
        raise ConfigError("attack.unroll_steps: exceeds reversal.iterations")

    center = r.float("ssl", "center_fraction")
    if not 0 < center < 1:
        raise ConfigError(f"ssl.center_fraction: must be in (0, 1), got {center}")
    rotations = r.int("ssl", "num_rotations", minimum=1)
    if rotations > 4:
        raise ConfigError("ssl.num_rotations: at most 4")
    ssl = SslConfigs(ContrastiveConfig(temperature=r.float("ssl", "temperature", positive=True)),
                     RotationConfig(rotations), InpaintingConfig(center))

    cfg = ExperimentConfig(
        seed=r.int("experiment", "seed"),
        model_seed=r.int("experiment", "model_seed"),
        data_source=source, data_dir=data_dir,
        num_images=r.int("data", "num_images", minimum=1),
        image_size=r.int("data", "image_size", minimum=8),
        num_classes=r.int("data", "num_classes", minimum=1),
        train_size=r.int("data", "train_size", minimum=1),
        classifier_arch=r.raw("classifier", "arch"),
        classifier_width=r.int("classifier", "width", minimum=1),
        classifier_checkpoint=r.opt("classifier", "checkpoint"),
        classifier_external=r.opt("classifier", "external"),
        classifier_epochs=r.int("classifier", "epochs", minimum=0),
        classifier_batch_size=r.int("classifier", "batch_size", minimum=1),
        classifier_lr=r.float("classifier", "lr", positive=True),
        adversarial_budget=r.budget("classifier") if r.bool("classifier", "adversarial") else None,
        ssl_width=r.int("ssl", "width", minimum=1),
        ssl_epochs=r.int("ssl", "epochs", minimum=0),
        ssl_batch_size=r.int("ssl", "batch_size", minimum=2),
        ssl_lr=r.float("ssl", "lr", positive=True),
        ssl=ssl,
        ssl_checkpoint_dir=r.opt("ssl", "checkpoint_dir"),
        attack=attack,
        modes=modes,
        reversal_budget=reversal_budget,
        sign_steps=r.bool("reversal", "sign_steps"),
        reversal_batch_size=r.int("reversal", "batch_size", minimum=2),
        task_weights=weights,
        n=r.int("eval", "n", minimum=1),
        traces=r.bool("eval", "traces"),
    )
    if source == "synthetic" and cfg.train_size + cfg.n > cfg.num_images:
        raise ConfigError("data.num_images: must cover data.train_size + eval.n")
    buf = []
    for section in parser.sections():
        buf.append(f"[{section}]")
        buf.extend(f"{k} = {v}" for k, v in parser.items(section))
    cfg.source_text = "\n".join(buf)
    return cfg


def load_config(path, overrides: dict | None = None) -> ExperimentConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    return parse_config(path.read_text(), overrides)
