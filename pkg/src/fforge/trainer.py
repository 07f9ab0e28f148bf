"""Base-class training: cross entropy over every branch plus pairwise KL, Nesterov SGD."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import tensor as T
from .augment import ImageBatch, light_augment, regional_dropout
from .backbone import BranchedNetwork
from .data import Dataset
from .errors import InvalidArgumentError, InvalidConfigError, MissingGradError
from .tensor import Parameter, Tensor

log = logging.getLogger(__name__)

DESK_SCHEDULE = ((0, 0.1), (5, 0.006), (10, 0.0012), (13, 0.00024))
MINI_IMAGENET_SCHEDULE = ((0, 0.1), (20, 0.006), (40, 0.0012), (50, 0.00024))
TIERED_IMAGENET_SCHEDULE = ((0, 0.1), (40, 0.006), (80, 0.0012), (90, 0.00024))


@dataclass
class TrainConfig:
    epochs: int = 15
    iters_per_epoch: int = 100
    batch_size: int = 64
    lr_schedule: Tuple[Tuple[int, float], ...] = DESK_SCHEDULE
    momentum: float = 0.9
    weight_decay: float = 5e-4
    dropout_mode: str = "selfmix"
    dropout_prob: float = 1.0
    patch_frac: float = 0.5
    label_smoothing: float = 0.0
    kl_enabled: bool = True
    kl_detach_target: bool = False
    branch_weights: Optional[Tuple[float, ...]] = None
    light_augment: bool = True
    crop_pad: int = 4
    jitter: float = 0.2
    hflip_prob: float = 0.5
    base_holdout: int = 20
    seed: int = 0

    def __post_init__(self):
        self.lr_schedule = tuple((int(e), float(lr)) for e, lr in self.lr_schedule)
        if self.branch_weights is not None:
            self.branch_weights = tuple(float(w) for w in self.branch_weights)

    def validate(self):
        epochs = [e for e, _ in self.lr_schedule]
        if not epochs or epochs[0] != 0 or any(b <= a for a, b in zip(epochs, epochs[1:])):
            raise InvalidConfigError("lr_schedule epochs must start at 0 and strictly increase")
        if self.epochs < 0 or self.iters_per_epoch < 0 or self.batch_size < 1:
            raise InvalidConfigError("epochs/iters must be >= 0 and batch_size >= 1")
        if self.dropout_mode not in ("none", "selfmix", "cutout", "cutmix"):
            raise InvalidConfigError(f"unknown dropout_mode {self.dropout_mode!r}")
        if self.dropout_mode == "cutmix" and self.batch_size < 2:
            raise InvalidConfigError("cutmix needs batch_size >= 2")
        if not 0.0 <= self.label_smoothing < 1.0:
            raise InvalidConfigError("label_smoothing must lie in [0, 1)")
        if self.base_holdout < 0:
            raise InvalidConfigError("base_holdout must be >= 0")


@dataclass
class OptimizerState:
    velocity: Dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def for_params(cls, params: Sequence[Parameter]) -> "OptimizerState":
        return cls({p.name: np.zeros_like(p.data) for p in params})


def sgd_nesterov_step(params: Sequence[Parameter], state: OptimizerState, lr: float,
                      momentum: float, weight_decay: float, max_grad_norm: Optional[float] = None):
    """One Nesterov SGD step, then zero the gradients.

    ``g = grad + wd * w``; ``v = m * v + g``; ``w -= lr * (g + m * v)``.
    Parameters flagged ``weight_decay_exempt`` skip the decay term.  With
    ``max_grad_norm`` the raw gradients are rescaled jointly so their global
    norm does not exceed it.
    """
    for p in params:
        if p.grad is None:
            raise MissingGradError(p.name)
    clip = 1.0
    if max_grad_norm is not None:
        total = np.sqrt(sum(float((p.grad.astype(np.float64) ** 2).sum()) for p in params))
        if total > max_grad_norm:
            clip = max_grad_norm / total
    for p in params:
        g = p.grad * clip if clip != 1.0 else p.grad
        if weight_decay and not p.weight_decay_exempt:
            g = g + weight_decay * p.data
        v = state.velocity.get(p.name)
        if v is None:
            v = state.velocity[p.name] = np.zeros_like(p.data)
        v *= momentum
        v += g
        p.data = (p.data - lr * (g + momentum * v)).astype(p.data.dtype, copy=False)
        p.grad = None


def lr_at(schedule: Sequence[Tuple[int, float]], epoch: int) -> float:
    """Piecewise-constant lookup: lr of the last schedule entry at or before ``epoch``."""
    if epoch < 0:
        raise InvalidArgumentError("epoch must be >= 0")
    lr = schedule[0][1]
    for start, value in schedule:
        if start <= epoch:
            lr = value
        else:
            break
    return lr


@dataclass
class LossParts:
    total: Tensor
    ce: List[float]
    kl: Dict[Tuple[int, int], float]


def branch_losses(logits: Sequence[Tensor], targets: np.ndarray, kl_enabled: bool,
                  branch_weights: Optional[Sequence[float]] = None,
                  detach_target: bool = False) -> LossParts:
    """Sum of per-branch CE plus ``1/(2N)`` times KL over ordered branch pairs.

    By default gradients flow into both distributions of every pair; with
    ``detach_target`` the first argument of each ``KL(p_i || p_j)`` is held
    constant, so each term only pulls branch ``j`` toward branch ``i``.
    """
    n_cls = len(logits)
    weights = branch_weights or [1.0] * n_cls
    if len(weights) != n_cls:
        raise InvalidArgumentError(f"{len(weights)} branch weights for {n_cls} classifiers")
    ces = [T.softmax_cross_entropy(z, targets) for z in logits]
    total = T.scale(ces[0], weights[0])
    for w, ce in zip(weights[1:], ces[1:]):
        total = T.add(total, T.scale(ce, w))
    kls = {}
    if kl_enabled and n_cls > 1:
        probs = [T.softmax(z) for z in logits]
        reg = None
        for i in range(n_cls):
            for j in range(n_cls):
                if i == j:
                    continue
                target = Tensor(probs[i].data) if detach_target else probs[i]
                term = T.kl_divergence(target, probs[j])
                kls[(i, j)] = float(term.data)
                reg = term if reg is None else T.add(reg, term)
        total = T.add(total, T.scale(reg, 1.0 / (2 * n_cls)))
    return LossParts(total, [float(c.data) for c in ces], kls)


def total_loss(net: BranchedNetwork, batch: ImageBatch, *, label_smoothing: float = 0.0,
               kl_enabled: bool = True, branch_weights=None, detach_target: bool = False,
               training: bool = True) -> LossParts:
    """Self-augmentation objective on an already augmented batch."""
    targets = batch.label_rows(net.cfg.num_classes, label_smoothing)
    feats = net.forward_all(batch.pixels, training=training)
    logits = [net.logits(f, j) for j, f in enumerate(feats)]
    return branch_losses(logits, targets, kl_enabled, branch_weights, detach_target)


@dataclass
class TrainingReport:
    epochs: List[dict] = field(default_factory=list)
    iter_losses: List[float] = field(default_factory=list)
    base_accuracy: Optional[float] = None


def base_split_indices(dataset: Dataset, base_classes: Sequence[int], holdout: int):
    """Training and held-out image indices; the last ``holdout`` images of each class are held out."""
    train_idx, held_idx = [], []
    for c in base_classes:
        idx = dataset.indices_of(c)
        if holdout >= len(idx) and len(idx):
            raise InvalidArgumentError(f"class {c} has {len(idx)} images; cannot hold out {holdout}")
        cut = len(idx) - holdout
        train_idx.append(idx[:cut])
        held_idx.append(idx[cut:])
    cat = lambda xs: np.concatenate(xs) if xs else np.zeros(0, dtype=np.int64)  # noqa: E731
    return cat(train_idx), cat(held_idx)


def make_batch(dataset: Dataset, indices: np.ndarray, label_map: np.ndarray, cfg: TrainConfig,
               rng: np.random.Generator) -> ImageBatch:
    batch = ImageBatch(dataset.images[indices], label_map[dataset.labels[indices]])
    if cfg.light_augment:
        batch = light_augment(batch, rng, cfg.crop_pad, cfg.jitter, cfg.hflip_prob)
    return regional_dropout(batch, cfg.dropout_mode, rng, cfg.patch_frac, cfg.dropout_prob)


def base_accuracy(net: BranchedNetwork, dataset: Dataset, indices: np.ndarray,
                  label_map: np.ndarray) -> Optional[float]:
    """Main-classifier accuracy over base-class images (eval mode)."""
    if len(indices) == 0:
        return None
    feats = net.features_numpy(dataset.images[indices])
    logits = T.cosine_logits(Tensor(feats), Tensor(net.classifiers[0].data), net.cfg.tau).data
    return float(np.mean(logits.argmax(axis=1) == label_map[dataset.labels[indices]]))


def train(net: BranchedNetwork, dataset: Dataset, base_classes: Sequence[int],
          cfg: TrainConfig, on_epoch=None) -> TrainingReport:
    """Train on the base classes; deterministic given ``cfg.seed``.

    Each iteration draws a batch uniformly with replacement using a
    generator seeded by ``(seed, epoch, iteration)``.
    """
    cfg.validate()
    base_classes = sorted(int(c) for c in base_classes)
    if net.cfg.num_classes != len(base_classes):
        raise InvalidConfigError(
            f"network has {net.cfg.num_classes} outputs but there are {len(base_classes)} base classes")
    train_idx, held_idx = base_split_indices(dataset, base_classes, cfg.base_holdout)
    if len(train_idx) == 0:
        raise InvalidArgumentError("no training images in the base split")
    label_map = np.full(dataset.class_count, -1, dtype=np.int64)
    label_map[base_classes] = np.arange(len(base_classes))
    params = net.parameters()
    opt = OptimizerState.for_params(params)
    report = TrainingReport()
    n_cls = net.num_classifiers
    for epoch in range(cfg.epochs):
        lr = lr_at(cfg.lr_schedule, epoch)
        losses, ces, kls = [], [], []
        kl_pairs = 0
        for it in range(cfg.iters_per_epoch):
            rng = np.random.default_rng([cfg.seed, epoch, it])
            picks = train_idx[rng.integers(0, len(train_idx), size=cfg.batch_size)]
            batch = make_batch(dataset, picks, label_map, cfg, rng)
            parts = total_loss(net, batch, label_smoothing=cfg.label_smoothing,
                               kl_enabled=cfg.kl_enabled, branch_weights=cfg.branch_weights,
                               detach_target=cfg.kl_detach_target)
            parts.total.backward()
            sgd_nesterov_step(params, opt, lr, cfg.momentum, cfg.weight_decay)
            loss = float(parts.total.data)
            losses.append(loss)
            ces.append(parts.ce)
            kls.append(np.mean(list(parts.kl.values())) if parts.kl else 0.0)
            kl_pairs = len(parts.kl)
            report.iter_losses.append(loss)
        record = {
            "epoch": epoch,
            "lr": lr,
            "mean_loss": float(np.mean(losses)) if losses else float("nan"),
            "per_branch_ce": [float(v) for v in np.mean(ces, axis=0)] if ces else [float("nan")] * n_cls,
            "mean_kl": float(np.mean(kls)) if kls else 0.0,
            "kl_pairs": kl_pairs,
        }
        report.epochs.append(record)
        log.info("epoch %d lr %.5g loss %.4f", epoch, lr, record["mean_loss"])
        if on_epoch is not None:
            on_epoch(record)
    report.base_accuracy = base_accuracy(net, dataset, held_idx, label_map)
    return report
