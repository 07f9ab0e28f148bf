"""Local Representation Learner: per-episode fine-tuning of a cloned last block.

The pre-trained network stays frozen.  A copy of its last block produces a
bias feature; the local representation of an image is the sum of the
frozen (global) feature and the bias feature.  Only the copy is trained,
on fake queries made by re-augmenting the support images.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np

from . import tensor as T
from .augment import ImageBatch, light_augment, regional_dropout
from .backbone import Block, BranchedNetwork
from .data import Dataset
from .episodes import Episode, EpisodeResult, EpisodeSpec, predict_from_features, sample_episode, \
    summarize, task_rng
from .errors import InvalidConfigError
from .tensor import Tensor
from .trainer import OptimizerState, sgd_nesterov_step


@dataclass
class LrlConfig:
    epochs: int = 200
    lr: Optional[float] = None
    decay_epochs: Tuple[int, ...] = (80, 120, 160)
    decay_factor: float = 0.1
    gamma: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 0.0
    max_grad_norm: Optional[float] = 5.0
    dropout_mode: str = "selfmix"
    patch_frac: float = 0.5
    light_augment: bool = True
    crop_pad: int = 4
    jitter: float = 0.2
    hflip_prob: float = 0.5
    fake_multiplicity: int = 1
    seed: int = 0

    def __post_init__(self):
        self.decay_epochs = tuple(int(e) for e in self.decay_epochs)

    def validate(self):
        if self.decay_epochs and self.epochs <= max(self.decay_epochs):
            raise InvalidConfigError("LRL epochs must exceed the last decay epoch")
        if self.dropout_mode not in ("none", "selfmix", "cutout"):
            raise InvalidConfigError("LRL regional dropout must be none, selfmix or cutout")
        if self.fake_multiplicity < 1:
            raise InvalidConfigError("fake_multiplicity must be >= 1")

    def initial_lr(self, k_shot: int) -> float:
        """Explicit ``lr`` if set, else 1e-2 for 1-shot and 1e-1 otherwise."""
        if self.lr is not None:
            return self.lr
        return 1e-2 if k_shot == 1 else 1e-1

    def lr_at(self, epoch: int, k_shot: int) -> float:
        drops = sum(1 for e in self.decay_epochs if epoch >= e)
        return self.initial_lr(k_shot) * self.decay_factor ** drops


class LrlState:
    """Frozen network plus a trainable copy of its last main-branch block."""

    def __init__(self, net: BranchedNetwork):
        self.net = net
        self.frozen_prefix: List[Block] = net.trunk[:-1]
        self.frozen_last: Block = net.trunk[-1]
        self.clone: Block = net.trunk[-1].clone("lrl.clone")
        self.params = self.clone.parameters()
        self.opt = OptimizerState.for_params(self.params)

    def prefix(self, images: np.ndarray) -> Tensor:
        """Output of the frozen blocks before the last one, detached from the graph."""
        h = Tensor(np.asarray(images, dtype=self.net.dtype))
        for block in self.frozen_prefix:
            h = block.forward(h, False, self.net.cfg)
        return Tensor(h.data)


def lrl_features(state: LrlState, images: np.ndarray) -> Tuple[Tensor, Tensor]:
    """``(f_global, f_bias)``; only ``f_bias`` carries gradient (into the clone)."""
    h = state.prefix(images)
    cfg = state.net.cfg
    f_global = Tensor(T.global_average_pool(state.frozen_last.forward(h, False, cfg)).data)
    f_bias = T.global_average_pool(state.clone.forward(h, False, cfg))
    return f_global, f_bias


def _class_mean(x: Tensor, n_way: int, k_shot: int) -> Tensor:
    d = x.shape[-1]
    return T.mean(T.reshape(x, (n_way, k_shot, d)), axis=1)


def lrl_weights(f_global: Tensor, f_bias: Tensor, n_way: int, k_shot: int) -> Tensor:
    """Row ``j``: mean over the class's ``k`` images of ``f_global + f_bias``."""
    return _class_mean(T.add(f_global, f_bias), n_way, k_shot)


def lrl_loss(weights: Tensor, query_feats: Tuple[Tensor, Tensor], query_labels: np.ndarray,
             support_feats: Tuple[Tensor, Tensor], gamma: float, tau: float) -> Tensor:
    """Fake-query cross entropy plus ``gamma * sum_i ||f_global_i - f_bias_i||``.

    The penalty sums (not averages) over the support-derived images.
    """
    qg, qb = query_feats
    logits = T.cosine_logits(T.add(qg, qb), weights, tau)
    onehot = np.zeros(logits.shape, dtype=logits.dtype)
    onehot[np.arange(len(query_labels)), query_labels] = 1.0
    ce = T.softmax_cross_entropy(logits, onehot)
    if not gamma:
        return ce
    sg, sb = support_feats
    penalty = T.sum(T.row_norm(T.sub(sg, sb)))
    return T.add(ce, T.scale(penalty, gamma))


def _transform(images: np.ndarray, labels: np.ndarray, rng, cfg: LrlConfig) -> np.ndarray:
    batch = ImageBatch(images, labels)
    if cfg.light_augment:
        batch = light_augment(batch, rng, cfg.crop_pad, cfg.jitter, cfg.hflip_prob)
    return regional_dropout(batch, cfg.dropout_mode, rng, cfg.patch_frac).pixels


def make_fake_batch(support_images: np.ndarray, support_labels: np.ndarray, rng,
                    cfg: LrlConfig):
    """Two independent augmentations of the support set.

    Returns ``(weight_images, fake_query_images, fake_query_labels)``; the
    fake queries repeat the support ``fake_multiplicity`` times.
    """
    weight_images = _transform(support_images, support_labels, rng, cfg)
    reps = cfg.fake_multiplicity
    fake_src = np.concatenate([support_images] * reps)
    fake_labels = np.concatenate([support_labels] * reps)
    return weight_images, _transform(fake_src, fake_labels, rng, cfg), fake_labels


@dataclass
class LrlOutcome:
    state: LrlState
    predictions: np.ndarray
    losses: List[float] = field(default_factory=list)
    lrs: List[float] = field(default_factory=list)


def lrl_step(state: LrlState, support_images: np.ndarray, support_labels: np.ndarray,
             n_way: int, k_shot: int, rng, cfg: LrlConfig, lr: float) -> float:
    weight_imgs, fake_imgs, fake_labels = make_fake_batch(support_images, support_labels, rng, cfg)
    m = len(weight_imgs)
    fg, fb = lrl_features(state, np.concatenate([weight_imgs, fake_imgs]))
    sg, sb = Tensor(fg.data[:m]), T.slice_rows(fb, 0, m)
    qg, qb = Tensor(fg.data[m:]), T.slice_rows(fb, m, fb.shape[0])
    weights = lrl_weights(sg, sb, n_way, k_shot)
    loss = lrl_loss(weights, (qg, qb), fake_labels, (sg, sb), cfg.gamma, state.net.cfg.tau)
    loss.backward()
    sgd_nesterov_step(state.params, state.opt, lr, cfg.momentum, cfg.weight_decay, cfg.max_grad_norm)
    return float(loss.data)


def lrl_predict(state: LrlState, support_images: np.ndarray, query_images: np.ndarray,
                n_way: int, k_shot: int) -> np.ndarray:
    """Classify real queries with weights built from the untransformed supports."""
    sg, sb = lrl_features(state, support_images)
    weights = (sg.data + sb.data).reshape(n_way, k_shot, -1).mean(axis=1)
    qg, qb = lrl_features(state, query_images)
    return predict_from_features(qg.data + qb.data, weights, state.net.cfg.tau)


def lrl_finetune(net: BranchedNetwork, support_images: np.ndarray, query_images: np.ndarray,
                 n_way: int, k_shot: int, cfg: LrlConfig, rng) -> LrlOutcome:
    """Fine-tune a fresh clone on one episode, then predict its real queries."""
    cfg.validate()
    state = LrlState(net)
    support_labels = np.repeat(np.arange(n_way), k_shot)
    outcome = LrlOutcome(state, np.zeros(0, dtype=np.int64))
    for epoch in range(cfg.epochs):
        lr = cfg.lr_at(epoch, k_shot)
        outcome.lrs.append(lr)
        outcome.losses.append(lrl_step(state, support_images, support_labels, n_way, k_shot,
                                       rng, cfg, lr))
    outcome.predictions = lrl_predict(state, support_images, query_images, n_way, k_shot)
    return outcome


def evaluate_lrl(net: BranchedNetwork, dataset: Dataset, classes: Sequence[int],
                 spec: EpisodeSpec, cfg: LrlConfig, keep_predictions: bool = False) -> EpisodeResult:
    """Same episodes as :func:`episodes.evaluate` for equal ``spec``, each fine-tuned with LRL."""
    accs, preds = [], []
    for t in range(spec.num_tasks):
        ep = sample_episode(dataset, classes, spec, task_rng(spec.seed, t))
        out = lrl_finetune(net, dataset.images[ep.support_idx], dataset.images[ep.query_idx],
                           ep.n_way, ep.k_shot, cfg, np.random.default_rng([cfg.seed, spec.seed, t]))
        accs.append(float(np.mean(out.predictions == ep.query_labels)))
        preds.append(out.predictions)
    result = summarize(accs)
    if keep_predictions:
        result.predictions = preds
    return result
