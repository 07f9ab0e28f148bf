"""n-way k-shot episode sampling and evaluation with cosine novel weights."""

from __future__ import annotations

import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import numpy as np

from . import tensor as T
from .backbone import BranchedNetwork
from .data import Dataset
from .errors import InvalidSplitError
from .tensor import Tensor


@dataclass
class EpisodeSpec:
    n_way: int = 5
    k_shot: int = 1
    queries: int = 15
    num_tasks: int = 200
    seed: int = 0
    queries_total: bool = False

    def queries_per_class(self) -> List[int]:
        if not self.queries_total:
            return [self.queries] * self.n_way
        base, extra = divmod(self.queries, self.n_way)
        return [base + (1 if j < extra else 0) for j in range(self.n_way)]


@dataclass
class Episode:
    """Support images are class-major: ``k_shot`` rows for class 0, then class 1, ..."""

    classes: np.ndarray
    support_idx: np.ndarray
    query_idx: np.ndarray
    query_labels: np.ndarray
    k_shot: int

    @property
    def n_way(self) -> int:
        return len(self.classes)

    @property
    def support_labels(self) -> np.ndarray:
        return np.repeat(np.arange(self.n_way), self.k_shot)


@dataclass
class EpisodeResult:
    per_task_accuracy: List[float]
    mean: float
    ci95: float
    predictions: Optional[List[np.ndarray]] = field(default=None, repr=False)


def task_rng(seed: int, task_index: int) -> np.random.Generator:
    return np.random.default_rng([seed, task_index])


def sample_episode(dataset: Dataset, classes: Sequence[int], spec: EpisodeSpec,
                   rng: np.random.Generator) -> Episode:
    """Draw ``n_way`` classes, then disjoint support and query images per class."""
    per_class = spec.queries_per_class()
    need = spec.k_shot + max(per_class)
    pool = [c for c in sorted(classes) if len(dataset.indices_of(c)) >= need]
    if len(pool) < spec.n_way:
        raise InvalidSplitError(
            f"need {spec.n_way} classes with >= {need} images each, split has {len(pool)}")
    chosen = rng.choice(np.asarray(pool), size=spec.n_way, replace=False)
    support, query, qlabels = [], [], []
    for j, c in enumerate(chosen):
        idx = dataset.indices_of(c)
        picks = rng.choice(idx, size=spec.k_shot + per_class[j], replace=False)
        support.append(picks[:spec.k_shot])
        query.append(picks[spec.k_shot:])
        qlabels.append(np.full(per_class[j], j))
    return Episode(chosen, np.concatenate(support), np.concatenate(query),
                   np.concatenate(qlabels).astype(np.int64), spec.k_shot)


def mean_by_class(features: np.ndarray, n_way: int, k_shot: int) -> np.ndarray:
    return features.reshape(n_way, k_shot, -1).mean(axis=1)


def novel_weights(net: BranchedNetwork, support_images: np.ndarray, n_way: int, k_shot: int,
                  branch: int = 0) -> np.ndarray:
    """Per-class mean of un-normalized eval-mode support features, ``[n_way, D]``."""
    return mean_by_class(net.features_numpy(support_images, branch), n_way, k_shot)


def predict_from_features(query_features: np.ndarray, weights: np.ndarray, tau: float) -> np.ndarray:
    """Argmax of cosine logits; ``np.argmax`` breaks ties toward the lowest index."""
    logits = T.cosine_logits(Tensor(query_features), Tensor(weights), tau).data
    return logits.argmax(axis=1)


def classify_queries(net: BranchedNetwork, weights: np.ndarray, query_images: np.ndarray,
                     branch: int = 0) -> np.ndarray:
    return predict_from_features(net.features_numpy(query_images, branch), weights, net.cfg.tau)


def summarize(per_task: Sequence[float]) -> EpisodeResult:
    """Mean and 95% half-width ``1.96 * s / sqrt(n)`` with the sample std ``s``."""
    acc = np.asarray(per_task, dtype=np.float64)
    n = len(acc)
    mean = float(acc.mean()) if n else float("nan")
    ci = 1.96 * float(acc.std(ddof=1)) / math.sqrt(n) if n > 1 else 0.0
    return EpisodeResult([float(a) for a in acc], mean, ci)


def default_workers() -> int:
    try:
        return max(1, int(os.environ.get("FFORGE_THREADS", "1")))
    except ValueError:
        return 1


def evaluate(net: BranchedNetwork, dataset: Dataset, classes: Sequence[int], spec: EpisodeSpec,
             branch: int = 0, workers: Optional[int] = None, keep_predictions: bool = False,
             ensemble: bool = False) -> EpisodeResult:
    """Run ``spec.num_tasks`` episodes; task ``t`` uses the generator seeded by ``(seed, t)``.

    Eval-mode features are a per-image pure function, so the features of
    every image in ``classes`` are computed once and shared by all tasks.
    With ``ensemble`` every branch builds its own novel weights and the
    cosine logits of all branches are summed; otherwise only ``branch`` is used.
    """
    class_idx = np.concatenate([dataset.indices_of(c) for c in classes]) if len(classes) else \
        np.zeros(0, dtype=np.int64)
    branches = range(net.num_classifiers) if ensemble else [branch]
    feats = []
    for b in branches:
        f = np.zeros((len(dataset), net.cfg.feature_dim), dtype=net.dtype)
        f[class_idx] = net.features_numpy(dataset.images[class_idx], b)
        feats.append(f)

    def run(t):
        ep = sample_episode(dataset, classes, spec, task_rng(spec.seed, t))
        logits = 0.0
        for f in feats:
            weights = mean_by_class(f[ep.support_idx], ep.n_way, ep.k_shot)
            logits = logits + T.cosine_logits(Tensor(f[ep.query_idx]), Tensor(weights), net.cfg.tau).data
        pred = logits.argmax(axis=1)
        return float(np.mean(pred == ep.query_labels)), pred

    workers = workers or default_workers()
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            outcomes = list(pool.map(run, range(spec.num_tasks)))
    else:
        outcomes = [run(t) for t in range(spec.num_tasks)]
    result = summarize([acc for acc, _ in outcomes])
    if keep_predictions:
        result.predictions = [pred for _, pred in outcomes]
    return result
