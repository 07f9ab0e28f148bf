import hashlib
import math

import numpy as np
import pytest

from fforge import tensor as T
from fforge.backbone import build_network, parameter_checksum
from fforge.episodes import (EpisodeSpec, evaluate, novel_weights, predict_from_features,
                             sample_episode, summarize, task_rng)
from fforge.errors import InvalidSplitError
from fforge.tensor import Tensor

from conftest import tiny_config

NOVEL = [4, 5, 6, 7, 8, 9, 10, 11]


def test_episode_shape_and_disjointness(tiny_dataset):
    spec = EpisodeSpec(n_way=5, k_shot=1, queries=15)
    ep = sample_episode(tiny_dataset, NOVEL, spec, task_rng(0, 0))
    assert len(ep.support_idx) == 5 and len(ep.query_idx) == 75
    assert not set(ep.support_idx) & set(ep.query_idx)
    assert set(ep.classes) <= set(NOVEL) and len(set(ep.classes)) == 5
    for j, c in enumerate(ep.classes):
        assert tiny_dataset.labels[ep.support_idx[j]] == c
        assert np.all(tiny_dataset.labels[ep.query_idx[ep.query_labels == j]] == c)


def test_boundary_class_size(tiny_dataset):
    spec = EpisodeSpec(n_way=3, k_shot=24 - 15, queries=15)
    ep = sample_episode(tiny_dataset, NOVEL, spec, task_rng(0, 1))
    assert len(ep.support_idx) + len(ep.query_idx) == 3 * 24
    with pytest.raises(InvalidSplitError):
        sample_episode(tiny_dataset, NOVEL, EpisodeSpec(n_way=3, k_shot=10, queries=15), task_rng(0, 1))


def test_too_few_classes(tiny_dataset):
    with pytest.raises(InvalidSplitError):
        sample_episode(tiny_dataset, [0, 1], EpisodeSpec(n_way=5), task_rng(0, 0))


def test_no_collisions_over_many_draws(tiny_dataset):
    spec = EpisodeSpec(n_way=5, k_shot=5, queries=15)
    for t in range(100):
        ep = sample_episode(tiny_dataset, NOVEL, spec, task_rng(7, t))
        idx = np.concatenate([ep.support_idx, ep.query_idx])
        assert len(np.unique(idx)) == len(idx)


def test_total_query_mode():
    spec = EpisodeSpec(n_way=5, queries=12, queries_total=True)
    assert spec.queries_per_class() == [3, 3, 2, 2, 2]


def test_novel_weights_are_support_means(tiny_net, tiny_dataset):
    imgs = tiny_dataset.images[:6]
    w = novel_weights(tiny_net, imgs, 2, 3)
    feats = tiny_net.features_numpy(imgs)
    np.testing.assert_allclose(w, [feats[:3].mean(0), feats[3:].mean(0)], atol=1e-12)


def test_opposite_features_give_zero_weight_row():
    v = np.array([[1.0, -2.0, 0.5], [-1.0, 2.0, -0.5], [0.0, 1.0, 0.0], [0.0, 3.0, 0.0]])
    w = v.reshape(2, 2, 3).mean(axis=1)
    assert np.all(w[0] == 0)
    logits = T.cosine_logits(Tensor(np.array([[1.0, 1.0, 1.0]])), Tensor(w), 20.0).data
    assert np.all(np.isfinite(logits)) and logits[0, 0] == 0


def test_predictions_scale_invariant(rng):
    q, w = rng.normal(size=(10, 4)), rng.normal(size=(3, 4))
    base = predict_from_features(q, w, 20.0)
    np.testing.assert_array_equal(base, predict_from_features(q * 7.5, w * 0.01, 20.0))


def _brute_force(net, dataset, classes, spec):
    """Per-episode loop with explicit cosines, no shared feature cache."""
    accs = []
    for t in range(spec.num_tasks):
        ep = sample_episode(dataset, classes, spec, task_rng(spec.seed, t))
        s = net.features_numpy(dataset.images[ep.support_idx])
        w = s.reshape(ep.n_way, ep.k_shot, -1).mean(axis=1)
        correct = 0
        for i, qi in enumerate(ep.query_idx):
            f = net.features_numpy(dataset.images[qi:qi + 1])[0]
            cos = [f @ w[j] / (np.linalg.norm(f) * np.linalg.norm(w[j])) for j in range(ep.n_way)]
            correct += int(np.argmax(cos) == ep.query_labels[i])
        accs.append(correct / len(ep.query_idx))
    return accs


def test_matches_brute_force(tiny_net, tiny_dataset):
    spec = EpisodeSpec(n_way=5, k_shot=1, queries=5, num_tasks=8, seed=3)
    res = evaluate(tiny_net, tiny_dataset, NOVEL, spec)
    accs = _brute_force(tiny_net, tiny_dataset, NOVEL, spec)
    assert res.per_task_accuracy == pytest.approx(accs, abs=1e-12)
    s = math.sqrt(sum((a - np.mean(accs)) ** 2 for a in accs) / (len(accs) - 1))
    assert res.ci95 == pytest.approx(1.96 * s / math.sqrt(len(accs)), abs=1e-9)


def test_summary_statistics():
    assert summarize([1.0, 0.0]).ci95 == pytest.approx(0.98, abs=1e-12)
    assert summarize([0.5]).ci95 == 0.0
    assert summarize([0.2, 0.4, 0.6]).mean == pytest.approx(0.4)


def test_random_network_near_chance(tiny_dataset):
    net = build_network(tiny_config(), np.random.default_rng(11))
    res = evaluate(net, tiny_dataset, NOVEL, EpisodeSpec(num_tasks=100, queries=5))
    assert 0.2 - 0.08 < res.mean < 0.2 + 0.25


def test_evaluation_does_not_mutate(tiny_net, tiny_dataset):
    def digest():
        return parameter_checksum(tiny_net), hashlib.sha256(tiny_dataset.images.tobytes()).hexdigest()
    before = digest()
    evaluate(tiny_net, tiny_dataset, NOVEL, EpisodeSpec(num_tasks=5))
    assert digest() == before


def test_serial_equals_parallel(tiny_net, tiny_dataset, monkeypatch):
    spec = EpisodeSpec(num_tasks=12, k_shot=2, seed=4)
    serial = evaluate(tiny_net, tiny_dataset, NOVEL, spec, keep_predictions=True)
    monkeypatch.setenv("FFORGE_THREADS", "3")
    parallel = evaluate(tiny_net, tiny_dataset, NOVEL, spec, keep_predictions=True)
    assert serial.per_task_accuracy == parallel.per_task_accuracy
    for a, b in zip(serial.predictions, parallel.predictions):
        np.testing.assert_array_equal(a, b)


def test_same_seed_same_episodes(tiny_dataset):
    a = sample_episode(tiny_dataset, NOVEL, EpisodeSpec(), task_rng(5, 2))
    b = sample_episode(tiny_dataset, NOVEL, EpisodeSpec(), task_rng(5, 2))
    np.testing.assert_array_equal(a.query_idx, b.query_idx)


def test_ensemble_sums_branch_logits(tiny_net, tiny_dataset):
    spec = EpisodeSpec(num_tasks=4, k_shot=2, seed=6)
    res = evaluate(tiny_net, tiny_dataset, NOVEL, spec, keep_predictions=True, ensemble=True)
    for t in range(spec.num_tasks):
        ep = sample_episode(tiny_dataset, NOVEL, spec, task_rng(spec.seed, t))
        total = 0
        for b in range(tiny_net.num_classifiers):
            w = novel_weights(tiny_net, tiny_dataset.images[ep.support_idx], ep.n_way, ep.k_shot, b)
            q = tiny_net.features_numpy(tiny_dataset.images[ep.query_idx], b)
            total = total + T.cosine_logits(Tensor(q), Tensor(w), 20.0).data
        np.testing.assert_array_equal(res.predictions[t], total.argmax(axis=1))
