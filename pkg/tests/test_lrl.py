import numpy as np
import pytest

from fforge import tensor as T
from fforge.backbone import parameter_checksum
from fforge.episodes import EpisodeSpec, evaluate, sample_episode, task_rng
from fforge.errors import InvalidConfigError
from fforge.lrl import (LrlConfig, LrlState, evaluate_lrl, lrl_features, lrl_finetune, lrl_loss,
                        lrl_weights, make_fake_batch)
from fforge.tensor import Tensor

NOVEL = [4, 5, 6, 7, 8, 9, 10, 11]


def _quick(**kw):
    base = dict(epochs=4, decay_epochs=(1, 2, 3))
    base.update(kw)
    return LrlConfig(**base)


def _support(dataset, n_way=2, k_shot=2):
    idx = np.concatenate([dataset.indices_of(c)[:k_shot] for c in NOVEL[:n_way]])
    return dataset.images[idx]


def test_clone_reproduces_frozen_block(tiny_net, tiny_dataset):
    fg, fb = lrl_features(LrlState(tiny_net), _support(tiny_dataset))
    assert np.abs(fg.data - fb.data).max() <= 1e-6
    np.testing.assert_allclose(fg.data, tiny_net.features_numpy(_support(tiny_dataset)), atol=1e-12)


def test_initial_weights_and_penalty(tiny_net, tiny_dataset):
    imgs = _support(tiny_dataset)
    fg, fb = lrl_features(LrlState(tiny_net), imgs)
    w = lrl_weights(fg, fb, 2, 2).data
    np.testing.assert_allclose(w, 2 * fg.data.reshape(2, 2, -1).mean(axis=1), atol=1e-10)
    labels = np.array([0, 0, 1, 1])
    with_pen = lrl_loss(Tensor(w), (fg, fb), labels, (fg, fb), 1e3, 20.0)
    without = lrl_loss(Tensor(w), (fg, fb), labels, (fg, fb), 0.0, 20.0)
    assert float(with_pen.data) == pytest.approx(float(without.data), abs=1e-9)


def test_zero_gamma_is_cross_entropy(rng):
    fg, fb = Tensor(rng.normal(size=(4, 3))), Tensor(rng.normal(size=(4, 3)))
    w = Tensor(rng.normal(size=(2, 3)))
    labels = np.array([0, 1, 1, 0])
    ce = T.softmax_cross_entropy(T.cosine_logits(T.add(fg, fb), w, 20.0), np.eye(2)[labels])
    assert float(lrl_loss(w, (fg, fb), labels, (fg, fb), 0.0, 20.0).data) == pytest.approx(float(ce.data))


def test_penalty_recompute(rng):
    fg, fb = rng.normal(size=(4, 3)), rng.normal(size=(4, 3))
    w = Tensor(rng.normal(size=(2, 3)))
    labels = np.array([0, 1, 1, 0])
    gamma = 0.3
    a = float(lrl_loss(w, (Tensor(fg), Tensor(fb)), labels, (Tensor(fg), Tensor(fb)), gamma, 20.0).data)
    b = float(lrl_loss(w, (Tensor(fg), Tensor(fb)), labels, (Tensor(fg), Tensor(fb)), 0.0, 20.0).data)
    assert a - b == pytest.approx(gamma * np.linalg.norm(fg - fb, axis=1).sum(), abs=1e-10)


def test_only_clone_is_trained(tiny_net, tiny_dataset):
    before = parameter_checksum(tiny_net)
    imgs = _support(tiny_dataset)
    out = lrl_finetune(tiny_net, imgs, imgs, 2, 2, _quick(), np.random.default_rng(0))
    assert parameter_checksum(tiny_net) == before
    assert all(p.grad is None for p in tiny_net.parameters())
    fg, _ = lrl_features(out.state, imgs)
    np.testing.assert_allclose(fg.data, tiny_net.features_numpy(imgs), atol=1e-12)
    moved = [not np.array_equal(a.data, b.data)
             for a, b in zip(out.state.clone.parameters(), tiny_net.trunk[-1].parameters())]
    assert any(moved)


def test_zero_lr_matches_plain_evaluation(tiny_net, tiny_dataset):
    spec = EpisodeSpec(n_way=5, k_shot=1, queries=5, num_tasks=4, seed=2)
    plain = evaluate(tiny_net, tiny_dataset, NOVEL, spec, keep_predictions=True)
    lrl = evaluate_lrl(tiny_net, tiny_dataset, NOVEL, spec, _quick(lr=0.0), keep_predictions=True)
    for a, b in zip(plain.predictions, lrl.predictions):
        np.testing.assert_array_equal(a, b)


def test_learning_rate_trace():
    cfg = LrlConfig()
    lrs = [cfg.lr_at(e, 5) for e in range(cfg.epochs)]
    assert lrs[0] == 1e-1 and lrs[79] == 1e-1
    assert lrs[80] == pytest.approx(1e-2) and lrs[120] == pytest.approx(1e-3)
    assert lrs[160] == pytest.approx(1e-4) and lrs[199] == pytest.approx(1e-4)
    assert cfg.lr_at(0, 1) == 1e-2


def test_config_validation():
    with pytest.raises(InvalidConfigError):
        LrlConfig(epochs=100).validate()
    with pytest.raises(InvalidConfigError):
        LrlConfig(dropout_mode="cutmix").validate()


def test_fake_batch_single_shot(tiny_dataset, rng):
    imgs = _support(tiny_dataset, 2, 1)
    w_imgs, q_imgs, q_labels = make_fake_batch(imgs, np.array([0, 1]), rng, LrlConfig())
    assert w_imgs.shape == q_imgs.shape == imgs.shape
    assert list(q_labels) == [0, 1]
    assert not np.array_equal(w_imgs, q_imgs)


def test_identity_transforms(tiny_dataset, rng):
    imgs = _support(tiny_dataset)
    cfg = LrlConfig(light_augment=False, dropout_mode="none", fake_multiplicity=2)
    w_imgs, q_imgs, q_labels = make_fake_batch(imgs, np.array([0, 0, 1, 1]), rng, cfg)
    np.testing.assert_array_equal(w_imgs, imgs)
    np.testing.assert_array_equal(q_imgs, np.concatenate([imgs, imgs]))
    assert list(q_labels) == [0, 0, 1, 1, 0, 0, 1, 1]


def test_deterministic(tiny_net, tiny_dataset):
    spec = EpisodeSpec(n_way=3, k_shot=1, queries=4, num_tasks=2)
    a = evaluate_lrl(tiny_net, tiny_dataset, NOVEL, spec, _quick(), keep_predictions=True)
    b = evaluate_lrl(tiny_net, tiny_dataset, NOVEL, spec, _quick(), keep_predictions=True)
    assert a.per_task_accuracy == b.per_task_accuracy


def test_episodes_are_isolated(tiny_net, tiny_dataset):
    """An episode's result does not depend on which episodes ran before it."""
    spec = EpisodeSpec(n_way=3, k_shot=1, queries=4, num_tasks=3, seed=1)
    cfg = _quick()
    full = evaluate_lrl(tiny_net, tiny_dataset, NOVEL, spec, cfg, keep_predictions=True)
    ep = sample_episode(tiny_dataset, NOVEL, spec, task_rng(spec.seed, 2))
    alone = lrl_finetune(tiny_net, tiny_dataset.images[ep.support_idx], tiny_dataset.images[ep.query_idx],
                         3, 1, cfg, np.random.default_rng([cfg.seed, spec.seed, 2]))
    np.testing.assert_array_equal(full.predictions[2], alone.predictions)


def test_losses_finite_and_recorded(tiny_net, tiny_dataset):
    imgs = _support(tiny_dataset)
    out = lrl_finetune(tiny_net, imgs, imgs, 2, 2, _quick(gamma=1e6), np.random.default_rng(1))
    assert len(out.losses) == 4 and np.all(np.isfinite(out.losses))
    assert out.lrs == pytest.approx([1e-1, 1e-2, 1e-3, 1e-4])
