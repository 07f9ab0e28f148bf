"""Built-in verification suite: gradient checks, augmentation properties,
loss reductions and an evaluator-versus-brute-force comparison.

Each check returns a :class:`CheckResult`; :func:`run_all` drives them for
the ``selfcheck`` command.  Setting ``FFORGE_INJECT_FAULT=leaky_sign`` in the
environment before import flips the leaky-ReLU backward slope, which the
gradient suite must catch.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable, Dict, List, Tuple

import numpy as np

from . import tensor as T
from .augment import ImageBatch, self_mix, sample_self_mix_regions
from .backbone import BackboneConfig, build_network
from .episodes import EpisodeSpec, evaluate, sample_episode, summarize, task_rng
from .gradcheck import check_gradients
from .tensor import RunningStats, Tensor
from .trainer import branch_losses

GRAD_TOLERANCE = 1e-3


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str = ""


def _leaf(rng, *shape, away_from_zero: float = 0.0) -> Tensor:
    x = rng.standard_normal(shape)
    if away_from_zero:
        x = np.sign(x) * (np.abs(x) + away_from_zero)
    return Tensor(x, requires_grad=True)


def _project(out: Tensor, rng) -> Callable[[Tensor], Tensor]:
    """Random fixed linear functional, turning any output into a scalar."""
    r = Tensor(rng.standard_normal(out.shape))
    return lambda y: T.sum(T.mul(y, r))


def _case(op: Callable[..., Tensor], inputs: List[Tensor], rng):
    proj = _project(op(*inputs), rng)
    return (lambda: proj(op(*inputs))), inputs


def _distribution_pair(rng):
    a, b = _leaf(rng, 4, 6), _leaf(rng, 4, 6)
    return a, b


# name -> builder(rng) -> (scalar fn, inputs)
def _cases() -> Dict[str, Callable]:
    def bn(train):
        def build(rng):
            stats = RunningStats(3, np.float64)
            stats.mean = rng.standard_normal(3)
            stats.var = rng.uniform(0.5, 2.0, 3)
            x, g, b = _leaf(rng, 4, 3, 3, 3), _leaf(rng, 3), _leaf(rng, 3)
            return _case(lambda x, g, b: T.batch_norm(x, g, b, stats, train), [x, g, b], rng)
        return build

    def conv(stride, padding, channels=3):
        def build(rng):
            x, k = _leaf(rng, 2, channels, 6, 6), _leaf(rng, 4, channels, 3, 3)
            return _case(lambda x, k: T.conv2d(x, k, stride, padding), [x, k], rng)
        return build

    def pool(rng):
        # well-separated values so the finite step cannot change the argmax
        vals = rng.permutation(2 * 2 * 4 * 4).astype(np.float64).reshape(2, 2, 4, 4) * 0.01
        x = Tensor(vals + rng.uniform(-1e-3, 1e-3, vals.shape), requires_grad=True)
        return _case(T.max_pool2d, [x], rng)

    def kl(rng):
        a, b = _distribution_pair(rng)
        return _case(lambda a, b: T.kl_divergence(T.softmax(a), T.softmax(b)), [a, b], rng)

    def ce(rng):
        z = _leaf(rng, 5, 4)
        y = rng.dirichlet(np.ones(4), size=5)
        return _case(lambda z: T.softmax_cross_entropy(z, y), [z], rng)

    return {
        "add": lambda rng: _case(T.add, [_leaf(rng, 3, 4), _leaf(rng, 4)], rng),
        "sub": lambda rng: _case(T.sub, [_leaf(rng, 3, 4), _leaf(rng, 3, 1)], rng),
        "mul": lambda rng: _case(T.mul, [_leaf(rng, 3, 4), _leaf(rng, 1, 4)], rng),
        "scale": lambda rng: _case(lambda a: T.scale(a, 2.5), [_leaf(rng, 3, 4)], rng),
        "matmul": lambda rng: _case(T.matmul, [_leaf(rng, 3, 5), _leaf(rng, 5, 2)], rng),
        "transpose": lambda rng: _case(T.transpose, [_leaf(rng, 3, 5)], rng),
        "reshape": lambda rng: _case(lambda a: T.reshape(a, (6, 2)), [_leaf(rng, 3, 4)], rng),
        "concat": lambda rng: _case(lambda a, b: T.concat([a, b], 0),
                                    [_leaf(rng, 2, 3), _leaf(rng, 4, 3)], rng),
        "slice_rows": lambda rng: _case(lambda a: T.slice_rows(a, 1, 4), [_leaf(rng, 5, 3)], rng),
        "sum": lambda rng: _case(lambda a: T.sum(a, axis=1), [_leaf(rng, 3, 4)], rng),
        "mean": lambda rng: _case(lambda a: T.mean(a, axis=0, keepdims=True), [_leaf(rng, 3, 4)], rng),
        "leaky_relu": lambda rng: _case(lambda a: T.leaky_relu(a, 0.1),
                                        [_leaf(rng, 4, 5, away_from_zero=0.01)], rng),
        "conv2d": conv(1, 1),
        "conv2d_stride2": conv(2, 0),
        "conv2d_wide": conv(1, 1, channels=8),
        "conv2d_wide_stride2": conv(2, 0, channels=8),
        "max_pool2d": pool,
        "global_average_pool": lambda rng: _case(T.global_average_pool, [_leaf(rng, 2, 3, 4, 4)], rng),
        "batch_norm_train": bn(True),
        "batch_norm_eval": bn(False),
        "l2_normalize": lambda rng: _case(T.l2_normalize, [_leaf(rng, 4, 6)], rng),
        "row_norm": lambda rng: _case(T.row_norm, [_leaf(rng, 4, 6)], rng),
        "softmax": lambda rng: _case(T.softmax, [_leaf(rng, 4, 6)], rng),
        "log_softmax": lambda rng: _case(T.log_softmax, [_leaf(rng, 4, 6)], rng),
        "softmax_cross_entropy": ce,
        "kl_divergence": kl,
        "cosine_logits": lambda rng: _case(lambda f, w: T.cosine_logits(f, w, 20.0),
                                           [_leaf(rng, 4, 6), _leaf(rng, 3, 6)], rng),
    }


GRADIENT_CASES = _cases()


def gradient_errors(instances: int = 10, seed: int = 0, h: float = 1e-4) -> Dict[str, float]:
    """Worst relative error per op over ``instances`` random float64 cases."""
    worst = {}
    for k, (name, build) in enumerate(GRADIENT_CASES.items()):
        errs = []
        for i in range(instances):
            fn, inputs = build(np.random.default_rng([seed, k, i]))
            errs.append(check_gradients(fn, inputs, h))
        worst[name] = max(errs)
    return worst


def check_gradient_suite(instances: int = 10) -> List[CheckResult]:
    return [CheckResult(f"grad:{name}", err < GRAD_TOLERANCE, f"max rel err {err:.2e}")
            for name, err in gradient_errors(instances).items()]


def self_mix_violations(trials: int = 1000, seed: int = 0) -> Dict[str, int]:
    """Count violations of the self-mix contract over seeded random images."""
    counts = {"labels": 0, "outside": 0, "mapping": 0, "distinct": 0}
    for t in range(trials):
        rng = np.random.default_rng([seed, t])
        h, w = (int(v) for v in rng.integers(3, 13, size=2))
        c = int(rng.integers(1, 4))
        img = rng.random((1, c, h, w))
        labels = rng.integers(0, 10, size=1)
        frac = float(rng.uniform(0.2, 0.6))
        len_h, len_w = max(1, round(frac * h)), max(1, round(frac * w))
        # replay the region draw with an identical stream
        src, dst = sample_self_mix_regions(np.random.default_rng([seed, t, 1]), h, w, len_h, len_w)
        out = self_mix(ImageBatch(img, labels), np.random.default_rng([seed, t, 1]), frac)
        counts["labels"] += int(not np.array_equal(out.labels, labels))
        counts["distinct"] += int((src.x, src.y) == (dst.x, dst.y))
        inside = np.zeros((h, w), dtype=bool)
        inside[dst.slices()] = True
        counts["outside"] += int(not np.array_equal(out.pixels[0][:, ~inside], img[0][:, ~inside]))
        expect = img[0][:, src.y:src.y + src.h, src.x:src.x + src.w]
        counts["mapping"] += int(not np.array_equal(out.pixels[0][(slice(None),) + dst.slices()], expect))
    return counts


def check_self_mix(trials: int = 1000) -> List[CheckResult]:
    return [CheckResult(f"selfmix:{k}", v == 0, f"{v} violations in {trials} trials")
            for k, v in self_mix_violations(trials).items()]


def loss_reduction_gaps(seed: int = 0) -> Tuple[float, float]:
    """(|N_cls=1 loss - plain CE|, max KL between identical branches)."""
    rng = np.random.default_rng(seed)
    logits = Tensor(rng.standard_normal((6, 5)) * 3, requires_grad=True)
    y = np.eye(5)[rng.integers(0, 5, size=6)]
    single = float(branch_losses([logits], y, kl_enabled=True).total.data)
    logp = logits.data - logits.data.max(1, keepdims=True)
    logp = logp - np.log(np.exp(logp).sum(1, keepdims=True))
    plain = float(-(y * logp).sum(1).mean())
    cfg = BackboneConfig(blocks=((4, 1), (8, 1)), input_shape=(3, 8, 8), branch_points=(1,),
                         num_classes=5, dtype="float64")
    net = build_network(cfg, rng)
    for src, dst in zip(net.trunk[1:], net.tails[0]):
        for a, b in zip(src.parameters(), dst.parameters()):
            b.data = a.data.copy()
    net.classifiers[1].data = net.classifiers[0].data.copy()
    feats = net.forward_all(rng.random((4, 3, 8, 8)), training=True)
    parts = branch_losses([net.logits(f, j) for j, f in enumerate(feats)], y[:4], kl_enabled=True)
    return abs(single - plain), max(abs(v) for v in parts.kl.values())


def check_loss_reductions() -> List[CheckResult]:
    ce_gap, kl_max = loss_reduction_gaps()
    return [CheckResult("loss:single_branch_is_ce", ce_gap < 1e-12, f"gap {ce_gap:.2e}"),
            CheckResult("loss:identical_branches_kl", kl_max < 1e-9, f"max KL {kl_max:.2e}")]


def brute_force_predictions(support: np.ndarray, queries: np.ndarray, n_way: int, k_shot: int):
    """Nearest class by cosine, looping over every query and class."""
    d = support.shape[1]
    protos = [support[j * k_shot:(j + 1) * k_shot].sum(axis=0) / k_shot for j in range(n_way)]
    preds = []
    for q in queries:
        best, best_j = -np.inf, 0
        qn = q / max(np.sqrt(sum(float(v) ** 2 for v in q)), 1e-12)
        for j, p in enumerate(protos):
            pn = p / max(np.sqrt(sum(float(v) ** 2 for v in p)), 1e-12)
            s = sum(float(qn[i]) * float(pn[i]) for i in range(d))
            if s > best:
                best, best_j = s, j
        preds.append(best_j)
    return np.asarray(preds)


def evaluator_disagreements(dataset, classes, episodes: int = 50, seed: int = 0):
    """(prediction disagreements, |ci95 - hand-rolled ci95|) on a random frozen net."""
    c, h, w = dataset.image_shape
    cfg = BackboneConfig(input_shape=(c, h, w), dtype="float64", branch_points=())
    net = build_network(cfg, np.random.default_rng(seed))
    spec = EpisodeSpec(num_tasks=episodes, seed=seed)
    result = evaluate(net, dataset, classes, spec, keep_predictions=True)
    bad = 0
    for t in range(episodes):
        ep = sample_episode(dataset, classes, spec, task_rng(spec.seed, t))
        sup = net.features_numpy(dataset.images[ep.support_idx])
        qry = net.features_numpy(dataset.images[ep.query_idx])
        oracle = brute_force_predictions(sup, qry, ep.n_way, ep.k_shot)
        bad += int(np.sum(oracle != result.predictions[t]))
    acc = result.per_task_accuracy
    n = len(acc)
    mu = sum(acc) / n
    sd = (sum((a - mu) ** 2 for a in acc) / (n - 1)) ** 0.5
    return bad, abs(result.ci95 - 1.96 * sd / n ** 0.5)


def check_evaluator(episodes: int = 50) -> List[CheckResult]:
    from .data import SynthSpec, generate_synthetic

    ds = generate_synthetic(SynthSpec(num_classes=8, images_per_class=20, seed=3))
    bad, ci_gap = evaluator_disagreements(ds, list(range(8)), episodes)
    one = summarize([1.0, 0.0])
    return [CheckResult("eval:brute_force_oracle", bad == 0, f"{bad} disagreements"),
            CheckResult("eval:ci95", ci_gap < 1e-9 and abs(one.ci95 - 0.98) < 1e-12,
                        f"gap {ci_gap:.2e}")]


def run_all(instances: int = 10, trials: int = 1000, episodes: int = 50,
            report: Callable[[CheckResult], None] = None) -> List[CheckResult]:
    results = []
    t0 = time.perf_counter()
    for group in (lambda: check_gradient_suite(instances), lambda: check_self_mix(trials),
                  check_loss_reductions, lambda: check_evaluator(episodes)):
        for r in group():
            results.append(r)
            if report:
                report(r)
    if report:
        report(CheckResult("elapsed", True, f"{time.perf_counter() - t0:.1f}s"))
    return results
