"""Command-line entry point.

Exit codes: 0 success, 1 a self-check property failed, 2 usage or
configuration error.  Every JSON record written by ``train`` and ``eval``
carries the config hash and seed of the run.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from .augment import ImageBatch, REGIONAL_DROPOUTS
from .backbone import branch_points_for, build_network, load_checkpoint, save_checkpoint
from .config import RunConfig, load_config
from .data import Dataset, SplitManifest, SynthSpec, class_styles, generate_synthetic, \
    load_dataset, save_dataset, split_classes
from .episodes import evaluate
from .errors import FForgeError, InvalidConfigError, InvalidSplitError
from .trainer import train

log = logging.getLogger("fforge")

EXIT_OK, EXIT_FAILED, EXIT_USAGE = 0, 1, 2


class UsageError(FForgeError):
    pass


def _emit(record: dict, path: Optional[Path] = None, mode: str = "a"):
    line = json.dumps(record, sort_keys=True)
    if path is not None:
        with open(path, mode, encoding="utf-8") as fh:
            fh.write(line + "\n")
    return line


def _file_id(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()[:16]


def _config_from(args) -> RunConfig:
    return load_config(getattr(args, "config", None), getattr(args, "set", None) or ())


def _add_config_args(p):
    p.add_argument("--config", type=Path, help="JSON config file with dotted keys")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", default=[],
                   help="override one config key (repeatable)")


# -- shared run helpers -------------------------------------------------------------

def load_pair(data_path, manifest_path):
    dataset = load_dataset(data_path)
    manifest = SplitManifest.load(manifest_path)
    try:
        manifest.validate(dataset.class_count)
    except InvalidSplitError as exc:
        raise UsageError(f"manifest does not match dataset: {exc}") from None
    return dataset, manifest


def apply_train_flags(cfg: RunConfig, dropout=None, no_kl=False, label_smooth=None, ncls=None,
                      seed=None, epochs=None, iters=None, batch_size=None) -> RunConfig:
    """Map the ablation flags onto config keys.

    ``no_kl`` disables self-distillation entirely: the KL term is dropped and,
    unless ``ncls`` says otherwise, the auxiliary branches are removed.
    """
    if dropout is not None:
        cfg.set("train.dropout_mode", dropout)
    if no_kl:
        cfg.set("train.kl_enabled", False)
        if ncls is None:
            ncls = 1
    if ncls is not None:
        cfg.set("backbone.branch_points", list(branch_points_for(ncls, cfg.backbone.num_blocks)))
    for key, value in (("train.label_smoothing", label_smooth), ("train.seed", seed),
                       ("train.epochs", epochs), ("train.iters_per_epoch", iters),
                       ("train.batch_size", batch_size)):
        if value is not None:
            cfg.set(key, value)
    return cfg


def run_training(cfg: RunConfig, dataset: Dataset, manifest: SplitManifest, on_epoch=None):
    """Build and train a network; returns ``(net, report)``."""
    if not manifest.base:
        raise UsageError("manifest has no base classes")
    cfg.set("backbone.num_classes", len(manifest.base))
    cfg.set("backbone.input_shape", list(dataset.image_shape))
    cfg.validate()
    net = build_network(cfg.backbone, np.random.default_rng(cfg.train.seed))
    return net, train(net, dataset, manifest.base, cfg.train, on_epoch)


def split_classes_of(manifest: SplitManifest, split: str) -> List[int]:
    classes = getattr(manifest, split)
    if not classes:
        raise UsageError(f"manifest has no {split} classes")
    return classes


def run_eval(net, cfg: RunConfig, dataset: Dataset, classes: Sequence[int], use_lrl: bool,
             ensemble: bool = False):
    if use_lrl:
        if ensemble:
            raise UsageError("--ensemble cannot be combined with --lrl")
        from .lrl import evaluate_lrl
        return evaluate_lrl(net, dataset, classes, cfg.episodes, cfg.lrl)
    return evaluate(net, dataset, classes, cfg.episodes, ensemble=ensemble)


def eval_record(cfg: RunConfig, result, checkpoint_id: str, use_lrl: bool, split: str) -> dict:
    spec = cfg.episodes
    record = {
        "n_way": spec.n_way, "k_shot": spec.k_shot, "T": spec.queries, "num_tasks": spec.num_tasks,
        "queries_total": spec.queries_total, "mean": result.mean, "ci95": result.ci95,
        "seed": spec.seed, "checkpoint_id": checkpoint_id, "lrl": use_lrl, "split": split,
        "config_hash": cfg.config_hash(),
    }
    if use_lrl:
        record.update(gamma=cfg.lrl.gamma, lr=cfg.lrl.initial_lr(spec.k_shot), epochs=cfg.lrl.epochs)
    return record


# -- commands ---------------------------------------------------------------------------

def cmd_gen_data(args) -> int:
    cfg = _config_from(args)
    if args.spec is not None:
        mapping = json.loads(Path(args.spec).read_text(encoding="utf-8"))
        if not isinstance(mapping, dict):
            raise InvalidConfigError(f"{args.spec}: top level must be a JSON object")
        for key, value in mapping.items():
            cfg.set(key if key.startswith("synth.") else f"synth.{key}", value)
    for key, value in (("synth.num_classes", args.classes), ("synth.images_per_class", args.per_class),
                       ("synth.seed", args.seed)):
        if value is not None:
            cfg.set(key, value)
    spec: SynthSpec = cfg.synth
    styles = class_styles(spec)
    manifest = split_classes(spec.num_classes, cfg.split.base_frac, cfg.split.val_frac, cfg.split.seed)
    dataset = generate_synthetic(spec)
    out = Path(args.out)
    save_dataset(dataset, out)
    manifest_path = Path(args.manifest) if args.manifest else out.with_suffix(".manifest")
    manifest.save(manifest_path)
    split_of = {c: s for s in ("base", "val", "novel") for c in getattr(manifest, s)}
    print(f"{'class':>5}  {'split':<6} {'shape':<8} {'hue':>3} {'freq':>5} {'images':>6}")
    for c, st in enumerate(styles):
        print(f"{c:>5}  {split_of[c]:<6} {st.shape:<8} {st.hue_bucket:>3} {st.frequency:>5.2f} "
              f"{spec.images_per_class:>6}")
    print(f"wrote {out} ({out.stat().st_size} bytes) and {manifest_path}; "
          f"{len(manifest.base)}/{len(manifest.val)}/{len(manifest.novel)} base/val/novel")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = apply_train_flags(_config_from(args), args.dropout, args.no_kl, args.label_smooth,
                            args.ncls, args.seed, args.epochs, args.iters, args.batch_size)
    dataset, manifest = load_pair(args.data, args.manifest)
    report_path = Path(args.report) if args.report else Path(args.out).with_suffix(".jsonl")
    report_path.write_text("", encoding="utf-8")

    def on_epoch(record):
        line = _emit(record, report_path)
        if not args.quiet:
            print(line, flush=True)

    net, report = run_training(cfg, dataset, manifest, on_epoch)
    config_hash = cfg.config_hash()
    ckpt_id = save_checkpoint(net, args.out, {"run_config": cfg.flat(), "config_hash": config_hash})
    summary = {
        "summary": True, "checkpoint_id": ckpt_id, "config_hash": config_hash,
        "seed": cfg.train.seed, "num_classifiers": net.num_classifiers,
        "kl_pairs": report.epochs[-1]["kl_pairs"] if report.epochs else 0,
        "base_accuracy": report.base_accuracy, "loss_trace": report.iter_losses,
        "final_loss": report.iter_losses[-1] if report.iter_losses else None,
    }
    if args.eval_tasks:
        spec_cfg = cfg
        spec_cfg.set("episodes.num_tasks", args.eval_tasks)
        for split in ("val", "novel"):
            classes = getattr(manifest, split)
            if len(classes) >= spec_cfg.episodes.n_way:
                res = evaluate(net, dataset, classes, spec_cfg.episodes)
                summary[f"{split}_accuracy"] = {"mean": res.mean, "ci95": res.ci95}
    line = _emit(summary, report_path)
    if not args.quiet:
        print(line)
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = _config_from(args)
    for key, value in (("episodes.n_way", args.way), ("episodes.k_shot", args.shot),
                       ("episodes.queries", args.queries), ("episodes.num_tasks", args.tasks),
                       ("episodes.seed", args.seed), ("lrl.gamma", args.gamma), ("lrl.lr", args.lr),
                       ("lrl.epochs", args.lrl_epochs)):
        if value is not None:
            cfg.set(key, value)
    if args.queries_total:
        cfg.set("episodes.queries_total", True)
    cfg.lrl.validate()
    dataset, manifest = load_pair(args.data, args.manifest)
    net, _ = load_checkpoint(args.checkpoint)
    if tuple(net.cfg.input_shape) != dataset.image_shape:
        raise UsageError(f"checkpoint expects images {net.cfg.input_shape}, dataset has "
                         f"{dataset.image_shape}")
    classes = split_classes_of(manifest, args.split)
    result = run_eval(net, cfg, dataset, classes, args.lrl, args.ensemble)
    record = eval_record(cfg, result, _file_id(args.checkpoint), args.lrl, args.split)
    if args.ensemble:
        record["ensemble"] = True
    _emit(record, Path(args.out) if args.out else None)
    print(json.dumps(record, sort_keys=True))
    print(f"{cfg.episodes.n_way}-way {cfg.episodes.k_shot}-shot{' +LRL' if args.lrl else ''}: "
          f"{100 * result.mean:.2f} +- {100 * result.ci95:.2f} %")
    return EXIT_OK


def _to_u8(img: np.ndarray) -> np.ndarray:
    return np.rint(np.clip(img, 0, 1) * 255).astype(np.uint8)


def write_pnm(path, image: np.ndarray):
    """Write ``[C, H, W]`` in [0, 1] as binary PPM (3 channels) or PGM (1 channel)."""
    c, h, w = image.shape
    if c not in (1, 3):
        raise UsageError("preview needs 1 or 3 channels")
    magic = b"P6" if c == 3 else b"P5"
    body = _to_u8(image).transpose(1, 2, 0).tobytes()
    Path(path).write_bytes(magic + f"\n{w} {h}\n255\n".encode("ascii") + body)


def preview_grid(batch: ImageBatch, modes: Sequence[str], rng, patch_frac: float, gap: int = 2):
    """Rows: originals, then one row per regional dropout mode."""
    rows = [batch.pixels] + [REGIONAL_DROPOUTS[m](batch, rng, patch_frac).pixels for m in modes]
    n, c, h, w = batch.pixels.shape
    grid = np.ones((c, len(rows) * (h + gap) - gap, n * (w + gap) - gap))
    for r, pix in enumerate(rows):
        for i in range(n):
            grid[:, r * (h + gap):r * (h + gap) + h, i * (w + gap):i * (w + gap) + w] = pix[i]
    return grid


def cmd_augment_preview(args) -> int:
    if args.data:
        dataset = load_dataset(args.data)
    else:
        dataset = generate_synthetic(SynthSpec(num_classes=args.count, images_per_class=1))
    if len(dataset) < max(2, args.count):
        raise UsageError("dataset has too few images for a preview")
    rng = np.random.default_rng(args.seed)
    idx = np.sort(rng.choice(len(dataset), size=args.count, replace=False))
    batch = ImageBatch(dataset.images[idx].astype(np.float64), dataset.labels[idx])
    modes = list(REGIONAL_DROPOUTS) if args.mode == "all" else [args.mode]
    modes = [m for m in modes if m != "none"]
    write_pnm(args.out, preview_grid(batch, modes, rng, args.patch_frac))
    print(f"wrote {args.out}: rows = original, {', '.join(modes)}")
    return EXIT_OK


def cmd_selfcheck(args) -> int:
    from .selfcheck import run_all

    def report(r):
        print(f"{'PASS' if r.passed else 'FAIL'}  {r.name:<32} {r.detail}", flush=True)

    if args.quick:
        results = run_all(instances=3, trials=200, episodes=10, report=report)
    else:
        results = run_all(report=report)
    failed = [r.name for r in results if not r.passed]
    if failed:
        print(f"selfcheck failed: {', '.join(failed)}")
        return EXIT_FAILED
    print("selfcheck passed")
    return EXIT_OK


ABLATIONS: Dict[str, List[dict]] = {
    "components": [
        {"name": "baseline", "dropout": "none", "no_kl": True},
        {"name": "self-distillation", "dropout": "none", "ncls": 3},
        {"name": "self-mix", "dropout": "selfmix", "no_kl": True},
        {"name": "self-augmentation", "dropout": "selfmix", "ncls": 3},
        {"name": "cutout+distillation", "dropout": "cutout", "ncls": 3},
        {"name": "cutmix+distillation", "dropout": "cutmix", "ncls": 3},
    ],
    "dropout": [{"name": m, "dropout": m} for m in ("none", "selfmix", "cutout", "cutmix")],
    "ncls": [{"name": f"ncls={n}", "ncls": n} for n in (1, 2, 3, 4)],
    "label-smooth": [{"name": f"eps={e}", "label_smooth": e} for e in (0.0, 0.1)],
}


def cmd_ablate(args) -> int:
    dataset, manifest = load_pair(args.data, args.manifest)
    novel = split_classes_of(manifest, "novel")
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    results_path = out_dir / "ablation.jsonl"
    results_path.write_text("", encoding="utf-8")
    table = []
    for variant in ABLATIONS[args.axis]:
        flags = {k: v for k, v in variant.items() if k != "name"}
        means, base_accs = [], []
        for seed in args.seeds:
            cfg = apply_train_flags(_config_from(args), seed=seed, **flags)
            if args.tasks is not None:
                cfg.set("episodes.num_tasks", args.tasks)
            net, report = run_training(cfg, dataset, manifest)
            ckpt = out_dir / f"{variant['name']}-seed{seed}.ffw"
            save_checkpoint(net, ckpt, {"run_config": cfg.flat(), "config_hash": cfg.config_hash()})
            result = evaluate(net, dataset, novel, cfg.episodes)
            record = eval_record(cfg, result, _file_id(ckpt), False, "novel")
            record.update(variant=variant["name"], train_seed=seed, base_accuracy=report.base_accuracy,
                          final_loss=report.iter_losses[-1] if report.iter_losses else None)
            _emit(record, results_path)
            print(json.dumps(record, sort_keys=True), flush=True)
            means.append(result.mean)
            base_accs.append(report.base_accuracy)
        table.append((variant["name"], float(np.mean(means)), base_accs))
    print(f"\n{'variant':<24} {'novel mean':>10} {'base acc':>9}")
    for name, mean, base in table:
        base_txt = f"{np.mean(base):.4f}" if all(b is not None for b in base) else "n/a"
        print(f"{name:<24} {mean:>10.4f} {base_txt:>9}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fforge", description="Few-shot self-augmentation toolkit")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="render the synthetic dataset and its split manifest")
    _add_config_args(p)
    p.add_argument("--spec", type=Path, help="JSON object of synthetic-spec fields")
    p.add_argument("--out", required=True, help="output .fsd path")
    p.add_argument("--manifest", help="output manifest path (default: next to --out)")
    p.add_argument("--classes", type=int)
    p.add_argument("--per-class", type=int)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train on the base split")
    _add_config_args(p)
    p.add_argument("--data", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--report", help="JSON-lines report path (default: checkpoint path with .jsonl)")
    p.add_argument("--dropout", choices=sorted(REGIONAL_DROPOUTS))
    p.add_argument("--no-kl", action="store_true", help="disable self-distillation")
    p.add_argument("--label-smooth", type=float)
    p.add_argument("--ncls", type=int, help="number of classifiers (main + auxiliary)")
    p.add_argument("--seed", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--iters", type=int, help="iterations per epoch")
    p.add_argument("--batch-size", type=int)
    p.add_argument("--eval-tasks", type=int, default=0,
                   help="after training, evaluate this many val and novel episodes")
    p.add_argument("--quiet", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="episodic evaluation of a checkpoint")
    _add_config_args(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--split", choices=("novel", "val", "base"), default="novel")
    p.add_argument("--way", type=int)
    p.add_argument("--shot", type=int)
    p.add_argument("--queries", type=int)
    p.add_argument("--queries-total", action="store_true",
                   help="treat --queries as the per-episode total instead of per class")
    p.add_argument("--tasks", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--lrl", action="store_true", help="fine-tune with the local representation learner")
    p.add_argument("--ensemble", action="store_true",
                   help="sum the cosine logits of every branch instead of using the main one")
    p.add_argument("--gamma", type=float)
    p.add_argument("--lr", type=float)
    p.add_argument("--lrl-epochs", type=int)
    p.add_argument("--out", help="append the result record to this JSON-lines file")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("augment-preview", help="write a PPM grid of regional dropout outputs")
    p.add_argument("--data")
    p.add_argument("--mode", choices=sorted(REGIONAL_DROPOUTS) + ["all"], default="all")
    p.add_argument("--count", type=int, default=8)
    p.add_argument("--patch-frac", type=float, default=0.5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_augment_preview)

    p = sub.add_parser("selfcheck", help="run the built-in verification suite")
    p.add_argument("--quick", action="store_true")
    p.set_defaults(func=cmd_selfcheck)

    p = sub.add_parser("ablate", help="train and evaluate a sweep of configurations")
    _add_config_args(p)
    p.add_argument("--data", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--axis", choices=sorted(ABLATIONS), default="components")
    p.add_argument("--seeds", type=int, nargs="+", default=[0])
    p.add_argument("--tasks", type=int)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (FForgeError, OSError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
