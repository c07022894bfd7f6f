"""``bolt`` command line: gen-data, pretrain, finetune, probe, eval, compare, inspect-perturb.

Exit codes: 0 success, 1 usage/config error, 2 runtime numeric failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np
import torch

from . import checkpoint as ckpt
from .config import ConfigError, RunConfig, apply_overrides, parse_config
from .data import (
    DatasetError,
    LabeledDataset,
    balance_classes,
    generate_synthetic,
    load_image_folder,
    save_image_folder,
    split_dataset,
    write_manifest,
)
from .evaluation import (
    INITS,
    ComparisonRow,
    StrategySpec,
    build_classifier,
    Classifier,
    evaluate,
    finetune,
    format_table,
    linear_probe,
    run_comparison,
    uniform_test_subsample,
    write_results_csv,
)
from .framework import BoltTrainer, Branch, NumericalError, build_online, image_patches
from .perturb import PerturbConfig, difficulty_label, difficulty_score, sample_permutation

log = logging.getLogger("bolt")

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC = 0, 1, 2


class UsageError(Exception):
    pass


# -- shared plumbing -------------------------------------------------------------


def load_dataset(cfg: RunConfig) -> LabeledDataset:
    d = cfg.data
    if d.source == "synthetic":
        ds = generate_synthetic(cfg.synthetic_spec())
    else:
        ds = load_image_folder(d.source, shape=(d.H, d.W, d.C))
    if d.balance_per_class:
        ds = balance_classes(ds, d.balance_per_class, d.seed)
    return ds


def load_splits(cfg: RunConfig) -> tuple[LabeledDataset, LabeledDataset, LabeledDataset]:
    return split_dataset(load_dataset(cfg), tuple(cfg.data.ratios), cfg.data.seed)


def pretrain(cfg: RunConfig, proxy: LabeledDataset, out_dir: Path | None = None, metrics_path: Path | None = None) -> BoltTrainer:
    """Run the pretraining loop on ``proxy`` (labels unused); write metrics and checkpoints."""
    t = cfg.train
    trainer = BoltTrainer(cfg.model_config(), cfg.train_config(), seed=cfg.model.init_seed)
    batch_rng = np.random.default_rng(t.batch_seed)
    bs = min(t.batch_size, len(proxy))
    out_dir = Path(out_dir or cfg.io.checkpoint_dir)
    metrics_path = Path(metrics_path or cfg.io.metrics_path)
    metrics_path.parent.mkdir(parents=True, exist_ok=True)
    with metrics_path.open("w") as fh:
        fh.write("step,loss_total,loss_bolt,loss_diff,diff_acc,repr_std\n")
        for _ in range(t.steps):
            idx = np.sort(batch_rng.choice(len(proxy), size=bs, replace=False))
            report = trainer.train_step(proxy.images[idx])
            fh.write(report.csv_row() + "\n")
            if trainer.step % t.checkpoint_every == 0:
                ckpt.save_checkpoint(out_dir / f"step{trainer.step:06d}.bolt", trainer)
    ckpt.save_checkpoint(out_dir / "pretrain.bolt", trainer)
    return trainer


def branch_for(init: str, cfg: RunConfig, checkpoint: str | None) -> Branch:
    if init == "scratch":
        return build_online(cfg.model_config(), cfg.model.init_seed)
    if not checkpoint:
        raise UsageError(f"--init {init} requires --checkpoint")
    trainer = ckpt.load_checkpoint(checkpoint)
    if trainer.model_cfg != cfg.model_config():
        _check_structure(trainer.online, cfg)
    return trainer.online


def _check_structure(branch: Branch, cfg: RunConfig) -> None:
    fresh = build_online(cfg.model_config())
    ckpt.load_module_tensors(fresh, {k: v for k, v in branch.state_dict().items()})


def save_classifier(path: Path, model: Classifier, num_classes: int, extra: dict | None = None) -> Path:
    meta = {"kind": "classifier", "model": model.cfg.to_dict(), "num_classes": num_classes, **(extra or {})}
    return ckpt.write_tensors(path, dict(model.state_dict()), meta)


def load_classifier(path: str | Path, cfg: RunConfig | None = None) -> Classifier:
    from .framework import ModelConfig

    tensors, meta = ckpt.read_tensors(path)
    if meta.get("kind") != "classifier":
        raise ckpt.CheckpointFormatError(f"{path}: not a classifier checkpoint (kind={meta.get('kind')!r})")
    model_cfg = cfg.model_config() if cfg is not None else ModelConfig.from_dict(meta["model"])
    model = Classifier(model_cfg, meta["num_classes"])
    ckpt.load_module_tensors(model, tensors)
    return model


def _row_for(name: str, fraction: float, results) -> ComparisonRow:
    import statistics

    return ComparisonRow(
        name,
        fraction,
        float(statistics.median(r.acc for r in results)),
        float(statistics.median(r.f1_macro for r in results)),
        len(results),
        list(results),
    )


# -- commands ----------------------------------------------------------------------


def cmd_gen_data(cfg: RunConfig, args) -> int:
    out = Path(args.out)
    ds = generate_synthetic(cfg.synthetic_spec())
    if cfg.data.balance_per_class:
        ds = balance_classes(ds, cfg.data.balance_per_class, cfg.data.seed)
    train, val, test = split_dataset(ds, tuple(cfg.data.ratios), cfg.data.seed)
    save_image_folder(ds, out / "images")
    write_manifest(out / "manifest.csv", {"train": train, "val": val, "test": test})
    print(f"wrote {len(ds)} images ({ds.num_classes} classes) to {out / 'images'}; manifest {out / 'manifest.csv'}")
    return EXIT_OK


def cmd_pretrain(cfg: RunConfig, args) -> int:
    train, _, _ = load_splits(cfg)
    out_dir = Path(args.out) if args.out else Path(cfg.io.checkpoint_dir)
    try:
        trainer = pretrain(cfg, train, out_dir, Path(args.metrics) if args.metrics else None)
    except NumericalError as exc:
        dump = out_dir / "failure.json"
        dump.parent.mkdir(parents=True, exist_ok=True)
        dump.write_text(json.dumps({"error": str(exc), "report": vars(exc.report) if exc.report else None}, indent=2))
        print(f"error: {exc} (diagnostics in {dump})", file=sys.stderr)
        return EXIT_NUMERIC
    print(f"pretrained {trainer.step} steps; checkpoint {out_dir / 'pretrain.bolt'}")
    return EXIT_OK


def cmd_probe(cfg: RunConfig, args) -> int:
    train, _, test = load_splits(cfg)
    branch = branch_for(args.init, cfg, args.checkpoint)
    results = [
        linear_probe(branch, train, test, seed=s, epochs=cfg.eval.probe_epochs, lr=cfg.eval.probe_lr)
        for s in cfg.eval.seeds
    ]
    row = _row_for(args.init, 1.0, results)
    write_results_csv(args.results or cfg.io.results_path, [row])
    print(f"probe[{args.init}] ACC {row.acc:.4f} F1 {row.f1_macro:.4f}")
    return EXIT_OK


def cmd_finetune(cfg: RunConfig, args) -> int:
    from .data import subsample_fraction

    train, val, _ = load_splits(cfg)
    branch = branch_for(args.init, cfg, args.checkpoint)
    seed = cfg.eval.seeds[0]
    subset = subsample_fraction(train, args.fraction, seed)
    model = build_classifier(cfg.model_config(), train.num_classes, seed=seed, init_from=branch)
    result = finetune(model, subset, val, cfg.finetune_config(seed))
    out = Path(args.out)
    save_classifier(out, result.model, train.num_classes, {"init": args.init, "label_fraction": args.fraction})
    print(f"finetuned ({args.init}, fraction {args.fraction}): best val ACC {result.best_val_acc:.4f} at epoch {result.best_epoch}; model {out}")
    return EXIT_OK


def cmd_eval(cfg: RunConfig, args) -> int:
    _, _, test = load_splits(cfg)
    if cfg.eval.uniform_per_class:
        test = uniform_test_subsample(test, cfg.eval.uniform_per_class, cfg.data.seed)
    model = load_classifier(args.model, cfg)
    res = evaluate(model, test)
    row = _row_for(args.name, 1.0, [res])
    write_results_csv(args.results or cfg.io.results_path, [row])
    print(f"ACC {row.acc:.4f} F1 {row.f1_macro:.4f}")
    return EXIT_OK


def cmd_compare(cfg: RunConfig, args) -> int:
    train, val, test = load_splits(cfg)
    if cfg.eval.uniform_per_class:
        test = uniform_test_subsample(test, cfg.eval.uniform_per_class, cfg.data.seed)
    pretrained: dict[str, list[Branch]] = {}
    for item in args.checkpoint or []:
        init, _, paths = item.partition("=")
        if init not in INITS or not paths:
            raise UsageError(f"--checkpoint expects INIT=PATH[,PATH...], got {item!r}")
        pretrained[init] = [branch_for(init, cfg, p) for p in paths.split(",")]
    strategies = [s.strip() for s in args.strategies.split(",") if s.strip()]
    specs = [StrategySpec(s, s, f) for s in strategies for f in cfg.eval.fractions]
    try:
        rows = run_comparison(specs, train, val, test, cfg.model_config(), cfg.eval.seeds, pretrained, cfg.finetune_config())
    except FileNotFoundError as exc:
        raise UsageError(str(exc)) from exc
    write_results_csv(args.results or cfg.io.results_path, rows)
    print(format_table(rows))
    return EXIT_OK


def cmd_inspect_perturb(cfg: RunConfig, args) -> int:
    model_cfg = cfg.model_config()
    if args.image:
        from PIL import Image

        from .data import _to_array

        with Image.open(args.image) as im:
            pixels = _to_array(im, cfg.data.H, cfg.data.W, cfg.data.C)
    else:
        pixels = generate_synthetic(cfg.synthetic_spec()).images[args.index]
    online = build_online(model_cfg, cfg.model.init_seed)
    rng = np.random.default_rng(args.seed)
    pc: PerturbConfig = model_cfg.perturb
    D = model_cfg.embed.D
    with torch.no_grad():
        z_o = online.embed(image_patches(torch.as_tensor(pixels), model_cfg))
        perm_a = sample_permutation(pc.N, rng)
        perm_b = sample_permutation(pc.N, rng)
        view_a = online.perturb(z_o, perm_a)
        view_b = online.perturb(z_o, perm_b)
        score_a = float(difficulty_score(view_a, perm_a, z_o))
        score_b = float(difficulty_score(view_b, perm_b, z_o))
    report = {
        "config": {"N": pc.N, "S": pc.S, "M": pc.M, "K": pc.K, "D": D, "identity": model_cfg.identity_perturb},
        "shapes": {
            "tokens": [pc.N, D],
            "windows": [pc.K, pc.M * D],
            "long_tokens": [pc.K, pc.S * D],
            "split": [pc.K * pc.S, D],
        },
        "views": [
            {"perm": perm_a.tolist(), "difficulty_score": score_a},
            {"perm": perm_b.tolist(), "difficulty_score": score_b},
        ],
        "difficulty_label": difficulty_label(score_a, score_b),
        "seed": args.seed,
        "init_seed": cfg.model.init_seed,
    }
    text = json.dumps(report, indent=2)
    if args.out:
        Path(args.out).write_text(text)
    print(text)
    return EXIT_OK


COMMANDS = {
    "gen-data": cmd_gen_data,
    "pretrain": cmd_pretrain,
    "finetune": cmd_finetune,
    "probe": cmd_probe,
    "eval": cmd_eval,
    "compare": cmd_compare,
    "inspect-perturb": cmd_inspect_perturb,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="bolt", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name: str, help: str, data_seed: bool = True) -> argparse.ArgumentParser:
        p = sub.add_parser(name, help=help)
        p.add_argument("--config", help="TOML run configuration (defaults used when omitted)")
        p.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE", help="override a config value")
        if data_seed:
            p.add_argument("--seed", type=int, help="data seed override (data.seed)")
        return p

    p = add("gen-data", "write the configured synthetic dataset as an image folder plus manifest")
    p.add_argument("--out", required=True)

    p = add("pretrain", "self-supervised pretraining on the training split")
    p.add_argument("--steps", type=int)
    p.add_argument("--alpha", type=float, help="difficulty-loss weight; 0 runs the ablation without it")
    p.add_argument("--out", help="checkpoint directory")
    p.add_argument("--metrics", help="metrics CSV path")

    for name, help in (("probe", "linear probe on frozen features"), ("finetune", "finetune with a classification head")):
        p = add(name, help)
        p.add_argument("--init", choices=INITS, default="scratch")
        p.add_argument("--checkpoint")
        if name == "finetune":
            p.add_argument("--fraction", type=float, default=1.0)
            p.add_argument("--out", required=True, help="classifier checkpoint to write")
        else:
            p.add_argument("--results")

    p = add("eval", "evaluate a finetuned classifier on the test split")
    p.add_argument("--model", required=True)
    p.add_argument("--name", default="model")
    p.add_argument("--results")

    p = add("compare", "strategy x label-fraction finetuning table")
    p.add_argument("--checkpoint", action="append", metavar="INIT=PATH[,PATH...]")
    p.add_argument("--strategies", default="scratch,bolt-no-diff,bolt")
    p.add_argument("--fractions", help="comma-separated label fractions")
    p.add_argument("--seeds", help="comma-separated seeds")
    p.add_argument("--results")

    p = add("inspect-perturb", "JSON report of one perturbed view pair", data_seed=False)
    src = p.add_mutually_exclusive_group()
    src.add_argument("--image")
    src.add_argument("--synthetic", action="store_true", default=True)
    p.add_argument("--index", type=int, default=0, help="synthetic sample index")
    p.add_argument("--seed", type=int, default=0, help="permutation sampling seed")
    p.add_argument("--identity", action="store_true", help="M = S with identity fusion")
    p.add_argument("--out")
    return parser


def _overrides(args) -> dict:
    out = {}
    for item in args.set:
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(f"--set expects SECTION.KEY=VALUE, got {item!r}")
        out[key.strip()] = value.strip()
    if args.command != "inspect-perturb" and args.seed is not None:
        out["data.seed"] = args.seed
    for attr, key in (("steps", "train.steps"), ("alpha", "train.alpha"), ("fractions", "eval.fractions"), ("seeds", "eval.seeds")):
        if getattr(args, attr, None) is not None:
            out[key] = getattr(args, attr)
    return out


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    torch.set_num_threads(max(1, int(os.environ.get("BOLT_THREADS", "1"))))
    try:
        cfg = apply_overrides(parse_config(args.config), _overrides(args))
        if getattr(args, "identity", False):
            cfg = apply_overrides(cfg, {"perturb.identity": True, "perturb.M": cfg.data.W // cfg.model.P})
        return COMMANDS[args.command](cfg, args)
    except (ConfigError, DatasetError, UsageError, ckpt.CheckpointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericalError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
