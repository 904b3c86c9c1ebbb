"""Command line entry point.

Every subcommand accepts ``--config FILE`` (YAML or JSON). Keys in the file
override the corresponding flags; dashes and underscores are interchangeable.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import MISSING, fields, replace
from pathlib import Path

import yaml

from .adaptation import AdaptConfig, AdaptationError, GenerationCache, build_generation_cache
from .data import load_dataset
from .generator import GeneratorConfig, PretrainConfig, TrainingError, load_checkpoint, pretrain_toy_generator, save_checkpoint
from .harness import EvalReport, RunConfig, meta_test, meta_train, report

log = logging.getLogger("metairnet")

SPLIT_NAMES = ("base", "val", "novel")


class UsageError(ValueError):
    pass


# --------------------------------------------------------------------------
# argument helpers
# --------------------------------------------------------------------------


def _flag(name: str) -> str:
    return "--" + name.replace("_", "-")


def _add_dataclass_flags(parser, cls, skip=(), none_defaults=False) -> None:
    """One flag per dataclass field. Tuples take comma-separated values."""
    for f in fields(cls):
        if f.name in skip:
            continue
        default = f.default if f.default is not MISSING else f.default_factory()
        kw = {"dest": f.name, "default": None if none_defaults else default}
        if isinstance(default, bool):
            kw["type"] = _parse_bool
            kw["metavar"] = "BOOL"
        elif isinstance(default, tuple):
            kw["type"] = _tuple_of(type(default[0]) if default else int)
        else:
            kw["type"] = type(default)
        parser.add_argument(_flag(f.name), **kw)


def _parse_bool(s: str) -> bool:
    low = s.lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"not a boolean: {s!r}")


def _tuple_of(kind):
    def parse(s):
        if isinstance(s, (list, tuple)):
            return tuple(kind(v) for v in s)
        return tuple(kind(v) for v in str(s).split(",") if v.strip())

    return parse


def _pick(args, cls, skip=()) -> dict:
    names = {f.name for f in fields(cls)} - set(skip)
    return {k: v for k, v in vars(args).items() if k in names and v is not None}


def load_config_file(path: str | Path) -> dict:
    text = Path(path).read_text()
    data = json.loads(text) if str(path).endswith(".json") else yaml.safe_load(text)
    if data is None:
        return {}
    if not isinstance(data, dict):
        raise UsageError(f"config file {path} must hold a mapping, got {type(data).__name__}")
    return {str(k).replace("-", "_"): v for k, v in data.items()}


def apply_config_file(parser: argparse.ArgumentParser, args: argparse.Namespace) -> argparse.Namespace:
    """Overlay config-file values on parsed flags, converting them like the flags would be."""
    if not getattr(args, "config", None):
        return args
    actions = {a.dest: a for a in parser._actions}
    for key, value in load_config_file(args.config).items():
        if key not in actions or key in ("config", "command", "func", "parser"):
            raise UsageError(f"unknown config key {key!r} for '{args.command}'")
        action = actions[key]
        if isinstance(value, (list, tuple)):
            value = ",".join(map(str, value))
        if action.type is not None and isinstance(value, str):
            value = action.type(value)
        setattr(args, key, value)
    return args


def _splits(args):
    return load_dataset(args.data, args.split, image_size=args.image_size)


def _add_data_flags(p) -> None:
    p.add_argument("--data", required=True, help="dataset root with one directory per class")
    p.add_argument("--split", required=True, help="split file ([train]/[val]/[test] sections or JSON)")
    p.add_argument("--image-size", type=int, default=None, help="resize images to this square size")


# --------------------------------------------------------------------------
# subcommands
# --------------------------------------------------------------------------


def cmd_make_synthetic(args) -> int:
    from .synthetic import make_shapes_dataset

    make_shapes_dataset(args.out, args.n_base, args.n_val, args.n_novel, args.images_per_class, args.size, args.seed)
    print(f"wrote synthetic dataset to {args.out} (split file {Path(args.out) / 'split.txt'})")
    return 0


def cmd_pretrain_gan(args) -> int:
    splits = _splits(args)
    gen_cfg = GeneratorConfig(**_pick(args, GeneratorConfig, skip=("num_classes",)))
    cfg = PretrainConfig(generator=gen_cfg, **_pick(args, PretrainConfig, skip=("generator",)))
    generator, curve = pretrain_toy_generator(splits.base, cfg)
    save_checkpoint(generator, args.out, extra={"curve": curve})
    print(f"saved generator to {args.out}; final loss {curve[-1]['loss']:.4f}" if curve else f"saved generator to {args.out}")
    return 0


def cmd_adapt(args) -> int:
    splits = _splits(args)
    generator = load_checkpoint(args.generator)
    cfg = AdaptConfig(**_pick(args, AdaptConfig))
    cfg.validate()
    failures = 0
    for name in args.splits:
        if name not in SPLIT_NAMES:
            raise UsageError(f"unknown split {name!r}; choose from {SPLIT_NAMES}")
        index = getattr(splits, name)

        def progress(done, total, name=name):
            log.info("%s: %d/%d images adapted", name, done, total)

        _, summary = build_generation_cache(index, generator, cfg, args.cache, args.seed, args.batch_size, progress)
        print(json.dumps({"split": name, **summary.as_dict()}))
        failures += len(summary.failures)
    return 1 if failures else 0


def cmd_meta_train(args) -> int:
    splits = _splits(args)
    config = RunConfig(**_pick(args, RunConfig))
    cache = GenerationCache.open(args.cache) if args.cache else None
    result = meta_train(config, splits, cache, args.out)
    print(json.dumps({"checkpoint": str(result.checkpoint), "best_val": result.best_val, "best_epoch": result.best_epoch}))
    return 0


def cmd_meta_test(args) -> int:
    splits = _splits(args)
    overrides = _pick(args, RunConfig)
    cache = GenerationCache.open(args.cache) if args.cache else None
    rep = meta_test(args.checkpoint, splits.novel, cache, overrides, base_classes=splits.base.classes)
    if args.out:
        rep.save(args.out)
    print(f"{rep.method}: {rep.mean:.2f} +- {rep.ci95:.2f} over {len(rep.accuracies)} episodes")
    return 0


def cmd_report(args) -> int:
    if not args.reports:
        raise UsageError("report needs at least one EvalReport file")
    text, rows = report([EvalReport.load(p) for p in args.reports])
    print(text)
    if args.json:
        Path(args.json).write_text(json.dumps(rows, indent=1))
    return 0


def cmd_benchmark(args) -> int:
    from .pipeline import PipelineConfig, run_pipeline

    cfg = PipelineConfig()
    if args.episodes_eval is not None:
        cfg.run = replace(cfg.run, episodes_eval=args.episodes_eval)
    result = run_pipeline(args.workdir, args.seed, cfg)
    print(result.table)
    print(json.dumps({k: round(v, 1) for k, v in result.timings.items()}))
    return 0


# --------------------------------------------------------------------------
# parser
# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="metairnet", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, func, help):
        p = sub.add_parser(name, help=help, description=help)
        p.add_argument("--config", help="YAML or JSON file whose keys override flags")
        p.set_defaults(func=func, parser=p)
        return p

    p = add("make-synthetic", cmd_make_synthetic, "write the shapes-and-textures dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--n-base", type=int, default=20)
    p.add_argument("--n-val", type=int, default=6)
    p.add_argument("--n-novel", type=int, default=10)
    p.add_argument("--images-per-class", type=int, default=30)
    p.add_argument("--size", type=int, default=32)
    p.add_argument("--seed", type=int, default=0)

    p = add("pretrain-gan", cmd_pretrain_gan, "pretrain the toy generator on the base split")
    _add_data_flags(p)
    p.add_argument("--out", required=True, help="generator checkpoint path")
    _add_dataclass_flags(p, GeneratorConfig, skip=("num_classes",))
    _add_dataclass_flags(p, PretrainConfig, skip=("generator",))

    p = add("adapt", cmd_adapt, "adapt the generator to every image and build the generation cache")
    _add_data_flags(p)
    p.add_argument("--generator", required=True, help="generator checkpoint")
    p.add_argument("--cache", required=True, help="cache directory")
    p.add_argument("--splits", type=_tuple_of(str), default=SPLIT_NAMES, help="comma-separated subset of base,val,novel")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--batch-size", type=int, default=32)
    _add_dataclass_flags(p, AdaptConfig)

    p = add("meta-train", cmd_meta_train, "episodic training with validation-based model selection")
    _add_data_flags(p)
    p.add_argument("--cache", help="generation cache directory")
    p.add_argument("--out", required=True, help="output directory for checkpoint.pt and metrics.jsonl")
    _add_dataclass_flags(p, RunConfig)

    p = add("meta-test", cmd_meta_test, "evaluate a checkpoint on novel-split episodes")
    _add_data_flags(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--cache", help="generation cache directory")
    p.add_argument("--out", help="write the EvalReport as JSON here")
    _add_dataclass_flags(p, RunConfig, none_defaults=True)

    p = add("report", cmd_report, "render EvalReports as a comparison table")
    p.add_argument("reports", nargs="*", help="EvalReport JSON files")
    p.add_argument("--json", help="also write machine-readable rows here")

    p = add("benchmark", cmd_benchmark, "run the synthetic end-to-end benchmark")
    p.add_argument("--workdir", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--episodes-eval", type=int, default=None)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(asctime)s %(message)s")
    try:
        args = apply_config_file(args.parser, args)
        return args.func(args)
    except (ValueError, FileNotFoundError, AdaptationError, TrainingError, argparse.ArgumentTypeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
