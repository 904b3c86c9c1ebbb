"""End-to-end synthetic benchmark: data -> generator -> cache -> train -> test."""

from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

from .adaptation import AdaptConfig, GenerationCache, build_generation_cache
from .data import load_dataset
from .generator import GeneratorConfig, PretrainConfig, pretrain_toy_generator, save_checkpoint
from .harness import EvalReport, RunConfig, derive_seed, meta_test, meta_train, report
from .synthetic import make_shapes_dataset

log = logging.getLogger(__name__)


@dataclass
class PipelineConfig:
    n_base: int = 20
    n_val: int = 6
    n_novel: int = 10
    images_per_class: int = 30
    image_size: int = 32
    generator: GeneratorConfig = field(
        default_factory=lambda: GeneratorConfig(noise_dim=32, embed_dim=8, widths=(32, 16, 8), resolution=32)
    )
    pretrain_steps: int = 600
    # fewer adaptation steps than the 500 default keep the benchmark inside its time budget
    adapt: AdaptConfig = field(default_factory=lambda: AdaptConfig(steps=100))
    run: RunConfig = field(
        default_factory=lambda: RunConfig(
            epochs=3, episodes_train=300, episodes_val=100, episodes_eval=1000,
            backbone_hidden=32, fusion_hidden=16,
        )
    )
    methods: tuple[str, ...] = ("protonet", "metairnet")
    cache_batch: int = 64


@dataclass
class PipelineResult:
    reports: dict[str, EvalReport]
    train_losses: dict[str, list[float]]
    timings: dict[str, float]
    cache_summary: dict
    table: str = ""


def run_pipeline(workdir: str | Path, master_seed: int = 0, config: PipelineConfig | None = None) -> PipelineResult:
    config = config or PipelineConfig()
    workdir = Path(workdir)
    timings: dict[str, float] = {}

    def stage(name):
        timings[name] = time.perf_counter()

    def done(name):
        timings[name] = time.perf_counter() - timings[name]
        log.info("stage %s took %.1fs", name, timings[name])

    stage("data")
    data_root = workdir / "data"
    make_shapes_dataset(
        data_root, config.n_base, config.n_val, config.n_novel,
        config.images_per_class, config.image_size, seed=derive_seed(master_seed, "data"),
    )
    splits = load_dataset(data_root, data_root / "split.txt", image_size=config.image_size)
    done("data")

    stage("pretrain")
    generator, _ = pretrain_toy_generator(
        splits.base,
        PretrainConfig(generator=config.generator, steps=config.pretrain_steps,
                       seed=derive_seed(master_seed, "pretrain-gan")),
    )
    save_checkpoint(generator, workdir / "generator.pt")
    done("pretrain")

    stage("cache")
    cache_dir = workdir / "cache"
    summary = {}
    for name, idx in splits._asdict().items():
        _, s = build_generation_cache(
            idx, generator, config.adapt, cache_dir,
            seed=derive_seed(master_seed, "cache"), batch_size=config.cache_batch,
        )
        summary[name] = s.as_dict()
    cache = GenerationCache.open(cache_dir)
    done("cache")

    reports, losses = {}, {}
    for method in config.methods:
        stage(f"train-{method}")
        run_cfg = replace(config.run, method=method, seed=derive_seed(master_seed, "run"))
        result = meta_train(run_cfg, splits, cache, workdir / method)
        losses[method] = result.episode_losses
        done(f"train-{method}")
        stage(f"test-{method}")
        reports[method] = meta_test(result.checkpoint, splits.novel, cache, base_classes=splits.base.classes)
        reports[method].save(workdir / f"report-{method}.json")
        done(f"test-{method}")

    table, rows = report(list(reports.values()))
    (workdir / "report.txt").write_text(table + "\n")
    (workdir / "report.json").write_text(json.dumps(rows, indent=1))
    return PipelineResult(reports, losses, timings, summary, table)
