from pathlib import Path

import numpy as np
import pytest
import torch

from metairnet.adaptation import AdaptConfig, GenerationCache, build_generation_cache
from metairnet.data import load_dataset
from metairnet.generator import GeneratorConfig, PretrainConfig, pretrain_toy_generator
from metairnet.synthetic import make_shapes_dataset

DATA_DIR = Path(__file__).parent / "data"

TINY_GEN = GeneratorConfig(noise_dim=8, embed_dim=4, widths=(16, 8), resolution=16)

_acceptance_lines: list[str] = []


@pytest.fixture(scope="session")
def acceptance_log():
    def record(criterion: str, passed: bool, detail: str = "") -> None:
        line = f"[{'PASS' if passed else 'FAIL'}] {criterion}" + (f": {detail}" if detail else "")
        _acceptance_lines.append(line)
        print("\n" + line)

    return record


def pytest_terminal_summary(terminalreporter):
    if _acceptance_lines:
        terminalreporter.section("acceptance criteria")
        for line in _acceptance_lines:
            terminalreporter.write_line(line)


@pytest.fixture(autouse=True)
def _seed():
    torch.manual_seed(0)
    np.random.seed(0)


@pytest.fixture(scope="session")
def tiny_root(tmp_path_factory):
    root = tmp_path_factory.mktemp("tiny") / "data"
    make_shapes_dataset(root, n_base=7, n_val=5, n_novel=5, images_per_class=6, size=16, seed=3)
    return root


@pytest.fixture(scope="session")
def tiny_splits(tiny_root):
    return load_dataset(tiny_root, tiny_root / "split.txt", image_size=16)


@pytest.fixture(scope="session")
def tiny_generator(tiny_splits):
    gen, _ = pretrain_toy_generator(
        tiny_splits.base, PretrainConfig(generator=TINY_GEN, steps=60, batch_size=16, seed=0)
    )
    return gen


@pytest.fixture(scope="session")
def tiny_cache(tiny_splits, tiny_generator, tmp_path_factory):
    cache_dir = tmp_path_factory.mktemp("tiny-cache")
    cfg = AdaptConfig(steps=5, n_variants=3)
    for idx in tiny_splits:
        build_generation_cache(idx, tiny_generator, cfg, cache_dir, seed=0, batch_size=64)
    return GenerationCache.open(cache_dir)


@pytest.fixture(scope="session")
def substrate(tmp_path_factory):
    """16 px dataset with a generator pretrained for 400 steps and its untrained twin."""
    root = tmp_path_factory.mktemp("substrate") / "data"
    make_shapes_dataset(root, n_base=6, n_val=2, n_novel=2, images_per_class=20, size=16, seed=5)
    splits = load_dataset(root, root / "split.txt", image_size=16)
    trained, _ = pretrain_toy_generator(
        splits.base, PretrainConfig(generator=TINY_GEN, steps=400, batch_size=32, seed=0)
    )
    untrained, _ = pretrain_toy_generator(splits.base, PretrainConfig(generator=TINY_GEN, steps=0, seed=0))
    return splits, trained, untrained


class StubCache:
    """In-memory stand-in for GenerationCache: path -> (k, 3, H, W) tensor."""

    def __init__(self, variants: dict):
        self.variants = variants

    def load_variants(self, record, size=None):
        if record.path not in self.variants:
            raise KeyError(record.path)
        return self.variants[record.path]

    def missing(self, records):
        return [r.path for r in records if r.path not in self.variants]
