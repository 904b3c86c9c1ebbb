"""Single-image generator adaptation and the precomputed generation cache.

A target image is reconstructed by optimizing the latent code together with
the scale/shift of every batch-norm layer; all other generator weights stay
fixed. Perturbing the tuned latent then yields variants of the image.
"""

from __future__ import annotations

import json
import logging
import os
import shutil
import tempfile
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, NamedTuple, Sequence

import torch

from .backbone import FrozenFeatures
from .data import DatasetIndex, ImageRecord, read_image, write_image
from .generator import ToyGenerator, bn_values, check_latent, generate

log = logging.getLogger(__name__)

CACHE_FORMAT = "metairnet-cache"
CACHE_VERSION = 1


class AdaptationError(RuntimeError):
    def __init__(self, message: str, step: int | None = None):
        super().__init__(message)
        self.step = step


class CacheError(ValueError):
    pass


@dataclass
class AdaptConfig:
    lambda_p: float = 0.1
    lambda_z: float = 0.1
    steps: int = 500
    lr_z: float = 0.01
    lr_bn: float = 0.0005
    betas: tuple[float, float] = (0.9, 0.999)
    epsilon_scale: float = 0.5
    n_variants: int = 10
    perceptual_layers: tuple[int, ...] = (0, 1)
    perceptual_seed: int = 0

    def validate(self) -> None:
        if self.lambda_p < 0 or self.lambda_z < 0:
            raise ValueError("loss weights must be non-negative")
        if self.steps < 1:
            raise ValueError(f"steps must be >= 1, got {self.steps}")
        if self.n_variants < 1:
            raise ValueError(f"n_variants must be >= 1, got {self.n_variants}")
        if self.epsilon_scale < 0:
            raise ValueError("epsilon_scale must be non-negative")


class LossTerms(NamedTuple):
    total: torch.Tensor
    l1: torch.Tensor
    perceptual: torch.Tensor
    em: torch.Tensor


# --------------------------------------------------------------------------
# loss terms
# --------------------------------------------------------------------------


def earth_mover_1d(z: torch.Tensor, r: torch.Tensor) -> torch.Tensor:
    """Exact 1-D earth mover distance between the empirical distributions of
    the entries of ``z`` and ``r`` along the last axis.

    With equal sample counts the optimal transport plan matches order
    statistics, so the distance is the mean absolute difference of the
    sorted vectors.
    """
    if z.shape != r.shape:
        raise ValueError(f"shape mismatch: {tuple(z.shape)} vs {tuple(r.shape)}")
    zs, _ = torch.sort(z, dim=-1)
    rs, _ = torch.sort(r, dim=-1)
    return (zs - rs).abs().mean(dim=-1)


def em_regularizer(z: torch.Tensor, r: torch.Tensor) -> torch.Tensor:
    if z.dim() != 1 or r.dim() != 1:
        raise ValueError("em_regularizer expects 1-D vectors")
    return earth_mover_1d(z, r)


def perceptual_distance(feats_a: Sequence[torch.Tensor], feats_b: Sequence[torch.Tensor]) -> torch.Tensor:
    """Per-sample mean over layers of the mean squared activation difference."""
    per_layer = [((a - b) ** 2).flatten(1).mean(1) for a, b in zip(feats_a, feats_b)]
    return torch.stack(per_layer).mean(0)


def reconstruction_loss(
    generated: torch.Tensor,
    target: torch.Tensor,
    features_of: Callable[[torch.Tensor], Sequence[torch.Tensor]],
    z: torch.Tensor,
    r_sample: torch.Tensor,
    config: AdaptConfig,
) -> LossTerms:
    """L1 + lambda_p * perceptual + lambda_z * earth-mover(z, r).

    Single (3, H, W) images give scalar terms; batches (B, 3, H, W) with
    (B, D) latents give per-sample terms of shape (B,). L1 is the mean over
    pixels and channels.
    """
    if generated.shape != target.shape:
        raise ValueError(
            f"image shape mismatch: {tuple(generated.shape)} vs {tuple(target.shape)}"
        )
    single = generated.dim() == 3
    if single:
        generated, target = generated[None], target[None]
        z, r_sample = z[None], r_sample[None]
    l1 = (generated - target).abs().flatten(1).mean(1)
    if config.lambda_p:
        perc = perceptual_distance(features_of(generated), features_of(target))
    else:
        perc = torch.zeros_like(l1)
    em = earth_mover_1d(z, r_sample)
    total = l1 + config.lambda_p * perc + config.lambda_z * em
    terms = LossTerms(total, l1, perc, em)
    if single:
        terms = LossTerms(*(t[0] for t in terms))
    return terms


# --------------------------------------------------------------------------
# adaptation
# --------------------------------------------------------------------------


@dataclass
class AdaptResult:
    tuned_z: torch.Tensor
    tuned_bn: list[tuple[torch.Tensor, torch.Tensor]]
    loss_trace: dict[str, list[float]]
    variants: torch.Tensor | None = None
    no_improvement: bool = False

    @property
    def initial_loss(self) -> float:
        return self.loss_trace["total"][0]

    @property
    def final_loss(self) -> float:
        return self.loss_trace["total"][-1]


def make_features(config: AdaptConfig, dtype=torch.float32) -> FrozenFeatures:
    return FrozenFeatures(layers=config.perceptual_layers, seed=config.perceptual_seed).to(dtype)


def initial_latent(generator: ToyGenerator, rng: torch.Generator) -> torch.Tensor:
    cfg = generator.config
    dtype = generator.project.weight.dtype
    noise = torch.randn(cfg.noise_dim, generator=rng, dtype=dtype)
    return torch.cat([noise, generator.default_embedding().to(dtype)])


def adapt_batch(
    generator: ToyGenerator,
    targets: torch.Tensor,
    config: AdaptConfig,
    seeds: Sequence[int],
    features: FrozenFeatures | None = None,
) -> list[AdaptResult]:
    """Adapt the generator to each of ``targets`` (B, 3, H, W) independently.

    Each image gets its own latent and its own copy of every gamma/beta. The
    optimized objective is the sum of per-image losses, so under Adam every
    image follows its own trajectory. The generator itself is never modified.
    """
    config.validate()
    if targets.dim() != 4 or len(seeds) != targets.shape[0]:
        raise ValueError("targets must be (B, 3, H, W) with one seed per image")
    res = generator.config.resolution
    if targets.shape[1:] != (3, res, res):
        raise ValueError(
            f"target shape {tuple(targets.shape[1:])} does not match generator output (3, {res}, {res})"
        )
    dtype = generator.project.weight.dtype
    targets = targets.to(dtype)
    features = features or make_features(config, dtype)
    b = targets.shape[0]
    rngs = [torch.Generator().manual_seed(int(s)) for s in seeds]

    z = torch.stack([initial_latent(generator, g) for g in rngs]).requires_grad_(True)
    bn = [
        (g.expand(b, -1).clone().requires_grad_(True), be.expand(b, -1).clone().requires_grad_(True))
        for g, be in bn_values(generator)
    ]
    bn_leaves = [t for pair in bn for t in pair]
    opt = torch.optim.Adam(
        [
            {"params": [z], "lr": config.lr_z},
            {"params": bn_leaves, "lr": config.lr_bn},
        ],
        betas=config.betas,
    )
    trace = {k: torch.empty(config.steps, b, dtype=dtype) for k in LossTerms._fields}

    was_training = generator.training
    generator.eval()
    try:
        for step in range(config.steps):
            r = torch.stack([torch.randn(z.shape[1], generator=g, dtype=dtype) for g in rngs])
            out = generator(z, bn)
            terms = reconstruction_loss(out, targets, features, z, r, config)
            loss = terms.total.sum()
            if not torch.isfinite(loss):
                raise AdaptationError(f"loss became non-finite at step {step}", step=step)
            for k, v in zip(LossTerms._fields, terms):
                trace[k][step] = v.detach()
            opt.zero_grad()
            loss.backward(inputs=[z, *bn_leaves])
            opt.step()
    finally:
        generator.train(was_training)

    results = []
    for i in range(b):
        tr = {k: trace[k][:, i].tolist() for k in LossTerms._fields}
        results.append(
            AdaptResult(
                tuned_z=z[i].detach().clone(),
                tuned_bn=[(g[i].detach().clone(), be[i].detach().clone()) for g, be in bn],
                loss_trace=tr,
                no_improvement=tr["total"][-1] >= tr["total"][0],
            )
        )
    return results


def adapt(
    generator: ToyGenerator,
    target: torch.Tensor,
    config: AdaptConfig,
    seed: int,
    features: FrozenFeatures | None = None,
) -> AdaptResult:
    """Fit latent code and BN scale/shift so the generator reproduces ``target`` (3, H, W)."""
    if target.dim() != 3:
        raise ValueError(f"target must be (3, H, W), got {tuple(target.shape)}")
    return adapt_batch(generator, target[None], config, [seed], features)[0]


def reconstruct(generator: ToyGenerator, result: AdaptResult) -> torch.Tensor:
    return generate(generator, result.tuned_z, result.tuned_bn)


def sample_variants(
    result: AdaptResult,
    generator: ToyGenerator,
    epsilon_scale: float,
    n_variants: int,
    seed: int,
) -> torch.Tensor:
    """Render ``n_variants`` images from the tuned latent plus Gaussian noise of
    standard deviation ``epsilon_scale``. Returns (n_variants, 3, H, W)."""
    check_latent(generator, result.tuned_z)
    rng = torch.Generator().manual_seed(int(seed))
    eps = torch.randn(n_variants, result.tuned_z.numel(), generator=rng, dtype=result.tuned_z.dtype)
    zs = result.tuned_z[None] + epsilon_scale * eps
    bn = [(g[None].expand(n_variants, -1), b[None].expand(n_variants, -1)) for g, b in result.tuned_bn]
    return generate(generator, zs, bn)


# --------------------------------------------------------------------------
# generation cache
# --------------------------------------------------------------------------


def stable_seed(master: int, key: str) -> int:
    return (int(master) * 1_000_003 + zlib.crc32(key.encode())) % (2**63)


def _entry_dir(source: str) -> str:
    return source + ".d"


class GenerationCache:
    """On-disk store of tuned latents and generated variants.

    Layout under ``root``: one subdirectory per source image holding
    ``variant_00.png``..``variant_{k-1}.png``, ``latent.pt``, ``trace.json`` and
    ``entry.json``; ``manifest.json`` maps each source path to its entry.
    """

    def __init__(self, root: str | Path, entries: dict[str, dict] | None = None):
        self.root = Path(root)
        self.entries: dict[str, dict] = entries if entries is not None else {}

    @classmethod
    def open(cls, root: str | Path, rescan: bool = False) -> "GenerationCache":
        root = Path(root)
        manifest = root / "manifest.json"
        if manifest.exists() and not rescan:
            try:
                payload = json.loads(manifest.read_text())
            except json.JSONDecodeError as exc:
                raise CacheError(f"malformed cache manifest {manifest}: {exc}") from exc
            if payload.get("format") != CACHE_FORMAT:
                raise CacheError(f"{manifest} is not a generation-cache manifest")
            return cls(root, payload["entries"])
        cache = cls(root)
        cache.rescan()
        return cache

    def rescan(self) -> None:
        self.entries = {}
        if not self.root.exists():
            return
        for entry_file in sorted(self.root.rglob("entry.json")):
            entry = json.loads(entry_file.read_text())
            self.entries[entry["source"]] = entry

    def write_manifest(self) -> None:
        self.root.mkdir(parents=True, exist_ok=True)
        payload = {"format": CACHE_FORMAT, "version": CACHE_VERSION, "entries": self.entries}
        fd, tmp = tempfile.mkstemp(dir=self.root, suffix=".json")
        with os.fdopen(fd, "w") as f:
            json.dump(payload, f, indent=1, sort_keys=True)
        os.replace(tmp, self.root / "manifest.json")

    def is_complete(self, record: ImageRecord, n_variants: int | None = None) -> bool:
        entry = self.entries.get(record.path)
        if entry is None:
            return False
        if n_variants is not None and len(entry["variants"]) < n_variants:
            return False
        return all((self.root / v).exists() for v in entry["variants"])

    def missing(self, records: Sequence[ImageRecord]) -> list[str]:
        return [r.path for r in records if not self.is_complete(r)]

    def variant_paths(self, record: ImageRecord) -> list[Path]:
        entry = self.entries.get(record.path)
        if entry is None or not entry["variants"]:
            raise CacheError(f"no cached variants for image {record.path!r}")
        return [self.root / v for v in entry["variants"]]

    def load_variants(self, record: ImageRecord, size: int | None = None) -> torch.Tensor:
        return torch.stack([read_image(p, size) for p in self.variant_paths(record)])

    def load_latent(self, record: ImageRecord) -> dict:
        entry = self.entries[record.path]
        return torch.load(self.root / entry["latent"], map_location="cpu", weights_only=True)

    def attach(self, index: DatasetIndex) -> DatasetIndex:
        """Return a copy of ``index`` whose records carry their cached paths."""
        updated = []
        for rec in index.records():
            entry = self.entries.get(rec.path)
            if entry is not None:
                updated.append(
                    ImageRecord(rec.path, rec.class_id, tuple(entry["variants"]), entry["latent"])
                )
        return index.with_records(updated)


@dataclass
class CacheSummary:
    total: int = 0
    adapted: int = 0
    skipped: int = 0
    variants_written: int = 0
    failures: list[tuple[str, str]] = field(default_factory=list)

    def as_dict(self) -> dict:
        return asdict(self)


def _write_entry(
    cache: GenerationCache,
    record: ImageRecord,
    result: AdaptResult,
    variants: torch.Tensor,
) -> dict:
    rel = _entry_dir(record.path)
    final = cache.root / rel
    final.parent.mkdir(parents=True, exist_ok=True)
    tmp = Path(tempfile.mkdtemp(dir=final.parent, prefix=".tmp-"))
    names = []
    for j, img in enumerate(variants):
        name = f"variant_{j:02d}.png"
        write_image(img, tmp / name)
        names.append(f"{rel}/{name}")
    torch.save(
        {"z": result.tuned_z, "bn": [torch.stack(pair) for pair in result.tuned_bn]},
        tmp / "latent.pt",
    )
    (tmp / "trace.json").write_text(json.dumps(result.loss_trace))
    entry = {
        "source": record.path,
        "variants": names,
        "latent": f"{rel}/latent.pt",
        "trace": f"{rel}/trace.json",
        "initial_loss": result.initial_loss,
        "final_loss": result.final_loss,
        "no_improvement": result.no_improvement,
    }
    (tmp / "entry.json").write_text(json.dumps(entry))
    if final.exists():
        shutil.rmtree(final)
    os.replace(tmp, final)
    return entry


def build_generation_cache(
    index: DatasetIndex,
    generator: ToyGenerator,
    config: AdaptConfig,
    cache_dir: str | Path,
    seed: int = 0,
    batch_size: int = 32,
    progress: Callable[[int, int], None] | None = None,
) -> tuple[DatasetIndex, CacheSummary]:
    """Adapt the generator to every image of ``index`` and store its variants.

    Images whose entry is already complete are skipped. Unreadable images and
    failed adaptations are listed in the summary instead of aborting the run.
    Per-image seeds depend only on ``seed`` and the image path, so results do
    not depend on batching or on which entries already exist.
    """
    config.validate()
    cache = GenerationCache.open(cache_dir, rescan=True)
    summary = CacheSummary(total=len(index))
    res = generator.config.resolution
    features = make_features(config, generator.project.weight.dtype)

    todo: list[tuple[ImageRecord, torch.Tensor]] = []
    for rec in index.records():
        if cache.is_complete(rec, config.n_variants):
            summary.skipped += 1
            continue
        try:
            img = read_image(index.root / rec.path, res)
        except Exception as exc:  # PIL raises several types for bad files
            summary.failures.append((rec.path, f"unreadable image: {exc}"))
            continue
        todo.append((rec, img))

    for start in range(0, len(todo), batch_size):
        chunk = todo[start : start + batch_size]
        seeds = [stable_seed(seed, rec.path) for rec, _ in chunk]
        targets = torch.stack([img for _, img in chunk])
        try:
            results = adapt_batch(generator, targets, config, seeds, features)
        except AdaptationError:
            # retry one by one so a single bad image does not sink the batch
            results = []
            for (rec, img), s in zip(chunk, seeds):
                try:
                    results.append(adapt(generator, img, config, s, features))
                except AdaptationError as exc:
                    summary.failures.append((rec.path, str(exc)))
                    results.append(None)
        for (rec, _), s, result in zip(chunk, seeds, results):
            if result is None:
                continue
            variants = sample_variants(
                result, generator, config.epsilon_scale, config.n_variants, stable_seed(s, "variants")
            )
            cache.entries[rec.path] = _write_entry(cache, rec, result, variants)
            summary.adapted += 1
            summary.variants_written += len(variants)
        if progress is not None:
            progress(min(start + batch_size, len(todo)), len(todo))
        log.info("cache: %d/%d images adapted", min(start + batch_size, len(todo)), len(todo))

    cache.write_manifest()
    return cache.attach(index), summary
