"""Meta-training, meta-testing, statistics and reporting."""

from __future__ import annotations

import json
import logging
import math
import time
import zlib
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .backbone import Conv4
from .data import DatasetIndex, Episode, Splits, check_episode, sample_episode
from .fewshot import (
    AUGMENTATIONS,
    BASELINES,
    baseline_classifiers,
    episode_logits,
    episode_loss,
)
from .fusion import FusionNet

log = logging.getLogger(__name__)

STATE_FORMAT = "metairnet-train-state"
STATE_VERSION = 1
METHODS = ("metairnet", "protonet", "supervised")
CLASSIFIERS = ("prototype",) + BASELINES


class CacheIncompleteError(ValueError):
    def __init__(self, missing: Sequence[str]):
        shown = ", ".join(missing[:10]) + (" ..." if len(missing) > 10 else "")
        super().__init__(f"generation cache is missing {len(missing)} entries: {shown}")
        self.missing = list(missing)


def derive_seed(master: int, stage: str) -> int:
    """Deterministic per-stage seed so each stage can be rerun on its own."""
    ss = np.random.SeedSequence([int(master), zlib.crc32(stage.encode())])
    return int(ss.generate_state(1, dtype=np.uint64)[0] >> 1)


# --------------------------------------------------------------------------
# configuration and reports
# --------------------------------------------------------------------------


@dataclass
class RunConfig:
    n: int = 5
    m: int = 1
    q: int = 16
    epochs: int = 10
    episodes_train: int = 100
    episodes_val: int = 100
    episodes_eval: int = 1000
    n_aug: int = 1
    method: str = "metairnet"
    augmentation: str = "none"
    classifier: str = "prototype"
    backbone: str = "conv4"
    backbone_hidden: int = 64
    fusion_hidden: int = 32
    lr: float = 0.001
    seed: int = 0
    squared_distance: bool = False
    supervised_steps: int = 1000
    supervised_batch: int = 64

    def validate(self) -> None:
        for name in ("n", "m", "q", "epochs", "episodes_train", "episodes_val", "episodes_eval"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        if self.n_aug < 0:
            raise ValueError("n_aug must be non-negative")
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}; choose from {METHODS}")
        if self.augmentation not in AUGMENTATIONS:
            raise ValueError(f"unknown augmentation {self.augmentation!r}")
        if self.classifier not in CLASSIFIERS:
            raise ValueError(f"unknown classifier {self.classifier!r}")
        if self.classifier != "prototype" and self.method != "supervised":
            raise ValueError("classic classifiers need method='supervised' features")
        if self.backbone not in BACKBONES:
            raise ValueError(f"unknown backbone {self.backbone!r}; registered: {sorted(BACKBONES)}")

    @property
    def fused(self) -> bool:
        return self.method == "metairnet" and self.n_aug > 0

    @property
    def needs_cache(self) -> bool:
        return self.fused or self.augmentation in ("mixup", "finetunegan")

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)


def ci95(accuracies: Sequence[float]) -> float:
    """1.96 * sample standard deviation / sqrt(count)."""
    a = np.asarray(accuracies, dtype=np.float64)
    if len(a) < 2:
        return float("nan") if len(a) == 0 else 0.0
    return float(1.96 * a.std(ddof=1) / math.sqrt(len(a)))


@dataclass
class EvalReport:
    method: str
    mean: float
    ci95: float
    accuracies: list[float]
    config: dict = field(default_factory=dict)
    wall_clock: float = 0.0

    @classmethod
    def from_accuracies(cls, method: str, accuracies: Sequence[float], config: dict | None = None, wall_clock: float = 0.0):
        acc = [float(a) for a in accuracies]
        return cls(method, float(np.mean(acc)), ci95(acc), acc, dict(config or {}), wall_clock)

    def to_dict(self) -> dict:
        return asdict(self)

    def same_result(self, other: "EvalReport") -> bool:
        """Equality ignoring wall-clock time."""
        return (self.method, self.mean, self.accuracies, self.config) == (
            other.method, other.mean, other.accuracies, other.config
        ) and (self.ci95 == other.ci95 or (math.isnan(self.ci95) and math.isnan(other.ci95)))

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1))

    @classmethod
    def load(cls, path: str | Path) -> "EvalReport":
        return cls(**json.loads(Path(path).read_text()))


# --------------------------------------------------------------------------
# models
# --------------------------------------------------------------------------

BACKBONES: dict[str, Callable[[RunConfig], nn.Module]] = {
    "conv4": lambda cfg: Conv4(hidden=cfg.backbone_hidden),
}


def register_backbone(name: str, factory: Callable[[RunConfig], nn.Module]) -> None:
    """Make a feature extractor available as ``RunConfig.backbone = name``.

    The factory receives the run config and must return a module mapping
    (B, 3, H, W) images to (B, D) embeddings.
    """
    BACKBONES[name] = factory


def build_models(config: RunConfig, seed: int) -> tuple[nn.Module, FusionNet | None]:
    torch.manual_seed(seed)
    backbone = BACKBONES[config.backbone](config)
    fusion = FusionNet(hidden=config.fusion_hidden) if config.method == "metairnet" else None
    return backbone, fusion


def save_state(path, config, backbone, fusion, optimizer, extra: dict) -> None:
    payload = {
        "format": STATE_FORMAT,
        "version": STATE_VERSION,
        "config": asdict(config),
        "backbone": backbone.state_dict(),
        "fusion": fusion.state_dict() if fusion is not None else None,
        "optimizer": optimizer.state_dict() if optimizer is not None else None,
        **extra,
    }
    tmp = Path(str(path) + ".tmp")
    torch.save(payload, tmp)
    tmp.replace(path)


def load_state(path) -> tuple[RunConfig, nn.Module, FusionNet | None, dict]:
    try:
        payload = torch.load(path, map_location="cpu", weights_only=True)
    except Exception as exc:
        raise ValueError(f"cannot read training state {path}: {exc}") from exc
    if not isinstance(payload, dict) or payload.get("format") != STATE_FORMAT:
        raise ValueError(f"{path} is not a training-state checkpoint")
    if payload.get("version") != STATE_VERSION:
        raise ValueError(f"unsupported training-state version {payload.get('version')!r}")
    config = RunConfig.from_dict(payload["config"])
    backbone, fusion = build_models(config, 0)
    backbone.load_state_dict(payload["backbone"])
    if fusion is not None:
        fusion.load_state_dict(payload["fusion"])
    backbone.eval()
    if fusion is not None:
        fusion.eval()
    return config, backbone, fusion, payload


# --------------------------------------------------------------------------
# evaluation
# --------------------------------------------------------------------------


def evaluate_episodes(
    predict: Callable[[Episode], torch.Tensor],
    index: DatasetIndex,
    n: int,
    m: int,
    q: int,
    episodes: int,
    seed: int,
    method: str = "",
    config: dict | None = None,
    forbidden_classes: Iterable[str] = (),
) -> EvalReport:
    """Run ``predict`` over freshly sampled episodes and aggregate accuracy (%)."""
    start = time.perf_counter()
    forbidden = set(forbidden_classes)
    accs = []
    for i in range(episodes):
        ep = sample_episode(index, n, m, q, derive_seed(seed, f"episode/{i}"))
        check_episode(ep, index.classes)
        if forbidden & set(ep.class_ids):
            raise AssertionError(f"evaluation episode uses held-out classes {sorted(forbidden & set(ep.class_ids))}")
        pred = torch.as_tensor(predict(ep))
        accs.append(100.0 * (pred == ep.query_labels).double().mean().item())
    return EvalReport.from_accuracies(method, accs, config, time.perf_counter() - start)


def make_predictor(config: RunConfig, backbone, fusion, cache, seed: int) -> Callable[[Episode], torch.Tensor]:
    backbone.eval()
    if fusion is not None:
        fusion.eval()

    @torch.no_grad()
    def predict(ep: Episode) -> torch.Tensor:
        rng = np.random.default_rng(derive_seed(seed, f"augment/{ep.seed}"))
        if config.classifier == "prototype":
            logits = episode_logits(
                ep,
                backbone,
                fusion,
                cache,
                config.n_aug if config.fused else 0,
                augmentation=config.augmentation,
                squared=config.squared_distance,
                rng=rng,
            )
            return logits.argmax(1)
        s = backbone(ep.support_images).numpy()
        qf = backbone(ep.query_images).numpy()
        return torch.as_tensor(baseline_classifiers(s, ep.support_labels.numpy(), qf, config.classifier))

    return predict


def check_cache(cache, indexes: Iterable[DatasetIndex]) -> None:
    missing = []
    for idx in indexes:
        missing += cache.missing(idx.records()) if cache is not None else [r.path for r in idx.records()]
    if missing:
        raise CacheIncompleteError(missing)


def meta_test(
    checkpoint: str | Path,
    data: DatasetIndex,
    cache=None,
    overrides: dict | None = None,
    base_classes: Iterable[str] = (),
    method_label: str | None = None,
) -> EvalReport:
    """Evaluate a trained state on episodes sampled from ``data`` (the novel split).

    ``overrides`` may change test-time settings such as ``augmentation``,
    ``classifier``, ``episodes_eval`` or ``seed``.
    """
    config, backbone, fusion, _ = load_state(checkpoint)
    if overrides:
        config = RunConfig.from_dict({**asdict(config), **overrides})
    config.validate()
    if config.needs_cache:
        check_cache(cache, [data])
    predict = make_predictor(config, backbone, fusion, cache, derive_seed(config.seed, "test"))
    label = method_label or _method_label(config)
    return evaluate_episodes(
        predict,
        data,
        config.n,
        config.m,
        config.q,
        config.episodes_eval,
        derive_seed(config.seed, "test"),
        label,
        asdict(config),
        forbidden_classes=base_classes,
    )


def _method_label(config: RunConfig) -> str:
    if config.method == "supervised":
        name = {"prototype": "Prototype (supervised features)", "nn": "Nearest Neighbor",
                "logistic_ova": "Logistic Regression", "softmax_reg": "Softmax Regression"}[config.classifier]
    else:
        name = {"metairnet": "MetaIRNet", "protonet": "ProtoNet"}[config.method]
    if config.augmentation != "none":
        name += f" + {config.augmentation}"
    return name


# --------------------------------------------------------------------------
# training
# --------------------------------------------------------------------------


@dataclass
class TrainResult:
    checkpoint: Path
    metrics: list[dict]
    best_val: float
    best_epoch: int

    @property
    def episode_losses(self) -> list[float]:
        return [r["loss"] for r in self.metrics if r["kind"] == "episode"]


def _train_supervised(config: RunConfig, splits: Splits, backbone, opt, log_record) -> None:
    base = splits.base
    records = base.records()
    pos = {c: i for i, c in enumerate(base.classes)}
    images = torch.stack([base.load(r) for r in records])
    labels = torch.tensor([pos[r.class_id] for r in records])
    head = nn.Linear(backbone.out_dim if hasattr(backbone, "out_dim") else backbone(images[:2]).shape[1], len(pos))
    opt.add_param_group({"params": head.parameters()})
    g = torch.Generator().manual_seed(derive_seed(config.seed, "supervised"))
    backbone.train()
    for step in range(config.supervised_steps):
        idx = torch.randint(len(records), (min(config.supervised_batch, len(records)),), generator=g)
        loss = F.cross_entropy(head(backbone(images[idx])), labels[idx])
        opt.zero_grad()
        loss.backward()
        opt.step()
        log_record({"kind": "step", "step": step, "loss": loss.item()})


def meta_train(
    config: RunConfig,
    splits: Splits,
    cache=None,
    out_dir: str | Path = ".",
) -> TrainResult:
    """Episodic training on the base split with model selection on validation episodes.

    Writes ``checkpoint.pt`` (best validation accuracy) and ``metrics.jsonl``
    into ``out_dir``.
    """
    config.validate()
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if config.needs_cache:
        check_cache(cache, [splits.base, splits.val])

    backbone, fusion = build_models(config, derive_seed(config.seed, "init"))
    params = list(backbone.parameters()) + (list(fusion.parameters()) if fusion is not None else [])
    opt = torch.optim.Adam(params, lr=config.lr)
    metrics: list[dict] = []
    metrics_path = out_dir / "metrics.jsonl"
    metrics_file = open(metrics_path, "w")

    def log_record(rec: dict) -> None:
        metrics.append(rec)
        metrics_file.write(json.dumps(rec) + "\n")

    checkpoint = out_dir / "checkpoint.pt"
    best_val, best_epoch = -1.0, -1
    n_aug = config.n_aug if config.fused else 0
    try:
        for epoch in range(config.epochs):
            losses = []
            if config.method == "supervised":
                if epoch == 0:
                    _train_supervised(config, splits, backbone, opt, log_record)
            else:
                backbone.train()
                if fusion is not None:
                    fusion.train()
                for i in range(config.episodes_train):
                    ep_seed = derive_seed(config.seed, f"train/{epoch}/{i}")
                    ep = sample_episode(splits.base, config.n, config.m, config.q, ep_seed)
                    rng = np.random.default_rng(ep_seed)
                    loss = episode_loss(ep, fusion, backbone, cache, n_aug, squared=config.squared_distance, rng=rng)
                    if not torch.isfinite(loss):
                        raise RuntimeError(f"training loss became non-finite at epoch {epoch}, episode {i}")
                    opt.zero_grad()
                    loss.backward()
                    opt.step()
                    losses.append(loss.item())
                    log_record({"kind": "episode", "epoch": epoch, "episode": i, "loss": loss.item()})

            val_cfg = RunConfig.from_dict({**asdict(config), "augmentation": "none"})
            val_cfg.classifier = "prototype"
            predict = make_predictor(val_cfg, backbone, fusion, cache, derive_seed(config.seed, "val"))
            val = evaluate_episodes(
                predict, splits.val, config.n, config.m, config.q, config.episodes_val,
                derive_seed(config.seed, "val"),
            )
            rec = {
                "kind": "epoch",
                "epoch": epoch,
                "train_loss": float(np.mean(losses)) if losses else None,
                "val_accuracy": val.mean,
                "val_ci95": val.ci95,
            }
            log_record(rec)
            log.info("epoch %d train_loss %s val %.2f +- %.2f", epoch, rec["train_loss"], val.mean, val.ci95)
            if val.mean > best_val:
                best_val, best_epoch = val.mean, epoch
                save_state(checkpoint, config, backbone, fusion, opt,
                           {"epoch": epoch, "val_accuracy": val.mean})
            if config.method == "supervised":
                break
    finally:
        metrics_file.close()
    return TrainResult(checkpoint, metrics, best_val, best_epoch)


# --------------------------------------------------------------------------
# reporting
# --------------------------------------------------------------------------

COMPARABLE_KEYS = ("n", "m", "q", "episodes_eval", "seed")


def report(reports: Sequence[EvalReport]) -> tuple[str, list[dict]]:
    """Render reports as an aligned text table plus machine-readable rows.

    Reports whose episode protocol differs from the first one are flagged.
    """
    if not reports:
        raise ValueError("report() needs at least one EvalReport")
    ref = {k: reports[0].config.get(k) for k in COMPARABLE_KEYS}
    rows = []
    for r in reports:
        diff = [k for k in COMPARABLE_KEYS if r.config.get(k) != ref[k]]
        rows.append({
            "method": r.method,
            "mean": round(r.mean, 2),
            "ci95": round(r.ci95, 2),
            "episodes": len(r.accuracies),
            "mismatch": diff,
        })
    width = max(len("Method"), *(len(row["method"]) for row in rows))
    lines = [f"{'Method':<{width}}  {'Accuracy (%)':>16}  {'Episodes':>8}"]
    lines.append("-" * len(lines[0]))
    for row in rows:
        acc = f"{row['mean']:.2f} +- {row['ci95']:.2f}"
        flag = f"  [config differs: {', '.join(row['mismatch'])}]" if row["mismatch"] else ""
        lines.append(f"{row['method']:<{width}}  {acc:>16}  {row['episodes']:>8}{flag}")
    return "\n".join(lines), rows
