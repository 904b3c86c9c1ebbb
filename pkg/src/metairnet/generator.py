"""Class-conditional toy image generator with explicit batch-norm scale/shift
access, checkpoint I/O and scratch pretraining."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import torch
import torch.nn.functional as F
from torch import nn

from .backbone import FrozenFeatures

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "metairnet-generator"
CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    pass


class ArchitectureMismatchError(CheckpointError):
    pass


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class GeneratorConfig:
    noise_dim: int = 64
    embed_dim: int = 16
    num_classes: int = 1
    widths: tuple[int, ...] = (64, 32, 16)
    resolution: int = 64

    def __post_init__(self):
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))
        start = self.resolution // 2 ** len(self.widths)
        if start < 1 or start * 2 ** len(self.widths) != self.resolution:
            raise ValueError(
                f"resolution {self.resolution} is not reachable by {len(self.widths)} "
                "doubling blocks"
            )

    @property
    def latent_dim(self) -> int:
        return self.noise_dim + self.embed_dim

    @property
    def start_size(self) -> int:
        return self.resolution // 2 ** len(self.widths)


class ScaleShiftBatchNorm2d(nn.Module):
    """Batch norm whose affine scale/shift can be overridden per call.

    ``gamma``/``beta`` passed to ``forward`` replace the module's own
    parameters; they may be (C,) or per-sample (B, C).
    """

    def __init__(self, num_features: int, eps: float = 1e-5, momentum: float = 0.1):
        super().__init__()
        self.num_features = num_features
        self.norm = nn.BatchNorm2d(num_features, eps=eps, momentum=momentum, affine=False)
        self.weight = nn.Parameter(torch.ones(num_features))
        self.bias = nn.Parameter(torch.zeros(num_features))

    def forward(self, x, gamma=None, beta=None):
        h = self.norm(x)
        gamma = self.weight if gamma is None else gamma
        beta = self.bias if beta is None else beta
        if gamma.dim() == 1:
            gamma = gamma.view(1, -1, 1, 1)
        else:
            gamma = gamma[:, :, None, None]
        if beta.dim() == 1:
            beta = beta.view(1, -1, 1, 1)
        else:
            beta = beta[:, :, None, None]
        return gamma * h + beta


class ToyGenerator(nn.Module):
    """Upsampling CNN: latent -> linear -> [upsample, conv, BN, ReLU] x k -> conv -> tanh.

    The latent is the concatenation of a noise vector and a class embedding.
    ``embedding`` holds one learned embedding per pretraining class.
    """

    def __init__(self, config: GeneratorConfig):
        super().__init__()
        self.config = config
        c0, s = config.widths[0], config.start_size
        self.embedding = nn.Embedding(config.num_classes, config.embed_dim)
        self.project = nn.Linear(config.latent_dim, c0 * s * s)
        self.convs = nn.ModuleList()
        self.norms = nn.ModuleList()
        prev = c0
        for w in config.widths:
            self.convs.append(nn.Conv2d(prev, w, 3, padding=1))
            self.norms.append(ScaleShiftBatchNorm2d(w))
            prev = w
        self.to_rgb = nn.Conv2d(prev, 3, 3, padding=1)

    @property
    def latent_dim(self) -> int:
        return self.config.latent_dim

    def latent(self, noise: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
        return torch.cat([noise, self.embedding(labels)], dim=-1)

    def default_embedding(self) -> torch.Tensor:
        """Class-agnostic starting point for an embedding: the mean over classes."""
        return self.embedding.weight.detach().mean(0)

    def forward(self, z: torch.Tensor, bn: Sequence[tuple[torch.Tensor, torch.Tensor]] | None = None):
        c0, s = self.config.widths[0], self.config.start_size
        h = self.project(z).view(-1, c0, s, s)
        for i, (conv, norm) in enumerate(zip(self.convs, self.norms)):
            h = F.interpolate(h, scale_factor=2, mode="nearest")
            h = conv(h)
            h = norm(h, *bn[i]) if bn is not None else norm(h)
            h = F.relu(h)
        return torch.tanh(self.to_rgb(h))


# --------------------------------------------------------------------------
# parameter access
# --------------------------------------------------------------------------


def bn_parameter_view(generator: ToyGenerator):
    """Split learnable parameters into (bn_params, other_params) name->Parameter dicts.

    ``bn_params`` holds exactly the gamma/beta of every batch-norm layer.
    """
    bn_ids = set()
    for norm in generator.norms:
        bn_ids.add(id(norm.weight))
        bn_ids.add(id(norm.bias))
    bn, other = {}, {}
    for name, p in generator.named_parameters():
        (bn if id(p) in bn_ids else other)[name] = p
    return bn, other


def bn_values(generator: ToyGenerator) -> list[tuple[torch.Tensor, torch.Tensor]]:
    return [(n.weight.detach().clone(), n.bias.detach().clone()) for n in generator.norms]


def check_latent(generator: ToyGenerator, z: torch.Tensor) -> torch.Tensor:
    if z.shape[-1] != generator.latent_dim or z.dim() not in (1, 2):
        raise ValueError(
            f"latent must have trailing dimension {generator.latent_dim}, got shape {tuple(z.shape)}"
        )
    if not torch.isfinite(z).all():
        raise ValueError("latent code contains NaN or Inf entries")
    return z


@torch.no_grad()
def generate(generator: ToyGenerator, z: torch.Tensor, bn=None) -> torch.Tensor:
    """Render latent(s) in inference mode.

    ``z`` of shape (D,) gives one (3, H, W) image in [-1, 1]; (B, D) gives a batch.
    """
    check_latent(generator, z)
    was_training = generator.training
    generator.eval()
    try:
        out = generator(z.reshape(-1, generator.latent_dim), bn)
    finally:
        generator.train(was_training)
    return out[0] if z.dim() == 1 else out


# --------------------------------------------------------------------------
# checkpoints
# --------------------------------------------------------------------------


def save_checkpoint(generator: ToyGenerator, path: str | Path, extra: dict | None = None) -> None:
    payload = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "config": {**asdict(generator.config), "widths": list(generator.config.widths)},
        "state": generator.state_dict(),
        "extra": extra or {},
    }
    tmp = Path(str(path) + ".tmp")
    torch.save(payload, tmp)
    tmp.replace(path)


def load_checkpoint(path: str | Path, config: GeneratorConfig | None = None) -> ToyGenerator:
    """Load a generator. With ``config`` given, refuse a checkpoint whose
    architecture descriptor differs from it."""
    try:
        payload = torch.load(path, map_location="cpu", weights_only=True)
    except Exception as exc:  # torch raises a zoo of types for corrupt files
        raise CheckpointError(f"cannot read generator checkpoint {path}: {exc}") from exc
    if not isinstance(payload, dict) or payload.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"{path} is not a generator checkpoint")
    if payload.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {payload.get('version')!r}")
    stored = GeneratorConfig(**payload["config"])
    if config is not None and config != stored:
        raise ArchitectureMismatchError(
            f"checkpoint architecture {stored} does not match expected {config}"
        )
    generator = ToyGenerator(stored)
    state = payload["state"]
    own = generator.state_dict()
    for key, value in own.items():
        if key not in state:
            raise ArchitectureMismatchError(f"checkpoint lacks parameter {key!r}")
        if state[key].shape != value.shape:
            raise ArchitectureMismatchError(
                f"shape mismatch for {key!r}: {tuple(state[key].shape)} vs {tuple(value.shape)}"
            )
    generator.load_state_dict(state)
    generator.eval()
    return generator


# --------------------------------------------------------------------------
# scratch pretraining
# --------------------------------------------------------------------------


@dataclass
class PretrainConfig:
    generator: GeneratorConfig = field(default_factory=GeneratorConfig)
    steps: int = 1500
    batch_size: int = 64
    lr: float = 1e-3
    lr_latent: float = 1e-2
    lambda_p: float = 0.1
    lambda_z: float = 0.1
    seed: int = 0
    log_every: int = 100


def pretrain_toy_generator(index, config: PretrainConfig):
    """Train a generator from scratch on the images of ``index``.

    No discriminator is used. Every training image owns a learnable noise
    code and every class a learnable embedding, fitted jointly with the
    network under the same L1 + perceptual + earth-mover objective used for
    single-image adaptation (generative latent optimization).

    Returns ``(generator, curve)`` where ``curve`` is a list of
    ``{"step", "loss", "l1"}`` records.
    """
    from .adaptation import earth_mover_1d, perceptual_distance

    records = index.records()
    class_pos = {c: i for i, c in enumerate(index.classes)}
    gcfg = config.generator
    if gcfg.num_classes != len(index.classes):
        gcfg = GeneratorConfig(**{**asdict(gcfg), "num_classes": len(index.classes)})

    torch.manual_seed(config.seed)
    generator = ToyGenerator(gcfg)
    curve: list[dict] = []
    if config.steps == 0:
        return generator.eval(), curve

    images = torch.stack([index.load(r) for r in records])
    if images.shape[-1] != gcfg.resolution:
        images = F.interpolate(images, size=gcfg.resolution, mode="bilinear", align_corners=False)
    labels = torch.tensor([class_pos[r.class_id] for r in records])
    rng = torch.Generator().manual_seed(config.seed)
    codes = nn.Parameter(torch.randn(len(records), gcfg.noise_dim, generator=rng))
    features = FrozenFeatures(seed=config.seed)

    opt = torch.optim.Adam(
        [
            {"params": generator.parameters(), "lr": config.lr},
            {"params": [codes], "lr": config.lr_latent},
        ]
    )
    generator.train()
    for step in range(config.steps):
        idx = torch.randint(len(records), (min(config.batch_size, len(records)),), generator=rng)
        z = generator.latent(codes[idx], labels[idx])
        out = generator(z)
        target = images[idx]
        l1 = (out - target).abs().mean()
        perc = perceptual_distance(features(out), features(target)).mean()
        r = torch.randn(z.shape, generator=rng)
        em = earth_mover_1d(z, r).mean()
        loss = l1 + config.lambda_p * perc + config.lambda_z * em
        if not torch.isfinite(loss):
            raise TrainingError(f"generator pretraining diverged at step {step}")
        opt.zero_grad()
        loss.backward()
        opt.step()
        if step % config.log_every == 0 or step == config.steps - 1:
            curve.append({"step": step, "loss": loss.item(), "l1": l1.item()})
            log.info("pretrain step %d loss %.4f l1 %.4f", step, loss.item(), l1.item())
    opt.zero_grad()  # hand back a generator without stale gradients
    return generator.eval(), curve
