"""Prototype classifier, augmented support sets, episodic loss and baselines."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F
from sklearn.linear_model import LogisticRegression
from sklearn.multiclass import OneVsRestClassifier

from .data import Episode
from .fusion import FusionNet, fuse

GAUSSIAN_STD = 0.01
# inverse L2 strength for the logistic / softmax regression baselines
REGRESSION_C = 1.0

AUGMENTATIONS = ("none", "flip", "gaussian", "mixup", "finetunegan")


class AugmentationError(ValueError):
    pass


@dataclass
class AugmentedSupportSet:
    images: torch.Tensor  # (N, 3, H, W)
    labels: torch.Tensor  # (N,)
    origins: list[str]
    # per-entry std of Gaussian noise added to the entry's embedding
    feature_noise: torch.Tensor | None = None
    seed: int = 0
    n: int = field(default=0)

    def __post_init__(self):
        if self.feature_noise is None:
            self.feature_noise = torch.zeros(len(self.labels))
        if not self.n:
            self.n = int(self.labels.max()) + 1 if len(self.labels) else 0

    def __len__(self) -> int:
        return len(self.labels)

    def extend(self, images, labels, origin: str, noise: float = 0.0) -> "AugmentedSupportSet":
        k = len(labels)
        return AugmentedSupportSet(
            torch.cat([self.images, images]),
            torch.cat([self.labels, labels]),
            self.origins + [origin] * k,
            torch.cat([self.feature_noise, torch.full((k,), float(noise))]),
            seed=self.seed,
            n=self.n,
        )


def plain_support(episode: Episode) -> AugmentedSupportSet:
    return AugmentedSupportSet(
        episode.support_images,
        episode.support_labels,
        ["real"] * len(episode.support_labels),
        seed=episode.seed or 0,
        n=episode.n,
    )


def _pick_variants(cache, episode: Episode, n_aug: int, rng: np.random.Generator) -> torch.Tensor:
    """(n*m, n_aug, 3, H, W) cached variants, chosen uniformly without
    replacement when the cache holds enough of them."""
    size = episode.support_images.shape[-1]
    picked = []
    for rec in episode.support_records:
        try:
            variants = cache.load_variants(rec, size)
        except Exception as exc:
            raise AugmentationError(f"no cached variants for support image {rec.path!r}") from exc
        replace = n_aug > len(variants)
        idx = rng.choice(len(variants), size=n_aug, replace=replace)
        picked.append(variants[torch.as_tensor(idx)])
    # generation is a preprocessing stage: no gradient may reach the generator
    return torch.stack(picked).detach()


def augment_support(
    episode: Episode,
    cache,
    fusion_net: FusionNet | None,
    n_aug: int,
    rng: np.random.Generator | None = None,
) -> AugmentedSupportSet:
    """Add ``n_aug`` fused images per real support image.

    Entries are ordered real image first, then its fused images. With
    ``n_aug == 0`` the plain support set is returned.
    """
    base = plain_support(episode)
    if n_aug == 0:
        return base
    if fusion_net is None:
        raise AugmentationError("n_aug > 0 requires a fusion network")
    rng = rng if rng is not None else np.random.default_rng(episode.seed)
    variants = _pick_variants(cache, episode, n_aug, rng)
    k = len(episode.support_labels)
    real = episode.support_images[:, None].expand(-1, n_aug, -1, -1, -1)
    flat_real = real.reshape(k * n_aug, *real.shape[2:])
    flat_gen = variants.reshape(k * n_aug, *variants.shape[2:])
    w = fusion_net(flat_real, flat_gen)
    fused = fuse(flat_real, flat_gen, w).view(k, n_aug, *real.shape[2:])

    images = torch.cat([episode.support_images[:, None], fused], dim=1).flatten(0, 1)
    labels = episode.support_labels.repeat_interleave(n_aug + 1)
    origins = (["real"] + ["fused"] * n_aug) * k
    return AugmentedSupportSet(images, labels, origins, seed=base.seed, n=episode.n)


def augmentation_baselines(
    support: AugmentedSupportSet,
    kind: str,
    episode: Episode | None = None,
    cache=None,
    n_aug: int = 1,
    std: float = GAUSSIAN_STD,
    rng: np.random.Generator | None = None,
) -> AugmentedSupportSet:
    """Add non-learned augmentations of the real entries of ``support``.

    flip        horizontally mirrored copies
    gaussian    copies whose embeddings receive N(0, std^2) noise
    mixup       real/generated blends with one uniform scalar weight per pair
    finetunegan raw cached generated variants
    """
    if kind not in AUGMENTATIONS:
        raise ValueError(f"unknown augmentation {kind!r}; choose from {AUGMENTATIONS}")
    if kind == "none":
        return support
    real = [i for i, o in enumerate(support.origins) if o == "real"]
    images, labels = support.images[real], support.labels[real]
    if kind == "flip":
        return support.extend(torch.flip(images, dims=[-1]), labels, "flipped")
    if kind == "gaussian":
        return support.extend(images, labels, "gaussian", noise=std)

    if cache is None or episode is None:
        raise AugmentationError(f"{kind} augmentation needs the generation cache")
    rng = rng if rng is not None else np.random.default_rng(support.seed)
    variants = _pick_variants(cache, episode, n_aug, rng)  # (k, n_aug, ...)
    gen = variants.flatten(0, 1)
    lab = labels.repeat_interleave(n_aug)
    if kind == "finetunegan":
        return support.extend(gen, lab, "generated")
    src = images.repeat_interleave(n_aug, dim=0)
    lam = torch.as_tensor(rng.uniform(size=len(lab)), dtype=src.dtype).view(-1, 1, 1, 1)
    return support.extend(lam * src + (1 - lam) * gen, lab, "mixup")


# --------------------------------------------------------------------------
# prototype classifier
# --------------------------------------------------------------------------


def _safe_norm(d2: torch.Tensor) -> torch.Tensor:
    # sqrt with a zero (not NaN) gradient at exactly zero distance
    positive = d2 > 0
    return torch.where(positive, torch.sqrt(torch.where(positive, d2, torch.ones_like(d2))), torch.zeros_like(d2))


def pairwise_distances(a: torch.Tensor, b: torch.Tensor, squared: bool = False) -> torch.Tensor:
    d2 = ((a[:, None, :] - b[None, :, :]) ** 2).sum(-1)
    return d2 if squared else _safe_norm(d2)


def prototypes_from_embeddings(emb: torch.Tensor, labels: torch.Tensor, n: int) -> torch.Tensor:
    """Row c is the mean embedding of class c. Raises if a class is absent."""
    counts = torch.bincount(labels, minlength=n)
    if (counts == 0).any():
        missing = torch.nonzero(counts == 0).flatten().tolist()
        raise ValueError(f"classes {missing} have no support entries")
    sums = torch.zeros(n, emb.shape[1], dtype=emb.dtype).index_add(0, labels, emb)
    return sums / counts[:, None].to(emb.dtype)


def add_feature_noise(emb: torch.Tensor, support: AugmentedSupportSet) -> torch.Tensor:
    if not (support.feature_noise > 0).any():
        return emb
    g = torch.Generator().manual_seed(int(support.seed))
    noise = torch.randn(emb.shape, generator=g, dtype=emb.dtype)
    return emb + noise * support.feature_noise.to(emb.dtype)[:, None]


def embed_support(support: AugmentedSupportSet, backbone) -> torch.Tensor:
    return add_feature_noise(backbone(support.images), support)


def compute_prototypes(support: AugmentedSupportSet, backbone) -> torch.Tensor:
    """(n, D) class centroids of the support embeddings."""
    if len(support) == 0:
        raise ValueError("empty support set")
    return prototypes_from_embeddings(embed_support(support, backbone), support.labels, support.n)


def prototype_logits(query_emb: torch.Tensor, prototypes: torch.Tensor, squared: bool = False) -> torch.Tensor:
    """Negative distances; softmax over the last axis gives class probabilities."""
    return -pairwise_distances(query_emb, prototypes, squared)


def classify_query(query: torch.Tensor, prototypes: torch.Tensor, backbone=None, squared: bool = False) -> torch.Tensor:
    """Class probabilities for query image(s).

    With ``backbone=None`` the query is taken to be an embedding already.
    A single query (image or vector) gives an (n,) vector, a batch (B, n).
    """
    single = query.dim() in (1, 3)
    if single:
        query = query[None]
    emb = query if backbone is None else backbone(query)
    probs = torch.softmax(prototype_logits(emb, prototypes, squared), dim=-1)
    return probs[0] if single else probs


def episode_logits(
    episode: Episode,
    backbone,
    fusion_net: FusionNet | None = None,
    cache=None,
    n_aug: int = 0,
    augmentation: str = "none",
    squared: bool = False,
    rng: np.random.Generator | None = None,
) -> torch.Tensor:
    """Query logits (n*q, n) for one episode under the given support pipeline."""
    rng = rng if rng is not None else np.random.default_rng(episode.seed)
    support = augment_support(episode, cache, fusion_net, n_aug, rng)
    support = augmentation_baselines(support, augmentation, episode, cache, n_aug=max(n_aug, 1), rng=rng)
    # support and queries share one forward pass so batch-norm sees both
    k = len(support)
    emb = backbone(torch.cat([support.images, episode.query_images]))
    s_emb, q_emb = add_feature_noise(emb[:k], support), emb[k:]
    protos = prototypes_from_embeddings(s_emb, support.labels, episode.n)
    return prototype_logits(q_emb, protos, squared)


def episode_loss(episode: Episode, fusion_net, backbone, cache, n_aug: int, **kw) -> torch.Tensor:
    """Mean over queries of -log P(true class)."""
    logits = episode_logits(episode, backbone, fusion_net, cache, n_aug, **kw)
    return F.cross_entropy(logits, episode.query_labels)


# --------------------------------------------------------------------------
# non-episodic baselines on frozen features
# --------------------------------------------------------------------------

BASELINES = ("nn", "logistic_ova", "softmax_reg")


def nearest_neighbor(support_feats: np.ndarray, support_labels: np.ndarray, query_feats: np.ndarray) -> np.ndarray:
    """1-NN in Euclidean distance; ties go to the lowest class label."""
    d = ((query_feats[:, None, :] - support_feats[None, :, :]) ** 2).sum(-1)
    best = d.min(axis=1, keepdims=True)
    tied = d == best
    labels = np.where(tied, support_labels[None, :], np.iinfo(np.int64).max)
    return labels.min(axis=1)


def baseline_classifiers(
    support_feats,
    support_labels,
    query_feats,
    kind: str,
) -> np.ndarray:
    """Predict query labels from support features with a classic classifier."""
    xs = np.asarray(support_feats, dtype=np.float64)
    ys = np.asarray(support_labels, dtype=np.int64)
    xq = np.asarray(query_feats, dtype=np.float64)
    if len(np.unique(ys)) < 2:
        raise ValueError("support must contain at least two classes")
    if kind == "nn":
        return nearest_neighbor(xs, ys, xq)
    if kind == "logistic_ova":
        clf = OneVsRestClassifier(LogisticRegression(C=REGRESSION_C, max_iter=1000))
    elif kind == "softmax_reg":
        clf = LogisticRegression(C=REGRESSION_C, max_iter=1000)
    else:
        raise ValueError(f"unknown baseline {kind!r}; choose from {BASELINES}")
    return clf.fit(xs, ys).predict(xq)
