"""Dataset ingestion, class splits and episodic task sampling."""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field, replace
from functools import lru_cache
from pathlib import Path
from typing import Iterable, Mapping, NamedTuple

import numpy as np
import torch
from PIL import Image

IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg", ".bmp", ".gif", ".webp"}

# accepted section names in a split file -> canonical partition name
SECTION_ALIASES = {
    "base": "base",
    "train": "base",
    "training": "base",
    "val": "val",
    "valid": "val",
    "validation": "val",
    "novel": "novel",
    "test": "novel",
}


class SplitError(ValueError):
    """Split file is malformed or its partitions are not disjoint/complete."""


class IngestionError(ValueError):
    """Dataset directory does not match the split file."""


class SamplingError(ValueError):
    """Not enough classes or images to sample the requested episode."""


# --------------------------------------------------------------------------
# images
# --------------------------------------------------------------------------


@lru_cache(maxsize=16384)
def _read_image(path: str, size: int | None) -> torch.Tensor:
    with Image.open(path) as im:
        im = im.convert("RGB")
        if size is not None and im.size != (size, size):
            im = im.resize((size, size), Image.BILINEAR)
        arr = np.asarray(im, dtype=np.float32) / 255.0
    return torch.from_numpy(arr).permute(2, 0, 1) * 2.0 - 1.0


def read_image(path: str | Path, size: int | None = None) -> torch.Tensor:
    """Load an image file as a float (3, H, W) tensor with values in [-1, 1]."""
    return _read_image(str(path), size).clone()


def write_image(image: torch.Tensor, path: str | Path) -> None:
    """Write a (3, H, W) tensor in [-1, 1] as an 8-bit image file."""
    arr = ((image.detach().float().clamp(-1, 1) + 1.0) * 127.5).round()
    arr = arr.to(torch.uint8).permute(1, 2, 0).cpu().numpy()
    Image.fromarray(arr).save(path)


# --------------------------------------------------------------------------
# index and splits
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class ImageRecord:
    path: str  # relative to the dataset root
    class_id: str
    variants: tuple[str, ...] = ()  # relative to the cache root
    latent: str | None = None


@dataclass
class DatasetIndex:
    root: Path
    classes: list[str]
    images: dict[str, list[ImageRecord]]
    image_size: int | None = None
    name: str = ""

    def __post_init__(self):
        self.root = Path(self.root)
        seen = set()
        for c in self.classes:
            for rec in self.images.get(c, []):
                if rec.path in seen:
                    raise IngestionError(f"duplicate image record {rec.path!r}")
                seen.add(rec.path)

    def records(self) -> list[ImageRecord]:
        return [r for c in self.classes for r in self.images[c]]

    def __len__(self) -> int:
        return sum(len(self.images[c]) for c in self.classes)

    def load(self, record: ImageRecord) -> torch.Tensor:
        return read_image(self.root / record.path, self.image_size)

    def with_records(self, records: Iterable[ImageRecord]) -> "DatasetIndex":
        by_path = {r.path: r for r in records}
        images = {
            c: [by_path.get(r.path, r) for r in self.images[c]] for c in self.classes
        }
        return replace(self, images=images)


class SplitSpec(NamedTuple):
    base: frozenset
    val: frozenset
    novel: frozenset


class Splits(NamedTuple):
    base: DatasetIndex
    val: DatasetIndex
    novel: DatasetIndex


def validate_split(split: SplitSpec, all_classes: Iterable[str] | None = None) -> None:
    for name in SplitSpec._fields:
        if not getattr(split, name):
            raise SplitError(f"partition {name!r} is empty")
    pairs = [("base", "val"), ("base", "novel"), ("val", "novel")]
    for a, b in pairs:
        common = getattr(split, a) & getattr(split, b)
        if common:
            raise SplitError(
                f"partitions {a!r} and {b!r} overlap on classes {sorted(common)}"
            )
    if all_classes is not None:
        union = split.base | split.val | split.novel
        extra = set(all_classes) - union
        if extra:
            raise SplitError(f"classes not assigned to any partition: {sorted(extra)}")


def parse_split_file(path: str | Path) -> SplitSpec:
    """Read a split file.

    Two formats are accepted. JSON (``.json``) holding an object with the
    three partitions as lists, or plain text where a section header line
    (``[train]``, ``[val]``, ``[test]`` or the ``base``/``novel`` aliases,
    optionally written ``train:``) is followed by class IDs separated by
    commas and/or whitespace. Lines starting with ``#`` are ignored.
    """
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise SplitError(f"cannot read split file {path}: {exc}") from exc

    sections: dict[str, list[str]] = {}
    if path.suffix == ".json":
        try:
            raw = json.loads(text)
        except json.JSONDecodeError as exc:
            raise SplitError(f"malformed split file {path}: {exc}") from exc
        for key, ids in raw.items():
            canon = SECTION_ALIASES.get(key.lower())
            if canon is None:
                raise SplitError(f"unknown split section {key!r}")
            sections.setdefault(canon, []).extend(str(i) for i in ids)
    else:
        current = None
        for lineno, line in enumerate(text.splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            header = re.fullmatch(r"\[?\s*([A-Za-z_]+)\s*\]?\s*:?", line)
            if header and header.group(1).lower() in SECTION_ALIASES:
                current = SECTION_ALIASES[header.group(1).lower()]
                sections.setdefault(current, [])
                continue
            if current is None:
                raise SplitError(f"{path}:{lineno}: class IDs before any section header")
            sections[current].extend(tok for tok in re.split(r"[,\s]+", line) if tok)

    for name, ids in sections.items():
        dup = {i for i in ids if ids.count(i) > 1}
        if dup:
            raise SplitError(f"partition {name!r} lists classes twice: {sorted(dup)}")
    split = SplitSpec(*(frozenset(sections.get(n, ())) for n in SplitSpec._fields))
    validate_split(split)
    return split


def write_split_file(split: SplitSpec, path: str | Path) -> None:
    with open(path, "w") as f:
        for header, name in (("train", "base"), ("val", "val"), ("test", "novel")):
            f.write(f"[{header}]\n")
            f.write(", ".join(sorted(getattr(split, name), key=_natural_key)) + "\n")


def _natural_key(s: str):
    return [int(t) if t.isdigit() else t for t in re.split(r"(\d+)", s)]


def _scan_class_dir(root: Path, class_id: str) -> list[ImageRecord]:
    d = root / class_id
    if not d.is_dir():
        raise IngestionError(f"missing directory for class {class_id!r} under {root}")
    files = sorted(
        p for p in d.iterdir() if p.is_file() and p.suffix.lower() in IMAGE_SUFFIXES
    )
    return [ImageRecord(path=p.relative_to(root).as_posix(), class_id=class_id) for p in files]


def load_dataset(
    root: str | Path,
    split_file: str | Path,
    image_size: int | None = None,
    strict: bool = True,
) -> Splits:
    """Index ``root/<class_id>/*`` into base/val/novel partitions.

    With ``strict`` set, class directories that no partition mentions are an
    error, so the split covers exactly the dataset's classes.
    """
    root = Path(root)
    split = parse_split_file(split_file)
    if strict:
        present = [p.name for p in root.iterdir() if p.is_dir()]
        validate_split(split, present)
    out = []
    for name in SplitSpec._fields:
        classes = sorted(getattr(split, name), key=_natural_key)
        images = {c: _scan_class_dir(root, c) for c in classes}
        out.append(DatasetIndex(root, classes, images, image_size=image_size, name=name))
    return Splits(*out)


# --------------------------------------------------------------------------
# episodes
# --------------------------------------------------------------------------


@dataclass
class Episode:
    n: int
    m: int
    q: int
    class_ids: tuple[str, ...]  # global class ID of each local label
    support_records: list[ImageRecord]
    query_records: list[ImageRecord]
    support_labels: torch.Tensor
    query_labels: torch.Tensor
    support_images: torch.Tensor | None = field(default=None, repr=False)
    query_images: torch.Tensor | None = field(default=None, repr=False)
    seed: int | None = None

    def to_dict(self) -> dict:
        return {
            "n": self.n,
            "m": self.m,
            "q": self.q,
            "seed": self.seed,
            "class_ids": list(self.class_ids),
            "support": [[r.path, int(y)] for r, y in zip(self.support_records, self.support_labels)],
            "query": [[r.path, int(y)] for r, y in zip(self.query_records, self.query_labels)],
        }


def sample_episode(
    index: DatasetIndex,
    n: int,
    m: int,
    q: int,
    rng_seed: int,
    load_images: bool = True,
) -> Episode:
    """Sample an n-way m-shot episode with q queries per class.

    Classes are relabeled 0..n-1 in sampling order. The support and query
    images of a class are drawn without replacement from the same pool, so
    they never overlap.
    """
    if min(n, m, q) < 1:
        raise SamplingError(f"n, m, q must be positive, got ({n}, {m}, {q})")
    if len(index.classes) < n:
        raise SamplingError(f"need {n} classes, index has {len(index.classes)}")
    rng = np.random.default_rng(rng_seed)
    chosen = rng.choice(len(index.classes), size=n, replace=False)
    class_ids = tuple(index.classes[i] for i in chosen)

    support, query, s_lab, q_lab = [], [], [], []
    for label, cid in enumerate(class_ids):
        pool = index.images[cid]
        if len(pool) < m + q:
            raise SamplingError(
                f"class {cid!r} has {len(pool)} images, episode needs {m + q} (m={m}, q={q})"
            )
        picks = rng.choice(len(pool), size=m + q, replace=False)
        support += [pool[i] for i in picks[:m]]
        query += [pool[i] for i in picks[m:]]
        s_lab += [label] * m
        q_lab += [label] * q

    ep = Episode(
        n=n,
        m=m,
        q=q,
        class_ids=class_ids,
        support_records=support,
        query_records=query,
        support_labels=torch.tensor(s_lab, dtype=torch.long),
        query_labels=torch.tensor(q_lab, dtype=torch.long),
        seed=rng_seed,
    )
    if load_images:
        ep.support_images = torch.stack([index.load(r) for r in support])
        ep.query_images = torch.stack([index.load(r) for r in query])
    return ep


def check_episode(ep: Episode, allowed_classes: Iterable[str] | None = None) -> None:
    """Raise AssertionError if ``ep`` breaks an episode invariant."""
    assert len(ep.support_records) == ep.n * ep.m, "support size"
    assert len(ep.query_records) == ep.n * ep.q, "query size"
    s_counts = torch.bincount(ep.support_labels, minlength=ep.n)
    q_counts = torch.bincount(ep.query_labels, minlength=ep.n)
    assert s_counts.tolist() == [ep.m] * ep.n, "support label balance"
    assert q_counts.tolist() == [ep.q] * ep.n, "query label balance"
    s_paths = {r.path for r in ep.support_records}
    q_paths = {r.path for r in ep.query_records}
    assert len(s_paths) == len(ep.support_records), "duplicate support image"
    assert len(q_paths) == len(ep.query_records), "duplicate query image"
    assert not s_paths & q_paths, "support/query overlap"
    for rec, y in zip(ep.support_records + ep.query_records,
                      torch.cat([ep.support_labels, ep.query_labels]).tolist()):
        assert rec.class_id == ep.class_ids[y], "label/class mismatch"
    if allowed_classes is not None:
        allowed = set(allowed_classes)
        bad = set(ep.class_ids) - allowed
        assert not bad, f"episode uses classes outside the split: {sorted(bad)}"


def write_episode_manifest(episodes: Iterable[Episode], path: str | Path) -> None:
    with open(path, "w") as f:
        for ep in episodes:
            f.write(json.dumps(ep.to_dict()) + "\n")


def index_from_mapping(root: str | Path, mapping: Mapping[str, list[str]], **kw) -> DatasetIndex:
    """Build an index from ``{class_id: [relative paths]}``."""
    classes = sorted(mapping, key=_natural_key)
    images = {c: [ImageRecord(p, c) for p in mapping[c]] for c in classes}
    return DatasetIndex(Path(root), classes, images, **kw)
