import json

import pytest
import torch
from hypothesis import given, settings, strategies as st

from conftest import DATA_DIR
from metairnet.data import (
    IngestionError,
    SamplingError,
    SplitError,
    check_episode,
    index_from_mapping,
    load_dataset,
    parse_split_file,
    read_image,
    sample_episode,
    write_episode_manifest,
    write_image,
)


def test_nab_split_counts_and_disjointness():
    split = parse_split_file(DATA_DIR / "nab_split.txt")
    assert (len(split.base), len(split.val), len(split.novel)) == (278, 138, 139)
    assert len(split.base | split.val | split.novel) == 555
    assert not (split.base & split.val or split.base & split.novel or split.val & split.novel)


def test_json_split_file(tmp_path):
    p = tmp_path / "split.json"
    p.write_text(json.dumps({"train": [1, 2], "validation": [3], "test": ["4"]}))
    split = parse_split_file(p)
    assert split.base == {"1", "2"} and split.val == {"3"} and split.novel == {"4"}


def test_overlapping_split_rejected(tmp_path):
    p = tmp_path / "split.txt"
    p.write_text("[train]\n1, 42\n[val]\n3\n[test]\n42, 5\n")
    with pytest.raises(SplitError, match="42"):
        parse_split_file(p)


def test_empty_novel_partition_rejected(tmp_path):
    p = tmp_path / "split.txt"
    p.write_text("[train]\n1, 2\n[val]\n3\n[test]\n")
    with pytest.raises(SplitError, match="novel"):
        parse_split_file(p)


def test_ids_before_header_rejected(tmp_path):
    p = tmp_path / "split.txt"
    p.write_text("1, 2\n[train]\n3\n")
    with pytest.raises(SplitError):
        parse_split_file(p)


def _make_root(tmp_path, classes, per_class=3):
    root = tmp_path / "root"
    for c in classes:
        (root / c).mkdir(parents=True)
        for i in range(per_class):
            write_image(torch.zeros(3, 4, 4), root / c / f"{i}.png")
    return root


def test_missing_class_directory_named(tmp_path):
    root = _make_root(tmp_path, ["a", "b"])
    split = tmp_path / "split.txt"
    split.write_text("[train]\na\n[val]\nb\n[test]\nzebra\n")
    with pytest.raises(IngestionError, match="zebra"):
        load_dataset(root, split)


def test_unlisted_class_directory_rejected(tmp_path):
    root = _make_root(tmp_path, ["a", "b", "c", "d"])
    split = tmp_path / "split.txt"
    split.write_text("[train]\na\n[val]\nb\n[test]\nc\n")
    with pytest.raises(SplitError, match="d"):
        load_dataset(root, split)
    splits = load_dataset(root, split, strict=False)
    assert splits.novel.classes == ["c"]


def test_load_dataset_records_relative(tiny_splits, tiny_root):
    assert len(tiny_splits.base.classes) == 7
    rec = tiny_splits.base.records()[0]
    assert not rec.path.startswith("/")
    img = tiny_splits.base.load(rec)
    assert img.shape == (3, 16, 16)
    assert img.min() >= -1 and img.max() <= 1


def test_image_roundtrip_is_8bit_exact(tmp_path):
    x = torch.randint(0, 256, (3, 5, 7)).float() / 127.5 - 1
    write_image(x, tmp_path / "x.png")
    torch.testing.assert_close(read_image(tmp_path / "x.png"), x, atol=1e-6, rtol=0)


def _index(n_classes=20, per_class=25):
    mapping = {f"k{c:02d}": [f"k{c:02d}/{i}.png" for i in range(per_class)] for c in range(n_classes)}
    return index_from_mapping("/nonexistent", mapping)


@pytest.mark.parametrize("n,m,q,s,qq", [(5, 1, 16, 5, 80), (5, 5, 16, 25, 80)])
def test_episode_sizes(n, m, q, s, qq):
    ep = sample_episode(_index(), n, m, q, rng_seed=1, load_images=False)
    assert len(ep.support_records) == s and len(ep.query_records) == qq
    check_episode(ep)


def test_episode_loads_images(tiny_splits):
    ep = sample_episode(tiny_splits.novel, 5, 1, 2, rng_seed=0)
    assert ep.support_images.shape == (5, 3, 16, 16)
    assert ep.query_images.shape == (10, 3, 16, 16)


def test_same_seed_same_episode():
    idx = _index()
    a = sample_episode(idx, 5, 1, 16, 7, load_images=False)
    b = sample_episode(idx, 5, 1, 16, 7, load_images=False)
    assert a.to_dict() == b.to_dict()
    c = sample_episode(idx, 5, 1, 16, 8, load_images=False)
    assert a.to_dict() != c.to_dict()


def test_local_labels_follow_sampling_order():
    ep = sample_episode(_index(), 5, 2, 3, 0, load_images=False)
    for rec, y in zip(ep.support_records, ep.support_labels.tolist()):
        assert rec.class_id == ep.class_ids[y]
    assert ep.support_labels.tolist() == [0, 0, 1, 1, 2, 2, 3, 3, 4, 4]


def test_insufficient_classes():
    with pytest.raises(SamplingError, match="need 5 classes, index has 3"):
        sample_episode(_index(3), 5, 1, 1, 0, load_images=False)


def test_insufficient_images():
    with pytest.raises(SamplingError, match="has 4 images, episode needs 17"):
        sample_episode(_index(10, 4), 5, 1, 16, 0, load_images=False)


def test_thousand_episodes_satisfy_invariants():
    idx = _index(20, 20)
    for seed in range(1000):
        check_episode(sample_episode(idx, 5, 1, 16, seed, load_images=False), idx.classes)


@settings(max_examples=60, deadline=None)
@given(
    n=st.integers(1, 8),
    m=st.integers(1, 5),
    q=st.integers(1, 6),
    seed=st.integers(0, 2**32 - 1),
)
def test_episode_invariants_property(n, m, q, seed):
    idx = _index(8, 11)
    check_episode(sample_episode(idx, n, m, q, seed, load_images=False), idx.classes)


def test_every_class_eventually_sampled():
    idx = _index(20, 3)
    seen = set()
    for seed in range(10_000):
        seen.update(sample_episode(idx, 5, 1, 1, seed, load_images=False).class_ids)
    assert seen == set(idx.classes)


def test_episode_manifest_export(tmp_path):
    idx = _index()
    eps = [sample_episode(idx, 5, 1, 2, s, load_images=False) for s in range(3)]
    write_episode_manifest(eps, tmp_path / "episodes.jsonl")
    lines = (tmp_path / "episodes.jsonl").read_text().splitlines()
    assert len(lines) == 3
    first = json.loads(lines[0])
    assert first["seed"] == 0 and len(first["support"]) == 5 and len(first["query"]) == 10


def test_duplicate_records_rejected():
    with pytest.raises(IngestionError):
        index_from_mapping("/x", {"a": ["a/1.png", "a/1.png"]})
