import hashlib
import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from PIL import Image

from bitsiam.data import (
    CIFAR_RECORD,
    HAM10000_CLASSES,
    ImageArray,
    LabeledDataset,
    Manifest,
    ManifestEntry,
    SplitSpec,
    build_splits,
    channel_stats,
    ham10000_manifest,
    load_cifar10,
    load_image,
    load_split,
    profile_counts,
    read_cifar_batch,
    read_manifest,
    split_indices,
    synth_dataset,
    write_manifest,
)
from bitsiam.errors import ConfigError


def test_ham_sized_split_floor_rule():
    # floor(0.1 * 10015) = 1001, floor(0.2 * 10015) = 2003; pretrain takes the remainder
    m = build_splits(10015, SplitSpec())
    sizes = m.split_sizes()
    assert (sizes["finetune"], sizes["val"], sizes["test"]) == (1001, 1001, 2003)
    assert sizes["pretrain"] == 10015 - 1001 - 1001 - 2003 == 6010


def test_split_deterministic():
    a = build_splits(500, SplitSpec(seed=3))
    b = build_splits(500, SplitSpec(seed=3))
    c = build_splits(500, SplitSpec(seed=4))
    assert a.entries == b.entries
    assert a.entries != c.entries


def test_degenerate_all_pretrain():
    m = build_splits(17, SplitSpec((1, 0, 0, 0)))
    assert m.split_sizes() == {"pretrain": 17, "finetune": 0, "val": 0, "test": 0}


def test_split_errors():
    with pytest.raises(ConfigError, match="sum"):
        build_splits(10, SplitSpec((0.5, 0.1, 0.1, 0.1)))
    with pytest.raises(ConfigError):
        build_splits(3, SplitSpec())
    labels = np.array([0] * 20 + [1] * 3)
    with pytest.raises(ConfigError, match="fewer"):
        split_indices(23, SplitSpec(stratified=True), labels)


@settings(max_examples=60, deadline=None)
@given(
    weights=st.lists(st.integers(0, 10), min_size=4, max_size=4).filter(lambda w: sum(w) > 0),
    n=st.integers(4, 400),
    seed=st.integers(0, 1000),
)
def test_splits_partition(weights, n, seed):
    total = sum(weights)
    fractions = [w / total for w in weights]
    fractions[0] = 1.0 - sum(fractions[1:])
    spec = SplitSpec(tuple(fractions), seed)
    parts = split_indices(n, spec)
    allidx = np.concatenate(list(parts.values()))
    assert sorted(allidx.tolist()) == list(range(n))
    for split, f in zip(("finetune", "val", "test"), fractions[1:]):
        assert len(parts[split]) == math.floor(round(f * n, 9))


@settings(max_examples=40, deadline=None)
@given(
    class_sizes=st.lists(st.integers(4, 60), min_size=2, max_size=6),
    seed=st.integers(0, 1000),
)
def test_stratified_proportions(class_sizes, seed):
    labels = np.repeat(np.arange(len(class_sizes)), class_sizes)
    np.random.default_rng(seed).shuffle(labels)
    spec = SplitSpec(seed=seed, stratified=True)
    parts = split_indices(len(labels), spec, labels)
    assert sorted(np.concatenate(list(parts.values())).tolist()) == list(range(len(labels)))
    for split, f in spec.as_dict().items():
        for cls, size in enumerate(class_sizes):
            got = int(np.sum(labels[parts[split]] == cls))
            assert abs(got - f * size) <= 1


def test_manifest_roundtrip(tmp_path):
    m = build_splits(
        Manifest([ManifestEntry(f"img{i}.png", ["b", "a"][i % 2], "pretrain") for i in range(30)], ["b", "a"]),
        SplitSpec(seed=1),
    )
    m.mean, m.std = (0.1, 0.2, 0.3), (1.0, 1.0, 0.5)
    path = write_manifest(m, tmp_path / "m.csv")
    back = read_manifest(path)
    assert back.entries == m.entries and back.class_names == ["b", "a"]
    assert back.mean == m.mean and back.std == m.std
    write_manifest(back, tmp_path / "m2.csv")
    assert (tmp_path / "m.csv").read_bytes() == (tmp_path / "m2.csv").read_bytes()


def test_manifest_invariants():
    with pytest.raises(ConfigError):
        Manifest([ManifestEntry("x", "zebra", "pretrain")], ["a"])
    with pytest.raises(ConfigError):
        Manifest([ManifestEntry("x", "a", "holdout")], ["a"])


# --- images ----------------------------------------------------------------


def _png(path, size=(50, 40), color=(200, 30, 90)):
    Image.new("RGB", size, color).save(path)
    return path


def test_load_image_shapes(tmp_path):
    path = _png(tmp_path / "a.png")
    assert load_image(path, 224).shape == (3, 224, 224)
    assert load_image(path, 32).shape == (3, 32, 32)


def test_solid_color_constant_channels(tmp_path):
    path = _png(tmp_path / "a.png")
    x = load_image(path, 32, mean=(0.5, 0.5, 0.5), std=(0.25, 0.25, 0.25))
    for c, v in enumerate((200, 30, 90)):
        assert torch.allclose(x[c], torch.full((32, 32), (v / 255 - 0.5) / 0.25))


def test_undecodable_image(tmp_path):
    bad = tmp_path / "bad.png"
    bad.write_bytes(b"not an image")
    with pytest.raises(OSError, match="bad.png"):
        load_image(bad, 32)
    m = Manifest([ManifestEntry(str(bad), "a", "pretrain"), ManifestEntry(str(_png(tmp_path / "ok.png")), "a", "pretrain")], ["a"])
    assert len(load_split(m, "pretrain", 16, skip_undecodable=True)) == 1


# --- synthetic data ----------------------------------------------------------


def test_synth_generation_contract(tmp_path):
    m = synth_dataset(tmp_path / "d", 70, 7, image_size=32, seed=5)
    assert len(m) == 70 and len(m.class_names) == 7
    assert len(list((tmp_path / "d" / "images").glob("*.png"))) == 70
    assert read_manifest(tmp_path / "d" / "manifest.csv").entries == m.entries
    assert min(m.counts().values()) >= 1


def test_synth_profile_counts():
    counts = profile_counts(700, 7, (0.67, 0.11))
    expected = [0.67 * 700, 0.11 * 700] + [0.22 * 700 / 5] * 5
    assert sum(counts) == 700
    for c, e in zip(counts, expected):
        assert abs(c - e) <= 1


def test_synth_deterministic_bytes(tmp_path):
    synth_dataset(tmp_path / "a", 21, 7, 24, seed=9, profile=(0.5,))
    synth_dataset(tmp_path / "b", 21, 7, 24, seed=9, profile=(0.5,))

    def digest(d):
        return [hashlib.sha256(p.read_bytes()).hexdigest() for p in sorted((d / "images").glob("*.png"))]

    assert digest(tmp_path / "a") == digest(tmp_path / "b")
    assert (tmp_path / "a" / "manifest.csv").read_bytes() == (tmp_path / "b" / "manifest.csv").read_bytes()


def test_synth_classes_differ(tmp_path):
    m = synth_dataset(tmp_path / "d", 28, 7, 32, seed=0)
    arr = load_split(m, None, 32)
    means = np.stack([arr.images[arr.labels == c].reshape(-1, 3).mean(0) for c in range(7)])
    assert np.min(np.linalg.norm(means[:, None] - means[None], axis=-1) + np.eye(7) * 1e3) > 1.0


def test_channel_stats_and_dataset():
    imgs = np.zeros((2, 4, 4, 3), np.uint8)
    imgs[1] = 255
    arr = ImageArray(imgs, np.array([0, 1]))
    mean, std = channel_stats(arr)
    assert mean == (0.5, 0.5, 0.5) and std == (0.5, 0.5, 0.5)
    x, y = LabeledDataset(arr, mean, std)[1]
    assert torch.allclose(x, torch.ones(3, 4, 4)) and y == 1


# --- public dataset ingestion ------------------------------------------------


def test_cifar_binary_layout(tmp_path):
    rng = np.random.default_rng(0)
    labels = rng.integers(0, 10, 5).astype(np.uint8)
    planes = rng.integers(0, 256, (5, 3, 32, 32)).astype(np.uint8)
    records = np.concatenate([labels[:, None], planes.reshape(5, -1)], axis=1)
    assert records.shape[1] == CIFAR_RECORD
    records.tofile(tmp_path / "data_batch_1.bin")
    images, got = read_cifar_batch(tmp_path / "data_batch_1.bin")
    assert got.tolist() == labels.tolist()
    assert images.shape == (5, 32, 32, 3)
    assert images[2, 7, 9, 1] == planes[2, 1, 7, 9]
    assert len(load_cifar10(tmp_path)) == 5
    (tmp_path / "data_batch_1.bin").write_bytes(records.tobytes()[:-1])
    with pytest.raises(ValueError):
        read_cifar_batch(tmp_path / "data_batch_1.bin")


def test_ham_metadata_mapping(tmp_path):
    imgdir = tmp_path / "part1"
    imgdir.mkdir()
    rows = ["lesion_id,image_id,dx,dx_type,age,sex,localization"]
    for i, dx in enumerate(HAM10000_CLASSES):
        _png(imgdir / f"ISIC_{i:07d}.jpg")
        rows.append(f"HAM_{i},ISIC_{i:07d},{dx},histo,50,male,back")
    (tmp_path / "meta.csv").write_text("\n".join(rows) + "\n")
    m = ham10000_manifest(tmp_path / "meta.csv", [imgdir])
    assert m.class_names == HAM10000_CLASSES
    assert [e.label for e in m.entries] == HAM10000_CLASSES
    assert load_image(m.entries[0], 32).shape == (3, 32, 32)
