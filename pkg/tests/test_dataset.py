"""Paired dataset builder, manifest format and train/test split."""

import hashlib
from dataclasses import replace

import pytest
from hypothesis import given, settings, strategies as st

from lidar2photo.dataset import (DatasetError, DatasetManifest, build_dataset, load_pair, load_split,
                                 read_manifest, split, write_manifest)
from lidar2photo.lidar_model import SensorConfig
from lidar2photo.projection import ChannelMode
from lidar2photo.scene import SceneParams


def tree_hash(root):
    h = hashlib.sha256()
    for p in sorted(root.rglob("*")):
        if p.is_file():
            h.update(str(p.relative_to(root)).encode())
            h.update(p.read_bytes())
    return h.hexdigest()


def fake_manifest(n):
    from lidar2photo.dataset import PairedSample
    entries = tuple(PairedSample(f"{i:06d}", i, "a", "b", "c") for i in range(n))
    return DatasetManifest(ChannelMode.REFLECTANCE, 64, 64, SensorConfig(), 4, 0, SceneParams(), entries)


def test_build_is_deterministic(tmp_path):
    a = build_dataset(4, 11, tmp_path / "a", size=(32, 32))
    b = build_dataset(4, 11, tmp_path / "b", size=(32, 32))
    assert tree_hash(tmp_path / "a") == tree_hash(tmp_path / "b")
    assert [e.seed for e in a.entries] == [11, 12, 13, 14]
    c = build_dataset(4, 12, tmp_path / "c", size=(32, 32))
    assert tree_hash(tmp_path / "c") != tree_hash(tmp_path / "a")
    assert b.entries == a.entries


def test_count_two_and_minimum(tmp_path):
    m = build_dataset(2, 0, tmp_path / "d", mode="exp1", size=(16, 16))
    assert len(m.entries) == 2
    x, y, meta = load_pair(m, m.entries[0])
    assert x.channels == 1 and y.channels == 3 and (meta.width, meta.height) == (16, 16)
    with pytest.raises(DatasetError, match="at least 2"):
        build_dataset(1, 0, tmp_path / "e")


def test_manifest_round_trip(tmp_path):
    m = split(build_dataset(5, 3, tmp_path, size=(32, 32)), 0.4, seed=1)
    write_manifest(m)
    back = read_manifest(tmp_path)
    assert back == m
    assert read_manifest(tmp_path / "manifest.txt") == m


def test_split_counts():
    m = split(fake_manifest(10), 0.2, seed=0)
    assert len(m.select("train")) == 8 and len(m.select("test")) == 2
    assert split(fake_manifest(10), 0.2, seed=0) == m


@settings(max_examples=100, deadline=None)
@given(st.integers(2, 300), st.floats(0.05, 0.95), st.integers(0, 2**32))
def test_split_partitions_scenes(n, frac, seed):
    n_test = round(n * frac)
    if n_test in (0, n):
        with pytest.raises(DatasetError, match="empty"):
            split(fake_manifest(n), frac, seed)
        return
    m = split(fake_manifest(n), frac, seed)
    train, test = m.select("train"), m.select("test")
    assert len(test) == n_test and len(train) + len(test) == n
    assert not {e.seed for e in train} & {e.seed for e in test}
    assert {e.id for e in train} | {e.id for e in test} == {e.id for e in m.entries}


def test_shared_seed_across_splits_rejected():
    m = fake_manifest(3)
    entries = (replace(m.entries[0], split="train"), replace(m.entries[1], seed=0, split="test"))
    with pytest.raises(DatasetError, match="share"):
        replace(m, entries=entries)


def test_missing_and_truncated_files(tmp_path):
    m = build_dataset(2, 0, tmp_path, size=(16, 16))
    (tmp_path / m.entries[0].target_path).unlink()
    with pytest.raises(DatasetError, match="missing file"):
        load_pair(m, m.entries[0])
    raw = (tmp_path / m.entries[1].input_path).read_bytes()
    (tmp_path / m.entries[1].input_path).write_bytes(raw[:40])
    with pytest.raises(DatasetError, match=m.entries[1].id):
        load_pair(m, m.entries[1])


def test_missing_manifest(tmp_path):
    with pytest.raises(DatasetError, match="cannot read manifest"):
        read_manifest(tmp_path)
    (tmp_path / "manifest.txt").write_text("version=1\nmode=reflectance\n")
    with pytest.raises(DatasetError, match="malformed"):
        read_manifest(tmp_path)


def test_load_split(tmp_path):
    m = split(build_dataset(4, 0, tmp_path, size=(32, 32)), 0.25, seed=2)
    test = load_split(m, "test")
    assert len(test) == 1
    pid, x, y, meta = test[0]
    assert pid == m.select("test")[0].id and x.channels == 2


def test_two_hundred_pairs(tmp_path):
    m = build_dataset(200, 1000, tmp_path, size=(64, 64))
    assert len(m.entries) == 200
    assert len(list((tmp_path / "pairs").iterdir())) == 600
