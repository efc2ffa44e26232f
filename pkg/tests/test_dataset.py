import json

import pytest

from kspace_loupe.dataset import MANIFEST_NAME, DatasetError, build_dataset, load_manifest, load_split
from kspace_loupe.types import Split


def test_splits_and_counts(tiny_config, tiny_dataset):
    manifest = load_manifest(tiny_dataset, verify=True)
    assert len(manifest.split(Split.TRAIN)) == 2
    assert len(manifest.split(Split.VAL)) == 1
    assert len(manifest.split(Split.TEST)) == 2
    assert (manifest.height, manifest.width, manifest.n_coils) == (16, 16, 2)
    assert [e.index for e in manifest.entries] == list(range(5))


def test_generation_is_deterministic(tiny_config, tmp_path):
    first = build_dataset(tiny_config.data, 11, tmp_path / "a")
    build_dataset(tiny_config.data, 11, tmp_path / "b")
    for entry in first.entries:
        assert (tmp_path / "a" / entry.path).read_bytes() == (tmp_path / "b" / entry.path).read_bytes()


def test_seed_changes_the_data(tiny_config, tmp_path):
    build_dataset(tiny_config.data, 11, tmp_path / "a")
    build_dataset(tiny_config.data, 12, tmp_path / "b")
    rel = "train/sample_0000.ksd"
    assert (tmp_path / "a" / rel).read_bytes() != (tmp_path / "b" / rel).read_bytes()


def test_load_split_in_index_order(tiny_dataset):
    samples = load_split(load_manifest(tiny_dataset), Split.TEST)
    assert [sid for sid, _ in samples] == ["test/sample_0000", "test/sample_0001"]
    assert samples[0][1].kspace.shape == (2, 16, 16)


def test_missing_sample_file(tiny_dataset):
    (tiny_dataset.parent / "val" / "sample_0000.ksd").unlink()
    with pytest.raises(DatasetError, match="Missing"):
        load_manifest(tiny_dataset)


def test_duplicate_entries(tiny_dataset):
    data = json.loads(tiny_dataset.read_text())
    data["entries"].append(dict(data["entries"][0]))
    tiny_dataset.write_text(json.dumps(data))
    with pytest.raises(DatasetError, match="more than once"):
        load_manifest(tiny_dataset)


def test_wrong_format_tag(tiny_dataset):
    data = json.loads(tiny_dataset.read_text())
    data["format"] = "something-else"
    tiny_dataset.write_text(json.dumps(data))
    with pytest.raises(DatasetError):
        load_manifest(tiny_dataset)


def test_verify_catches_shape_mismatch(tiny_dataset):
    data = json.loads(tiny_dataset.read_text())
    data["n_coils"] = 3
    tiny_dataset.write_text(json.dumps(data))
    load_manifest(tiny_dataset)
    with pytest.raises(DatasetError, match="manifest says"):
        load_manifest(tiny_dataset, verify=True)


def test_manifest_name(tiny_dataset):
    assert tiny_dataset.name == MANIFEST_NAME
