import json

import numpy as np
import pytest
import torch

from core.dataset_io import (
    MANIFEST_NAME,
    DatasetWriter,
    FlowWindowDataset,
    VideoDataset,
    assign_splits,
    pad_objects,
    read_dataset,
    sample_to_tensors,
    write_dataset,
)
from core.errors import CapacityError, DatasetError, ManifestShapeError, TruncatedBlobError, VersionMismatchError
from core.physics import PARK_STATE
from core.scene import generate_sample


@pytest.fixture
def small_dataset(tmp_path, generator_params):
    samples = [generate_sample(i, generator_params) for i in range(3)]
    write_dataset(samples, tmp_path / "ds", generator_params)
    return tmp_path / "ds", samples


def test_round_trip_is_bit_exact(small_dataset):
    root, samples = small_dataset
    reader = read_dataset(root)
    assert reader.ids == [0, 1, 2]
    for original in samples:
        loaded = reader[original.index]
        assert loaded.num_objects == original.num_objects
        for name, arr in original.arrays().items():
            got = getattr(loaded, name)
            assert got.dtype == arr.dtype, name
            assert got.tobytes() == arr.tobytes(), name


def test_generator_params_round_trip(small_dataset, generator_params):
    root, _ = small_dataset
    assert read_dataset(root).generator_params() == generator_params


def test_manifest_is_little_endian(small_dataset):
    root, _ = small_dataset
    manifest = json.loads((root / MANIFEST_NAME).read_text())
    dtypes = {arr["dtype"] for rec in manifest["samples"] for arr in rec["arrays"].values()}
    assert all(d.startswith(("<", "|")) for d in dtypes)


def test_truncated_blob(small_dataset):
    root, _ = small_dataset
    reader = read_dataset(root)
    blob = root / reader.record(1).file
    blob.write_bytes(blob.read_bytes()[:-10])
    with pytest.raises(TruncatedBlobError):
        reader[1]
    assert reader[0].index == 0


def test_version_mismatch(small_dataset):
    root, _ = small_dataset
    path = root / MANIFEST_NAME
    manifest = json.loads(path.read_text())
    manifest["format_version"] = 99
    path.write_text(json.dumps(manifest))
    with pytest.raises(VersionMismatchError):
        read_dataset(root)


def test_manifest_byte_count_mismatch(small_dataset):
    root, _ = small_dataset
    path = root / MANIFEST_NAME
    manifest = json.loads(path.read_text())
    manifest["samples"][0]["arrays"]["states"]["nbytes"] += 8
    path.write_text(json.dumps(manifest))
    with pytest.raises(ManifestShapeError):
        read_dataset(root)


def test_missing_manifest(tmp_path):
    with pytest.raises(DatasetError):
        read_dataset(tmp_path)


def test_assign_splits_contiguous():
    splits = assign_splits(500)
    assert [len(splits[k]) for k in ("train", "val", "test")] == [450, 25, 25]
    assert splits["train"] + splits["val"] + splits["test"] == list(range(500))
    splits = assign_splits(20)
    assert [len(splits[k]) for k in ("train", "val", "test")] == [18, 1, 1]


def test_writer_context_manager(tmp_path, generator_params):
    with DatasetWriter(tmp_path / "ds", generator_params) as writer:
        writer.append(generate_sample(0, generator_params))
    reader = read_dataset(tmp_path / "ds")
    assert len(reader) == 1
    assert reader.split("all") == [0]
    with pytest.raises(DatasetError):
        reader.split("holdout")


def test_pad_objects():
    states = np.ones((4, 2, 6))
    boxes = np.full((2, 4), 0.5)
    padded, padded_boxes, active = pad_objects(states, boxes, 4)
    assert padded.shape == (4, 4, 6)
    assert active.tolist() == [True, True, False, False]
    np.testing.assert_array_equal(padded[:, 2:], np.broadcast_to(PARK_STATE, (4, 2, 6)))
    assert not padded_boxes[2:].any()
    with pytest.raises(CapacityError):
        pad_objects(states, boxes, 1)


def test_sample_to_tensors(generator_params):
    sample = generate_sample(2, generator_params)
    out = sample_to_tensors(sample, num_slots=4, start=0, length=5)
    assert out["frames"].shape == (5, 3, 32, 32)
    assert 0.0 <= float(out["frames"].min()) and float(out["frames"].max()) <= 1.0
    assert out["states"].dtype == torch.float64
    assert torch.equal(out["states"][:, : sample.num_objects], torch.from_numpy(sample.states[:5]))
    assert out["active"].sum() == sample.num_objects
    assert out["seg"].dtype == torch.int64


def test_window_boxes_come_from_window_start(generator_params):
    sample = generate_sample(2, generator_params)
    window = sample_to_tensors(sample, num_slots=4, start=4, length=3)
    assert window["frames"].shape[0] == 3
    k = sample.num_objects
    visible = window["box_mask"][:k]
    labels = set(np.unique(sample.seg[4]).tolist())
    assert visible.tolist() == [(i + 1) in labels for i in range(k)]


def test_torch_views(reader):
    videos = VideoDataset(reader, reader.split("train"), num_slots=4, num_frames=6)
    assert len(videos) == 4
    assert videos[0]["frames"].shape[0] == 6
    windows = FlowWindowDataset(reader, reader.split("train"), num_slots=4, window=3, stride=3)
    assert len(windows) == 4 * 3
    assert windows[1]["flow"].shape == (3, 32, 32, 2)
