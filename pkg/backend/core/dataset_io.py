"""
Dataset container: one ``manifest.json`` plus one raw blob per sample.

Blob layout: the arrays of ``SceneSample.ARRAY_NAMES`` back to back, little-endian,
C-order; offsets, shapes and dtypes live in the manifest. Also provides the torch
``Dataset`` views used for training and evaluation.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np
import torch
from torch.utils.data import Dataset

from core.errors import CapacityError, DatasetError, ManifestShapeError, TruncatedBlobError, VersionMismatchError
from core.physics import PARK_STATE
from core.scene import GeneratorParams, SceneSample, bboxes_from_segmentation
from core.utils import atomic_write_bytes, atomic_write_json, ensure_dir

logger = logging.getLogger(__name__)

FORMAT_VERSION = 1
MANIFEST_NAME = "manifest.json"
BLOB_DIR = "samples"
SPLIT_FRACTIONS = (0.90, 0.05, 0.05)


# ------------------------------
# Manifest records
# ------------------------------
@dataclass
class ArrayRecord:
    offset: int
    shape: List[int]
    dtype: str
    nbytes: int


@dataclass
class SampleRecord:
    id: int
    num_objects: int
    file: str
    arrays: Dict[str, ArrayRecord]


@dataclass
class DatasetManifest:
    format_version: int
    generator: Dict[str, Any]
    splits: Dict[str, List[int]]
    samples: List[SampleRecord] = field(default_factory=list)

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "DatasetManifest":
        samples = [
            SampleRecord(
                id=int(rec["id"]),
                num_objects=int(rec["num_objects"]),
                file=str(rec["file"]),
                arrays={name: ArrayRecord(**arr) for name, arr in rec["arrays"].items()},
            )
            for rec in data.get("samples", [])
        ]
        return cls(
            format_version=int(data["format_version"]),
            generator=dict(data.get("generator") or {}),
            splits={k: [int(i) for i in v] for k, v in (data.get("splits") or {}).items()},
            samples=samples,
        )


def assign_splits(num_samples: int, fractions: Sequence[float] = SPLIT_FRACTIONS) -> Dict[str, List[int]]:
    """Contiguous train/val/test split by sample index."""
    n_train = int(num_samples * fractions[0])
    n_val = int(num_samples * fractions[1])
    ids = list(range(num_samples))
    return {
        "train": ids[:n_train],
        "val": ids[n_train : n_train + n_val],
        "test": ids[n_train + n_val :],
    }


def _le_dtype(dtype: np.dtype) -> np.dtype:
    return np.dtype(dtype).newbyteorder("<")


# ------------------------------
# Writer
# ------------------------------
class DatasetWriter:
    """Appends samples one blob at a time; the manifest is written on ``close``."""

    def __init__(self, path: Union[str, Path], generator: Optional[GeneratorParams] = None) -> None:
        self.root = ensure_dir(path)
        ensure_dir(self.root / BLOB_DIR)
        self.generator = generator.to_dict() if generator is not None else {}
        self.records: List[SampleRecord] = []

    def append(self, sample: SceneSample) -> SampleRecord:
        arrays: Dict[str, ArrayRecord] = {}
        chunks: List[bytes] = []
        offset = 0
        for name, arr in sample.arrays().items():
            le = np.ascontiguousarray(arr, dtype=_le_dtype(arr.dtype))
            payload = le.tobytes(order="C")
            arrays[name] = ArrayRecord(offset=offset, shape=list(le.shape), dtype=le.dtype.str, nbytes=len(payload))
            chunks.append(payload)
            offset += len(payload)

        file_name = f"{BLOB_DIR}/sample_{sample.index:06d}.bin"
        atomic_write_bytes(self.root / file_name, b"".join(chunks))
        record = SampleRecord(id=sample.index, num_objects=sample.num_objects, file=file_name, arrays=arrays)
        self.records.append(record)
        if len(self.records) % 50 == 0:
            logger.info("Wrote %d samples to %s", len(self.records), self.root)
        return record

    def close(self, splits: Optional[Dict[str, List[int]]] = None) -> DatasetManifest:
        manifest = DatasetManifest(
            format_version=FORMAT_VERSION,
            generator=self.generator,
            splits=splits if splits is not None else assign_splits(len(self.records)),
            samples=sorted(self.records, key=lambda r: r.id),
        )
        atomic_write_json(self.root / MANIFEST_NAME, asdict(manifest))
        logger.info("Saved manifest: %s (%d samples)", self.root / MANIFEST_NAME, len(self.records))
        return manifest

    def __enter__(self) -> "DatasetWriter":
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        if exc_type is None:
            self.close()


def write_dataset(
    samples: Iterable[SceneSample],
    path: Union[str, Path],
    generator: Optional[GeneratorParams] = None,
    splits: Optional[Dict[str, List[int]]] = None,
) -> DatasetManifest:
    writer = DatasetWriter(path, generator)
    for sample in samples:
        writer.append(sample)
    return writer.close(splits)


# ------------------------------
# Reader
# ------------------------------
class DatasetReader:
    """Validated manifest plus lazy, read-only sample access."""

    def __init__(self, path: Union[str, Path]) -> None:
        self.root = Path(path).expanduser().resolve()
        manifest_path = self.root / MANIFEST_NAME
        if not manifest_path.is_file():
            raise DatasetError(f"missing manifest: {manifest_path}")
        with manifest_path.open("r", encoding="utf-8") as f:
            data = json.load(f)
        version = data.get("format_version")
        if version != FORMAT_VERSION:
            raise VersionMismatchError(
                "unsupported dataset format version", found=version, expected=FORMAT_VERSION
            )
        self.manifest = DatasetManifest.from_dict(data)
        self._by_id = {rec.id: rec for rec in self.manifest.samples}
        for rec in self.manifest.samples:
            self._check_record(rec)

    def _check_record(self, rec: SampleRecord) -> None:
        spans = []
        for name in SceneSample.ARRAY_NAMES:
            if name not in rec.arrays:
                raise ManifestShapeError(f"sample {rec.id} lacks array '{name}'")
            arr = rec.arrays[name]
            expected = int(np.prod(arr.shape, dtype=np.int64)) * np.dtype(arr.dtype).itemsize
            if expected != arr.nbytes:
                raise ManifestShapeError(
                    f"sample {rec.id} array '{name}' byte count disagrees with shape/dtype",
                    expected=expected,
                    recorded=arr.nbytes,
                )
            spans.append((arr.offset, arr.offset + arr.nbytes, name))
        spans.sort()
        for (_, end, a), (start, _, b) in zip(spans, spans[1:]):
            if start < end:
                raise ManifestShapeError(f"sample {rec.id} arrays '{a}' and '{b}' overlap")

        k = rec.num_objects
        t, h, w = rec.arrays["frames"].shape[:3]
        expected_shapes = {
            "frames": [t, h, w, 3],
            "flow": [t, h, w, 2],
            "seg": [t, h, w],
            "states": [t, k, 6],
            "bboxes": [k, 4],
        }
        gen = self.manifest.generator
        if gen:
            if [t, h, w] != [gen.get("num_frames", t), gen.get("height", h), gen.get("width", w)]:
                raise ManifestShapeError(f"sample {rec.id} geometry disagrees with generator params")
        for name, shape in expected_shapes.items():
            if list(rec.arrays[name].shape) != shape:
                raise ManifestShapeError(
                    f"sample {rec.id} array '{name}' has shape {rec.arrays[name].shape}, expected {shape}"
                )

    def __len__(self) -> int:
        return len(self.manifest.samples)

    @property
    def ids(self) -> List[int]:
        return [rec.id for rec in self.manifest.samples]

    def split(self, name: str) -> List[int]:
        if name == "all":
            return self.ids
        if name not in self.manifest.splits:
            raise DatasetError(f"unknown split '{name}'", available=sorted(self.manifest.splits))
        return list(self.manifest.splits[name])

    def generator_params(self) -> Optional[GeneratorParams]:
        from core.config import generator_from_dict

        return generator_from_dict(self.manifest.generator) if self.manifest.generator else None

    def record(self, sample_id: int) -> SampleRecord:
        rec = self._by_id.get(int(sample_id))
        if rec is None:
            raise KeyError(sample_id)
        return rec

    def __getitem__(self, sample_id: int) -> SceneSample:
        rec = self.record(sample_id)
        blob_path = self.root / rec.file
        data = blob_path.read_bytes()
        expected = max(a.offset + a.nbytes for a in rec.arrays.values())
        if len(data) < expected:
            raise TruncatedBlobError(
                f"blob for sample {rec.id} is truncated", file=str(blob_path), size=len(data), expected=expected
            )
        if len(data) > expected:
            raise ManifestShapeError(
                f"blob for sample {rec.id} is longer than the manifest describes", size=len(data), expected=expected
            )
        arrays = {}
        for name, arr in rec.arrays.items():
            dtype = np.dtype(arr.dtype)
            count = int(np.prod(arr.shape, dtype=np.int64))
            arrays[name] = np.frombuffer(data, dtype=dtype, count=count, offset=arr.offset).reshape(arr.shape).copy()
        return SceneSample(index=rec.id, num_objects=rec.num_objects, **arrays)


def read_dataset(path: Union[str, Path]) -> DatasetReader:
    return DatasetReader(path)


# ------------------------------
# Torch views
# ------------------------------
def pad_objects(
    states: np.ndarray, bboxes: np.ndarray, num_slots: int, park_state: Sequence[float] = PARK_STATE
) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Pad object-ordered arrays to ``num_slots``; surplus slots get the park state."""
    t_count, k, _ = states.shape
    if k > num_slots:
        raise CapacityError("more objects than slots", num_objects=k, num_slots=num_slots)
    padded_states = np.broadcast_to(np.asarray(park_state, dtype=np.float64), (t_count, num_slots, 6)).copy()
    padded_states[:, :k] = states
    padded_boxes = np.zeros((num_slots, 4), dtype=np.float64)
    padded_boxes[:k] = bboxes
    active = np.zeros(num_slots, dtype=bool)
    active[:k] = True
    return padded_states, padded_boxes, active


def sample_to_tensors(
    sample: SceneSample, num_slots: int, start: int = 0, length: Optional[int] = None
) -> Dict[str, torch.Tensor]:
    stop = sample.frames.shape[0] if length is None else start + length
    states, boxes, active = pad_objects(sample.states, sample.bboxes, num_slots)
    box_mask = active.copy()
    if start != 0:
        window_boxes, present = bboxes_from_segmentation(sample.seg[start], sample.num_objects)
        boxes[: sample.num_objects] = window_boxes
        box_mask[: sample.num_objects] = present
    return {
        "frames": torch.from_numpy(sample.frames[start:stop]).permute(0, 3, 1, 2).float() / 255.0,
        "flow": torch.from_numpy(sample.flow[start:stop]).float(),
        "seg": torch.from_numpy(sample.seg[start:stop].astype(np.int64)),
        "states": torch.from_numpy(states[start:stop]),
        "bboxes": torch.from_numpy(boxes).float(),
        "box_mask": torch.from_numpy(box_mask),
        "active": torch.from_numpy(active),
        "index": torch.tensor(sample.index),
    }


class VideoDataset(Dataset):
    """Whole videos (optionally the first ``num_frames``) for encoding and evaluation."""

    def __init__(self, reader: DatasetReader, ids: Sequence[int], num_slots: int, num_frames: Optional[int] = None):
        self.reader = reader
        self.ids = list(ids)
        self.num_slots = num_slots
        self.num_frames = num_frames

    def __len__(self) -> int:
        return len(self.ids)

    def __getitem__(self, i: int) -> Dict[str, torch.Tensor]:
        return sample_to_tensors(self.reader[self.ids[i]], self.num_slots, 0, self.num_frames)


class FlowWindowDataset(Dataset):
    """Fixed-length windows for backbone training; boxes come from the window's first frame."""

    def __init__(self, reader: DatasetReader, ids: Sequence[int], num_slots: int, window: int, stride: Optional[int] = None):
        self.reader = reader
        self.num_slots = num_slots
        self.window = window
        stride = stride or window
        self.items: List[Tuple[int, int]] = []
        for sample_id in ids:
            t_count = reader.record(sample_id).arrays["frames"].shape[0]
            self.items.extend((sample_id, s) for s in range(0, t_count - window + 1, stride))

    def __len__(self) -> int:
        return len(self.items)

    def __getitem__(self, i: int) -> Dict[str, torch.Tensor]:
        sample_id, start = self.items[i]
        return sample_to_tensors(self.reader[sample_id], self.num_slots, start, self.window)
