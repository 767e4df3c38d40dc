"""CIFAR-10 style binary classification records.

Each record is one label byte followed by 3072 pixel bytes: the 1024 red
values, then green, then blue, each a row-major 32x32 plane.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

IMAGE_SIDE = 32
PIXEL_BYTES = 3 * IMAGE_SIDE * IMAGE_SIDE
RECORD_BYTES = 1 + PIXEL_BYTES
FORMATS = ("cifar_binary",)


class RecordFormatError(ValueError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


@dataclass
class ClassificationDataset:
    labels: np.ndarray  # (N,) uint8
    pixels: np.ndarray  # (N, 3, 32, 32) uint8, channel planes as stored

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def targets(self) -> np.ndarray:
        return self.labels.astype(np.int64)

    def inputs(self, index=None) -> np.ndarray:
        """Float32 NCHW in [0, 1]."""
        px = self.pixels if index is None else self.pixels[index]
        return px.astype(np.float32) / np.float32(255)

    def subset(self, index) -> "ClassificationDataset":
        return ClassificationDataset(self.labels[index], self.pixels[index])


def parse_records(buf: bytes, num_classes: int = 10) -> ClassificationDataset:
    if len(buf) % RECORD_BYTES:
        whole = len(buf) // RECORD_BYTES
        raise RecordFormatError(
            f"file length {len(buf)} is not a multiple of the {RECORD_BYTES}-byte record size; "
            f"last record is incomplete",
            whole * RECORD_BYTES,
        )
    arr = np.frombuffer(buf, np.uint8).reshape(-1, RECORD_BYTES)
    labels = arr[:, 0].copy()
    bad = np.flatnonzero(labels >= num_classes)
    if bad.size:
        raise RecordFormatError(
            f"label {labels[bad[0]]} outside 0..{num_classes - 1}", int(bad[0]) * RECORD_BYTES
        )
    pixels = arr[:, 1:].reshape(-1, 3, IMAGE_SIDE, IMAGE_SIDE).copy()
    return ClassificationDataset(labels, pixels)


def records_bytes(ds: ClassificationDataset) -> bytes:
    n = len(ds)
    out = np.empty((n, RECORD_BYTES), np.uint8)
    out[:, 0] = ds.labels
    out[:, 1:] = ds.pixels.reshape(n, PIXEL_BYTES)
    return out.tobytes()


def ingest_classification(path, format: str = "cifar_binary") -> ClassificationDataset:
    if format not in FORMATS:
        raise ValueError(f"unsupported record format {format!r}; expected one of {FORMATS}")
    return parse_records(Path(path).read_bytes())


def write_records(ds: ClassificationDataset, path) -> None:
    Path(path).write_bytes(records_bytes(ds))
