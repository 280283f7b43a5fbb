from __future__ import annotations

import gzip
import logging
import struct
from pathlib import Path

import numpy as np

from app.errors import BadMagic, CountMismatch, TruncatedFile
from app.services.datasets import LabeledDataset, SplitTag

logger = logging.getLogger(__name__)

IMAGE_MAGIC = 0x00000803
LABEL_MAGIC = 0x00000801
MNIST_CLASSES = 10


def _read_bytes(path: str | Path) -> bytes:
    file_path = Path(path)
    raw = file_path.read_bytes()
    if raw[:2] == b"\x1f\x8b":
        try:
            return gzip.decompress(raw)
        except (EOFError, gzip.BadGzipFile) as exc:
            raise TruncatedFile(f"{file_path} is a damaged gzip stream") from exc
    return raw


def _header(payload: bytes, words: int, path: str | Path) -> tuple[int, ...]:
    size = 4 * words
    if len(payload) < size:
        raise TruncatedFile(f"{path} ends inside its {size}-byte header")
    return struct.unpack(f">{words}I", payload[:size])


def read_idx_images(path: str | Path) -> np.ndarray:
    """uint8 image rows (count x rows*cols) from an IDX3 file."""
    payload = _read_bytes(path)
    (magic,) = _header(payload, 1, path)
    if magic != IMAGE_MAGIC:
        raise BadMagic(f"{path} has magic {magic:#010x}, expected {IMAGE_MAGIC:#010x} for images")
    _, count, rows, cols = _header(payload, 4, path)
    expected = 16 + count * rows * cols
    if len(payload) < expected:
        raise TruncatedFile(f"{path} holds {len(payload)} bytes, header promises {expected}")
    pixels = np.frombuffer(payload, dtype=np.uint8, count=count * rows * cols, offset=16)
    return pixels.reshape(count, rows * cols)


def read_idx_labels(path: str | Path) -> np.ndarray:
    payload = _read_bytes(path)
    (magic,) = _header(payload, 1, path)
    if magic != LABEL_MAGIC:
        raise BadMagic(f"{path} has magic {magic:#010x}, expected {LABEL_MAGIC:#010x} for labels")
    _, count = _header(payload, 2, path)
    if len(payload) < 8 + count:
        raise TruncatedFile(f"{path} holds {len(payload)} bytes, header promises {8 + count}")
    return np.frombuffer(payload, dtype=np.uint8, count=count, offset=8)


def load_idx(images_path: str | Path, labels_path: str | Path) -> LabeledDataset:
    """Pixels scaled to [0, 1]; every record starts in the training split."""
    images = read_idx_images(images_path)
    labels = read_idx_labels(labels_path).astype(np.int64)
    if images.shape[0] != labels.shape[0]:
        raise CountMismatch(f"{images.shape[0]} images but {labels.shape[0]} labels")
    num_classes = max(MNIST_CLASSES, int(labels.max()) + 1) if labels.size else MNIST_CLASSES
    logger.info("Loaded %d IDX records of width %d from %s", images.shape[0], images.shape[1], images_path)
    return LabeledDataset(
        features=images.astype(np.float64) / 255.0,
        true_labels=labels,
        train_labels=labels.copy(),
        split_tags=np.full(labels.shape[0], SplitTag.TRAIN.value),
        num_classes=num_classes,
    )
