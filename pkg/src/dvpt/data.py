"""Synthetic datasets and the binary dataset file format.

Two disjoint pattern families stand in for pretraining and fine-tuning
data: family "a" encodes an ordinal 5-level grade as the number of bright
blobs in the image, family "b" encodes it as the spatial frequency of an
oriented grating.  Segmentation images are random blobs with exact masks.
All generation is fully determined by the seed.

Dataset file layout (all little-endian):

    magic "DVDS" | u32 version | u32 count | u32 H | u32 W | u32 C
    | u8 task tag (0=classification, 1=segmentation) | u32 num_classes
    images : count*H*W*C float32
    labels : count u16 (classification) or count*H*W u16 (mask grids)
"""

import os
import struct
from dataclasses import dataclass

import numpy as np

MAGIC = b"DVDS"
VERSION = 1
_TASK_TAGS = {"classification": 0, "segmentation": 1}
_TAG_TASKS = {v: k for k, v in _TASK_TAGS.items()}


class DatasetError(ValueError):
    """Raised on malformed dataset files or generation parameters."""


@dataclass
class Dataset:
    images: np.ndarray  # [count, H, W, C] float32
    labels: np.ndarray  # [count] or [count, H, W] uint16
    task: str
    num_classes: int

    def __len__(self):
        return len(self.images)


def _grid(h, w):
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    return ys, xs


def _blob_image(rng, h, w, n_blobs, sigma):
    ys, xs = _grid(h, w)
    canvas = np.zeros((h, w))
    for _ in range(n_blobs):
        cy = rng.uniform(2, h - 2)
        cx = rng.uniform(2, w - 2)
        canvas += np.exp(-(((ys - cy) ** 2 + (xs - cx) ** 2) / (2.0 * sigma ** 2)))
    return canvas


def _classification_image(rng, family, grade, h, w, noise):
    if family == "a":
        img = _blob_image(rng, h, w, n_blobs=grade + 1, sigma=1.4)
    else:
        theta = rng.uniform(0.0, np.pi)
        phase = rng.uniform(0.0, 2.0 * np.pi)
        ys, xs = _grid(h, w)
        freq = (grade + 1) / float(w)
        img = 0.8 * np.sin(2.0 * np.pi * freq * (xs * np.cos(theta) + ys * np.sin(theta)) + phase)
    return img + rng.normal(0.0, noise, size=(h, w))


def synth_generate(task, count, seed, difficulty=0.3, family="a",
                   h=16, w=16, channels=1, num_classes=5):
    """Generate a synthetic dataset, bitwise-reproducible from the seed."""
    if count <= 0:
        raise DatasetError(f"count must be positive, got {count}")
    if family not in ("a", "b"):
        raise DatasetError(f"family must be 'a' or 'b', got {family!r}")
    rng = np.random.default_rng(seed)
    images = np.empty((count, h, w, channels), dtype=np.float32)
    if task == "classification":
        labels = rng.integers(0, num_classes, size=count).astype(np.uint16)
        for i in range(count):
            img = _classification_image(rng, family, int(labels[i]), h, w, difficulty)
            images[i, :, :, 0] = img.astype(np.float32)
        return Dataset(images, labels, "classification", num_classes)
    if task != "segmentation":
        raise DatasetError(f"unknown task {task!r}")
    labels = np.empty((count, h, w), dtype=np.uint16)
    for i in range(count):
        n_blobs = int(rng.integers(1, 4))
        clean = _blob_image(rng, h, w, n_blobs, sigma=2.0 if family == "a" else 1.2)
        labels[i] = (clean > 0.5).astype(np.uint16)
        noisy = clean + rng.normal(0.0, difficulty, size=(h, w))
        images[i, :, :, 0] = noisy.astype(np.float32)
    return Dataset(images, labels, "segmentation", 2)


def _atomic_write(path, payload):
    tmp = f"{path}.tmp.{os.getpid()}"
    with open(tmp, "wb") as fh:
        fh.write(payload)
    os.replace(tmp, path)


def save_dataset(path, dataset):
    """Write a dataset file atomically (temp file, then rename)."""
    images = np.ascontiguousarray(dataset.images, dtype=np.float32)
    labels = np.ascontiguousarray(dataset.labels, dtype=np.uint16)
    count, h, w, c = images.shape
    if dataset.task == "classification":
        if labels.shape != (count,):
            raise DatasetError(f"classification labels must be [count], got {labels.shape}")
    else:
        if labels.shape != (count, h, w):
            raise DatasetError(f"segmentation masks must be [count, H, W], got {labels.shape}")
    if labels.size and labels.max() >= dataset.num_classes:
        raise DatasetError(
            f"label {labels.max()} outside [0, {dataset.num_classes})"
        )
    header = MAGIC + struct.pack(
        "<IIIIIBI", VERSION, count, h, w, c,
        _TASK_TAGS[dataset.task], dataset.num_classes,
    )
    payload = header + images.astype("<f4").tobytes() + labels.astype("<u2").tobytes()
    _atomic_write(path, payload)


def load_dataset(path):
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != MAGIC:
        raise DatasetError(f"{path}: bad magic {blob[:4]!r}")
    version, count, h, w, c, tag, num_classes = struct.unpack_from("<IIIIIBI", blob, 4)
    if version != VERSION:
        raise DatasetError(f"{path}: unsupported version {version}")
    if tag not in _TAG_TASKS:
        raise DatasetError(f"{path}: unknown task tag {tag}")
    task = _TAG_TASKS[tag]
    offset = 4 + struct.calcsize("<IIIIIBI")
    n_image = count * h * w * c
    images = np.frombuffer(blob, dtype="<f4", count=n_image, offset=offset)
    images = images.reshape(count, h, w, c).copy()
    offset += n_image * 4
    n_label = count if task == "classification" else count * h * w
    available = (len(blob) - offset) // 2
    if available != n_label:
        raise DatasetError(
            f"{path}: declared count {count} does not match payload "
            f"({available} labels present, {n_label} expected)"
        )
    labels = np.frombuffer(blob, dtype="<u2", count=n_label, offset=offset)
    labels = (labels.copy() if task == "classification"
              else labels.reshape(count, h, w).copy())
    if labels.size and labels.max() >= num_classes:
        raise DatasetError(f"{path}: label {labels.max()} outside [0, {num_classes})")
    return Dataset(images, labels, task, num_classes)
