"""Binary checkpoint format for named parameter tensors.

Layout (little-endian throughout):

    magic "DVPT" | u32 version | u32 tensor count
    per tensor: u16 name length | UTF-8 name | u8 rank | u32 dims...
                | u8 dtype tag (0=float32, 1=float64)
    payload: scalars, contiguous row-major, in entry order
    trailer: u32 CRC32 of the payload

Entries are sorted by name, so save -> load -> save is byte-identical.
A fine-tuning checkpoint contains only the tensors its freeze policy
marks trainable; the full backbone is saved the same way under the
full_finetune policy.
"""

import os
import struct
import zlib

import numpy as np

from . import model as model_mod

MAGIC = b"DVPT"
VERSION = 1
_DTYPE_TAGS = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}
_TAG_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}


class CorruptCheckpointError(ValueError):
    """Magic, structure or CRC failure; nothing is partially loaded."""


class ArchitectureMismatchError(ValueError):
    """Checkpoint tensors do not line up with the target model."""


def save_checkpoint(path, tensors):
    """Write name -> array (or Tensor) entries atomically."""
    arrays = {}
    for name, value in tensors.items():
        arr = np.asarray(getattr(value, "data", value))
        if arr.ndim and not arr.flags["C_CONTIGUOUS"]:
            arr = np.ascontiguousarray(arr)
        if arr.dtype not in _DTYPE_TAGS:
            raise ValueError(f"{name}: unsupported dtype {arr.dtype}")
        arrays[name] = arr
    names = sorted(arrays)
    header = [MAGIC, struct.pack("<II", VERSION, len(names))]
    payload = []
    for name in names:
        arr = arrays[name]
        encoded = name.encode("utf-8")
        header.append(struct.pack("<H", len(encoded)))
        header.append(encoded)
        header.append(struct.pack("<B", arr.ndim))
        header.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        header.append(struct.pack("<B", _DTYPE_TAGS[arr.dtype]))
        payload.append(arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes())
    body = b"".join(payload)
    blob = b"".join(header) + body + struct.pack("<I", zlib.crc32(body))
    tmp = f"{path}.tmp.{os.getpid()}"
    with open(tmp, "wb") as fh:
        fh.write(blob)
    os.replace(tmp, path)


def load_checkpoint(path):
    """Read a checkpoint into an ordered name -> ndarray dict."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != MAGIC:
        raise CorruptCheckpointError(f"{path}: bad magic {blob[:4]!r}")
    try:
        version, count = struct.unpack_from("<II", blob, 4)
        if version != VERSION:
            raise CorruptCheckpointError(f"{path}: unsupported version {version}")
        offset = 12
        entries = []
        for _ in range(count):
            (name_len,) = struct.unpack_from("<H", blob, offset)
            offset += 2
            name = blob[offset:offset + name_len].decode("utf-8")
            offset += name_len
            (rank,) = struct.unpack_from("<B", blob, offset)
            offset += 1
            shape = struct.unpack_from(f"<{rank}I", blob, offset)
            offset += 4 * rank
            (tag,) = struct.unpack_from("<B", blob, offset)
            offset += 1
            if tag not in _TAG_DTYPES:
                raise CorruptCheckpointError(f"{path}: unknown dtype tag {tag}")
            entries.append((name, shape, _TAG_DTYPES[tag]))
        payload = blob[offset:-4]
        (crc,) = struct.unpack_from("<I", blob, len(blob) - 4)
    except struct.error as exc:
        raise CorruptCheckpointError(f"{path}: truncated header ({exc})") from exc
    if zlib.crc32(payload) != crc:
        raise CorruptCheckpointError(f"{path}: payload CRC mismatch")
    tensors = {}
    cursor = 0
    for name, shape, dtype in entries:
        n = int(np.prod(shape, dtype=np.int64)) if shape else 1
        nbytes = n * dtype.itemsize
        chunk = payload[cursor:cursor + nbytes]
        if len(chunk) != nbytes:
            raise CorruptCheckpointError(f"{path}: payload short for tensor {name!r}")
        cursor += nbytes
        tensors[name] = np.frombuffer(chunk, dtype=dtype).reshape(shape).copy()
    if cursor != len(payload):
        raise CorruptCheckpointError(f"{path}: {len(payload) - cursor} trailing payload bytes")
    return tensors


def load_backbone(model, tensors):
    """Load the shared backbone weights into a model.

    Every backbone parameter of the model must be present with the exact
    shape; head / prompt / adapter entries in the checkpoint are ignored
    (they are task-specific).
    """
    for name, param in model.params.items():
        if not model_mod.is_backbone_param(name):
            continue
        if name not in tensors:
            raise ArchitectureMismatchError(f"backbone tensor {name!r} missing from checkpoint")
        arr = tensors[name]
        if tuple(arr.shape) != tuple(param.shape):
            raise ArchitectureMismatchError(
                f"backbone tensor {name!r} shape {tuple(arr.shape)} != model {tuple(param.shape)}"
            )
        param.data = arr.astype(model.dtype, copy=True)


def load_task_params(model, tensors):
    """Load task-specific (trainable) tensors; names and shapes must match."""
    for name, arr in tensors.items():
        if name not in model.params:
            raise ArchitectureMismatchError(f"checkpoint tensor {name!r} unknown to model")
        param = model.params[name]
        if tuple(arr.shape) != tuple(param.shape):
            raise ArchitectureMismatchError(
                f"tensor {name!r} shape {tuple(arr.shape)} != model {tuple(param.shape)}"
            )
        param.data = arr.astype(model.dtype, copy=True)


def save_trainable(path, model):
    """Checkpoint exactly the tensors the active freeze policy left trainable."""
    save_checkpoint(path, {name: t for name, t in model.params.items() if t.requires_grad})
