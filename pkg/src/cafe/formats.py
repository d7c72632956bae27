"""Binary artifact formats: feature matrices and model checkpoints.

FeatureMatrix::

    b"FMX1" | u32 rows | u32 cols | u32 ids_bytes | ids (utf-8, newline-joined) | f32le rows*cols

Checkpoint::

    b"CAFE1" | u32 manifest_bytes | manifest (utf-8 JSON) | f32le tensors in manifest order

Offsets in the manifest count float32 elements from the start of the tensor block.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .trainer import Checkpoint, spec_from_config

FMX_MAGIC = b"FMX1"
CKPT_MAGIC = b"CAFE1"


class FormatError(ValueError):
    pass


@dataclass
class FeatureMatrix:
    ids: list[str]
    values: np.ndarray  # (rows, cols) float32

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float32)
        if self.values.ndim != 2 or self.values.shape[0] != len(self.ids):
            raise FormatError("values must be (len(ids), cols)")
        if not np.all(np.isfinite(self.values)):
            raise FormatError("feature matrix holds non-finite entries")
        if any("\n" in i for i in self.ids):
            raise FormatError("row ids may not contain newlines")

    def to_bytes(self) -> bytes:
        ids = "\n".join(self.ids).encode()
        rows, cols = self.values.shape
        head = FMX_MAGIC + struct.pack("<III", rows, cols, len(ids))
        return head + ids + self.values.astype("<f4").tobytes()

    @classmethod
    def from_bytes(cls, data: bytes) -> FeatureMatrix:
        if data[:4] != FMX_MAGIC:
            raise FormatError("not a feature matrix")
        rows, cols, n_ids = struct.unpack_from("<III", data, 4)
        start = 16
        ids = data[start : start + n_ids].decode().split("\n") if n_ids else []
        payload = data[start + n_ids :]
        if len(payload) != rows * cols * 4:
            raise FormatError(f"payload has {len(payload)} bytes, expected {rows * cols * 4}")
        if len(ids) != rows:
            raise FormatError("row id count does not match rows")
        return cls(ids, np.frombuffer(payload, dtype="<f4").reshape(rows, cols).copy())


def write_matrix(matrix: FeatureMatrix, path: str | Path) -> None:
    Path(path).write_bytes(matrix.to_bytes())


def read_matrix(path: str | Path) -> FeatureMatrix:
    return FeatureMatrix.from_bytes(Path(path).read_bytes())


def checkpoint_bytes(ckpt: Checkpoint) -> bytes:
    tensors, offset, blobs = [], 0, []
    for name in sorted(ckpt.params):
        arr = np.asarray(ckpt.params[name], dtype="<f4")
        tensors.append({"name": name, "shape": list(arr.shape), "offset": offset})
        offset += arr.size
        blobs.append(arr.tobytes())
    manifest = {"tensors": tensors, "config": ckpt.config, "label_order": ckpt.label_order}
    text = json.dumps(manifest, sort_keys=True).encode()
    return CKPT_MAGIC + struct.pack("<I", len(text)) + text + b"".join(blobs)


def write_checkpoint(ckpt: Checkpoint, path: str | Path) -> None:
    Path(path).write_bytes(checkpoint_bytes(ckpt))


def read_checkpoint(path: str | Path) -> Checkpoint:
    data = Path(path).read_bytes()
    if data[:5] != CKPT_MAGIC:
        raise FormatError("not a checkpoint")
    (n,) = struct.unpack_from("<I", data, 5)
    manifest = json.loads(data[9 : 9 + n].decode())
    block = np.frombuffer(data[9 + n :], dtype="<f4")
    params = {}
    for t in manifest["tensors"]:
        size = int(np.prod(t["shape"])) if t["shape"] else 1
        if t["offset"] + size > block.size:
            raise FormatError(f"tensor {t['name']} runs past the end of the file")
        params[t["name"]] = block[t["offset"] : t["offset"] + size].reshape(t["shape"]).copy()
    config = manifest["config"]
    return Checkpoint(params, spec_from_config(config), manifest["label_order"], config, [])
