"""Versioned binary checkpoints: a JSON meta header plus named f32 tensors."""

from __future__ import annotations

import json
import struct

import numpy as np

from .errors import DataError

MAGIC = b"XMCK"
VERSION = 1


def save_checkpoint(path, kind: str, meta: dict, arrays: dict[str, np.ndarray]):
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", VERSION))
        for blob in (kind.encode("utf-8"),
                     json.dumps(meta, sort_keys=True).encode("utf-8")):
            fh.write(struct.pack("<I", len(blob)))
            fh.write(blob)
        fh.write(struct.pack("<I", len(arrays)))
        for name in sorted(arrays):
            arr = np.ascontiguousarray(arrays[name], dtype=np.float32)
            encoded = name.encode("utf-8")
            fh.write(struct.pack("<I", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(arr.tobytes())


def load_checkpoint(path, expect_kind: str | None = None):
    with open(path, "rb") as fh:
        if fh.read(4) != MAGIC:
            raise DataError(f"{path}: not a checkpoint file")
        version = struct.unpack("<I", fh.read(4))[0]
        if version != VERSION:
            raise DataError(f"{path}: unsupported checkpoint version {version}")

        def read_blob():
            size = struct.unpack("<I", fh.read(4))[0]
            return fh.read(size)

        kind = read_blob().decode("utf-8")
        if expect_kind is not None and kind != expect_kind:
            raise DataError(f"{path}: checkpoint kind '{kind}', "
                            f"expected '{expect_kind}'")
        meta = json.loads(read_blob().decode("utf-8"))
        count = struct.unpack("<I", fh.read(4))[0]
        arrays: dict[str, np.ndarray] = {}
        for _ in range(count):
            name = read_blob().decode("utf-8")
            ndim = struct.unpack("<I", fh.read(4))[0]
            shape = struct.unpack(f"<{ndim}I", fh.read(4 * ndim))
            data = fh.read(4 * int(np.prod(shape)))
            arrays[name] = np.frombuffer(data, dtype="<f4").reshape(shape).copy()
        return kind, meta, arrays
