"""Writers for the consumer's binary file formats.

Two little-endian containers: an embedding bank (magic ECOBANK1) holding a
class table plus labeled float32 vectors, and a tensor manifest (magic
ECOWMAN1) holding a JSON directory followed by a raw blob. Layouts are
reproduced here from the format definitions so this package stays free of any
dependency on the consuming library.
"""

from __future__ import annotations

import json
import struct

import numpy as np

BANK_MAGIC = b"ECOBANK1"
MANIFEST_MAGIC = b"ECOWMAN1"
FORMAT_VERSION = 1


def write_bank(
    names: list[str],
    token_ids: list[list[int]],
    labels: np.ndarray,
    vectors: np.ndarray,
) -> bytes:
    if len(names) != len(token_ids):
        raise ValueError("class names and token lists disagree in length")
    vectors = np.ascontiguousarray(vectors, dtype="<f4")
    out = bytearray()
    out += BANK_MAGIC
    out += struct.pack("<IIII", FORMAT_VERSION, len(names), vectors.shape[1], len(labels))
    for name, ids in zip(names, token_ids):
        nb = name.encode("utf-8")
        out += struct.pack("<H", len(nb)) + nb
        out += struct.pack("<H", len(ids))
        out += struct.pack(f"<{len(ids)}I", *ids)
    for label, vec in zip(labels, vectors):
        out += struct.pack("<I", int(label))
        out += vec.tobytes()
    return bytes(out)


def write_manifest(tensors: dict[str, np.ndarray], metadata: dict) -> bytes:
    directory = []
    blob = bytearray()
    for name, arr in tensors.items():
        code = "f8" if arr.dtype == np.float64 else "f4"
        raw = np.ascontiguousarray(arr, dtype="<" + code).tobytes()
        directory.append(
            {
                "name": name,
                "shape": list(arr.shape),
                "dtype": code,
                "offset": len(blob),
                "length": len(raw),
            }
        )
        blob += raw
    header = json.dumps(
        {"metadata": metadata, "tensors": directory}, sort_keys=True
    ).encode("utf-8")
    return MANIFEST_MAGIC + struct.pack("<II", FORMAT_VERSION, len(header)) + header + bytes(blob)
