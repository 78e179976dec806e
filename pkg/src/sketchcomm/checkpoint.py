"""Versioned binary checkpoint container.

Layout (little-endian): magic b"SKCM", u32 version, u32 JSON length, JSON
header (config snapshot, normalization stats, epoch, Adam step count, RNG
stream positions, tensor manifest), u32 tensor count, then for each tensor a
length-prefixed UTF-8 name, u32 ndim, u32 dims, and raw float32 data.
"""

from __future__ import annotations

import json
import struct

import numpy as np

MAGIC = b"SKCM"
VERSION = 1


def rng_state_to_json(gen):
    state = gen.bit_generator.state

    def conv(v):
        if isinstance(v, np.ndarray):
            return {"__ndarray__": v.tolist(), "dtype": str(v.dtype)}
        if isinstance(v, dict):
            return {k: conv(x) for k, x in v.items()}
        if isinstance(v, (np.integer,)):
            return int(v)
        return v

    return conv(state)


def rng_state_from_json(d):
    def conv(v):
        if isinstance(v, dict) and "__ndarray__" in v:
            return np.asarray(v["__ndarray__"], dtype=v["dtype"])
        if isinstance(v, dict):
            return {k: conv(x) for k, x in v.items()}
        return v

    return conv(d)


def write_checkpoint(path, header, tensors):
    """``header``: JSON-serializable dict; ``tensors``: ordered name->array."""
    header = dict(header)
    header["tensor_names"] = list(tensors)
    blob = json.dumps(header).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", VERSION))
        f.write(struct.pack("<I", len(blob)))
        f.write(blob)
        f.write(struct.pack("<I", len(tensors)))
        for name, arr in tensors.items():
            # note: ascontiguousarray would promote 0-d arrays to 1-d
            arr = np.asarray(arr, dtype="<f4", order="C")
            nb = name.encode("utf-8")
            f.write(struct.pack("<I", len(nb)))
            f.write(nb)
            f.write(struct.pack("<I", arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            f.write(arr.tobytes())


def read_checkpoint(path):
    with open(path, "rb") as f:
        if f.read(4) != MAGIC:
            raise ValueError(f"{path}: not a checkpoint (bad magic)")
        version, = struct.unpack("<I", f.read(4))
        if version != VERSION:
            raise ValueError(f"{path}: unsupported version {version}")
        jlen, = struct.unpack("<I", f.read(4))
        header = json.loads(f.read(jlen).decode("utf-8"))
        count, = struct.unpack("<I", f.read(4))
        tensors = {}
        for _ in range(count):
            nlen, = struct.unpack("<I", f.read(4))
            name = f.read(nlen).decode("utf-8")
            ndim, = struct.unpack("<I", f.read(4))
            shape = struct.unpack(f"<{ndim}I", f.read(4 * ndim))
            n = int(np.prod(shape)) if ndim else 1
            data = np.frombuffer(f.read(4 * n), dtype="<f4").reshape(shape)
            tensors[name] = data.copy()
    if header.get("tensor_names") != list(tensors):
        raise ValueError(f"{path}: tensor manifest mismatch")
    return header, tensors
