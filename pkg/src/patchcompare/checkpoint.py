"""Checkpoint container: a text header followed by length-prefixed float32 blobs.

Layout::

    PATCHCOMPARE-CHECKPOINT\\n
    key=value\\n ...            (version, kind, mode, patch_size, seed, dtype, arch.*, norm.*, meta.*, blobs)
    end\\n
    blob*                       name_len:u32 name:utf8 ndim:u32 dims:u32*ndim count:u64 values:f32*count

All integers and floats are little-endian. Parameters are stored as float32
whatever the model's compute dtype; the header's ``dtype`` restores the
compute dtype on load.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

from .dataset import Normalization
from .models import MatchingMode, ModelKind, PatchModel, build_model

MAGIC = b"PATCHCOMPARE-CHECKPOINT\n"
FORMAT_VERSION = 1


class CheckpointError(Exception):
    pass


class VersionMismatchError(CheckpointError):
    pass


class TruncatedCheckpointError(CheckpointError):
    pass


class BlobMismatchError(CheckpointError):
    pass


@dataclass
class Checkpoint:
    version: int
    kind: ModelKind
    mode: MatchingMode
    patch_size: int
    seed: int
    archs: dict
    dtype: str
    normalization: Normalization | None
    params: dict  # name -> float32 array
    meta: dict = field(default_factory=dict)

    def to_model(self) -> PatchModel:
        model = build_model(self.kind, seed=self.seed, mode=self.mode, patch_size=self.patch_size,
                            archs=self.archs, dtype=np.dtype(self.dtype))
        expected = model.state_dict()
        if set(expected) != set(self.params):
            missing = sorted(set(expected) - set(self.params))
            extra = sorted(set(self.params) - set(expected))
            raise BlobMismatchError(f"parameter names differ (missing {missing}, unexpected {extra})")
        for name, value in self.params.items():
            if value.shape != expected[name].shape:
                raise BlobMismatchError(
                    f"{name}: stored shape {value.shape} but architecture needs {expected[name].shape}")
        model.load_state_dict(self.params)
        model.normalization = self.normalization
        return model


def save_checkpoint(path, model: PatchModel, meta=None):
    state = model.state_dict()
    header = {
        "version": FORMAT_VERSION,
        "kind": model.kind.value,
        "mode": model.mode.value,
        "patch_size": model.patch_size,
        "seed": model.seed,
        "dtype": np.dtype(model.dtype).name,
    }
    for role in sorted(model.archs):
        header[f"arch.{role}"] = model.archs[role]
    norm = model.normalization
    if norm is not None:
        header["norm.mean"] = repr(float(norm.mean))
        header["norm.std"] = repr(float(norm.std))
        header["norm.source"] = norm.source
    for k, v in (meta or {}).items():
        header[f"meta.{k}"] = v if isinstance(v, str) else json.dumps(v, sort_keys=True)
    header["blobs"] = len(state)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        for k, v in header.items():
            text = str(v)
            if "\n" in text:
                raise CheckpointError(f"header value for {k} contains a newline")
            fh.write(f"{k}={text}\n".encode("utf-8"))
        fh.write(b"end\n")
        for name, value in state.items():
            arr = np.ascontiguousarray(value, dtype="<f4")
            raw = name.encode("utf-8")
            fh.write(struct.pack("<I", len(raw)) + raw)
            fh.write(struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(struct.pack("<Q", arr.size))
            fh.write(arr.tobytes())


class _Reader:
    def __init__(self, data):
        self.data, self.pos = data, 0

    def take(self, n, what):
        if self.pos + n > len(self.data):
            raise TruncatedCheckpointError(f"file ends inside {what}")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt, what):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as fh:
        data = fh.read()
    if not data.startswith(MAGIC):
        raise CheckpointError(f"{path}: not a patchcompare checkpoint")
    r = _Reader(data)
    r.pos = len(MAGIC)
    header = {}
    while True:
        end = data.find(b"\n", r.pos)
        if end < 0:
            raise TruncatedCheckpointError("file ends inside the header")
        line = data[r.pos:end].decode("utf-8")
        r.pos = end + 1
        if line == "end":
            break
        key, sep, value = line.partition("=")
        if not sep:
            raise CheckpointError(f"malformed header line {line!r}")
        header[key] = value
    version = int(header.get("version", -1))
    if version != FORMAT_VERSION:
        raise VersionMismatchError(
            f"checkpoint format version {version} is not supported (expected {FORMAT_VERSION})")
    params = {}
    for i in range(int(header["blobs"])):
        (n,) = r.unpack("<I", f"blob {i} name length")
        name = r.take(n, f"blob {i} name").decode("utf-8")
        (ndim,) = r.unpack("<I", f"{name} rank")
        dims = r.unpack(f"<{ndim}I", f"{name} shape")
        (count,) = r.unpack("<Q", f"{name} size")
        if count != int(np.prod(dims, dtype=np.int64)):
            raise BlobMismatchError(f"{name}: {count} values for declared shape {dims}")
        params[name] = np.frombuffer(r.take(4 * count, f"{name} values"), dtype="<f4") \
            .astype(np.float32).reshape(dims)
    if r.pos != len(data):
        raise CheckpointError(f"{len(data) - r.pos} unexpected trailing bytes")
    archs = {k[5:]: v for k, v in header.items() if k.startswith("arch.")}
    norm = None
    if "norm.mean" in header:
        norm = Normalization(float(header["norm.mean"]), float(header["norm.std"]),
                             header.get("norm.source", ""))
    meta = {}
    for k, v in header.items():
        if k.startswith("meta."):
            try:
                meta[k[5:]] = json.loads(v)
            except json.JSONDecodeError:
                meta[k[5:]] = v
    return Checkpoint(version, ModelKind(header["kind"]), MatchingMode(header["mode"]),
                      int(header["patch_size"]), int(header["seed"]), archs,
                      header.get("dtype", "float32"), norm, params, meta)


def load_model(path) -> PatchModel:
    return load_checkpoint(path).to_model()
