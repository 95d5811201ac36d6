"""Binary checkpoints: model parameters, optimiser moments and run metadata.

Layout (little-endian):

    magic "MLRV" | u32 version
    u64 length | UTF-8 JSON (model config, train config, step, extras)
    u64 tensor count
    per tensor: u64 name length | name | u8 flags (bit 0 = trainable)
                u8 dtype code | u8 ndim | u64 dims[ndim] | raw data
    u32 CRC32 of everything before it

Optimiser moments are stored as ordinary frozen tensors named
``optim.m/<param>`` and ``optim.v/<param>``.
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import BadMagicError, ChecksumError, InvalidDimsError, TruncatedError, VersionError
from .model import Model, ModelConfig, build_model
from .trainloop import AdamState

MAGIC = b"MLRV"
VERSION = 1
DTYPE_CODES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_CODE_OF = {v: k for k, v in DTYPE_CODES.items()}
MOMENT_PREFIXES = ("optim.m/", "optim.v/")
MAX_NDIM = 8


@dataclass
class Checkpoint:
    model_config: dict
    tensors: dict[str, np.ndarray]
    trainable: dict[str, bool]
    step: int = 0
    meta: dict = field(default_factory=dict)

    def params(self) -> dict[str, np.ndarray]:
        return {n: a for n, a in self.tensors.items() if not n.startswith(MOMENT_PREFIXES)}

    def adam_state(self) -> AdamState:
        state = AdamState(t=self.step)
        for name, arr in self.tensors.items():
            if name.startswith("optim.m/"):
                state.m[name[len("optim.m/"):]] = arr
            elif name.startswith("optim.v/"):
                state.v[name[len("optim.v/"):]] = arr
        return state


def encode(ckpt: Checkpoint) -> bytes:
    header = {"model_config": ckpt.model_config, "step": ckpt.step, "meta": ckpt.meta}
    blob = json.dumps(header, sort_keys=True).encode()
    parts = [MAGIC, struct.pack("<I", VERSION), struct.pack("<Q", len(blob)), blob,
             struct.pack("<Q", len(ckpt.tensors))]
    for name, arr in ckpt.tensors.items():
        arr = np.asarray(arr)
        dt = arr.dtype.newbyteorder("<")
        if dt not in _CODE_OF:
            raise InvalidDimsError(f"tensor {name}: unsupported dtype {arr.dtype}")
        raw = name.encode()
        flags = 1 if ckpt.trainable.get(name, False) else 0
        parts += [struct.pack("<Q", len(raw)), raw,
                  struct.pack("<BBB", flags, _CODE_OF[dt], arr.ndim),
                  struct.pack(f"<{arr.ndim}Q", *arr.shape),
                  np.ascontiguousarray(arr, dtype=dt).tobytes()]
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


class _Reader:
    def __init__(self, raw: bytes, path):
        self.raw, self.pos, self.path = raw, 0, path

    def take(self, n: int) -> bytes:
        if n < 0 or self.pos + n > len(self.raw):
            raise TruncatedError(f"{self.path}: truncated at byte {self.pos} (wanted {n} more)")
        out = self.raw[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        s = struct.Struct(fmt)
        return s.unpack(self.take(s.size))


def decode(raw: bytes, path="<bytes>") -> Checkpoint:
    if len(raw) < 4 or raw[:4] != MAGIC:
        raise BadMagicError(f"{path}: not a checkpoint (bad magic)")
    r = _Reader(raw, path)
    r.take(4)
    (version,) = r.unpack("<I")
    if version != VERSION:
        raise VersionError(f"{path}: unsupported checkpoint version {version}")
    # checksum is checked once the payload length is known, so truncation reports as such
    (blob_len,) = r.unpack("<Q")
    header = json.loads(r.take(blob_len).decode())
    (count,) = r.unpack("<Q")
    tensors, trainable = {}, {}
    for _ in range(count):
        (name_len,) = r.unpack("<Q")
        name = r.take(name_len).decode()
        flags, code, ndim = r.unpack("<BBB")
        if code not in DTYPE_CODES:
            raise InvalidDimsError(f"{path}: tensor {name} has unknown dtype code {code}")
        if ndim > MAX_NDIM:
            raise InvalidDimsError(f"{path}: tensor {name} has {ndim} dims")
        dims = r.unpack(f"<{ndim}Q")
        dt = DTYPE_CODES[code]
        n_bytes = int(np.prod(dims, dtype=object)) * dt.itemsize
        if n_bytes >= 2**63:
            raise InvalidDimsError(f"{path}: tensor {name} dims {dims} overflow")
        tensors[name] = np.frombuffer(r.take(n_bytes), dtype=dt).reshape(dims).astype(dt.newbyteorder("="))
        trainable[name] = bool(flags & 1)
    end = r.pos
    (crc,) = r.unpack("<I")
    if crc != zlib.crc32(raw[:end]):
        raise ChecksumError(f"{path}: checksum mismatch")
    return Checkpoint(header["model_config"], tensors, trainable, int(header["step"]), header.get("meta", {}))


def save_checkpoint(path, model: Model, optimizer: AdamState | None = None, meta: dict | None = None) -> None:
    tensors = {n: t.data for n, t in model.params.items()}
    trainable = dict(model.trainable)
    step = 0
    if optimizer is not None:
        step = optimizer.t
        for name in optimizer.m:
            tensors[f"optim.m/{name}"] = optimizer.m[name]
            tensors[f"optim.v/{name}"] = optimizer.v[name]
    ckpt = Checkpoint(model.cfg.to_dict(), tensors, trainable, step, meta or {})
    Path(path).write_bytes(encode(ckpt))


def read_checkpoint(path) -> Checkpoint:
    return decode(Path(path).read_bytes(), path)


def load_checkpoint(path) -> tuple[Model, AdamState]:
    """Rebuild the model (dtype as stored) and its optimiser state."""
    ckpt = read_checkpoint(path)
    cfg = ModelConfig.from_dict(ckpt.model_config)
    params = ckpt.params()
    dtype = params["temporal.w_q"].dtype if "temporal.w_q" in params else None
    model = build_model(cfg, dtype=dtype)
    missing = sorted(set(model.params) - set(params))
    if missing:
        raise InvalidDimsError(f"{path}: checkpoint lacks tensors {missing}")
    for name, t in model.params.items():
        if params[name].shape != t.shape:
            raise InvalidDimsError(f"{path}: tensor {name} has shape {params[name].shape}, expected {t.shape}")
        t.data = params[name].copy()
    return model, ckpt.adam_state()
