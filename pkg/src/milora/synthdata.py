"""Synthetic episodes whose labels need temporal and spatial evidence together.

Frames are T x (H*W) Gaussian noise viewed as H x W images. Marker
layout on the image:

* row 0, the key row: a +-m Hadamard code on the first frame of a pair
* row 1, the echo row: the same code on the successor frame
* row 2, the flag row: +m on the successor frame
* a fixed 2x2 patch of +m near the bottom centre

A frame carries the temporal marker when its successor echoes its key
and the spatial marker when it carries the patch. Frames are labelled
salient iff they carry both. Distractors carry one: a keyed pair with an
echo but no patch, or a keyed frame with the patch and no echo. Every
first frame carries a key, so no single frame tells the three roles
apart; the successor has to be read as well.

Spatial distractors get no flagged successor on purpose. With a flagged
but mismatched echo, an episode-level correlation between the flag and
the patch pushes the importance head away from the flag early in
training and the temporal path never forms.

Marker cells are overwritten, not added to, so the markers are exactly
recoverable from the frames.
"""

from __future__ import annotations

import dataclasses
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (
    BadMagicError,
    ChecksumError,
    ConfigError,
    InvalidDimsError,
    TruncatedError,
    VersionError,
)

KEY_ROW, ECHO_ROW, FLAG_ROW = 0, 1, 2
TOKEN_OFFSET = 2  # 0 = pad, 1 = eos


@dataclass
class GeneratorConfig:
    T: int = 32
    height: int = 8
    width: int = 8
    magnitude: float = 3.0
    noise_std: float = 1.0
    salient: tuple[int, int] = (1, 3)
    temporal_distractors: tuple[int, int] = (2, 3)
    spatial_distractors: tuple[int, int] = (2, 4)
    summary_len: int = 8

    def __post_init__(self):
        self.salient = tuple(self.salient)
        self.temporal_distractors = tuple(self.temporal_distractors)
        self.spatial_distractors = tuple(self.spatial_distractors)
        self.validate()

    @property
    def d(self) -> int:
        return self.height * self.width

    @property
    def patch_origin(self) -> tuple[int, int]:
        return self.height - 3, self.width // 2 - 1

    @property
    def patch_cells(self) -> np.ndarray:
        r, c = self.patch_origin
        return np.array([(r + i) * self.width + c + j for i in range(2) for j in range(2)])

    def row_cells(self, row: int) -> np.ndarray:
        return np.arange(row * self.width, (row + 1) * self.width)

    def validate(self) -> None:
        bad = []
        for name in ("salient", "temporal_distractors", "spatial_distractors"):
            lo, hi = getattr(self, name)
            if not 0 <= lo <= hi:
                bad.append(f"{name} range {lo}..{hi} is invalid")
        if self.salient[0] < 1:
            bad.append("every episode needs at least one salient frame")
        if self.temporal_distractors[0] < 1 or self.spatial_distractors[0] < 1:
            bad.append("every episode needs at least one distractor of each kind")
        if self.width < 4 or self.width & (self.width - 1):
            bad.append("width must be a power of two >= 4 (Hadamard key codes)")
        if self.height < 6:
            bad.append("height must be >= 6 to separate key rows from the patch")
        max_pairs = self.salient[1] + self.temporal_distractors[1] + self.spatial_distractors[1]
        if 2 * max_pairs > self.T:
            bad.append(f"T = {self.T} is too small for {max_pairs} two-frame markers")
        if max_pairs > 2 * self.width:
            bad.append("not enough distinct key codes for the marker counts")
        if self.salient[1] > self.summary_len - 1:
            bad.append("summary_len must leave room for eos after the longest summary")
        if self.magnitude <= 0 or self.noise_std <= 0:
            bad.append("magnitude and noise_std must be positive")
        if bad:
            raise ConfigError("invalid generator config: " + "; ".join(bad))

    @classmethod
    def from_dict(cls, data: dict) -> "GeneratorConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigError(f"unknown generator config keys: {unknown}")
        return cls(**data)

    def to_dict(self) -> dict:
        out = dataclasses.asdict(self)
        for k, v in out.items():
            if isinstance(v, tuple):
                out[k] = list(v)
        return out


@dataclass
class Episode:
    frames: np.ndarray  # T x d, float64
    importance: np.ndarray  # T, {0, 1}
    summary: list[int]
    seed: int = 0
    marker_starts: dict[str, list[int]] = field(default_factory=dict)

    def summary_targets(self, length: int) -> np.ndarray:
        """Summary tokens followed by eos and pad, cut to ``length``."""
        out = np.zeros(length, dtype=np.int64)
        tokens = list(self.summary)[: length - 1] + [1]
        out[: len(tokens)] = tokens
        return out


def hadamard_codes(n: int) -> np.ndarray:
    """2n distinct +-1 rows: a Sylvester Hadamard matrix and its negation."""
    h = np.ones((1, 1))
    while h.shape[0] < n:
        h = np.block([[h, h], [h, -h]])
    return np.concatenate([h, -h])


def _place_pairs(rng: np.random.Generator, T: int, count: int) -> list[int]:
    starts: list[int] = []
    while len(starts) < count:
        s = int(rng.integers(0, T - 1))
        if all(abs(s - other) >= 2 for other in starts):
            starts.append(s)
    return starts


def generate_episode(cfg: GeneratorConfig, seed: int, magnitude: float | None = None) -> Episode:
    rng = np.random.default_rng(seed)
    m = cfg.magnitude if magnitude is None else magnitude
    frames = rng.normal(0.0, cfg.noise_std, size=(cfg.T, cfg.d))

    n_sal = int(rng.integers(cfg.salient[0], cfg.salient[1] + 1))
    n_tmp = int(rng.integers(cfg.temporal_distractors[0], cfg.temporal_distractors[1] + 1))
    n_spa = int(rng.integers(cfg.spatial_distractors[0], cfg.spatial_distractors[1] + 1))
    roles = ["salient"] * n_sal + ["temporal"] * n_tmp + ["spatial"] * n_spa
    rng.shuffle(roles)
    starts = _place_pairs(rng, cfg.T, len(roles))

    codes = hadamard_codes(cfg.width)
    code_ids = rng.permutation(len(codes))

    key, echo, flag = cfg.row_cells(KEY_ROW), cfg.row_cells(ECHO_ROW), cfg.row_cells(FLAG_ROW)
    importance = np.zeros(cfg.T, dtype=np.int8)
    marker_starts: dict[str, list[int]] = {"salient": [], "temporal": [], "spatial": []}
    for role, s, cid in zip(roles, starts, code_ids):
        code = codes[cid] * m
        frames[s, key] = code
        if role != "spatial":
            frames[s + 1, echo] = code
            frames[s + 1, flag] = m
        if role != "temporal":
            frames[s, cfg.patch_cells] = m
        if role == "salient":
            importance[s] = 1
        marker_starts[role].append(s)

    summary = sorted(int(t) + TOKEN_OFFSET for t in np.flatnonzero(importance))
    for v in marker_starts.values():
        v.sort()
    return Episode(frames, importance, summary, seed, marker_starts)


def generate_split(cfg: GeneratorConfig, n: int, seed: int) -> list[Episode]:
    """``n`` episodes with seeds seed, seed+1, ..."""
    return [generate_episode(cfg, seed + i) for i in range(n)]


def generate_mixture(cfg: GeneratorConfig, n: int, seed: int,
                     magnitudes: tuple[float, float] = (2.0, 4.0)) -> list[Episode]:
    """Broader distribution for warm-start training: marker strength varies per episode."""
    rng = np.random.default_rng([seed, 7])
    return [generate_episode(cfg, seed + i, magnitude=float(rng.uniform(*magnitudes)))
            for i in range(n)]


def random_episode(T: int, d: int, summary_len: int, seed: int) -> Episode:
    """Unstructured episode (noise frames, random labels) for tiny configs."""
    rng = np.random.default_rng(seed)
    frames = rng.normal(size=(T, d))
    importance = (rng.random(T) < 0.5).astype(np.int8)
    importance[rng.integers(T)] = 1
    summary = sorted(int(t) + TOKEN_OFFSET for t in np.flatnonzero(importance))[: summary_len - 1]
    return Episode(frames, importance, summary, seed)


# feature files ---------------------------------------------------------------

FEATURE_MAGIC = b"MLFT"
FEATURE_VERSION = 1
_HEADER = struct.Struct("<4sIQQB")
_DTYPE_CODES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}


def write_features(path, frames: np.ndarray, dtype_code: int = 0) -> None:
    """Write a T x d feature matrix: header, row-major payload, CRC32 trailer."""
    frames = np.asarray(frames)
    if frames.ndim != 2 or 0 in frames.shape:
        raise InvalidDimsError(f"feature matrix must be non-empty T x d, got {frames.shape}")
    dt = _DTYPE_CODES[dtype_code]
    body = _HEADER.pack(FEATURE_MAGIC, FEATURE_VERSION, frames.shape[0], frames.shape[1], dtype_code)
    body += np.ascontiguousarray(frames, dtype=dt).tobytes()
    Path(path).write_bytes(body + struct.pack("<I", zlib.crc32(body)))


def read_features(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < 4 or raw[:4] != FEATURE_MAGIC:
        raise BadMagicError(f"{path}: not a feature file (bad magic)")
    if len(raw) < _HEADER.size:
        raise TruncatedError(f"{path}: header truncated")
    _, version, T, d, dtype_code = _HEADER.unpack_from(raw)
    if version != FEATURE_VERSION:
        raise VersionError(f"{path}: unsupported feature file version {version}")
    if T == 0 or d == 0:
        raise InvalidDimsError(f"{path}: invalid dims {T}x{d}")
    if dtype_code not in _DTYPE_CODES:
        raise InvalidDimsError(f"{path}: unknown dtype code {dtype_code}")
    dt = _DTYPE_CODES[dtype_code]
    n_bytes = T * d * dt.itemsize
    if n_bytes >= 2**63:
        raise InvalidDimsError(f"{path}: dims {T}x{d} overflow")
    end = _HEADER.size + n_bytes
    if len(raw) < end + 4:
        raise TruncatedError(f"{path}: payload truncated ({len(raw)} bytes, expected {end + 4})")
    (crc,) = struct.unpack_from("<I", raw, end)
    if crc != zlib.crc32(raw[:end]):
        raise ChecksumError(f"{path}: checksum mismatch")
    return np.frombuffer(raw, dtype=dt, count=T * d, offset=_HEADER.size).reshape(T, d).copy()
