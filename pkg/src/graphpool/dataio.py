"""Readers and writers for feature stacks, manifests, trial lists and
named-tensor checkpoints.

On-disk feature layout is frame-major (N rows of F float32 values per
layer); the engine transposes internally where a feature-major view is
needed.  All multi-byte fields are little-endian.
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    CorruptionError,
    DataError,
    DomainError,
    FormatError,
    ManifestLookupError,
    ParseError,
)

FEATURE_MAGIC = b"W2VF"
FEATURE_VERSION = 1
FEATURE_DTYPE_F32 = 0
# magic(4) + version(1) + dtype(1) + reserved(2) + L,N,F as u32
_FEATURE_HEADER = struct.Struct("<4sBBHIII")

CHECKPOINT_MAGIC = b"GPCK"


# --------------------------------------------------------------------------
# Feature stacks
# --------------------------------------------------------------------------


@dataclass
class FeatureStack:
    """L layers of NxF frame features for one utterance."""

    values: np.ndarray  # (L, N, F)

    def __post_init__(self):
        arr = np.asarray(self.values)
        if arr.ndim != 3:
            raise DomainError(f"feature stack must be 3-D (L,N,F), got shape {arr.shape}")
        if min(arr.shape) < 1:
            raise DomainError(f"feature stack dims must all be >= 1, got {arr.shape}")
        self.values = arr

    @property
    def layers(self) -> int:
        return self.values.shape[0]

    @property
    def frames(self) -> int:
        return self.values.shape[1]

    @property
    def dim(self) -> int:
        return self.values.shape[2]


def write_feature_stack(stack: FeatureStack, path: str | os.PathLike) -> int:
    """Write a stack to ``path``; returns the number of bytes emitted."""
    if not np.all(np.isfinite(stack.values)):
        raise DataError("feature stack contains non-finite values")
    header = _FEATURE_HEADER.pack(
        FEATURE_MAGIC, FEATURE_VERSION, FEATURE_DTYPE_F32, 0,
        stack.layers, stack.frames, stack.dim)
    payload = np.ascontiguousarray(stack.values, dtype="<f4").tobytes()
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(payload)
    return len(header) + len(payload)


def read_feature_stack(path: str | os.PathLike) -> FeatureStack:
    """Read a stack; round-trips with :func:`write_feature_stack` bit-exactly."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < _FEATURE_HEADER.size or raw[:4] != FEATURE_MAGIC:
        raise FormatError(f"{path}: not a feature file (bad magic)")
    magic, version, dtype, _reserved, layers, frames, dim = _FEATURE_HEADER.unpack_from(raw)
    if version != FEATURE_VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    if dtype != FEATURE_DTYPE_F32:
        raise FormatError(f"{path}: unsupported dtype code {dtype}")
    expected = 4 * layers * frames * dim
    payload = raw[_FEATURE_HEADER.size:]
    if len(payload) != expected:
        raise CorruptionError(
            f"{path}: declared {layers}x{frames}x{dim} needs {expected} payload bytes, "
            f"found {len(payload)}")
    values = np.frombuffer(payload, dtype="<f4").reshape(layers, frames, dim)
    if not np.all(np.isfinite(values)):
        raise DataError(f"{path}: payload contains non-finite values")
    return FeatureStack(values=values.astype(np.float32))


# --------------------------------------------------------------------------
# Manifests
# --------------------------------------------------------------------------


@dataclass
class ManifestEntry:
    utt: str
    speaker: str
    path: str
    frames: int


@dataclass
class Manifest:
    entries: list[ManifestEntry] = field(default_factory=list)

    def __post_init__(self):
        seen = set()
        for e in self.entries:
            if e.utt in seen:
                raise DataError(f"duplicate utterance id {e.utt!r} in manifest")
            seen.add(e.utt)

    def ids(self) -> set[str]:
        return {e.utt for e in self.entries}

    def by_id(self) -> dict[str, ManifestEntry]:
        return {e.utt: e for e in self.entries}

    def speakers(self) -> list[str]:
        return sorted({e.speaker for e in self.entries})

    def class_map(self) -> dict[str, int]:
        """Speaker label -> class index, deterministic across manifest order."""
        return {spk: i for i, spk in enumerate(self.speakers())}


def load_manifest(path: str | os.PathLike, check_paths: bool = True) -> Manifest:
    """Parse a JSON-lines manifest; relative feature paths resolve against
    the manifest's own directory."""
    base = os.path.dirname(os.path.abspath(path))
    entries = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ParseError(f"{path}:{lineno}: invalid JSON ({exc})") from exc
            try:
                utt, speaker = str(obj["utt"]), str(obj["speaker"])
                fpath, frames = str(obj["path"]), int(obj["frames"])
            except (KeyError, TypeError, ValueError) as exc:
                raise ParseError(f"{path}:{lineno}: missing or malformed field ({exc})") from exc
            if not os.path.isabs(fpath):
                fpath = os.path.join(base, fpath)
            if check_paths and not os.path.exists(fpath):
                raise DataError(f"{path}:{lineno}: feature file not found: {fpath}")
            entries.append(ManifestEntry(utt=utt, speaker=speaker, path=fpath, frames=frames))
    return Manifest(entries=entries)


def save_manifest(manifest: Manifest, path: str | os.PathLike) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for e in manifest.entries:
            fh.write(json.dumps(
                {"utt": e.utt, "speaker": e.speaker, "path": e.path, "frames": e.frames}) + "\n")


# --------------------------------------------------------------------------
# Trial lists
# --------------------------------------------------------------------------


@dataclass
class Trial:
    label: int  # 1 = same speaker
    enroll: str
    test: str


@dataclass
class TrialList:
    trials: list[Trial] = field(default_factory=list)

    def __len__(self):
        return len(self.trials)


def load_trials(path: str | os.PathLike, manifest: Manifest) -> TrialList:
    """Parse ``<0|1> <enroll_id> <test_id>`` lines, verifying ids."""
    known = manifest.ids()
    trials = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            parts = line.split()
            if len(parts) != 3:
                raise ParseError(f"{path}:{lineno}: expected 3 fields, got {len(parts)}")
            label_str, enroll, test = parts
            if label_str not in ("0", "1"):
                raise ParseError(f"{path}:{lineno}: label must be 0 or 1, got {label_str!r}")
            for utt in (enroll, test):
                if utt not in known:
                    raise ManifestLookupError(
                        f"{path}:{lineno}: utterance {utt!r} not in manifest")
            trials.append(Trial(label=int(label_str), enroll=enroll, test=test))
    return TrialList(trials=trials)


# --------------------------------------------------------------------------
# Named-tensor checkpoints
# --------------------------------------------------------------------------


def save_tensors(tensors: dict[str, np.ndarray], path: str | os.PathLike) -> None:
    """Write named float64 tensors; names are sorted so output is
    byte-identical for equal content."""
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", len(tensors)))
        for name in sorted(tensors):
            arr = np.asarray(tensors[name], dtype="<f8")
            encoded = name.encode("utf-8")
            fh.write(struct.pack("<H", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<I", arr.ndim))
            for d in arr.shape:
                fh.write(struct.pack("<I", d))
            fh.write(np.ascontiguousarray(arr).tobytes())


def load_tensors(path: str | os.PathLike) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 8 or raw[:4] != CHECKPOINT_MAGIC:
        raise FormatError(f"{path}: not a checkpoint file (bad magic)")
    (count,) = struct.unpack_from("<I", raw, 4)
    offset = 8
    out: dict[str, np.ndarray] = {}
    try:
        for _ in range(count):
            (name_len,) = struct.unpack_from("<H", raw, offset)
            offset += 2
            name = raw[offset:offset + name_len].decode("utf-8")
            if len(raw) < offset + name_len:
                raise CorruptionError(f"{path}: truncated tensor name")
            offset += name_len
            (rank,) = struct.unpack_from("<I", raw, offset)
            offset += 4
            dims = struct.unpack_from(f"<{rank}I", raw, offset) if rank else ()
            offset += 4 * rank
            size = int(np.prod(dims, dtype=np.int64)) if rank else 1
            nbytes = 8 * size
            if len(raw) < offset + nbytes:
                raise CorruptionError(f"{path}: truncated payload for tensor {name!r}")
            arr = np.frombuffer(raw, dtype="<f8", count=size, offset=offset).reshape(dims)
            offset += nbytes
            out[name] = arr.astype(np.float64)
    except struct.error as exc:
        raise CorruptionError(f"{path}: truncated checkpoint ({exc})") from exc
    if offset != len(raw):
        raise CorruptionError(f"{path}: {len(raw) - offset} trailing bytes after last tensor")
    return out
