"""Tensor files, manifests and patch ingestion.

Tensors are plain ``numpy.float32`` arrays. On disk they use the GDT1 layout::

    b"GDT1" | u8 rank | rank x u32 dims (LE) | prod(dims) x f32 (LE, row-major)
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

MAGIC = b"GDT1"
PATCH_SIZE = 64


class TensorFormatError(ValueError):
    """Base class for malformed GDT1 data."""


class BadMagicError(TensorFormatError):
    pass


class TruncatedError(TensorFormatError):
    pass


class ShapeMismatchError(TensorFormatError):
    pass


class NonFiniteError(TensorFormatError):
    pass


class ManifestError(ValueError):
    pass


class CorpusError(ValueError):
    pass


@dataclass(frozen=True)
class PatchSequence:
    """``t`` time-ordered patches cropped from one bounding box.

    ``patches[-1]`` is the patch of the current frame ``frame_index``.
    """

    patches: np.ndarray  # (t, h, w) float32
    frame_index: int
    sequence_id: str

    def __post_init__(self):
        if self.patches.ndim != 3 or self.patches.shape[0] < 1:
            raise CorpusError(
                f"sequence {self.sequence_id!r}: expected (t, h, w) patches, got shape {self.patches.shape}"
            )

    @property
    def t(self) -> int:
        return self.patches.shape[0]

    @property
    def current(self) -> np.ndarray:
        return self.patches[-1]


@dataclass(frozen=True)
class ManifestEntry:
    sequence_id: str
    path: Path
    frame_index: int
    label: Optional[int] = None


def as_tensor(values) -> np.ndarray:
    arr = np.ascontiguousarray(values, dtype=np.float32)
    if arr.ndim == 0 or any(d < 1 for d in arr.shape):
        raise ShapeMismatchError(f"tensor shape must be non-empty positive dims, got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError("tensor contains NaN or Inf")
    return arr


def encode_tensor(t: np.ndarray) -> bytes:
    arr = as_tensor(t)
    if arr.ndim > 255:
        raise ShapeMismatchError(f"rank {arr.ndim} does not fit in one byte")
    header = MAGIC + struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
    return header + arr.astype("<f4", copy=False).tobytes(order="C")


def decode_tensor(buf: bytes, source: str = "<bytes>") -> np.ndarray:
    if len(buf) < 5:
        if not MAGIC.startswith(buf[:4]):
            raise BadMagicError(f"{source}: bad magic {buf[:4]!r}")
        raise TruncatedError(f"{source}: header truncated ({len(buf)} bytes)")
    if buf[:4] != MAGIC:
        raise BadMagicError(f"{source}: bad magic {buf[:4]!r}")
    rank = buf[4]
    if rank == 0:
        raise ShapeMismatchError(f"{source}: rank 0 is not a valid tensor")
    end = 5 + 4 * rank
    if len(buf) < end:
        raise TruncatedError(f"{source}: header declares rank {rank} but dims are truncated")
    shape = struct.unpack(f"<{rank}I", buf[5:end])
    if any(d == 0 for d in shape):
        raise ShapeMismatchError(f"{source}: zero-sized dimension in {shape}")
    payload = buf[end:]
    if len(payload) % 4:
        raise TruncatedError(f"{source}: payload of {len(payload)} bytes is not a whole number of floats")
    count = int(np.prod(shape, dtype=np.int64))
    if len(payload) // 4 != count:
        raise ShapeMismatchError(
            f"{source}: shape {list(shape)} needs {count} values, payload has {len(payload) // 4}"
        )
    arr = np.frombuffer(payload, dtype="<f4").astype(np.float32).reshape(shape)
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"{source}: non-finite value in payload")
    return arr


def read_tensor(path) -> np.ndarray:
    path = Path(path)
    return decode_tensor(path.read_bytes(), str(path))


def write_tensor(t: np.ndarray, path) -> None:
    Path(path).write_bytes(encode_tensor(t))


def resize_bilinear(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resampling with corner-aligned sample positions.

    A length-1 output axis samples the first input row/column.
    """
    img = np.asarray(img)
    if img.ndim != 2:
        raise ValueError(f"resize_bilinear expects a 2-D image, got shape {img.shape}")
    if out_h < 1 or out_w < 1:
        raise ValueError(f"output size must be positive, got {out_h}x{out_w}")
    in_h, in_w = img.shape
    if (in_h, in_w) == (out_h, out_w):
        return img.astype(np.float32, copy=True)

    def axis_weights(n_in, n_out):
        if n_out == 1 or n_in == 1:
            pos = np.zeros(n_out)
        else:
            pos = np.arange(n_out) * ((n_in - 1) / (n_out - 1))
        lo = np.clip(np.floor(pos).astype(np.int64), 0, n_in - 1)
        hi = np.minimum(lo + 1, n_in - 1)
        frac = pos - lo
        return lo, hi, frac

    src = img.astype(np.float64)
    r0, r1, fr = axis_weights(in_h, out_h)
    c0, c1, fc = axis_weights(in_w, out_w)
    rows = src[r0, :] * (1.0 - fr)[:, None] + src[r1, :] * fr[:, None]
    out = rows[:, c0] * (1.0 - fc)[None, :] + rows[:, c1] * fc[None, :]
    # keep float error from leaving the input range
    out = np.clip(out, src.min(), src.max())
    return out.astype(np.float32)


def read_manifest(path) -> list[ManifestEntry]:
    """Parse ``sequence_id,path,frame_index[,label]`` lines.

    Relative tensor paths resolve against the manifest's directory.
    """
    path = Path(path)
    base = path.parent
    entries = []
    for lineno, raw in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        fields = [f.strip() for f in line.split(",")]
        if len(fields) not in (3, 4):
            raise ManifestError(f"{path}:{lineno}: expected 3 or 4 fields, got {len(fields)}")
        seq_id, rel, frame = fields[:3]
        try:
            frame_index = int(frame)
        except ValueError:
            raise ManifestError(f"{path}:{lineno}: frame_index {frame!r} is not an integer") from None
        if frame_index < 0:
            raise ManifestError(f"{path}:{lineno}: negative frame_index {frame_index}")
        label = None
        if len(fields) == 4:
            if fields[3] not in ("0", "1"):
                raise ManifestError(f"{path}:{lineno}: label must be 0 or 1, got {fields[3]!r}")
            label = int(fields[3])
        p = Path(rel)
        entries.append(ManifestEntry(seq_id, p if p.is_absolute() else base / p, frame_index, label))
    labelled = {e.label is not None for e in entries}
    if len(labelled) > 1:
        raise ManifestError(f"{path}: labels must be given for all entries or none")
    return entries


def write_manifest(entries: Sequence[ManifestEntry], path) -> None:
    path = Path(path)
    lines = ["# sequence_id,path,frame_index[,label]"]
    for e in entries:
        p = Path(e.path)
        try:
            rel = os.path.relpath(p, path.parent) if p.is_absolute() else str(p)
        except ValueError:
            rel = str(p)
        row = [e.sequence_id, Path(rel).as_posix(), str(e.frame_index)]
        if e.label is not None:
            row.append(str(e.label))
        lines.append(",".join(row))
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_corpus(
    manifest: Sequence[ManifestEntry], patch_shape: tuple[int, int] = (PATCH_SIZE, PATCH_SIZE)
) -> list[PatchSequence]:
    out = []
    t_seen = None
    for e in manifest:
        if not Path(e.path).is_file():
            raise FileNotFoundError(f"sequence {e.sequence_id!r}: missing tensor file {e.path}")
        arr = read_tensor(e.path)
        if arr.ndim != 3 or tuple(arr.shape[1:]) != tuple(patch_shape):
            raise CorpusError(
                f"sequence {e.sequence_id!r}: expected t x {patch_shape[0]} x {patch_shape[1]} tensor, "
                f"got shape {list(arr.shape)}"
            )
        if arr.min() < 0.0 or arr.max() > 1.0:
            raise CorpusError(f"sequence {e.sequence_id!r}: pixel values outside [0, 1]")
        if t_seen is None:
            t_seen = arr.shape[0]
        elif arr.shape[0] != t_seen:
            raise CorpusError(
                f"sequence {e.sequence_id!r}: window length {arr.shape[0]} differs from {t_seen}"
            )
        out.append(PatchSequence(arr, e.frame_index, e.sequence_id))
    return out
