"""Binary containers and dataset/manifest I/O.

Checkpoint ("MFCK"): magic, format version u32, entry count u32; each
entry is a u32 name length, the UTF-8 name, a u32 rank, u64 extents and
a little-endian f64 payload. Round-trips are byte-exact.

Volume sample ("MFVL"): magic, version u32, M/C/D/H/W u32, label u32,
then a little-endian f32 payload in (M, C, D, H, W) row-major order.
A dataset is a directory of such files plus a UTF-8 manifest listing
file names and split assignment.

All writes are atomic (temp file in the target directory, then rename).
"""

from __future__ import annotations

import os
import struct
import tempfile
from pathlib import Path

import numpy as np

from .errors import ContractError
from .preprocess import VolumeBatch

CHECKPOINT_MAGIC = b"MFCK"
CHECKPOINT_VERSION = 1
VOLUME_MAGIC = b"MFVL"
VOLUME_VERSION = 1
MANIFEST_NAME = "manifest.tsv"


def atomic_write_bytes(path, payload: bytes) -> None:
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as handle:
            handle.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def encode_checkpoint(entries: dict[str, np.ndarray]) -> bytes:
    chunks = [CHECKPOINT_MAGIC, struct.pack("<II", CHECKPOINT_VERSION, len(entries))]
    for name, array in entries.items():
        arr = np.ascontiguousarray(array, dtype="<f8")
        encoded = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(encoded)))
        chunks.append(encoded)
        chunks.append(struct.pack("<I", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        chunks.append(arr.tobytes())
    return b"".join(chunks)


def decode_checkpoint(blob: bytes) -> dict[str, np.ndarray]:
    if blob[:4] != CHECKPOINT_MAGIC:
        raise ContractError("not a checkpoint: bad magic")
    version, count = struct.unpack_from("<II", blob, 4)
    if version != CHECKPOINT_VERSION:
        raise ContractError(f"unsupported checkpoint version {version}")
    offset = 12
    entries: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack_from("<I", blob, offset)
        offset += 4
        name = blob[offset:offset + name_len].decode("utf-8")
        offset += name_len
        (rank,) = struct.unpack_from("<I", blob, offset)
        offset += 4
        shape = struct.unpack_from(f"<{rank}Q", blob, offset)
        offset += 8 * rank
        size = int(np.prod(shape)) if rank else 1
        array = np.frombuffer(blob, dtype="<f8", count=size, offset=offset)
        offset += 8 * size
        entries[name] = array.reshape(shape).copy()
    return entries


def save_checkpoint(path, entries: dict[str, np.ndarray]) -> None:
    atomic_write_bytes(path, encode_checkpoint(entries))


def load_checkpoint(path) -> dict[str, np.ndarray]:
    return decode_checkpoint(Path(path).read_bytes())


# ---------------------------------------------------------------------------
# volume samples and datasets
# ---------------------------------------------------------------------------

def encode_volume_sample(data: np.ndarray, label: int) -> bytes:
    if data.ndim != 5:
        raise ContractError(f"volume sample must be (M,C,D,H,W), got {data.shape}")
    header = struct.pack("<II5II", *( (VOLUME_VERSION,) + tuple()),
                         ) if False else None
    arr = np.ascontiguousarray(data, dtype="<f4")
    m, c, d, h, w = arr.shape
    parts = [VOLUME_MAGIC,
             struct.pack("<IIIIIII", VOLUME_VERSION, m, c, d, h, w, int(label)),
             arr.tobytes()]
    return b"".join(parts)


def decode_volume_sample(blob: bytes) -> tuple[np.ndarray, int]:
    if blob[:4] != VOLUME_MAGIC:
        raise ContractError("not a volume sample: bad magic")
    version, m, c, d, h, w, label = struct.unpack_from("<IIIIIII", blob, 4)
    if version != VOLUME_VERSION:
        raise ContractError(f"unsupported volume version {version}")
    size = m * c * d * h * w
    array = np.frombuffer(blob, dtype="<f4", count=size, offset=32)
    return array.reshape(m, c, d, h, w).copy(), label


def save_volume_sample(path, data: np.ndarray, label: int) -> None:
    atomic_write_bytes(path, encode_volume_sample(data, label))


def load_volume_sample(path) -> tuple[np.ndarray, int]:
    return decode_volume_sample(Path(path).read_bytes())


def write_manifest(directory, rows: list[tuple[str, str]]) -> None:
    lines = [f"{name}\t{split}" for name, split in rows]
    atomic_write_text(Path(directory) / MANIFEST_NAME, "\n".join(lines) + "\n")


def read_manifest(directory) -> list[tuple[str, str]]:
    path = Path(directory) / MANIFEST_NAME
    rows = []
    for line in path.read_text("utf-8").splitlines():
        if not line.strip():
            continue
        name, _, split = line.partition("\t")
        rows.append((name, split or "unsplit"))
    return rows


def save_dataset(directory, batch: VolumeBatch, splits: list[str] | None = None) -> None:
    """Write one MFVL file per sample plus the manifest."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    rows = []
    for i in range(len(batch)):
        name = batch.names[i] if batch.names else f"sample_{i:05d}.mfvl"
        save_volume_sample(directory / name, batch.data[i], int(batch.labels[i]))
        rows.append((name, splits[i] if splits else "unsplit"))
    write_manifest(directory, rows)


def load_dataset(directory) -> tuple[VolumeBatch, list[str]]:
    """Load a dataset directory; returns the batch and per-sample splits."""
    directory = Path(directory)
    rows = read_manifest(directory)
    if not rows:
        raise ContractError(f"manifest in {directory} lists no samples")
    volumes, labels, names, splits = [], [], [], []
    for name, split in rows:
        data, label = load_volume_sample(directory / name)
        volumes.append(data)
        labels.append(label)
        names.append(name)
        splits.append(split)
    data = np.stack(volumes)
    return VolumeBatch(data, np.asarray(labels), names), splits
