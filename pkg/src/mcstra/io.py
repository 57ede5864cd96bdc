"""Binary and text file formats: CRAS1 rasters, mask text, 16-bit PGM, dataset
manifests and MCKP1 checkpoints. Every writer goes through :func:`atomic_write`.
"""

from __future__ import annotations

import os
import struct
import tempfile
from pathlib import Path

import numpy as np

from .fourier import SamplingMask
from .validation import check_raster

CRAS_MAGIC = b"CRAS0001"
MCKP_MAGIC = b"MCKP0001"


def atomic_write(path, data: bytes) -> None:
    """Write to a temporary sibling file, then rename over ``path``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


# --------------------------------------------------------------------------
# CRAS1


def encode_cras(raster: np.ndarray) -> bytes:
    raster = check_raster(np.asarray(raster))
    if raster.ndim != 2:
        raise ValueError(f"CRAS1 stores a single 2D raster, got shape {raster.shape}")
    h, w = raster.shape
    pairs = np.empty((h, w, 2), dtype="<f4")
    pairs[..., 0] = raster.real
    pairs[..., 1] = raster.imag
    return CRAS_MAGIC + struct.pack("<II", h, w) + pairs.tobytes()


def decode_cras(buf: bytes, source: str = "<bytes>") -> np.ndarray:
    if buf[:8] != CRAS_MAGIC:
        raise ValueError(f"{source}: not a CRAS1 file (bad magic)")
    if len(buf) < 16:
        raise ValueError(f"{source}: truncated CRAS1 header")
    h, w = struct.unpack("<II", buf[8:16])
    need = 16 + 8 * h * w
    if len(buf) != need:
        raise ValueError(f"{source}: expected {need} bytes for a {h}x{w} raster, got {len(buf)}")
    pairs = np.frombuffer(buf, dtype="<f4", offset=16).reshape(h, w, 2)
    out = pairs[..., 0].astype(np.complex64)
    out.imag = pairs[..., 1]
    return out


def write_cras(path, raster: np.ndarray) -> None:
    atomic_write(path, encode_cras(raster))


def read_cras(path) -> np.ndarray:
    path = Path(path)
    return decode_cras(path.read_bytes(), str(path))


# --------------------------------------------------------------------------
# masks and images


def write_mask(path, mask: SamplingMask) -> None:
    atomic_write(path, mask.to_text().encode())


def read_mask(path) -> SamplingMask:
    path = Path(path)
    try:
        return SamplingMask.from_text(path.read_text())
    except ValueError as exc:
        raise ValueError(f"{path}: {exc}") from None


def encode_pgm16(img: np.ndarray, max_value: float | None = None) -> bytes:
    """Binary PGM (P5), 16-bit big-endian, ``[0, max_value]`` mapped to ``[0, 65535]``."""
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 2:
        raise ValueError(f"PGM export needs a 2D image, got shape {img.shape}")
    peak = float(img.max()) if max_value is None else float(max_value)
    scaled = np.zeros_like(img) if peak <= 0 else img / peak * 65535.0
    px = np.clip(np.rint(scaled), 0, 65535).astype(">u2")
    h, w = img.shape
    return f"P5\n{w} {h}\n65535\n".encode() + px.tobytes()


def decode_pgm16(buf: bytes) -> np.ndarray:
    parts = buf.split(b"\n", 3)
    if parts[0] != b"P5" or parts[2] != b"65535":
        raise ValueError("not a 16-bit binary PGM")
    w, h = (int(v) for v in parts[1].split())
    return np.frombuffer(parts[3], dtype=">u2").reshape(h, w).astype(np.int64)


def write_pgm(path, img: np.ndarray, max_value: float | None = None) -> None:
    atomic_write(path, encode_pgm16(img, max_value))


# --------------------------------------------------------------------------
# dataset manifest


def write_dataset(directory, dataset) -> Path:
    """Write every record as CRAS1 plus ``manifest.txt`` (``volume_id, slice_index, split, file``)."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    lines = []
    for rec in dataset.records:
        name = f"v{rec.volume_id:04d}_s{rec.slice_index:03d}.cras"
        write_cras(directory / name, rec.image)
        lines.append(f"{rec.volume_id}, {rec.slice_index}, {rec.split}, {name}")
    manifest = directory / "manifest.txt"
    atomic_write(manifest, ("\n".join(lines) + "\n").encode())
    return manifest


def read_dataset(directory, **dataset_kw):
    from .data import Dataset, DatasetRecord

    directory = Path(directory)
    manifest = directory / "manifest.txt"
    if not manifest.exists():
        raise FileNotFoundError(f"{manifest}: dataset manifest not found")
    records = []
    for lineno, line in enumerate(manifest.read_text().splitlines(), 1):
        if not line.strip():
            continue
        fields = [f.strip() for f in line.split(",")]
        if len(fields) != 4 or fields[2] not in ("train", "val"):
            raise ValueError(f"{manifest}:{lineno}: malformed record {line!r}")
        vol, sl, split, fname = fields
        img = read_cras(directory / fname).astype(np.complex128)
        records.append(DatasetRecord(img, int(vol), int(sl), split))
    if not records:
        raise ValueError(f"{manifest}: no records")
    return Dataset(records, **dataset_kw)


# --------------------------------------------------------------------------
# MCKP1 checkpoints


def encode_checkpoint(tensors: list[tuple[str, np.ndarray]]) -> bytes:
    out = [MCKP_MAGIC, struct.pack("<I", len(tensors))]
    for name, arr in tensors:
        arr = np.asarray(arr)
        raw = name.encode()
        if len(raw) > 0xFFFF:
            raise ValueError(f"parameter name too long: {name[:40]}...")
        out.append(struct.pack("<H", len(raw)) + raw)
        out.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        out.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return b"".join(out)


def decode_checkpoint(buf: bytes, source: str = "<bytes>") -> list[tuple[str, np.ndarray]]:
    if buf[:8] != MCKP_MAGIC:
        raise ValueError(f"{source}: not an MCKP1 checkpoint (bad magic or version)")
    pos = 8

    def take(n):
        nonlocal pos
        if pos + n > len(buf):
            raise ValueError(f"{source}: truncated checkpoint")
        chunk = buf[pos:pos + n]
        pos += n
        return chunk

    (count,) = struct.unpack("<I", take(4))
    items = []
    for _ in range(count):
        (nlen,) = struct.unpack("<H", take(2))
        name = take(nlen).decode()
        (rank,) = struct.unpack("<B", take(1))
        shape = struct.unpack(f"<{rank}I", take(4 * rank))
        n = int(np.prod(shape)) if rank else 1
        arr = np.frombuffer(take(4 * n), dtype="<f4").reshape(shape).astype(np.float32)
        items.append((name, arr))
    if pos != len(buf):
        raise ValueError(f"{source}: trailing bytes after {count} entries")
    return items
