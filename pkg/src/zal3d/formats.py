"""Binary on-disk formats.

All multi-byte integers are little-endian u32 unless noted. Formats:

  OPM1  ordered point map: magic, u32 H, u32 W, H*W*3 f32 (row-major, xyz interleaved)
  MSK1  binary mask:       magic, u32 H, u32 W, H*W u8 (0/1)
  ZALM  score map:         magic, u32 H, u32 W, H*W f32
  ZALW  named tensors:     magic, u32 version, then per tensor
                           u16 name length, name bytes (utf-8), u8 rank,
                           u32 dims * rank, f32 payload
  ZALB  memory bank:       same container as ZALW, different magic
  ZALR  RGB sidecar:       magic, u32 rows, u32 width, rows*width f32
"""

from __future__ import annotations

import struct

import numpy as np

from .errors import FormatError

TENSOR_VERSION = 1


def _read_exact(fh, n: int, what: str) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise FormatError(f"truncated file while reading {what}")
    return buf


def _check_magic(fh, magic: bytes) -> None:
    got = fh.read(4)
    if got != magic:
        raise FormatError(f"bad magic {got!r}, expected {magic!r}")


def _write_grid(path, magic: bytes, arr: np.ndarray, dtype) -> None:
    arr = np.ascontiguousarray(arr, dtype=dtype)
    with open(path, "wb") as fh:
        fh.write(magic)
        fh.write(struct.pack("<II", arr.shape[0], arr.shape[1]))
        fh.write(arr.tobytes())


def _read_grid(path, magic: bytes, dtype, channels: int) -> np.ndarray:
    with open(path, "rb") as fh:
        _check_magic(fh, magic)
        h, w = struct.unpack("<II", _read_exact(fh, 8, "header"))
        count = h * w * channels
        payload = _read_exact(fh, count * np.dtype(dtype).itemsize, "payload")
        arr = np.frombuffer(payload, dtype=dtype).copy()
        if fh.read(1):
            raise FormatError("trailing bytes after payload")
    shape = (h, w, channels) if channels > 1 else (h, w)
    return arr.reshape(shape)


def write_opm(path, points: np.ndarray) -> None:
    if points.ndim != 3 or points.shape[2] != 3:
        raise ValueError(f"expected (H, W, 3) array, got {points.shape}")
    _write_grid(path, b"OPM1", points, "<f4")


def read_opm(path) -> np.ndarray:
    return _read_grid(path, b"OPM1", "<f4", 3)


def write_msk(path, mask: np.ndarray) -> None:
    if mask.ndim != 2:
        raise ValueError(f"expected (H, W) array, got {mask.shape}")
    _write_grid(path, b"MSK1", (mask != 0).astype(np.uint8), "u1")


def read_msk(path) -> np.ndarray:
    return _read_grid(path, b"MSK1", "u1", 1)


def write_score_map(path, values: np.ndarray) -> None:
    if values.ndim != 2:
        raise ValueError(f"expected (H, W) array, got {values.shape}")
    _write_grid(path, b"ZALM", values, "<f4")


def read_score_map(path) -> np.ndarray:
    return _read_grid(path, b"ZALM", "<f4", 1)


def write_tensors(path, tensors: dict[str, np.ndarray], magic: bytes = b"ZALW") -> None:
    """Write named f32 tensors; insertion order of the dict is preserved."""
    with open(path, "wb") as fh:
        fh.write(magic)
        fh.write(struct.pack("<I", TENSOR_VERSION))
        for name, arr in tensors.items():
            arr = np.asarray(arr, dtype="<f4")
            if arr.ndim:  # ascontiguousarray would promote rank 0 to rank 1
                arr = np.ascontiguousarray(arr)
            encoded = name.encode("utf-8")
            fh.write(struct.pack("<H", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<B", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(arr.tobytes())


def read_tensors(path, magic: bytes = b"ZALW") -> dict[str, np.ndarray]:
    tensors: dict[str, np.ndarray] = {}
    with open(path, "rb") as fh:
        _check_magic(fh, magic)
        (version,) = struct.unpack("<I", _read_exact(fh, 4, "version"))
        if version != TENSOR_VERSION:
            raise FormatError(f"unsupported container version {version}")
        while True:
            head = fh.read(2)
            if not head:
                break
            if len(head) != 2:
                raise FormatError("truncated tensor name length")
            (name_len,) = struct.unpack("<H", head)
            name = _read_exact(fh, name_len, "tensor name").decode("utf-8")
            (rank,) = struct.unpack("<B", _read_exact(fh, 1, "tensor rank"))
            dims = struct.unpack(f"<{rank}I", _read_exact(fh, 4 * rank, "tensor dims"))
            count = int(np.prod(dims)) if rank else 1
            payload = _read_exact(fh, count * 4, f"tensor {name!r}")
            tensors[name] = np.frombuffer(payload, dtype="<f4").copy().reshape(dims)
    return tensors


def write_rgb_sidecar(path, features: np.ndarray) -> None:
    if features.ndim != 2:
        raise ValueError(f"expected (rows, width) array, got {features.shape}")
    _write_grid(path, b"ZALR", features, "<f4")


def read_rgb_sidecar(path) -> np.ndarray:
    with open(path, "rb") as fh:
        _check_magic(fh, b"ZALR")
        rows, width = struct.unpack("<II", _read_exact(fh, 8, "header"))
        payload = _read_exact(fh, rows * width * 4, "payload")
        if fh.read(1):
            raise FormatError("trailing bytes after payload")
    return np.frombuffer(payload, dtype="<f4").copy().reshape(rows, width)
