"""Binary file formats.

All integers are little-endian u32 unless noted; all floats little-endian
IEEE-754.  Magics are 4 ASCII bytes.

STRD  strand sets: magic, version=1, strand count, then per strand a point
      count u32 followed by f32 (x, y, z) triples.  An optional ROOT section
      follows: magic `ROOT`, count u32, then f32 (u, v) pairs, one per strand.
SDFG  scalar grid: magic, version=1, bbox as six f64 (min xyz, max xyz),
      resolution as three u32 (nx, ny, nz), then f32 node values in x-fastest
      order.
ORNG  vector grid: same layout with three f32 per node.
ORNT  orientation map: magic, version=1, width u32, height u32, then per
      pixel (angle, variance) f32, row-major.
GTEX  geometry texture: magic, version=1, H u32, W u32, C u32, then f32
      values row-major, channel-interleaved.
WGTS  named weight arrays: magic, version=1, entry count u32, then per entry
      a u32 name length, the UTF-8 name, a u32 ndim, ndim u32 dims, and f32
      data in C order.
"""
from __future__ import annotations

import struct

import numpy as np

Array = np.ndarray


def _read_exact(f, n: int) -> bytes:
    data = f.read(n)
    if len(data) != n:
        raise ValueError("truncated file")
    return data


def _expect_magic(f, magic: bytes):
    got = _read_exact(f, 4)
    if got != magic:
        raise ValueError(f"bad magic {got!r}, expected {magic!r}")


def _expect_version(f, want: int = 1):
    (v,) = struct.unpack("<I", _read_exact(f, 4))
    if v != want:
        raise ValueError(f"unsupported version {v}")


# ---------------------------------------------------------------------------
# STRD

def write_strd(path, strand_points: list, roots: Array | None = None):
    """strand_points: list of (Li, 3) arrays; roots optional (M, 2)."""
    with open(path, "wb") as f:
        f.write(b"STRD")
        f.write(struct.pack("<II", 1, len(strand_points)))
        for pts in strand_points:
            pts = np.asarray(pts, dtype="<f4")
            f.write(struct.pack("<I", len(pts)))
            f.write(pts.tobytes())
        if roots is not None:
            roots = np.asarray(roots, dtype="<f4")
            f.write(b"ROOT")
            f.write(struct.pack("<I", len(roots)))
            f.write(roots.tobytes())


def read_strd(path) -> tuple[list, Array | None]:
    with open(path, "rb") as f:
        _expect_magic(f, b"STRD")
        _expect_version(f)
        (count,) = struct.unpack("<I", _read_exact(f, 4))
        out = []
        for _ in range(count):
            (n,) = struct.unpack("<I", _read_exact(f, 4))
            pts = np.frombuffer(_read_exact(f, 12 * n), dtype="<f4").reshape(n, 3)
            out.append(pts.astype(np.float64))
        roots = None
        tag = f.read(4)
        if tag == b"ROOT":
            (m,) = struct.unpack("<I", _read_exact(f, 4))
            roots = np.frombuffer(_read_exact(f, 8 * m), dtype="<f4").reshape(m, 2)
            roots = roots.astype(np.float64)
        elif tag:
            raise ValueError(f"unexpected trailing section {tag!r}")
    return out, roots


# ---------------------------------------------------------------------------
# SDFG / ORNG

def _write_grid(path, magic: bytes, bbox_min, bbox_max, values: Array, channels: int):
    values = np.asarray(values)
    nx, ny, nz = values.shape[:3]
    with open(path, "wb") as f:
        f.write(magic)
        f.write(struct.pack("<I", 1))
        f.write(np.asarray(list(bbox_min) + list(bbox_max), dtype="<f8").tobytes())
        f.write(struct.pack("<III", nx, ny, nz))
        # x-fastest node order
        flat = values.reshape(nx, ny, nz, channels)
        f.write(np.ascontiguousarray(
            flat.transpose(2, 1, 0, 3), dtype="<f4").tobytes())


def _read_grid(path, magic: bytes, channels: int):
    with open(path, "rb") as f:
        _expect_magic(f, magic)
        _expect_version(f)
        bbox = np.frombuffer(_read_exact(f, 48), dtype="<f8")
        nx, ny, nz = struct.unpack("<III", _read_exact(f, 12))
        n = nx * ny * nz * channels
        data = np.frombuffer(_read_exact(f, 4 * n), dtype="<f4")
        vals = data.reshape(nz, ny, nx, channels).transpose(2, 1, 0, 3)
    values = vals.astype(np.float64)
    if channels == 1:
        values = values[..., 0]
    return bbox[:3].copy(), bbox[3:].copy(), values


def write_sdfg(path, bbox_min, bbox_max, values: Array):
    _write_grid(path, b"SDFG", bbox_min, bbox_max, values[..., None], 1)


def read_sdfg(path):
    return _read_grid(path, b"SDFG", 1)


def write_orng(path, bbox_min, bbox_max, values: Array):
    _write_grid(path, b"ORNG", bbox_min, bbox_max, values, 3)


def read_orng(path):
    return _read_grid(path, b"ORNG", 3)


# ---------------------------------------------------------------------------
# ORNT

def write_ornt(path, angle: Array, variance: Array):
    angle = np.asarray(angle)
    h, w = angle.shape
    pix = np.stack([angle, np.asarray(variance)], axis=-1)
    with open(path, "wb") as f:
        f.write(b"ORNT")
        f.write(struct.pack("<III", 1, w, h))
        f.write(np.ascontiguousarray(pix, dtype="<f4").tobytes())


def read_ornt(path):
    with open(path, "rb") as f:
        _expect_magic(f, b"ORNT")
        _expect_version(f)
        w, h = struct.unpack("<II", _read_exact(f, 8))
        data = np.frombuffer(_read_exact(f, 8 * w * h), dtype="<f4")
        pix = data.reshape(h, w, 2).astype(np.float64)
    return pix[:, :, 0], pix[:, :, 1]


# ---------------------------------------------------------------------------
# GTEX

def write_gtex(path, texture: Array):
    texture = np.asarray(texture)
    h, w, c = texture.shape
    with open(path, "wb") as f:
        f.write(b"GTEX")
        f.write(struct.pack("<IIII", 1, h, w, c))
        f.write(np.ascontiguousarray(texture, dtype="<f4").tobytes())


def read_gtex(path) -> Array:
    with open(path, "rb") as f:
        _expect_magic(f, b"GTEX")
        _expect_version(f)
        h, w, c = struct.unpack("<III", _read_exact(f, 12))
        data = np.frombuffer(_read_exact(f, 4 * h * w * c), dtype="<f4")
    return data.reshape(h, w, c).astype(np.float64)


# ---------------------------------------------------------------------------
# WGTS

def write_wgts(path, arrays: dict):
    with open(path, "wb") as f:
        f.write(b"WGTS")
        f.write(struct.pack("<II", 1, len(arrays)))
        for name, arr in arrays.items():
            arr = np.asarray(arr)
            blob = name.encode("utf-8")
            f.write(struct.pack("<I", len(blob)))
            f.write(blob)
            f.write(struct.pack("<I", arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            f.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def read_wgts(path) -> dict:
    out = {}
    with open(path, "rb") as f:
        _expect_magic(f, b"WGTS")
        _expect_version(f)
        (count,) = struct.unpack("<I", _read_exact(f, 4))
        for _ in range(count):
            (nlen,) = struct.unpack("<I", _read_exact(f, 4))
            name = _read_exact(f, nlen).decode("utf-8")
            (ndim,) = struct.unpack("<I", _read_exact(f, 4))
            shape = struct.unpack(f"<{ndim}I", _read_exact(f, 4 * ndim))
            n = int(np.prod(shape)) if ndim else 1
            data = np.frombuffer(_read_exact(f, 4 * n), dtype="<f4")
            out[name] = data.reshape(shape).astype(np.float64)
    return out
