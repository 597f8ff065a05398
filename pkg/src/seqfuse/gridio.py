"""Raw grid file format: a small self-describing header followed by C-order data.

Layout: 4-byte magic ``SFV1``, uint32 little-endian header length, a UTF-8 JSON
header with keys ``shape`` (z,y,x), ``spacing_mm`` (z,y,x) and ``dtype``
("float32" or "uint8"), then the raw little-endian array bytes.  Round-trips
bit-exactly, which is what the dataset tests rely on.
"""

import json
import struct

import numpy as np

MAGIC = b"SFV1"

_DTYPES = {"float32": np.dtype("<f4"), "uint8": np.dtype("u1")}


class GridFormatError(Exception):
    """Raised when a grid file is malformed or inconsistent."""


def write_grid(path, grid, spacing_mm):
    """Write a 3D array (float32 or uint8/bool) with its voxel spacing."""
    grid = np.asarray(grid)
    if grid.ndim != 3:
        raise ValueError(f"expected a 3D grid, got shape {grid.shape}")
    if grid.dtype == bool:
        grid = grid.astype(np.uint8)
    if grid.dtype == np.float32:
        dtype_name = "float32"
    elif grid.dtype == np.uint8:
        dtype_name = "uint8"
    else:
        raise ValueError(f"unsupported grid dtype {grid.dtype}")
    header = json.dumps(
        {
            "shape": [int(s) for s in grid.shape],
            "spacing_mm": [float(s) for s in spacing_mm],
            "dtype": dtype_name,
        },
        sort_keys=True,
    ).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", len(header)))
        f.write(header)
        f.write(np.ascontiguousarray(grid.astype(_DTYPES[dtype_name])).tobytes())
    return path


def read_grid(path):
    """Read a grid file; returns (array, spacing_mm tuple)."""
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != MAGIC:
            raise GridFormatError(f"{path}: bad magic {magic!r}")
        (hlen,) = struct.unpack("<I", f.read(4))
        try:
            header = json.loads(f.read(hlen).decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as e:
            raise GridFormatError(f"{path}: unreadable header: {e}") from e
        for key in ("shape", "spacing_mm", "dtype"):
            if key not in header:
                raise GridFormatError(f"{path}: header missing {key!r}")
        if header["dtype"] not in _DTYPES:
            raise GridFormatError(f"{path}: unknown dtype {header['dtype']!r}")
        shape = tuple(int(s) for s in header["shape"])
        dtype = _DTYPES[header["dtype"]]
        n_bytes = int(np.prod(shape)) * dtype.itemsize
        raw = f.read(n_bytes)
        if len(raw) != n_bytes:
            raise GridFormatError(f"{path}: truncated data ({len(raw)} of {n_bytes} bytes)")
        grid = np.frombuffer(raw, dtype=dtype).reshape(shape)
    if header["dtype"] == "uint8":
        return grid.copy(), tuple(float(s) for s in header["spacing_mm"])
    return grid.copy(), tuple(float(s) for s in header["spacing_mm"])


def read_nifti(path):
    """Optional import path for real data; requires the nibabel package."""
    try:
        import nibabel as nib
    except ImportError as e:
        raise ImportError("reading NIfTI files requires the optional nibabel package") from e
    img = nib.load(str(path))
    data = np.asarray(img.dataobj, dtype=np.float32)
    zooms = img.header.get_zooms()[:3]
    # NIfTI is (x,y,z); internal convention is (z,y,x).
    return np.transpose(data, (2, 1, 0)).copy(), (float(zooms[2]), float(zooms[1]), float(zooms[0]))
