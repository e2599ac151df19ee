"""Minimal NIfTI-1 reader/writer plus the toolkit's raw volume format.

Volumes are exchanged in canonical D x H x W orientation (z slowest). NIfTI-1
stores voxels x-fastest, which is byte-identical to a C-order (nz, ny, nx) array,
so no axis shuffling is needed beyond the reshape.

Raw format: ``<stem>.json`` header ``{"dims": [D, H, W], "dtype": "float32",
"order": "C"}`` with the payload in ``<stem>.bin`` as little-endian float32,
row-major.
"""

from __future__ import annotations

import gzip
import json
import struct
from pathlib import Path

import numpy as np

from .errors import FormatError

_HDR_SIZE = 348

_DATATYPES = {
    2: np.dtype(np.uint8),
    4: np.dtype(np.int16),
    8: np.dtype(np.int32),
    16: np.dtype(np.float32),
    64: np.dtype(np.float64),
    256: np.dtype(np.int8),
    512: np.dtype(np.uint16),
    768: np.dtype(np.uint32),
}
_BITPIX = {2: 8, 4: 16, 8: 32, 16: 32, 64: 64, 256: 8, 512: 16, 768: 32}


def _open_maybe_gzip(path: Path, mode: str):
    if path.suffix == ".gz":
        return gzip.open(path, mode)
    return open(path, mode)


def read_nifti(path) -> np.ndarray:
    """Read a 3D NIfTI-1 volume (.nii or .nii.gz) as a D x H x W float64 array."""
    path = Path(path)
    with _open_maybe_gzip(path, "rb") as fh:
        header = fh.read(_HDR_SIZE)
        if len(header) < _HDR_SIZE:
            raise FormatError(f"{path}: header truncated ({len(header)} bytes)")
        for endian in ("<", ">"):
            (sizeof_hdr,) = struct.unpack(endian + "i", header[:4])
            if sizeof_hdr == _HDR_SIZE:
                break
        else:
            raise FormatError(f"{path}: not a NIfTI-1 file (bad sizeof_hdr)")
        magic = header[344:348]
        if magic[:3] not in (b"n+1", b"ni1"):
            raise FormatError(f"{path}: bad NIfTI magic {magic!r}")
        dim = struct.unpack(endian + "8h", header[40:56])
        ndim = dim[0]
        if not 1 <= ndim <= 7:
            raise FormatError(f"{path}: invalid dim[0] = {ndim}")
        sizes = [d for d in dim[1 : 1 + ndim]]
        # tolerate trailing singleton dims (e.g. 4D with one frame)
        while len(sizes) > 3 and sizes[-1] == 1:
            sizes.pop()
        if len(sizes) != 3 or any(s < 1 for s in sizes):
            raise FormatError(f"{path}: expected a 3D volume, got dims {sizes}")
        nx, ny, nz = sizes
        (datatype,) = struct.unpack(endian + "h", header[70:72])
        if datatype not in _DATATYPES:
            raise FormatError(f"{path}: unsupported NIfTI datatype code {datatype}")
        dtype = _DATATYPES[datatype].newbyteorder(endian)
        (vox_offset,) = struct.unpack(endian + "f", header[108:112])
        scl_slope, scl_inter = struct.unpack(endian + "2f", header[112:120])
        offset = int(vox_offset) if magic[:3] == b"n+1" else 0
        if magic[:3] == b"n+1":
            if offset < _HDR_SIZE:
                raise FormatError(f"{path}: invalid vox_offset {vox_offset}")
            fh.read(offset - _HDR_SIZE)
        else:
            raise FormatError(f"{path}: detached .hdr/.img pairs are not supported")
        count = nx * ny * nz
        payload = fh.read(count * dtype.itemsize)
        if len(payload) < count * dtype.itemsize:
            raise FormatError(
                f"{path}: payload truncated ({len(payload)} of {count * dtype.itemsize} bytes)"
            )
    data = np.frombuffer(payload, dtype=dtype, count=count).astype(np.float64)
    if scl_slope not in (0.0, 1.0) or (scl_slope != 0.0 and scl_inter != 0.0):
        data = data * scl_slope + scl_inter
    # x-fastest payload == C-order (nz, ny, nx)
    return data.reshape((nz, ny, nx))


def write_nifti(path, volume: np.ndarray) -> Path:
    """Write a D x H x W array as single-file NIfTI-1 (float32, little-endian)."""
    path = Path(path)
    arr = np.ascontiguousarray(np.asarray(volume, dtype=np.float32))
    if arr.ndim != 3:
        raise FormatError(f"expected a 3D volume, got shape {arr.shape}")
    nz, ny, nx = arr.shape
    header = bytearray(_HDR_SIZE)
    struct.pack_into("<i", header, 0, _HDR_SIZE)
    header[38] = ord("r")  # regular
    struct.pack_into("<8h", header, 40, 3, nx, ny, nz, 1, 1, 1, 1)
    struct.pack_into("<h", header, 70, 16)  # float32
    struct.pack_into("<h", header, 72, _BITPIX[16])
    struct.pack_into("<8f", header, 76, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0)
    struct.pack_into("<f", header, 108, 352.0)  # vox_offset
    struct.pack_into("<2f", header, 112, 1.0, 0.0)  # scl_slope, scl_inter
    header[344:348] = b"n+1\x00"
    path.parent.mkdir(parents=True, exist_ok=True)
    with _open_maybe_gzip(path, "wb") as fh:
        fh.write(bytes(header))
        fh.write(b"\x00\x00\x00\x00")  # no extensions
        fh.write(arr.tobytes())  # C order == x fastest
    return path


def _raw_paths(json_path: Path):
    return json_path, json_path.with_suffix(".bin")


def write_raw_volume(json_path, volume: np.ndarray) -> Path:
    """Write the toolkit raw format: JSON header + little-endian float32 payload."""
    json_path = Path(json_path)
    arr = np.ascontiguousarray(np.asarray(volume, dtype="<f4"))
    if arr.ndim != 3:
        raise FormatError(f"expected a 3D volume, got shape {arr.shape}")
    header_path, payload_path = _raw_paths(json_path)
    header_path.parent.mkdir(parents=True, exist_ok=True)
    header = {"dims": list(arr.shape), "dtype": "float32", "order": "C"}
    header_path.write_text(json.dumps(header))
    payload_path.write_bytes(arr.tobytes())
    return header_path


def read_raw_volume(json_path) -> np.ndarray:
    """Read the toolkit raw format back as a D x H x W float64 array."""
    header_path, payload_path = _raw_paths(Path(json_path))
    try:
        header = json.loads(header_path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise FormatError(f"{header_path}: malformed raw header: {exc}") from exc
    dims = header.get("dims")
    if (
        not isinstance(dims, list)
        or len(dims) != 3
        or any(not isinstance(d, int) or d < 1 for d in dims)
    ):
        raise FormatError(f"{header_path}: invalid dims {dims!r}")
    if header.get("dtype") != "float32" or header.get("order") != "C":
        raise FormatError(f"{header_path}: unsupported dtype/order {header!r}")
    expected = dims[0] * dims[1] * dims[2] * 4
    try:
        payload = payload_path.read_bytes()
    except OSError as exc:
        raise FormatError(f"{payload_path}: missing raw payload: {exc}") from exc
    if len(payload) < expected:
        raise FormatError(f"{payload_path}: payload truncated ({len(payload)} of {expected} bytes)")
    return np.frombuffer(payload, dtype="<f4", count=dims[0] * dims[1] * dims[2]).astype(
        np.float64
    ).reshape(dims)


def load_volume_array(path) -> np.ndarray:
    """Dispatch on suffix: .nii/.nii.gz via NIfTI, .json via the raw format."""
    path = Path(path)
    name = path.name.lower()
    if name.endswith(".nii") or name.endswith(".nii.gz"):
        return read_nifti(path)
    if name.endswith(".json"):
        return read_raw_volume(path)
    raise FormatError(f"{path}: unknown volume format (expected .nii, .nii.gz or .json)")
