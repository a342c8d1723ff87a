"""Single-file, uncompressed NIfTI-1 (``n+1``) reading and writing.

Only uint8, int16 and float32 payloads are accepted; anything else is an
error rather than a guess.
"""
from __future__ import annotations

import os
import struct

import numpy as np

from .volume import INTENSITY, LABELS, Volume

HEADER_SIZE = 348
VOX_OFFSET = 352
MAGIC_SINGLE = b"n+1\x00"
MAGIC_PAIR = b"ni1\x00"

DT_UINT8, DT_INT16, DT_FLOAT32 = 2, 4, 16
_DTYPES = {DT_UINT8: np.dtype("u1"), DT_INT16: np.dtype("i2"), DT_FLOAT32: np.dtype("f4")}
_BITPIX = {DT_UINT8: 8, DT_INT16: 16, DT_FLOAT32: 32}


class NiftiError(ValueError):
    """Malformed or unsupported NIfTI file; ``field`` names the header field at fault."""

    def __init__(self, message: str, field: str):
        super().__init__(f"{field}: {message}")
        self.field = field


class UnsupportedFormatError(NiftiError):
    pass


class UnsupportedDatatypeError(NiftiError):
    pass


class TruncatedFileError(NiftiError):
    pass


def _parse_header(raw: bytes) -> dict:
    if len(raw) < VOX_OFFSET:
        raise TruncatedFileError(f"file has {len(raw)} bytes, header needs {VOX_OFFSET}", "sizeof_hdr")
    for endian in "<>":
        if struct.unpack_from(endian + "i", raw, 0)[0] == HEADER_SIZE:
            break
    else:
        raise UnsupportedFormatError("not 348; not a NIfTI-1 header", "sizeof_hdr")
    magic = raw[344:348]
    if magic == MAGIC_PAIR:
        raise UnsupportedFormatError("two-file (.hdr/.img) NIfTI is not supported", "magic")
    if magic != MAGIC_SINGLE:
        raise UnsupportedFormatError(f"unexpected magic {magic!r}", "magic")
    u = lambda fmt, off: struct.unpack_from(endian + fmt, raw, off)  # noqa: E731
    return {
        "endian": endian,
        "dim": u("8h", 40),
        "datatype": u("h", 70)[0],
        "bitpix": u("h", 72)[0],
        "pixdim": u("8f", 76),
        "vox_offset": u("f", 108)[0],
        "scl_slope": u("f", 112)[0],
        "scl_inter": u("f", 116)[0],
        "qform_code": u("h", 252)[0],
        "sform_code": u("h", 254)[0],
        "srow": np.array(u("12f", 280), dtype=np.float64).reshape(3, 4),
        "extension": raw[348:352],
    }


def read_nifti(path, kind: str | None = None) -> Volume:
    """Read a volume; ``kind`` defaults to labels for uint8 payloads."""
    with open(path, "rb") as fh:
        raw = fh.read()
    hdr = _parse_header(raw)
    dim = hdr["dim"]
    ndim = dim[0]
    if ndim not in (3, 4) or (ndim == 4 and dim[4] != 1):
        raise UnsupportedFormatError(f"expected a 3D volume, dim={list(dim)}", "dim")
    shape = tuple(int(d) for d in dim[1:4])
    if any(d < 1 for d in shape):
        raise UnsupportedFormatError(f"non-positive size in dim={list(dim)}", "dim")
    code = hdr["datatype"]
    if code not in _DTYPES:
        raise UnsupportedDatatypeError(f"datatype code {code} (supported: uint8, int16, float32)", "datatype")
    if hdr["extension"][0] != 0:
        raise UnsupportedFormatError("header extensions are not supported", "extension")
    offset = int(hdr["vox_offset"])
    if offset < VOX_OFFSET:
        raise UnsupportedFormatError(f"vox_offset {hdr['vox_offset']} is inside the header", "vox_offset")
    dtype = _DTYPES[code].newbyteorder(hdr["endian"])
    nbytes = int(np.prod(shape)) * dtype.itemsize
    if len(raw) < offset + nbytes:
        raise TruncatedFileError(f"payload needs {nbytes} bytes at offset {offset}, file has {len(raw)}",
                                 "vox_offset")
    data = np.frombuffer(raw, dtype=dtype, count=int(np.prod(shape)), offset=offset)
    data = data.reshape(shape, order="F").astype(dtype.newbyteorder("="))
    slope, inter = hdr["scl_slope"], hdr["scl_inter"]
    # slope 0 or NaN means "unset"; the intercept is only meaningful with a slope
    if np.isfinite(slope) and slope != 0.0:
        inter = inter if np.isfinite(inter) else 0.0
        if slope != 1.0 or inter != 0.0:
            data = data.astype(np.float32) * np.float32(slope) + np.float32(inter)

    spacing = tuple(abs(float(p)) for p in hdr["pixdim"][1:4])
    if any(s == 0 for s in spacing):
        raise UnsupportedFormatError(f"zero voxel size in pixdim={list(hdr['pixdim'])}", "pixdim")
    if hdr["sform_code"] > 0:
        affine = np.eye(4)
        affine[:3] = hdr["srow"]
    else:
        affine = np.diag(list(spacing) + [1.0])
    if kind is None:
        kind = LABELS if data.dtype == np.uint8 else INTENSITY
    return Volume(np.ascontiguousarray(data), spacing, affine, kind)


def nifti_header(volume: Volume) -> bytes:
    data = volume.data
    if data.dtype == np.uint8:
        code = DT_UINT8
    elif data.dtype == np.int16:
        code = DT_INT16
    else:
        code = DT_FLOAT32
    hdr = bytearray(VOX_OFFSET)
    struct.pack_into("<i", hdr, 0, HEADER_SIZE)
    struct.pack_into("<c", hdr, 38, b"r")
    struct.pack_into("<8h", hdr, 40, 3, *data.shape, 1, 1, 1, 1)
    struct.pack_into("<hh", hdr, 70, code, _BITPIX[code])
    struct.pack_into("<8f", hdr, 76, 1.0, *volume.spacing, 0.0, 0.0, 0.0, 0.0)
    struct.pack_into("<fff", hdr, 108, float(VOX_OFFSET), 1.0, 0.0)
    struct.pack_into("<B", hdr, 123, 2)  # mm
    struct.pack_into("<hh", hdr, 252, 0, 1)
    struct.pack_into("<12f", hdr, 280, *np.asarray(volume.affine[:3], dtype=np.float64).ravel())
    hdr[344:348] = MAGIC_SINGLE
    return bytes(hdr)


def write_nifti(volume: Volume, path) -> None:
    data = volume.data
    if data.dtype not in (np.uint8, np.int16):
        data = data.astype("<f4")
    else:
        data = data.astype(data.dtype.newbyteorder("<"))
    payload = data.tobytes(order="F")
    tmp = f"{os.fspath(path)}.part"
    with open(tmp, "wb") as fh:
        fh.write(nifti_header(volume))
        fh.write(payload)
    os.replace(tmp, path)
