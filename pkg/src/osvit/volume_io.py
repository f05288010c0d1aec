"""Bit-exact volume containers and clinical metadata parsing.

Two on-disk volume formats are supported. RVOL is this project's canonical
interchange container (little-endian)::

    offset  size  field
    0       4     magic "RVOL"
    4       1     version, currently 1
    5       1     dtype code: 0 = uint8, 1 = float32
    6       2     reserved, zero
    8       4     depth   (u32)
    12      4     height  (u32)
    16      4     width   (u32)
    20      -     raw voxels, flat index (d*H + h)*W + w

NIfTI-1 support is a read-only subset (uncompressed single-file ``.nii``,
3-D, common datatypes) so real scan data can be ingested; RVOL is what the
rest of the pipeline produces and consumes.
"""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass
from enum import Enum
from pathlib import Path

import numpy as np

from .errors import FormatError

RVOL_MAGIC = b"RVOL"
RVOL_VERSION = 1
RVOL_HEADER_SIZE = 20

_RVOL_DTYPES = {0: np.dtype(np.uint8), 1: np.dtype("<f4")}
_RVOL_CODES = {np.dtype(np.uint8): 0, np.dtype(np.float32): 1}


class UnsupportedVolumeError(FormatError):
    """Valid file, but uses a feature outside the supported subset."""


class Resection(Enum):
    GTR = "GTR"
    STR = "STR"
    NA = "NA"


@dataclass(frozen=True)
class SubjectRecord:
    subject_id: str
    age: float
    survival_days: int | None
    resection: Resection


class Volume:
    """A 3-D scalar grid, C-order (depth, height, width), uint8 or float32."""

    __slots__ = ("data",)

    def __init__(self, data: np.ndarray):
        data = np.ascontiguousarray(data)
        if data.ndim != 3:
            raise ValueError(f"Volume requires 3-D data, got {data.ndim}-D")
        if data.dtype not in (np.uint8, np.float32):
            raise ValueError(f"Volume dtype must be uint8 or float32, got {data.dtype}")
        self.data = data

    @property
    def depth(self):
        return self.data.shape[0]

    @property
    def height(self):
        return self.data.shape[1]

    @property
    def width(self):
        return self.data.shape[2]

    @property
    def dims(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def astype_f32(self) -> "Volume":
        if self.data.dtype == np.float32:
            return self
        return Volume(self.data.astype(np.float32))

    def __eq__(self, other):
        return (isinstance(other, Volume) and self.dims == other.dims
                and self.dtype == other.dtype and np.array_equal(self.data, other.data))

    def __repr__(self):
        return f"Volume(dims={self.dims}, dtype={self.data.dtype.name})"


def write_rvol(volume: Volume, path) -> None:
    code = _RVOL_CODES[volume.dtype]
    header = struct.pack("<4sBBHIII", RVOL_MAGIC, RVOL_VERSION, code, 0,
                         volume.depth, volume.height, volume.width)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(volume.data.astype(volume.dtype.newbyteorder("<"), copy=False).tobytes())


def read_rvol(path) -> Volume:
    raw = Path(path).read_bytes()
    if len(raw) < RVOL_HEADER_SIZE:
        raise FormatError(f"{path}: file too short for RVOL header "
                          f"({len(raw)} bytes, need {RVOL_HEADER_SIZE})")
    magic, version, code, _reserved, depth, height, width = struct.unpack_from("<4sBBHIII", raw, 0)
    if magic != RVOL_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r} at offset 0")
    if version != RVOL_VERSION:
        raise FormatError(f"{path}: unsupported RVOL version {version} at offset 4")
    if code not in _RVOL_DTYPES:
        raise FormatError(f"{path}: unknown dtype code {code} at offset 5")
    dtype = _RVOL_DTYPES[code]
    expected = depth * height * width * dtype.itemsize
    actual = len(raw) - RVOL_HEADER_SIZE
    if actual != expected:
        raise FormatError(f"{path}: data length mismatch, expected {expected} bytes "
                          f"for dims {(depth, height, width)}, got {actual}")
    data = np.frombuffer(raw, dtype=dtype, count=depth * height * width,
                         offset=RVOL_HEADER_SIZE)
    return Volume(data.reshape(depth, height, width).astype(dtype.newbyteorder("="), copy=True))


# NIfTI-1 header field offsets (348-byte header)
_NIFTI_HEADER_SIZE = 348
_NIFTI_DTYPES = {2: "u1", 4: "i2", 16: "f4", 512: "u2"}


def read_nifti_subset(path) -> Volume:
    """Read an uncompressed 3-D single-file NIfTI-1 volume as float32.

    The NIfTI fastest-varying axis maps to width, the slowest to depth, so
    the raw buffer carries over unchanged: (nx, ny, nz) -> (depth=nz,
    height=ny, width=nx). ``scl_slope``/``scl_inter`` are applied when the
    slope is nonzero.
    """
    raw = Path(path).read_bytes()
    if raw[:2] == b"\x1f\x8b":
        raise UnsupportedVolumeError(f"{path}: gzip-compressed input is not supported; "
                                     "decompress to a plain .nii first")
    if len(raw) < _NIFTI_HEADER_SIZE:
        raise FormatError(f"{path}: file too short for a NIfTI-1 header "
                          f"({len(raw)} bytes, need {_NIFTI_HEADER_SIZE})")
    if struct.unpack_from("<i", raw, 0)[0] == _NIFTI_HEADER_SIZE:
        bo = "<"
    elif struct.unpack_from(">i", raw, 0)[0] == _NIFTI_HEADER_SIZE:
        bo = ">"
    else:
        raise FormatError(f"{path}: sizeof_hdr is not 348; not a NIfTI-1 file")
    magic = struct.unpack_from("4s", raw, 344)[0]
    if magic != b"n+1\x00":
        raise FormatError(f"{path}: bad magic {magic!r}; only single-file .nii "
                          "(magic 'n+1') is supported")
    dim = struct.unpack_from(bo + "8h", raw, 40)
    datatype = struct.unpack_from(bo + "h", raw, 70)[0]
    vox_offset = int(struct.unpack_from(bo + "f", raw, 108)[0])
    scl_slope = struct.unpack_from(bo + "f", raw, 112)[0]
    scl_inter = struct.unpack_from(bo + "f", raw, 116)[0]

    ndim = dim[0]
    if ndim < 3 or any(d > 1 for d in dim[4:1 + max(ndim, 3)]):
        raise UnsupportedVolumeError(f"{path}: field dim describes a {ndim}-D image "
                                     f"{tuple(dim[1:1 + ndim])}; only 3-D volumes are supported")
    if datatype not in _NIFTI_DTYPES:
        raise UnsupportedVolumeError(f"{path}: field datatype has unsupported code {datatype}; "
                                     "supported: uint8 (2), int16 (4), float32 (16), uint16 (512)")
    nx, ny, nz = dim[1], dim[2], dim[3]
    np_dtype = np.dtype(bo + _NIFTI_DTYPES[datatype])
    if vox_offset < _NIFTI_HEADER_SIZE:
        raise FormatError(f"{path}: vox_offset {vox_offset} points inside the header")
    n_vox = nx * ny * nz
    if len(raw) - vox_offset < n_vox * np_dtype.itemsize:
        raise FormatError(f"{path}: data truncated, expected {n_vox * np_dtype.itemsize} bytes "
                          f"from offset {vox_offset}, got {len(raw) - vox_offset}")
    voxels = np.frombuffer(raw, dtype=np_dtype, count=n_vox, offset=vox_offset)
    data = voxels.reshape(nz, ny, nx).astype(np.float32)
    if scl_slope != 0.0:
        data = data * np.float32(scl_slope) + np.float32(scl_inter)
    return Volume(data)


_CSV_COLUMNS = ("subject_id", "age", "survival_days", "extent_of_resection")


def read_metadata_csv(path) -> list[SubjectRecord]:
    """Parse the clinical metadata table; strict, no silent coercion."""
    records = []
    seen = set()
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        missing = [c for c in _CSV_COLUMNS if c not in (reader.fieldnames or [])]
        if missing:
            raise FormatError(f"{path}: missing column(s) {', '.join(missing)}")
        for line, row in enumerate(reader, start=2):
            sid = (row["subject_id"] or "").strip()
            if not sid:
                raise FormatError(f"{path}: empty subject_id, line {line}")
            if sid in seen:
                raise FormatError(f"{path}: duplicate subject_id {sid!r}, line {line}")
            seen.add(sid)
            try:
                age = float(row["age"])
            except (TypeError, ValueError):
                raise FormatError(f"{path}: non-numeric age {row['age']!r}, line {line}") from None
            if not age > 0:
                raise FormatError(f"{path}: age must be > 0, got {age}, line {line}")
            days_text = (row["survival_days"] or "").strip()
            if days_text:
                try:
                    days = int(days_text)
                except ValueError:
                    raise FormatError(f"{path}: non-integer survival_days {days_text!r}, "
                                      f"line {line}") from None
                if days < 0:
                    raise FormatError(f"{path}: negative survival_days {days}, line {line}")
            else:
                days = None
            res_text = (row["extent_of_resection"] or "").strip().upper()
            try:
                resection = Resection(res_text)
            except ValueError:
                raise FormatError(f"{path}: unknown extent_of_resection "
                                  f"{row['extent_of_resection']!r}, line {line}") from None
            records.append(SubjectRecord(sid, age, days, resection))
    return records


def write_metadata_csv(records, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(_CSV_COLUMNS)
        for r in records:
            days = "" if r.survival_days is None else r.survival_days
            writer.writerow([r.subject_id, f"{r.age:g}", days, r.resection.value])
