"""3D/4D volume I/O, intensity normalization, and mean-BOLD construction.

Two on-disk formats are supported:

* NIfTI-1 (``.nii`` / ``.nii.gz``) for interoperability with standard
  neuroimaging tools.  The codec is self-contained (little-endian,
  single-file ``n+1`` layout) and round-trips float32 data bit-exactly.
* A raw container (``.rvol``): small JSON header plus a little-endian
  float32 payload, handy as a dependency-free fixture format.

Volumes are stored and processed as 32-bit floats.  All loaders reject
non-finite voxels.
"""

from __future__ import annotations

import gzip
import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

__all__ = [
    "Volume3D",
    "Volume4D",
    "VolumeError",
    "load_volume",
    "save_volume",
    "normalize_volume",
    "compute_mean_bold",
]


class VolumeError(ValueError):
    """Unreadable, unsupported, or non-finite volume data."""


@dataclass(frozen=True)
class Volume3D:
    """Spatial intensity grid of shape (H, W, Z).

    ``intensity_range`` records the (min, max) of ``data`` after the last
    normalization step, or None if the volume was never normalized.
    """

    data: np.ndarray
    voxel_size: tuple[float, float, float] = (1.0, 1.0, 1.0)
    intensity_range: tuple[float, float] | None = None

    def __post_init__(self):
        if self.data.ndim != 3:
            raise VolumeError(f"Volume3D expects 3 axes, got shape {self.data.shape}")

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape


@dataclass(frozen=True)
class Volume4D:
    """Spatio-temporal grid of shape (H, W, Z, T); ``tr_seconds`` is metadata only."""

    data: np.ndarray
    voxel_size: tuple[float, float, float] = (1.0, 1.0, 1.0)
    tr_seconds: float = 2.0

    def __post_init__(self):
        if self.data.ndim != 4:
            raise VolumeError(f"Volume4D expects 4 axes, got shape {self.data.shape}")

    @property
    def shape(self) -> tuple[int, int, int, int]:
        return self.data.shape


# --------------------------------------------------------------------------
# NIfTI-1 codec (little-endian, single-file "n+1" layout, float32 payload)
# --------------------------------------------------------------------------

_NIFTI_HDR_SIZE = 348
_NIFTI_VOX_OFFSET = 352
_NIFTI_DTYPES = {2: np.uint8, 4: np.int16, 8: np.int32, 16: np.float32, 64: np.float64}


def _encode_nifti(data: np.ndarray, voxel_size, tr_seconds: float) -> bytes:
    ndim = data.ndim
    dim = [ndim] + list(data.shape) + [1] * (7 - ndim)
    pixdim = [1.0] + list(voxel_size) + [float(tr_seconds)] + [0.0] * (7 - 4)

    hdr = bytearray(_NIFTI_VOX_OFFSET)
    struct.pack_into("<i", hdr, 0, _NIFTI_HDR_SIZE)
    struct.pack_into("<8h", hdr, 40, *dim)
    struct.pack_into("<h", hdr, 70, 16)  # datatype: float32
    struct.pack_into("<h", hdr, 72, 32)  # bitpix
    struct.pack_into("<8f", hdr, 76, *pixdim)
    struct.pack_into("<f", hdr, 108, float(_NIFTI_VOX_OFFSET))
    struct.pack_into("<f", hdr, 112, 1.0)  # scl_slope
    struct.pack_into("<f", hdr, 116, 0.0)  # scl_inter
    struct.pack_into("<B", hdr, 123, 2 | 8)  # xyzt_units: mm + sec
    struct.pack_into("<h", hdr, 254, 1)  # sform_code: scanner
    vx, vy, vz = voxel_size
    struct.pack_into("<4f", hdr, 280, vx, 0.0, 0.0, 0.0)
    struct.pack_into("<4f", hdr, 296, 0.0, vy, 0.0, 0.0)
    struct.pack_into("<4f", hdr, 312, 0.0, 0.0, vz, 0.0)
    hdr[344:348] = b"n+1\x00"
    # NIfTI stores the first axis fastest, hence the Fortran-order payload.
    return bytes(hdr) + np.ascontiguousarray(data, dtype=np.float32).tobytes(order="F")


def _decode_nifti(raw: bytes, path: Path) -> tuple[np.ndarray, tuple, float]:
    if len(raw) < _NIFTI_VOX_OFFSET or struct.unpack_from("<i", raw, 0)[0] != _NIFTI_HDR_SIZE:
        raise VolumeError(f"{path}: not a little-endian NIfTI-1 file")
    magic = raw[344:348]
    if magic not in (b"n+1\x00", b"ni1\x00"):
        raise VolumeError(f"{path}: bad NIfTI magic {magic!r}")
    dim = struct.unpack_from("<8h", raw, 40)
    ndim = dim[0]
    if ndim not in (3, 4):
        raise VolumeError(f"{path}: expected a 3D or 4D volume, header says {ndim}D")
    shape = tuple(dim[1 : 1 + ndim])
    dt_code = struct.unpack_from("<h", raw, 70)[0]
    if dt_code not in _NIFTI_DTYPES:
        raise VolumeError(f"{path}: unsupported NIfTI datatype code {dt_code}")
    pixdim = struct.unpack_from("<8f", raw, 76)
    vox_offset = int(struct.unpack_from("<f", raw, 108)[0])
    slope, inter = struct.unpack_from("<2f", raw, 112)

    count = int(np.prod(shape))
    dtype = _NIFTI_DTYPES[dt_code]
    payload = raw[vox_offset : vox_offset + count * dtype().itemsize]
    if len(payload) < count * dtype().itemsize:
        raise VolumeError(f"{path}: truncated payload")
    data = np.frombuffer(payload, dtype=dtype).reshape(shape, order="F")
    data = data.astype(np.float32)
    if slope not in (0.0, 1.0) or inter != 0.0:
        data = data * np.float32(slope) + np.float32(inter)
    voxel_size = tuple(float(p) for p in pixdim[1:4])
    return data, voxel_size, float(pixdim[4])


# --------------------------------------------------------------------------
# Raw container codec (.rvol)
# --------------------------------------------------------------------------

_RVOL_MAGIC = b"RVOL01"


def _encode_rvol(data: np.ndarray, voxel_size, tr_seconds) -> bytes:
    header = json.dumps(
        {
            "shape": list(data.shape),
            "voxel_size": list(voxel_size),
            "tr_seconds": tr_seconds if data.ndim == 4 else None,
        }
    ).encode()
    payload = np.ascontiguousarray(data, dtype="<f4").tobytes()
    return _RVOL_MAGIC + struct.pack("<I", len(header)) + header + payload


def _decode_rvol(raw: bytes, path: Path) -> tuple[np.ndarray, tuple, float]:
    if raw[: len(_RVOL_MAGIC)] != _RVOL_MAGIC:
        raise VolumeError(f"{path}: not a raw volume container")
    (hlen,) = struct.unpack_from("<I", raw, len(_RVOL_MAGIC))
    start = len(_RVOL_MAGIC) + 4
    meta = json.loads(raw[start : start + hlen])
    data = np.frombuffer(raw[start + hlen :], dtype="<f4").reshape(meta["shape"])
    tr = meta.get("tr_seconds")
    return data.astype(np.float32), tuple(meta["voxel_size"]), (2.0 if tr is None else tr)


# --------------------------------------------------------------------------
# Public operations
# --------------------------------------------------------------------------


def _check_finite(data: np.ndarray, path: Path) -> None:
    bad = ~np.isfinite(data)
    if bad.any():
        n = int(bad.sum())
        first = tuple(int(i) for i in np.argwhere(bad)[0])
        raise VolumeError(f"{path}: {n} non-finite voxel(s), first at index {first}")


def _format_of(path: Path) -> str:
    name = path.name.lower()
    if name.endswith(".nii.gz") or name.endswith(".nii"):
        return "nifti"
    if name.endswith(".rvol"):
        return "rvol"
    raise VolumeError(f"{path}: unsupported volume format (expected .nii, .nii.gz, or .rvol)")


def load_volume(path) -> Volume3D | Volume4D:
    """Load a volume from disk, inferring dimensionality from the header.

    Returns a :class:`Volume3D` for 3-axis files and a :class:`Volume4D`
    for 4-axis files.  Raises :class:`VolumeError` for unsupported formats
    or non-finite voxels, FileNotFoundError for missing files.
    """
    path = Path(path)
    fmt = _format_of(path)
    raw = path.read_bytes()
    if path.name.lower().endswith(".gz"):
        raw = gzip.decompress(raw)
    if fmt == "nifti":
        data, voxel_size, tr = _decode_nifti(raw, path)
    else:
        data, voxel_size, tr = _decode_rvol(raw, path)
    _check_finite(data, path)
    if data.ndim == 3:
        return Volume3D(data, voxel_size)
    return Volume4D(data, voxel_size, tr_seconds=tr)


def save_volume(volume: Volume3D | Volume4D, path) -> None:
    """Write a volume to disk; format chosen by file extension."""
    path = Path(path)
    fmt = _format_of(path)
    tr = getattr(volume, "tr_seconds", 2.0)
    if fmt == "nifti":
        raw = _encode_nifti(volume.data, volume.voxel_size, tr)
    else:
        raw = _encode_rvol(volume.data, volume.voxel_size, tr)
    if path.name.lower().endswith(".gz"):
        # mtime=0 keeps byte-identical outputs across repeated runs
        raw = gzip.compress(raw, mtime=0)
    path.write_bytes(raw)


def normalize_volume(volume: Volume3D) -> Volume3D:
    """Min-max scale intensities to [0, 1].

    Degenerate cases: an all-zero volume is returned unchanged; a constant
    non-zero volume maps to all-zeros.  Idempotent on already-normalized
    input.
    """
    data = volume.data
    lo = float(data.min())
    hi = float(data.max())
    if hi == lo:
        out = np.zeros_like(data, dtype=np.float32)
        return Volume3D(out, volume.voxel_size, (0.0, 0.0))
    out = ((data - np.float32(lo)) / np.float32(hi - lo)).astype(np.float32)
    return Volume3D(out, volume.voxel_size, (0.0, 1.0))


def compute_mean_bold(series: Volume4D, discard: int = 10) -> Volume3D:
    """Average a BOLD time series over frames ``discard..T-1``.

    The first ``discard`` frames are dropped (scanner signal is unstable
    there); spatial metadata is copied from the series.
    """
    t = series.data.shape[3]
    if t <= discard:
        raise VolumeError(
            f"mean-BOLD needs more than {discard} frames to retain at least one, got T={t}"
        )
    mean = series.data[..., discard:].mean(axis=3, dtype=np.float64).astype(np.float32)
    return Volume3D(mean, series.voxel_size)
