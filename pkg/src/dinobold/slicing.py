"""Axial multi-slice windowing and model-resolution resampling.

A window holds K consecutive axial slices centered on the prediction index,
each replicated to 3 channels and bilinearly resampled to the model
resolution.  Out-of-range positions are zero-filled and flagged invalid so
downstream losses can mask them.  The inverse path (``restore_output``)
maps a model-resolution prediction back to the original in-plane grid.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .volume_io import Volume3D

__all__ = [
    "ValidMask",
    "SliceWindow",
    "slice_validity",
    "extract_window",
    "resample_slice",
    "restore_output",
    "assemble_volume",
]


@dataclass(frozen=True)
class ValidMask:
    """Validity bookkeeping for one window: which slices are real and which
    in-plane voxels count, plus the original in-plane shape for restoration."""

    slice_valid: np.ndarray  # (K,) bool
    in_plane_mask: np.ndarray  # (S, S) float32, values in {0, 1}
    original_shape: tuple[int, int]


@dataclass(frozen=True)
class SliceWindow:
    """K replicated-channel slices at model resolution, shape (K, 3, S, S)."""

    slices: np.ndarray
    center_index: int
    mask: ValidMask

    @property
    def slice_valid(self) -> np.ndarray:
        return self.mask.slice_valid

    @property
    def in_plane_mask(self) -> np.ndarray:
        return self.mask.in_plane_mask


def _axis_weights(n_in: int, n_out: int):
    # Half-pixel-center convention with edge clamping (replicate border).
    coords = (np.arange(n_out, dtype=np.float64) + 0.5) * (n_in / n_out) - 0.5
    lo = np.floor(coords).astype(np.int64)
    frac = coords - lo
    hi = np.clip(lo + 1, 0, n_in - 1)
    lo = np.clip(lo, 0, n_in - 1)
    return lo, hi, frac


def _resample_2d(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    h, w = img.shape
    if (h, w) == (out_h, out_w):
        return img.astype(np.float32, copy=True)
    lo_r, hi_r, fr = _axis_weights(h, out_h)
    lo_c, hi_c, fc = _axis_weights(w, out_w)
    rows = img.astype(np.float64)
    rows = rows[lo_r] * (1.0 - fr)[:, None] + rows[hi_r] * fr[:, None]
    out = rows[:, lo_c] * (1.0 - fc)[None, :] + rows[:, hi_c] * fc[None, :]
    return out.astype(np.float32)


def resample_slice(img: np.ndarray, target: int) -> np.ndarray:
    """Bilinearly resample a 2D slice to (target, target).

    Exact identity (bit-for-bit) when the input is already target-sized;
    constants are preserved everywhere.
    """
    if img.ndim != 2:
        raise ValueError(f"expected a 2D slice, got shape {img.shape}")
    return _resample_2d(img, target, target)


def slice_validity(z: int, k: int, depth: int) -> np.ndarray:
    """Validity flags for the K window positions centered on ``z``."""
    if k < 1 or k % 2 == 0:
        raise ValueError(f"window size must be odd and >= 1, got {k}")
    half = (k - 1) // 2
    return np.array([0 <= z - half + i < depth for i in range(k)], dtype=bool)


def extract_window(
    volume: Volume3D,
    z: int,
    k: int,
    model_size: int = 224,
    in_plane_mask: np.ndarray | None = None,
) -> SliceWindow:
    """Build the K-slice window centered on axial index ``z``.

    Positions outside [0, Z) are zero-filled with ``slice_valid`` False.
    ``in_plane_mask`` is an optional (H, W) binary brain mask; it is
    resampled to model resolution and thresholded at 0.5.  By default the
    whole resampled plane is valid.
    """
    h, w, depth = volume.shape
    valid = slice_validity(z, k, depth)
    if not 0 <= z < depth:
        raise ValueError(f"slice index {z} outside [0, {depth})")

    slices = np.zeros((k, 3, model_size, model_size), dtype=np.float32)
    half = (k - 1) // 2
    for i in range(k):
        src = z - half + i
        if valid[i]:
            plane = resample_slice(volume.data[:, :, src], model_size)
            slices[i] = plane[None, :, :]

    if in_plane_mask is None:
        plane_mask = np.ones((model_size, model_size), dtype=np.float32)
    else:
        if in_plane_mask.shape != (h, w):
            raise ValueError(f"in-plane mask shape {in_plane_mask.shape} != volume plane {(h, w)}")
        resampled = _resample_2d(in_plane_mask.astype(np.float32), model_size, model_size)
        plane_mask = (resampled >= 0.5).astype(np.float32)

    return SliceWindow(slices, z, ValidMask(valid, plane_mask, (h, w)))


def restore_output(pred: np.ndarray, mask: ValidMask) -> np.ndarray:
    """Resample a model-resolution prediction back to the original in-plane
    shape, zeroing voxels outside the valid region."""
    h, w = mask.original_shape
    out = _resample_2d(pred, h, w)
    if not np.all(mask.in_plane_mask == 1.0):
        valid = _resample_2d(mask.in_plane_mask, h, w) >= 0.5
        out = out * valid.astype(np.float32)
    return out


def assemble_volume(
    per_slice_preds: Sequence[np.ndarray],
    voxel_size: tuple[float, float, float] = (1.0, 1.0, 1.0),
    expected_z: int | None = None,
) -> Volume3D:
    """Stack Z restored (H, W) predictions into an (H, W, Z) volume."""
    if expected_z is not None and len(per_slice_preds) != expected_z:
        raise ValueError(f"expected {expected_z} slices, got {len(per_slice_preds)}")
    if not per_slice_preds:
        raise ValueError("no slices to assemble")
    shapes = {p.shape for p in per_slice_preds}
    if len(shapes) != 1:
        raise ValueError(f"inconsistent slice shapes: {sorted(shapes)}")
    data = np.stack(per_slice_preds, axis=2).astype(np.float32)
    return Volume3D(data, voxel_size)
