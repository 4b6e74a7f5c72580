"""Paired phantom volumes with a known analytic structural-to-functional map.

A phantom "T1" is a normalized sum of compact smooth ellipsoid blobs.  The
matching "BOLD" series applies a smoothed nonlinear intensity map

    base = gaussian_smooth(a*t1 + b*t1^2, radius) * support

(support = the blob union, so both modalities share it), then adds a
decaying transient to the first 10 frames and optional per-frame noise.
The nonlinearity and smoothing make the identity map suboptimal, so
cross-slice context and skip features have measurable value, while the
construction stays deterministic per seed.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

from .data import save_manifest
from .volume_io import Volume3D, Volume4D, normalize_volume, save_volume

__all__ = ["PhantomSpec", "generate_pair", "generate_dataset", "build_manifest"]

_TRANSIENT_FRAMES = 10  # matches the mean-BOLD discard default


@dataclass(frozen=True)
class PhantomSpec:
    shape: tuple[int, int, int] = (32, 32, 12)
    t: int = 16
    n_blobs: int = 4
    noise_sigma: float = 0.01
    seed: int = 0
    map_linear: float = 0.7  # a
    map_quadratic: float = 0.3  # b
    smooth_radius: float = 1.0  # gaussian sigma, voxels
    transient_amp: float = 0.5

    def __post_init__(self):
        if len(self.shape) != 3 or any(s < 4 for s in self.shape):
            raise ValueError(f"phantom shape must be 3D with sides >= 4, got {self.shape}")
        if self.t < 1 or self.n_blobs < 1:
            raise ValueError("need at least one frame and one blob")


def _blob_sum(spec: PhantomSpec, rng: np.random.Generator) -> np.ndarray:
    h, w, z = spec.shape
    grid = np.stack(
        np.meshgrid(np.arange(h), np.arange(w), np.arange(z), indexing="ij"), axis=-1
    ).astype(np.float64)
    out = np.zeros(spec.shape, dtype=np.float64)
    dims = np.array(spec.shape, dtype=np.float64)
    for _ in range(spec.n_blobs):
        center = rng.uniform(0.25, 0.75, size=3) * dims
        semi_axes = rng.uniform(0.15, 0.35, size=3) * dims
        amp = rng.uniform(0.5, 1.0)
        d2 = np.sum(((grid - center) / semi_axes) ** 2, axis=-1)
        # compactly supported C1 bump: zero outside the ellipsoid
        out += amp * np.clip(1.0 - d2, 0.0, None) ** 2
    return out


def bold_base_map(t1: np.ndarray, spec: PhantomSpec) -> np.ndarray:
    """Noise-free functional map for a normalized t1 grid."""
    support = (t1 > 0).astype(np.float64)
    mapped = spec.map_linear * t1.astype(np.float64) + spec.map_quadratic * t1.astype(np.float64) ** 2
    return gaussian_filter(mapped, sigma=spec.smooth_radius) * support


def generate_pair(spec: PhantomSpec) -> tuple[Volume3D, Volume4D]:
    """Deterministically generate one (t1, bold_series) phantom pair.

    Frames before the mean-BOLD discard point carry an extra decaying
    offset, so averaging without discarding is visibly wrong.
    """
    rng = np.random.default_rng(spec.seed)
    t1 = normalize_volume(Volume3D(_blob_sum(spec, rng).astype(np.float32)))
    base = bold_base_map(t1.data, spec)
    support = (t1.data > 0).astype(np.float64)

    frames = np.empty(spec.shape + (spec.t,), dtype=np.float32)
    for t in range(spec.t):
        frame = base.copy()
        if t < _TRANSIENT_FRAMES:
            frame = frame + spec.transient_amp * np.exp(-t / 3.0) * support
        if spec.noise_sigma > 0:
            frame = frame + rng.normal(0.0, spec.noise_sigma, spec.shape) * support
        frames[..., t] = frame.astype(np.float32)
    return t1, Volume4D(frames, t1.voxel_size, tr_seconds=2.0)


def generate_dataset(
    n_subjects: int, spec: PhantomSpec, out_dir, volume_format: str = ".nii.gz"
) -> Path:
    """Write ``n_subjects`` phantom pairs plus a manifest; returns its path.

    Subject i uses seed ``spec.seed + i`` so the dataset is reproducible
    as a whole while subjects differ.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    pairs = []
    for i in range(n_subjects):
        sid = f"sub-{i:03d}"
        subject_spec = PhantomSpec(**{**spec.__dict__, "seed": spec.seed + i})
        t1, bold = generate_pair(subject_spec)
        pairs.append((sid, t1, bold))
    return build_manifest(pairs, out_dir, volume_format=volume_format)


def build_manifest(
    pairs: list[tuple[str, Volume3D, Volume4D]], out_dir, volume_format: str = ".nii.gz"
) -> Path:
    """Persist paired volumes and write the subject manifest CSV."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rows = []
    for sid, t1, bold in pairs:
        t1_name = f"{sid}_t1{volume_format}"
        bold_name = f"{sid}_bold{volume_format}"
        save_volume(t1, out_dir / t1_name)
        save_volume(bold, out_dir / bold_name)
        rows.append((sid, t1_name, bold_name))
    manifest = out_dir / "manifest.csv"
    save_manifest(rows, manifest)
    return manifest
