"""Evaluation metrics over restored full-resolution volumes.

PSNR measures voxel-wise fidelity; MS-SSIM captures structural and
perceptual consistency.  Volume MS-SSIM is the mean of per-axial-slice 2D
scores (the generator itself is slice-based).  Both use data range 1.0,
matching the normalized volumes.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from .data import Subject
from .losses import auto_scale_count, ms_ssim_index
from .volume_io import Volume3D

__all__ = [
    "PSNR_IDENTICAL",
    "SubjectScore",
    "EvalResult",
    "psnr",
    "ms_ssim_metric",
    "evaluate_dataset",
    "write_metrics_csv",
]

# Distinguished PSNR for bit-identical volumes (MSE would be 0).
PSNR_IDENTICAL = math.inf


@dataclass(frozen=True)
class SubjectScore:
    subject_id: str
    psnr_db: float
    ms_ssim: float


@dataclass(frozen=True)
class EvalResult:
    psnr_db: float
    ms_ssim: float
    per_subject: tuple[SubjectScore, ...]

    def summary(self) -> str:
        return (
            f"{len(self.per_subject)} subject(s): "
            f"PSNR {self.psnr_db:.2f} dB, MS-SSIM {self.ms_ssim:.4f}"
        )


def psnr(pred: Volume3D, target: Volume3D, data_range: float = 1.0) -> float:
    """10·log10(range² / MSE) over all voxels; identical volumes map to
    the :data:`PSNR_IDENTICAL` sentinel instead of raising."""
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {target.shape}")
    if data_range <= 0:
        raise ValueError(f"data range must be positive, got {data_range}")
    diff = pred.data.astype(np.float64) - target.data.astype(np.float64)
    mse = float(np.mean(diff * diff))
    if mse == 0.0:
        return PSNR_IDENTICAL
    return 10.0 * math.log10(data_range * data_range / mse)


def ms_ssim_metric(pred: Volume3D, target: Volume3D, scales: int | None = None) -> float:
    """Mean over Z of 2D multi-scale SSIM between matching axial slices."""
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {target.shape}")
    h, w, depth = pred.shape
    scales = scales or auto_scale_count(min(h, w))
    scores = []
    with torch.no_grad():
        for z in range(depth):
            a = torch.from_numpy(pred.data[:, :, z].copy())
            b = torch.from_numpy(target.data[:, :, z].copy())
            scores.append(float(ms_ssim_index(a, b, scales=scales)))
    return float(np.mean(scores))


def evaluate_dataset(
    generate: Callable[[Volume3D], Volume3D],
    subjects: Sequence[Subject],
    scales: int | None = None,
    mask_fn: Callable[[Subject], np.ndarray] | None = None,
) -> EvalResult:
    """Generate a volume per subject and score it at original resolution.

    ``generate`` maps a normalized structural volume to a predicted
    functional volume of the same shape.  ``mask_fn`` optionally restricts
    both volumes to a binary region before scoring.  Any pipeline failure
    is re-raised naming the subject.
    """
    if not subjects:
        raise ValueError("no subjects to evaluate")
    scores = []
    for subject in subjects:
        try:
            pred = generate(subject.t1)
            target = subject.target
            if mask_fn is not None:
                region = mask_fn(subject).astype(np.float32)
                pred = Volume3D(pred.data * region, pred.voxel_size)
                target = Volume3D(target.data * region, target.voxel_size)
            scores.append(
                SubjectScore(
                    subject.subject_id,
                    psnr(pred, target),
                    ms_ssim_metric(pred, target, scales=scales),
                )
            )
        except Exception as exc:
            raise RuntimeError(f"evaluation failed for subject {subject.subject_id}: {exc}") from exc
    return EvalResult(
        psnr_db=float(np.mean([s.psnr_db for s in scores])),
        ms_ssim=float(np.mean([s.ms_ssim for s in scores])),
        per_subject=tuple(scores),
    )


def write_metrics_csv(result: EvalResult, path) -> None:
    """Per-subject rows plus a trailing mean row."""
    path = Path(path)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["subject_id", "psnr_db", "ms_ssim"])
        for s in result.per_subject:
            writer.writerow([s.subject_id, f"{s.psnr_db:.6f}", f"{s.ms_ssim:.6f}"])
        writer.writerow(["mean", f"{result.psnr_db:.6f}", f"{result.ms_ssim:.6f}"])
