"""Dataset plumbing: paired subjects and the CSV manifest format.

A manifest row is ``subject_id,t1_path,bold_path`` where the BOLD path
points at a 4D series.  ``load_manifest`` turns rows into ready-to-use
subjects: both volumes loaded, the series collapsed to its mean, and both
sides min-max normalized.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

from .volume_io import (
    Volume3D,
    Volume4D,
    VolumeError,
    compute_mean_bold,
    load_volume,
    normalize_volume,
)

__all__ = ["Subject", "save_manifest", "load_manifest"]


@dataclass(frozen=True)
class Subject:
    """One paired training/evaluation case, already normalized."""

    subject_id: str
    t1: Volume3D
    target: Volume3D


def save_manifest(rows: list[tuple[str, str, str]], path) -> None:
    path = Path(path)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["subject_id", "t1_path", "bold_path"])
        writer.writerows(rows)


def load_manifest(path, discard: int = 10) -> list[Subject]:
    """Load every subject listed in a manifest.

    Relative volume paths are resolved against the manifest's directory.
    Missing or broken files raise :class:`VolumeError` naming the subject.
    """
    path = Path(path)
    base = path.parent
    subjects = []
    with path.open(newline="") as fh:
        for row in csv.DictReader(fh):
            sid = row["subject_id"]
            try:
                t1 = load_volume(_resolve(base, row["t1_path"]))
                bold = load_volume(_resolve(base, row["bold_path"]))
                if isinstance(bold, Volume4D):
                    target = compute_mean_bold(bold, discard=discard)
                else:
                    target = bold  # already a mean volume
                subjects.append(
                    Subject(sid, normalize_volume(t1), normalize_volume(target))
                )
            except (OSError, VolumeError) as exc:
                raise VolumeError(f"subject {sid}: {exc}") from exc
    if not subjects:
        raise VolumeError(f"{path}: manifest lists no subjects")
    return subjects


def _resolve(base: Path, p: str) -> Path:
    candidate = Path(p)
    return candidate if candidate.is_absolute() else base / candidate
