"""Feature-file and manifest I/O.

This is the boundary where external feature extractors' outputs enter the
engine.  Local features travel in PATF files (plain text):

    line 1:        PATF 1
    line 2:        <image_id>
    line 3:        <descriptor_dim> <feature_count>
    lines 4..3+M:  x y a11 a12 a21 a22 d1 ... dD

Dataset splits travel in a manifest CSV with columns
``image_id,individual_id,viewpoint,role,feature_path``.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

PATF_MAGIC = "PATF"
PATF_VERSION = 1
MANIFEST_COLUMNS = ("image_id", "individual_id", "viewpoint", "role", "feature_path")
ROLES = ("database", "query")

# Columns of the per-feature frame array: center + local affine shape matrix.
FRAME_FIELDS = ("x", "y", "a11", "a12", "a21", "a22")


class PatfError(ValueError):
    """Malformed PATF feature file; message carries the offending line number."""

    def __init__(self, path, line_no: int, message: str):
        super().__init__(f"{path}:{line_no}: {message}")
        self.path = path
        self.line_no = line_no


class ManifestError(ValueError):
    """Malformed or inconsistent manifest CSV."""


@dataclass
class ImageFeatures:
    """One image's local pattern features plus identity labels.

    frames is (M, 6) float64 per FRAME_FIELDS; descriptors is (M, D) float64
    with unit-norm rows.  An empty feature set is legal but degenerate.
    """

    image_id: str
    frames: np.ndarray
    descriptors: np.ndarray
    individual_id: Optional[str] = None
    viewpoint: Optional[str] = None

    @property
    def count(self) -> int:
        return self.frames.shape[0]

    @property
    def degenerate(self) -> bool:
        return self.count == 0

    @property
    def points(self) -> np.ndarray:
        """Feature centers, shape (M, 2)."""
        return self.frames[:, :2]


@dataclass
class ManifestEntry:
    image_id: str
    individual_id: Optional[str]
    viewpoint: Optional[str]
    role: str
    feature_path: str


@dataclass
class Manifest:
    entries: list[ManifestEntry]
    base_dir: Path = field(default_factory=Path)

    def entry_path(self, entry: ManifestEntry) -> Path:
        """Feature path resolved against the manifest's directory."""
        p = Path(entry.feature_path)
        return p if p.is_absolute() else self.base_dir / p

    def with_role(self, role: str) -> list[ManifestEntry]:
        return [e for e in self.entries if e.role == role]


def _parse_floats(path, line_no: int, tokens: list, expected: int) -> np.ndarray:
    if len(tokens) != expected:
        raise PatfError(
            path, line_no, f"expected {expected} values, found {len(tokens)}"
        )
    try:
        values = np.array([float(t) for t in tokens], dtype=np.float64)
    except ValueError as exc:
        raise PatfError(path, line_no, f"unparseable number: {exc}") from None
    if not np.all(np.isfinite(values)):
        raise PatfError(path, line_no, "non-finite value")
    return values


def parse_feature_file(path) -> ImageFeatures:
    """Parse and validate a PATF file.

    Descriptors are re-normalized to unit L2 norm on the way in so downstream
    cosine computations are scale-free.  Feature order is preserved.
    """
    path = Path(path)
    with open(path, "r", encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    # Trailing blank lines are tolerated; anything else must line up exactly.
    while lines and not lines[-1].strip():
        lines.pop()

    if not lines:
        raise PatfError(path, 1, "empty file")
    header = lines[0].split()
    if len(header) != 2 or header[0] != PATF_MAGIC or header[1] != str(PATF_VERSION):
        raise PatfError(path, 1, f"bad header {lines[0]!r}, expected 'PATF 1'")
    if len(lines) < 3:
        raise PatfError(path, len(lines) + 1, "truncated file: missing id or size line")

    image_id = lines[1].strip()
    if not image_id or len(image_id.split()) != 1:
        raise PatfError(path, 2, f"image_id must be a single token, got {lines[1]!r}")

    size_tokens = lines[2].split()
    if len(size_tokens) != 2:
        raise PatfError(path, 3, "size line must be '<descriptor_dim> <count>'")
    try:
        dim, count = int(size_tokens[0]), int(size_tokens[1])
    except ValueError:
        raise PatfError(path, 3, f"non-integer size line {lines[2]!r}") from None
    if dim < 1 or count < 0:
        raise PatfError(path, 3, f"invalid dimensions dim={dim} count={count}")

    data_lines = lines[3:]
    if len(data_lines) != count:
        raise PatfError(
            path,
            4 + min(len(data_lines), count),
            f"declared {count} features but file has {len(data_lines)} data lines",
        )

    frames = np.zeros((count, 6), dtype=np.float64)
    descriptors = np.zeros((count, dim), dtype=np.float64)
    for i, line in enumerate(data_lines):
        line_no = 4 + i
        values = _parse_floats(path, line_no, line.split(), 6 + dim)
        frame = values[:6]
        det = frame[2] * frame[5] - frame[3] * frame[4]
        if abs(det) < 1e-12:
            raise PatfError(path, line_no, "singular affine frame (det = 0)")
        desc = values[6:]
        norm = float(np.linalg.norm(desc))
        if norm < 1e-12:
            raise PatfError(path, line_no, "zero-norm descriptor")
        frames[i] = frame
        descriptors[i] = desc / norm

    return ImageFeatures(image_id=image_id, frames=frames, descriptors=descriptors)


def _fmt(x) -> str:
    # repr of a Python float is the shortest decimal that round-trips exactly.
    return repr(float(x))


def write_feature_file(features: ImageFeatures, path) -> None:
    """Write a PATF file; parse_feature_file(write(f)) reproduces f exactly."""
    path = Path(path)
    descriptors = features.descriptors
    dim = descriptors.shape[1] if descriptors.ndim == 2 and descriptors.shape[1] else 1
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"{PATF_MAGIC} {PATF_VERSION}\n")
        fh.write(f"{features.image_id}\n")
        fh.write(f"{dim} {features.count}\n")
        for frame, desc in zip(features.frames, features.descriptors):
            row = [_fmt(v) for v in frame] + [_fmt(v) for v in desc]
            fh.write(" ".join(row) + "\n")


def load_manifest(path) -> Manifest:
    """Load and validate a manifest CSV.

    Rejects duplicate image ids and unknown roles; every feature_path must
    resolve to an existing file relative to the manifest's directory.
    """
    path = Path(path)
    base_dir = path.parent
    entries: list[ManifestEntry] = []
    seen: set[str] = set()
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or tuple(reader.fieldnames) != MANIFEST_COLUMNS:
            raise ManifestError(
                f"{path}: header must be {','.join(MANIFEST_COLUMNS)}, "
                f"got {reader.fieldnames}"
            )
        for row in reader:
            image_id = (row["image_id"] or "").strip()
            if not image_id:
                raise ManifestError(f"{path}: empty image_id")
            if image_id in seen:
                raise ManifestError(f"{path}: duplicate image_id {image_id!r}")
            seen.add(image_id)
            role = (row["role"] or "").strip()
            if role not in ROLES:
                raise ManifestError(
                    f"{path}: unknown role {role!r} for {image_id!r} "
                    f"(expected one of {ROLES})"
                )
            feature_path = (row["feature_path"] or "").strip()
            resolved = Path(feature_path)
            if not resolved.is_absolute():
                resolved = base_dir / resolved
            if not resolved.is_file():
                raise ManifestError(
                    f"{path}: feature file not found for {image_id!r}: {resolved}"
                )
            entries.append(
                ManifestEntry(
                    image_id=image_id,
                    individual_id=(row["individual_id"] or "").strip() or None,
                    viewpoint=(row["viewpoint"] or "").strip() or None,
                    role=role,
                    feature_path=feature_path,
                )
            )
    return Manifest(entries=entries, base_dir=base_dir)


def write_manifest(manifest: Manifest, path) -> None:
    path = Path(path)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(MANIFEST_COLUMNS)
        for e in manifest.entries:
            writer.writerow(
                [e.image_id, e.individual_id or "", e.viewpoint or "", e.role, e.feature_path]
            )


def load_entry_features(manifest: Manifest, entry: ManifestEntry) -> ImageFeatures:
    """Parse an entry's feature file and attach its manifest labels."""
    features = parse_feature_file(manifest.entry_path(entry))
    return replace(
        features, individual_id=entry.individual_id, viewpoint=entry.viewpoint
    )
