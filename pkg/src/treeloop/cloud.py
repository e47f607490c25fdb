"""Columnar point storage and text ingestion.

Points live in parallel numpy arrays: coordinates as f64 (CRS fidelity),
height-above-ground as f32. Optional per-point intensity and rgb channels are
carried when present in the source data.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

# Small negative hag is tolerated: the ground model is a noisy estimate.
HAG_FLOOR = -0.5


class IngestError(ValueError):
    """Raised when a point file cannot produce a usable cloud."""


@dataclass
class PointCloud:
    """Columnar 3D points in a projected CRS (meters).

    ``hag`` is NaN until heights have been normalized against a ground model.
    """

    x: np.ndarray
    y: np.ndarray
    z: np.ndarray
    hag: np.ndarray = field(default=None)  # type: ignore[assignment]
    intensity: np.ndarray | None = None
    rgb: np.ndarray | None = None  # (n, 3) uint8
    rejected_rows: int = 0

    def __post_init__(self) -> None:
        self.x = np.asarray(self.x, dtype=np.float64)
        self.y = np.asarray(self.y, dtype=np.float64)
        self.z = np.asarray(self.z, dtype=np.float64)
        if self.hag is None:
            self.hag = np.full(self.x.shape, np.nan, dtype=np.float32)
        else:
            self.hag = np.asarray(self.hag, dtype=np.float32)
        if self.intensity is not None:
            self.intensity = np.asarray(self.intensity, dtype=np.float32)
        if self.rgb is not None:
            self.rgb = np.asarray(self.rgb, dtype=np.uint8).reshape(-1, 3)

    def __len__(self) -> int:
        return int(self.x.shape[0])

    @property
    def bounds(self) -> tuple[float, float, float, float, float, float]:
        """(minx, miny, minz, maxx, maxy, maxz)."""
        return (
            float(self.x.min()), float(self.y.min()), float(self.z.min()),
            float(self.x.max()), float(self.y.max()), float(self.z.max()),
        )

    def take(self, indices: np.ndarray) -> "PointCloud":
        idx = np.asarray(indices)
        return PointCloud(
            x=self.x[idx], y=self.y[idx], z=self.z[idx], hag=self.hag[idx],
            intensity=None if self.intensity is None else self.intensity[idx],
            rgb=None if self.rgb is None else self.rgb[idx],
        )

    def xyz(self) -> np.ndarray:
        return np.column_stack([self.x, self.y, self.z])


def ingest_xyz(path: str | Path, fmt: str | None = None) -> PointCloud:
    """Parse an xyz/csv text file into a PointCloud.

    Each row must carry at least 3 numeric columns: ``x y z [intensity] [r g b]``
    (4 columns = intensity, 6 = rgb, 7 = intensity + rgb). Whitespace or comma
    separated; ``#`` starts a comment. Malformed rows and rows with non-finite
    coordinates are rejected and tallied in ``rejected_rows``; row order of the
    surviving points is preserved.

    Raises:
        IngestError: unreadable file or zero valid rows.
    """
    path = Path(path)
    if fmt is None:
        fmt = "csv" if path.suffix.lower() == ".csv" else "xyz"
    if fmt not in ("xyz", "csv"):
        raise IngestError(f"unsupported format {fmt!r}")
    try:
        text = path.read_text()
    except OSError as exc:
        raise IngestError(f"cannot read {path}: {exc}") from exc

    sep = "," if fmt == "csv" else None
    rows: list[list[float]] = []
    rejected = 0
    for line in text.splitlines():
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split(sep)
        try:
            values = [float(p) for p in parts]
        except ValueError:
            rejected += 1
            continue
        if len(values) < 3 or not all(np.isfinite(values[:3])):
            rejected += 1
            continue
        rows.append(values)

    if not rows:
        raise IngestError(f"zero valid rows in {path}")

    n = len(rows)
    x = np.empty(n)
    y = np.empty(n)
    z = np.empty(n)
    width = min(len(r) for r in rows)
    has_intensity = width in (4, 7)
    has_rgb = width >= 6
    intensity = np.empty(n, dtype=np.float32) if has_intensity else None
    rgb = np.empty((n, 3), dtype=np.uint8) if has_rgb else None
    for i, row in enumerate(rows):
        x[i], y[i], z[i] = row[0], row[1], row[2]
        if has_intensity:
            intensity[i] = row[3]
        if has_rgb:
            offset = 4 if has_intensity else 3
            rgb[i] = np.clip(row[offset:offset + 3], 0, 255)

    cloud = PointCloud(x=x, y=y, z=z, intensity=intensity, rgb=rgb)
    cloud.rejected_rows = rejected
    return cloud
