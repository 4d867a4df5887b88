"""LiDAR point cloud ingestion, cropping and downsampling.

Coordinates follow the velodyne sensor frame: x forward, y left, z up.
"""
from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import FormatError

KITTI_RECORD = struct.Struct("<4f")


@dataclass(frozen=True)
class PointCloud:
    """N points with positions ``xyz`` (N, 3) and ``intensity`` (N,)."""

    xyz: np.ndarray
    intensity: np.ndarray

    def __post_init__(self):
        xyz = np.array(self.xyz, dtype=np.float64).reshape(-1, 3)
        intensity = np.array(self.intensity, dtype=np.float64).reshape(-1)
        if len(intensity) != len(xyz):
            raise ValueError(f"{len(xyz)} positions but {len(intensity)} intensities")
        xyz.setflags(write=False)
        intensity.setflags(write=False)
        object.__setattr__(self, "xyz", xyz)
        object.__setattr__(self, "intensity", intensity)

    @classmethod
    def empty(cls) -> "PointCloud":
        return cls(np.zeros((0, 3)), np.zeros(0))

    def __len__(self) -> int:
        return len(self.xyz)

    def subset(self, indices) -> "PointCloud":
        indices = np.asarray(indices, dtype=np.int64)
        return PointCloud(self.xyz[indices], self.intensity[indices])

    def translated(self, offset) -> "PointCloud":
        return PointCloud(self.xyz + np.asarray(offset, dtype=np.float64), self.intensity)

    def concat(self, other: "PointCloud") -> "PointCloud":
        return PointCloud(np.vstack([self.xyz, other.xyz]),
                          np.concatenate([self.intensity, other.intensity]))


@dataclass(frozen=True)
class VoxelDownsampleResult:
    cloud: PointCloud
    kept_indices: np.ndarray


def parse_kitti_bin(data: bytes) -> PointCloud:
    """Decode a KITTI velodyne ``.bin`` payload (float32 x, y, z, intensity records)."""
    if len(data) % KITTI_RECORD.size:
        whole = len(data) - len(data) % KITTI_RECORD.size
        raise FormatError(
            f"truncated record at byte offset {whole}: length {len(data)} "
            f"is not a multiple of {KITTI_RECORD.size}")
    records = np.frombuffer(data, dtype="<f4").reshape(-1, 4).astype(np.float64)
    bad = ~np.isfinite(records).all(axis=1)
    if bad.any():
        raise FormatError(f"non-finite value in record {int(np.argmax(bad))}")
    return PointCloud(records[:, :3], records[:, 3])


def to_kitti_bin(cloud: PointCloud) -> bytes:
    records = np.column_stack([cloud.xyz, cloud.intensity]).astype("<f4")
    return records.tobytes()


def read_kitti_bin(path) -> PointCloud:
    return parse_kitti_bin(Path(path).read_bytes())


def parse_points_text(text: str) -> PointCloud:
    """Parse the ``x y z intensity`` one-point-per-line interchange format."""
    rows = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) != 4:
            raise FormatError(f"line {lineno}: expected 4 fields, got {len(parts)}")
        try:
            row = [float(p) for p in parts]
        except ValueError as exc:
            raise FormatError(f"line {lineno}: {exc}") from None
        if not all(math.isfinite(v) for v in row):
            raise FormatError(f"line {lineno}: non-finite value")
        rows.append(row)
    if not rows:
        return PointCloud.empty()
    arr = np.array(rows, dtype=np.float64)
    return PointCloud(arr[:, :3], arr[:, 3])


def format_points_text(cloud: PointCloud) -> str:
    return "".join(f"{x:.6f} {y:.6f} {z:.6f} {i:.6f}\n"
                   for (x, y, z), i in zip(cloud.xyz.tolist(), cloud.intensity.tolist()))


def read_points(path) -> PointCloud:
    """Load a cloud from ``.bin`` (KITTI) or the text interchange format."""
    path = Path(path)
    if path.suffix == ".bin":
        return read_kitti_bin(path)
    return parse_points_text(path.read_text())


def frustum_crop(cloud: PointCloud, half_angle_h: float = math.radians(45.0),
                 half_angle_v: float = math.radians(20.0), min_range: float = 0.0) -> PointCloud:
    """Keep points in front of the sensor inside an angular frustum.

    Stands in for the camera field-of-view filter without calibration files.
    """
    if not 0 < half_angle_h <= math.pi:
        raise ValueError(f"half_angle_h must be in (0, pi], got {half_angle_h}")
    if not 0 < half_angle_v <= math.pi / 2:
        raise ValueError(f"half_angle_v must be in (0, pi/2], got {half_angle_v}")
    if min_range < 0:
        raise ValueError(f"min_range must be >= 0, got {min_range}")
    x, y, z = cloud.xyz.T
    keep = x > min_range
    keep &= np.abs(np.arctan2(y, x)) <= half_angle_h
    keep &= np.abs(np.arctan2(z, np.hypot(x, y))) <= half_angle_v
    return cloud.subset(np.flatnonzero(keep))


def voxel_keys(xyz: np.ndarray, voxel_size: float) -> np.ndarray:
    return np.floor(xyz / voxel_size).astype(np.int64)


def voxel_downsample(cloud: PointCloud, voxel_size: float, mode: str = "random",
                     seed: int = 0) -> VoxelDownsampleResult:
    """Keep one source point per occupied voxel.

    ``random`` picks a seeded uniform member of each voxel; ``centroid-nearest``
    picks the member closest to the voxel center, ties going to the lowest
    source index. Kept indices are returned in ascending source order.
    """
    if voxel_size <= 0:
        raise ValueError(f"voxel_size must be positive, got {voxel_size}")
    if mode not in ("random", "centroid-nearest"):
        raise ValueError(f"unknown voxel mode {mode!r}")
    n = len(cloud)
    if n == 0:
        return VoxelDownsampleResult(PointCloud.empty(), np.zeros(0, dtype=np.int64))
    keys = voxel_keys(cloud.xyz, voxel_size)
    _, group = np.unique(keys, axis=0, return_inverse=True)
    group = group.reshape(-1)
    if mode == "random":
        priority = np.random.default_rng(seed).random(n)
    else:
        center = (keys + 0.5) * voxel_size
        priority = np.sum((cloud.xyz - center) ** 2, axis=1)
    # lexsort: last key is primary
    order = np.lexsort((np.arange(n), priority, group))
    first = np.ones(n, dtype=bool)
    first[1:] = group[order[1:]] != group[order[:-1]]
    kept = np.sort(order[first])
    return VoxelDownsampleResult(cloud.subset(kept), kept)


def elevation_angles(xyz: np.ndarray) -> np.ndarray:
    return np.arctan2(xyz[:, 2], np.hypot(xyz[:, 0], xyz[:, 1]))


def kmeans_1d(values: np.ndarray, k: int, iters: int = 25, seed: int = 0):
    """Lloyd's k-means on scalars with seeded k-means++ initialization.

    Empty clusters are re-seeded to the value farthest from its current center.
    Returns ``(centers, labels)``.
    """
    values = np.asarray(values, dtype=np.float64)
    n = len(values)
    if n < k:
        raise ValueError(f"need at least {k} values, got {n}")
    rng = np.random.default_rng(seed)
    centers = np.empty(k)
    centers[0] = values[rng.integers(n)]
    d2 = (values - centers[0]) ** 2
    for c in range(1, k):
        total = d2.sum()
        if total > 0:
            pick = rng.choice(n, p=d2 / total)
        else:
            pick = rng.integers(n)
        centers[c] = values[pick]
        d2 = np.minimum(d2, (values - centers[c]) ** 2)

    labels = np.zeros(n, dtype=np.int64)
    for _ in range(iters):
        labels = np.argmin(np.abs(values[:, None] - centers[None, :]), axis=1)
        counts = np.bincount(labels, minlength=k)
        sums = np.bincount(labels, weights=values, minlength=k)
        nonempty = counts > 0
        centers[nonempty] = sums[nonempty] / counts[nonempty]
        for c in np.flatnonzero(~nonempty):
            dist = np.abs(values - centers[labels])
            far = int(np.argmax(dist))
            centers[c] = values[far]
            labels[far] = c
    labels = np.argmin(np.abs(values[:, None] - centers[None, :]), axis=1)
    return centers, labels


def scanline_downsample(cloud: PointCloud, source_lines: int = 64, target_lines: int = 32,
                        kmeans_iters: int = 25, seed: int = 0) -> PointCloud:
    """Mimic a sparser LiDAR by clustering elevations into beams and skipping beams."""
    if target_lines <= 0 or source_lines % target_lines:
        raise ValueError(f"target_lines {target_lines} must divide source_lines {source_lines}")
    if len(cloud) < source_lines:
        raise ValueError(f"cloud has {len(cloud)} points, fewer than {source_lines} lines")
    if target_lines == source_lines:
        return cloud
    centers, labels = kmeans_1d(elevation_angles(cloud.xyz), source_lines, kmeans_iters, seed)
    rank = np.empty(source_lines, dtype=np.int64)
    rank[np.argsort(centers, kind="stable")] = np.arange(source_lines)
    step = source_lines // target_lines
    keep = rank[labels] % step == 0
    return cloud.subset(np.flatnonzero(keep))
