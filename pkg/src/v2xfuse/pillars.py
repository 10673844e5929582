"""Pillar statistics and a two-layer convolutional BEV encoder."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import tensors as T
from .geometry import BEVGrid, GridMeta
from .params import ParamSet, he_conv, zeros

N_STATS = 4  # count, mean z, max z, mean intensity


@dataclass
class PointCloud:
    points: np.ndarray  # (N, 4): x, y, z, intensity

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64).reshape(-1, 4)
        if not np.all(np.isfinite(pts)):
            raise ValueError("point cloud has non-finite values")
        self.points = pts

    def __len__(self) -> int:
        return len(self.points)

    @classmethod
    def empty(cls) -> "PointCloud":
        return cls(np.zeros((0, 4)))

    @classmethod
    def concat(cls, clouds) -> "PointCloud":
        parts = [c.points for c in clouds if len(c)]
        return cls(np.concatenate(parts) if parts else np.zeros((0, 4)))


def load_points_txt(path) -> PointCloud:
    """Read ``x y z intensity`` per line; blank lines and ``#`` comments are skipped."""
    rows = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) != 4:
            raise ValueError(f"{path}:{lineno}: expected 4 fields, got {len(parts)}")
        rows.append([float(p) for p in parts])
    return PointCloud(np.array(rows) if rows else np.zeros((0, 4)))


def save_points_txt(cloud: PointCloud, path) -> None:
    np.savetxt(path, cloud.points, fmt="%.6f")


def pillarize(cloud: PointCloud, meta: GridMeta) -> np.ndarray:
    """Per-cell (count, mean z, max z, mean intensity), shape (4, H, W)."""
    H, W = meta.shape
    stats = np.zeros((N_STATS, H, W))
    pts = cloud.points
    if not len(pts):
        return stats
    col = np.floor((pts[:, 0] - meta.x_min) / meta.resolution).astype(np.int64)
    row = np.floor((pts[:, 1] - meta.y_min) / meta.resolution).astype(np.int64)
    keep = ((col >= 0) & (col < W) & (row >= 0) & (row < H)
            & (pts[:, 2] >= meta.z_min) & (pts[:, 2] <= meta.z_max))
    if not keep.any():
        return stats
    flat = row[keep] * W + col[keep]
    z = pts[keep, 2]
    inten = pts[keep, 3]
    n = H * W
    count = np.bincount(flat, minlength=n).astype(np.float64)
    occupied = count > 0
    safe = np.where(occupied, count, 1.0)
    mean_z = np.bincount(flat, weights=z, minlength=n) / safe
    mean_i = np.bincount(flat, weights=inten, minlength=n) / safe
    max_z = np.full(n, -np.inf)
    np.maximum.at(max_z, flat, z)
    max_z = np.where(occupied, max_z, 0.0)
    stats[0] = count.reshape(H, W)
    stats[1] = mean_z.reshape(H, W)
    stats[2] = max_z.reshape(H, W)
    stats[3] = mean_i.reshape(H, W)
    return stats


def normalize_stats(stats: np.ndarray) -> np.ndarray:
    """log1p on the count channel; the height/intensity channels pass through."""
    out = np.array(stats, dtype=np.float64, copy=True)
    out[0] = np.log1p(out[0])
    return out


@dataclass
class EncoderParams(ParamSet):
    w1: T.DiffTensor
    b1: T.DiffTensor
    w2: T.DiffTensor
    b2: T.DiffTensor

    @classmethod
    def init(cls, rng: np.random.Generator, channels: int, dtype=np.float64) -> "EncoderParams":
        return cls(
            w1=he_conv(rng, channels, N_STATS, 3, dtype),
            b1=zeros(channels, dtype),
            w2=he_conv(rng, channels, channels, 3, dtype),
            b2=zeros(channels, dtype),
        )

    @property
    def channels(self) -> int:
        return self.w2.shape[0]


def encode_bev(stats, params: EncoderParams, meta: GridMeta, timestamp: float = 0.0,
               agent_type: str = "vehicle") -> BEVGrid:
    """Two 3x3 conv + ReLU layers mapping the 4 pillar statistics to C channels."""
    if isinstance(stats, T.DiffTensor):
        x = stats
    else:
        x = T.tensor(normalize_stats(stats), dtype=params.w1.dtype)
    if x.ndim != 3 or x.shape[0] != params.w1.shape[1]:
        raise T.ShapeError(f"encoder expects ({params.w1.shape[1]},H,W) statistics, got {x.shape}")
    h = T.relu(T.conv2d(x, params.w1, params.b1, padding=1))
    h = T.relu(T.conv2d(h, params.w2, params.b2, padding=1))
    return BEVGrid(h, meta, timestamp, agent_type)
