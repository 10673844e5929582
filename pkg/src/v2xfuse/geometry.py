"""Pose algebra, BEV warping, and pose-noise models.

Rotation convention: ``R = Rz(yaw) @ Ry(pitch) @ Rx(roll)`` (roll applied
first, yaw last, all about the fixed axes).  Poses map agent-local
coordinates into the world frame.

Normalised grid coordinates follow :func:`v2xfuse.tensors.bilinear_sample`:
(x, y) with -1/+1 on the first/last cell centres.  Columns index x and
rows index y.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Literal

import numpy as np

from .tensors import DiffTensor, as_tensor, bilinear_sample


class GeometryError(ValueError):
    pass


@dataclass(frozen=True)
class Pose6DoF:
    x: float = 0.0
    y: float = 0.0
    z: float = 0.0
    roll: float = 0.0
    yaw: float = 0.0
    pitch: float = 0.0

    def __post_init__(self):
        if not all(math.isfinite(v) for v in self.as_array()):
            raise GeometryError(f"non-finite pose {self}")

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.z, self.roll, self.yaw, self.pitch], dtype=np.float64)

    @classmethod
    def from_array(cls, arr) -> "Pose6DoF":
        return cls(*[float(v) for v in arr])


def wrap_angle(a):
    """Map angles to (-pi, pi]."""
    w = np.mod(np.asarray(a, dtype=np.float64) + math.pi, 2 * math.pi) - math.pi
    w = np.where(w == -math.pi, math.pi, w)
    return float(w) if np.ndim(w) == 0 else w


def poses_close(a: Pose6DoF, b: Pose6DoF, atol: float = 1e-9) -> bool:
    da = a.as_array() - b.as_array()
    da[3:] = [wrap_angle(v) for v in da[3:]]
    return bool(np.all(np.abs(da) <= atol))


def rotation_matrix(roll: float, yaw: float, pitch: float) -> np.ndarray:
    cr, sr = math.cos(roll), math.sin(roll)
    cp, sp = math.cos(pitch), math.sin(pitch)
    cy, sy = math.cos(yaw), math.sin(yaw)
    rx = np.array([[1, 0, 0], [0, cr, -sr], [0, sr, cr]])
    ry = np.array([[cp, 0, sp], [0, 1, 0], [-sp, 0, cp]])
    rz = np.array([[cy, -sy, 0], [sy, cy, 0], [0, 0, 1]])
    return rz @ ry @ rx


def pose_to_world(pose: Pose6DoF) -> np.ndarray:
    """4x4 homogeneous local-to-world transform."""
    T = np.eye(4)
    T[:3, :3] = rotation_matrix(pose.roll, pose.yaw, pose.pitch)
    T[:3, 3] = (pose.x, pose.y, pose.z)
    return T


def invert_rigid(T: np.ndarray) -> np.ndarray:
    R, t = T[:3, :3], T[:3, 3]
    out = np.eye(4)
    out[:3, :3] = R.T
    out[:3, 3] = -R.T @ t
    return out


def relative_transform(pose_prev: Pose6DoF, pose_curr: Pose6DoF) -> np.ndarray:
    """Map coordinates in the ``pose_prev`` frame into the ``pose_curr`` frame."""
    return invert_rigid(pose_to_world(pose_curr)) @ pose_to_world(pose_prev)


def transform_points(T: np.ndarray, pts: np.ndarray) -> np.ndarray:
    """Apply a 4x4 transform to the xyz columns of ``pts`` (N, >=3)."""
    pts = np.asarray(pts, dtype=np.float64)
    out = pts.copy()
    if len(pts):
        out[:, :3] = pts[:, :3] @ T[:3, :3].T + T[:3, 3]
    return out


# ---------------------------------------------------------------- BEV grids


@dataclass(frozen=True)
class GridMeta:
    """Geometry of an H x W BEV raster; cell (i, j) spans x_min + j*res, y_min + i*res."""

    x_min: float
    y_min: float
    resolution: float
    height: int
    width: int
    z_min: float = -3.5
    z_max: float = 1.5

    def __post_init__(self):
        if self.height < 1 or self.width < 1:
            raise GeometryError("grid must have at least one cell")
        if not self.resolution > 0:
            raise GeometryError("grid resolution must be positive")

    @property
    def shape(self) -> tuple:
        return (self.height, self.width)

    @property
    def x_max(self) -> float:
        return self.x_min + self.width * self.resolution

    @property
    def y_max(self) -> float:
        return self.y_min + self.height * self.resolution

    @property
    def center(self) -> tuple:
        return (self.x_min + 0.5 * self.width * self.resolution,
                self.y_min + 0.5 * self.height * self.resolution)

    def cell_centers(self) -> tuple:
        """Metric (x, y) of every cell centre, each shaped (H, W)."""
        xs = self.x_min + (np.arange(self.width) + 0.5) * self.resolution
        ys = self.y_min + (np.arange(self.height) + 0.5) * self.resolution
        return np.meshgrid(xs, ys)

    @classmethod
    def centered(cls, height: int, width: int, resolution: float, **kw) -> "GridMeta":
        return cls(-0.5 * width * resolution, -0.5 * height * resolution, resolution, height, width, **kw)


AgentKind = Literal["vehicle", "infrastructure", "fused"]


@dataclass
class BEVGrid:
    features: DiffTensor
    meta: GridMeta
    timestamp: float = 0.0
    agent_type: str = "vehicle"

    def __post_init__(self):
        self.features = as_tensor(self.features)
        if self.features.ndim != 3 or self.features.shape[1:] != self.meta.shape:
            raise GeometryError(
                f"features {self.features.shape} do not match grid {self.meta.shape}"
            )

    @property
    def channels(self) -> int:
        return self.features.shape[0]

    def with_features(self, features, **kw) -> "BEVGrid":
        return replace(self, features=as_tensor(features), **kw)


def check_same_meta(*grids: BEVGrid) -> None:
    first = grids[0]
    for g in grids[1:]:
        if g.meta != first.meta:
            raise GeometryError("BEV grids have different spatial metadata")
        if g.features.shape != first.features.shape:
            raise GeometryError(
                f"BEV feature shapes differ: {g.features.shape} vs {first.features.shape}"
            )


def _check_affine(A: np.ndarray) -> np.ndarray:
    A = np.asarray(A, dtype=np.float64)
    if A.shape != (2, 3) or not np.all(np.isfinite(A)):
        raise GeometryError(f"invalid 2x3 affine {A}")
    if abs(np.linalg.det(A[:, :2])) <= 1e-12:
        raise GeometryError("affine has a singular 2x2 block")
    return A


def to_homogeneous(A: np.ndarray) -> np.ndarray:
    H = np.eye(3)
    H[:2] = A
    return H


def invert_affine(A: np.ndarray) -> np.ndarray:
    return np.linalg.inv(to_homogeneous(_check_affine(A)))[:2]


def compose_affine(A: np.ndarray, B: np.ndarray) -> np.ndarray:
    """Affine equivalent of applying ``B`` then ``A``."""
    return (to_homogeneous(A) @ to_homogeneous(B))[:2]


def discretize_affine(T: np.ndarray, meta: GridMeta) -> np.ndarray:
    """Planar part of ``T`` as a cell-unit affine about the grid centre.

    Out-of-plane terms are dropped; the 2x2 block is the in-plane rotation
    (re-orthonormalised) and the translation is expressed in cells.
    """
    T = np.asarray(T, dtype=np.float64)
    R3 = T[:3, :3]
    yaw = math.atan2(R3[1, 0], R3[0, 0])
    c, s = math.cos(yaw), math.sin(yaw)
    R = np.array([[c, -s], [s, c]])
    t = T[:2, 3]
    ctr = np.asarray(meta.center)
    m = (R @ ctr + t - ctr) / meta.resolution
    return _check_affine(np.column_stack([R, m]))


def _norm_scale(size: tuple) -> np.ndarray:
    H, W = size
    if H < 1 or W < 1:
        raise GeometryError("sizes must be >= 1")
    sx = 2.0 / (W - 1) if W > 1 else 1.0
    sy = 2.0 / (H - 1) if H > 1 else 1.0
    return np.diag([sx, sy, 1.0])


def normalize_affine(A: np.ndarray, in_size: tuple, out_size: tuple) -> np.ndarray:
    """Re-express a centred cell-unit affine in normalised coordinates."""
    A = _check_affine(A)
    S_in = _norm_scale(in_size)
    S_out = _norm_scale(out_size)
    return (S_out @ to_homogeneous(A) @ np.linalg.inv(S_in))[:2]


def identity_grid(out_size: tuple) -> np.ndarray:
    H, W = out_size
    xs = np.linspace(-1.0, 1.0, W) if W > 1 else np.zeros(1)
    ys = np.linspace(-1.0, 1.0, H) if H > 1 else np.zeros(1)
    gx, gy = np.meshgrid(xs, ys)
    return np.stack([gx, gy], axis=-1)


def build_sampling_grid(norm_affine_inverse: np.ndarray, out_size: tuple) -> np.ndarray:
    """Source coordinates for every output cell; the affine maps output -> source."""
    A = _check_affine(norm_affine_inverse)
    base = identity_grid(out_size)
    return base @ A[:, :2].T + A[:, 2]


def warp_bev(history: BEVGrid, grid, meta: GridMeta | None = None,
             timestamp: float | None = None) -> BEVGrid:
    """Resample ``history`` through ``grid`` (inverse warp, zero padding)."""
    grid = as_tensor(grid, dtype=history.features.dtype)
    out_meta = meta or history.meta
    if tuple(grid.shape[:2]) != out_meta.shape:
        raise GeometryError(f"grid {grid.shape[:2]} does not match output size {out_meta.shape}")
    feats = bilinear_sample(history.features, grid)
    return BEVGrid(feats, out_meta, history.timestamp if timestamp is None else timestamp,
                   history.agent_type)


def alignment_grid(pose_prev: Pose6DoF, pose_curr: Pose6DoF, meta: GridMeta,
                   out_meta: GridMeta | None = None) -> np.ndarray:
    """Full chain from two poses to the sampling grid that aligns prev onto curr."""
    out_meta = out_meta or meta
    T = relative_transform(pose_prev, pose_curr)
    A = discretize_affine(T, meta)
    A_norm = normalize_affine(A, meta.shape, out_meta.shape)
    return build_sampling_grid(invert_affine(A_norm), out_meta.shape)


def align_history(history: BEVGrid, pose_prev: Pose6DoF, pose_curr: Pose6DoF,
                  out_meta: GridMeta | None = None, timestamp: float | None = None) -> BEVGrid:
    grid = alignment_grid(pose_prev, pose_curr, history.meta, out_meta)
    return warp_bev(history, grid, out_meta or history.meta, timestamp)


# ---------------------------------------------------------------- noise


@dataclass(frozen=True)
class NoiseSpec:
    """Pose perturbation of x, y (scale ``trans``, metres) and yaw (``rot``, radians).

    For ``gaussian`` the scales are standard deviations; for ``laplace`` they
    are the Laplace scale parameter ``b``.
    """

    distribution: Literal["gaussian", "laplace"] = "gaussian"
    trans: float = 0.0
    rot: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.distribution not in ("gaussian", "laplace"):
            raise GeometryError(f"unknown noise distribution {self.distribution!r}")
        if self.trans < 0 or self.rot < 0:
            raise GeometryError("noise scales must be non-negative")

    @classmethod
    def from_level(cls, level: float, distribution: str = "gaussian", seed: int = 0) -> "NoiseSpec":
        """A table level ``v`` means ``v`` metres and ``v`` degrees."""
        return cls(distribution, float(level), math.radians(level), seed)

    def generator(self) -> np.random.Generator:
        return np.random.default_rng(self.seed)

    @property
    def is_zero(self) -> bool:
        return self.trans == 0 and self.rot == 0


def perturb_pose(pose: Pose6DoF, spec: NoiseSpec, rng: np.random.Generator | None = None) -> Pose6DoF:
    """Perturb x, y and yaw; z, roll, pitch are untouched.

    Without an explicit ``rng`` the draw comes from ``spec.seed``.  Three
    standard variates are always consumed so noise streams stay aligned
    across scale levels.
    """
    rng = spec.generator() if rng is None else rng
    if spec.distribution == "gaussian":
        u = rng.standard_normal(3)
    else:
        u = rng.laplace(0.0, 1.0, size=3)
    if spec.is_zero:
        return pose
    return replace(
        pose,
        x=pose.x + spec.trans * float(u[0]),
        y=pose.y + spec.trans * float(u[1]),
        yaw=pose.yaw + spec.rot * float(u[2]),
    )
