"""Early-fusion teacher and feature distillation into the collaborative student."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensors as T
from .compensation import distribution_gap_kl
from .detection import DetectionHeadParams
from .geometry import BEVGrid, GridMeta, Pose6DoF, pose_to_world, invert_rigid, transform_points
from .params import ParamSet
from .pillars import EncoderParams, PointCloud, encode_bev, pillarize


@dataclass
class TeacherParams(ParamSet):
    encoder: EncoderParams
    head: DetectionHeadParams

    @classmethod
    def init(cls, rng, channels: int, dtype=np.float64) -> "TeacherParams":
        return cls(EncoderParams.init(rng, channels, dtype), DetectionHeadParams.init(rng, channels, dtype))

    def freeze(self) -> "TeacherParams":
        self.set_requires_grad(False)
        return self


def to_ego_frame(cloud: PointCloud, sensor_pose: Pose6DoF, ego_pose: Pose6DoF) -> PointCloud:
    """Re-express ``cloud`` (in the sensor frame) in the ego sensor frame."""
    if not len(cloud):
        return cloud
    M = invert_rigid(pose_to_world(ego_pose)) @ pose_to_world(sensor_pose)
    xyz = transform_points(M, cloud.points[:, :3])
    return PointCloud(np.column_stack([xyz, cloud.points[:, 3]]))


def union_cloud(clouds, poses, ego_pose: Pose6DoF) -> PointCloud:
    """Holistic point set: every cloud merged into the ego frame with exact poses."""
    if len(clouds) != len(poses):
        raise ValueError("one pose per cloud is required")
    return PointCloud.concat([to_ego_frame(c, p, ego_pose) for c, p in zip(clouds, poses)])


def teacher_features(clouds, poses, ego_pose: Pose6DoF, params: TeacherParams, meta: GridMeta,
                     timestamp: float = 0.0) -> BEVGrid:
    stats = pillarize(union_cloud(clouds, poses, ego_pose), meta)
    return encode_bev(stats, params.encoder, meta, timestamp, "teacher")


def distill_loss(student: BEVGrid, teacher: BEVGrid, kind: str = "kl") -> T.DiffTensor:
    """Per-cell channel KL(teacher || student) averaged over cells; the teacher is constant.

    ``kind="l2"`` gives the mean squared feature difference instead.
    """
    if student.features.shape != teacher.features.shape:
        raise T.ShapeError(f"student {student.features.shape} vs teacher {teacher.features.shape}")
    target = teacher.features.detach()
    if kind == "kl":
        return distribution_gap_kl(target, student.features)
    if kind == "l2":
        return T.mean(T.square(T.sub(student.features, target)))
    raise ValueError(f"unknown distillation loss {kind!r}")
